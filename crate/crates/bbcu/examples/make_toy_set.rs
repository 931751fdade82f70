//! Regenerate the bundled toy image set: `cargo run -p bbcu --example make_toy_set -- <dir>`.

use bbcu_core::train::synthetic_image;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "crates/bbcu/data/toy".into());
    std::fs::create_dir_all(&dir).expect("create output directory");
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for i in 0..8 {
        let img = synthetic_image(3, 64, 64, &mut rng);
        let path = std::path::Path::new(&dir).join(format!("toy{i:02}.png"));
        bbcu::imageio::save_png(&path, &img).expect("write png");
    }
}
