use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bbcu::commands::{cmd_eval, cmd_train, eval_net, sha256_hex, MANIFEST_FILE, MODEL_FILE, TRACE_FILE};
use bbcu::{imageio, model};
use bbcu_core::net::{NetworkSpec, RestorationNet};
use bbcu_core::train::{degrade, Degradation};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn toy_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data/toy")
}

fn bbcu(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bbcu")).args(args).output().unwrap()
}

fn write_config(dir: &Path, network_extra: &str, steps: usize) -> PathBuf {
    let text = format!(
        "[network]\ntask = denoise\nchannels = 8\nbody_blocks = 2\nbinarize = body\nvariant = V4\nk = auto\n\
         image_residual = true\n{network_extra}\n\
         [train]\nsteps = {steps}\nbatch = 2\npatch = 16\nseed = 7\nlog_every = 5\nsigma = 25\n\
         [data]\ntrain_dir = {}\nval_count = 2\n\
         [output]\ndir = {}\n",
        toy_dir().display(),
        dir.join("out").display()
    );
    let path = dir.join("run.conf");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn train_writes_model_trace_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = write_config(tmp.path(), "", 10);
    let out = bbcu(&["train", "--config", conf.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = tmp.path().join("out");
    let trace = std::fs::read_to_string(dir.join(TRACE_FILE)).unwrap();
    assert!(trace.starts_with("step,loss,val_psnr\n"));
    assert_eq!(trace.lines().count(), 3);
    let bytes = std::fs::read(dir.join(MODEL_FILE)).unwrap();
    let manifest = std::fs::read_to_string(dir.join(MANIFEST_FILE)).unwrap();
    assert!(manifest.contains(&format!("model_sha256={}", sha256_hex(&bytes))));
    assert!(manifest.contains("seed=7"));
    assert!(String::from_utf8_lossy(&out.stdout).contains("step=10"));
}

#[test]
fn repeated_training_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = cmd_train(&write_config(a.path(), "", 6), &mut |_| {}).unwrap();
    let rb = cmd_train(&write_config(b.path(), "", 6), &mut |_| {}).unwrap();
    assert_eq!(std::fs::read(ra.model).unwrap(), std::fs::read(rb.model).unwrap());
    assert_eq!(std::fs::read(ra.trace).unwrap(), std::fs::read(rb.trace).unwrap());
}

#[test]
fn amplified_v1_is_rejected_with_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(write_config(tmp.path(), "", 1))
        .unwrap()
        .replace("variant = V4\nk = auto", "variant = V1\nk = 4");
    let conf = tmp.path().join("v1.conf");
    std::fs::write(&conf, text).unwrap();
    let out = bbcu(&["train", "--config", conf.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("requires k = 1"), "{err}");
    assert!(!tmp.path().join("out").join(MODEL_FILE).exists());
}

#[test]
fn config_errors_name_the_line() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = tmp.path().join("bad.conf");
    std::fs::write(&conf, "[network]\nchannels = 8\nwobble = 3\n").unwrap();
    let out = bbcu(&["train", "--config", conf.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(":3"));
}

#[test]
fn eval_of_saved_model_matches_in_memory() {
    let tmp = tempfile::tempdir().unwrap();
    let (lq_dir, hq_dir) = (tmp.path().join("lq"), tmp.path().join("hq"));
    std::fs::create_dir_all(&lq_dir).unwrap();
    std::fs::create_dir_all(&hq_dir).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (name, hq) in imageio::load_dir(&toy_dir()).unwrap().into_iter().take(3) {
        let lq = degrade(&hq, &Degradation::awgn_8bit(25.0), &mut rng).unwrap();
        imageio::save_png(&lq_dir.join(&name), &lq).unwrap();
        imageio::save_png(&hq_dir.join(&name), &hq).unwrap();
    }
    let mut net = RestorationNet::build(&NetworkSpec::toy_denoiser(), 5).unwrap();
    let model_path = tmp.path().join(MODEL_FILE);
    model::save(&model_path, &net).unwrap();
    let direct = eval_net(&mut net, &lq_dir, &hq_dir, false, None).unwrap();
    let loaded = cmd_eval(&model_path, &lq_dir, &hq_dir, false, None).unwrap();
    assert_eq!(direct, loaded);
    assert_eq!(direct.rows.len(), 3);

    let save = tmp.path().join("restored");
    let out = bbcu(&[
        "eval",
        "--model",
        model_path.to_str().unwrap(),
        "--lq",
        lq_dir.to_str().unwrap(),
        "--hq",
        hq_dir.to_str().unwrap(),
        "--y",
        "--save",
        save.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(imageio::png_files(&save).unwrap().len(), 3);
}

#[test]
fn missing_training_data_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(write_config(tmp.path(), "", 1))
        .unwrap()
        .replace(&toy_dir().display().to_string(), &tmp.path().join("nowhere").display().to_string());
    let conf = tmp.path().join("missing.conf");
    std::fs::write(&conf, text).unwrap();
    assert_eq!(bbcu(&["train", "--config", conf.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(bbcu(&["ablate", "no-such-suite"]).status.code(), Some(1));
    assert_eq!(bbcu(&["ablate", "variants", "--seeds", "2"]).status.code(), Some(1));
    assert_eq!(bbcu(&["train"]).status.code(), Some(1));
    assert_eq!(bbcu(&["account", "--psnr-b", "neck=1"]).status.code(), Some(1));
    assert_eq!(bbcu(&["--help"]).status.code(), Some(0));
}

#[test]
fn account_prints_reference_costs() {
    let out = bbcu(&["account", "--psnr-f", "28.70", "--psnr-b", "head=28.58,body=28.38,tail=28.68"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for anchor in ["67947.73", "1592.53", "42467.33", "1061.68", "paper convention unresolved"] {
        assert!(text.contains(anchor), "missing {anchor} in\n{text}");
    }
    let csv = bbcu(&["account", "--csv"]);
    assert!(String::from_utf8_lossy(&csv.stdout).starts_with("part,"));
}

#[test]
fn bench_runs_on_a_small_shape() {
    let out = bbcu(&["bench", "--channels", "8", "--height", "12", "--width", "20", "--repeats", "1"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("outputs_match=true"));
}
