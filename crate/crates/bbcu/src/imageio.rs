//! 8-bit PNG images as `[1, 3, H, W]` tensors in `[0, 1]`.

use std::path::{Path, PathBuf};

use bbcu_core::Tensor;
use image::{ImageBuffer, Rgb};

use crate::error::{CliError, CliResult};

pub fn load_png(path: &Path) -> CliResult<Tensor> {
    let img = image::open(path)
        .map_err(|e| CliError::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Tensor::from_fn([1, 3, h, w], |[_, c, y, x]| {
        img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    }))
}

/// Clip to `[0, 1]`, round to 8 bits and write the first image of `x`.
pub fn save_png(path: &Path, x: &Tensor) -> CliResult<()> {
    if x.channels() != 3 {
        return Err(CliError::Input(format!("cannot save {}-channel image as RGB", x.channels())));
    }
    let (h, w) = (x.height(), x.width());
    let buf = ImageBuffer::from_fn(w as u32, h as u32, |xx, y| {
        Rgb(std::array::from_fn(|c| {
            (x.get(0, c, y as usize, xx as usize).clamp(0.0, 1.0) * 255.0).round() as u8
        }))
    });
    buf.save(path).map_err(|e| CliError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Every `.png` in `dir`, sorted by file name.
pub fn png_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(CliError::Input(format!("no PNG files in {}", dir.display())));
    }
    Ok(files)
}

pub fn load_dir(dir: &Path) -> CliResult<Vec<(String, Tensor)>> {
    png_files(dir)?
        .into_iter()
        .map(|p| {
            let name = p.file_name().unwrap_or_default().to_string_lossy().into_owned();
            Ok((name, load_png(&p)?))
        })
        .collect()
}
