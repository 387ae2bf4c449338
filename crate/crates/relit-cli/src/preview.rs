//! 8-bit PNG previews written alongside HDR `.rfi` images, using the same
//! Reinhard + gamma transform as the low-range lighting conditioning map.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use relit_core::math::tonemap;
use relit_core::rfi::read_rfi;
use relit_core::{CoreError, Result};

pub fn preview_path(rfi: &Path) -> PathBuf {
    let mut path = rfi.to_path_buf();
    path.set_extension("png");
    path
}

/// Write a linear-HDR (H, W, 3) image as an 8-bit PNG.
pub fn write_preview(path: &Path, img: &Array3<f32>) -> Result<()> {
    let (h, w, c) = img.dim();
    if c != 3 {
        return Err(CoreError::Shape(format!("preview wants 3 channels, got {c}")));
    }
    let mut buf = Vec::with_capacity(h * w * 3);
    for v in img.iter() {
        buf.push((tonemap(*v as f64) * 255.0).round() as u8);
    }
    let image = image::RgbImage::from_raw(w as u32, h as u32, buf)
        .ok_or_else(|| CoreError::Shape("preview buffer size mismatch".into()))?;
    image
        .save(path)
        .map_err(|e| CoreError::Data(format!("writing {}: {e}", path.display())))
}

/// Walk `root` and drop a PNG next to every `.rfi` image.
pub fn preview_tree(root: &Path) -> Result<()> {
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == "rfi") {
                let img = read_rfi(&path)?;
                write_preview(&preview_path(&path), &img)?;
            }
        }
    }
    Ok(())
}
