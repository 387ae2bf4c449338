//! RFI raw-float image format.
//!
//! Layout: magic bytes `RFI1`, little-endian u32 width, u32 height,
//! u32 channels, then row-major channel-interleaved 32-bit little-endian
//! floats. Images are stored as `Array3<f32>` with shape `(height, width,
//! channels)` so the in-memory iteration order matches the file order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3};

use crate::error::{CoreError, Result};

const MAGIC: &[u8; 4] = b"RFI1";

pub fn write_rfi(path: &Path, img: &Array3<f32>) -> Result<()> {
    let (h, w, c) = img.dim();
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&(w as u32).to_le_bytes())?;
    out.write_all(&(h as u32).to_le_bytes())?;
    out.write_all(&(c as u32).to_le_bytes())?;
    // Standard layout iterates (y, x, c) last-axis fastest, matching the file.
    for v in img.iter() {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_rfi(path: &Path) -> Result<Array3<f32>> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut header = [0u8; 16];
    reader.read_exact(&mut header).map_err(|_| {
        CoreError::Data(format!("{}: truncated RFI header", path.display()))
    })?;
    if &header[0..4] != MAGIC {
        return Err(CoreError::Data(format!(
            "{}: bad magic, not an RFI file",
            path.display()
        )));
    }
    let w = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let c = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
    let n = w * h * c;
    let mut payload = vec![0u8; n * 4];
    reader.read_exact(&mut payload).map_err(|_| {
        CoreError::Data(format!("{}: truncated RFI payload", path.display()))
    })?;
    let mut data = Vec::with_capacity(n);
    for chunk in payload.chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    Array3::from_shape_vec((h, w, c), data)
        .map_err(|e| CoreError::Data(format!("{}: {e}", path.display())))
}

/// Single-channel convenience wrappers used for masks.
pub fn write_rfi_mask(path: &Path, mask: &Array2<f32>) -> Result<()> {
    let (h, w) = mask.dim();
    let img = mask
        .to_shape((h, w, 1))
        .map_err(|e| CoreError::Shape(e.to_string()))?
        .to_owned();
    write_rfi(path, &img)
}

pub fn read_rfi_mask(path: &Path) -> Result<Array2<f32>> {
    let img = read_rfi(path)?;
    let (h, w, c) = img.dim();
    if c != 1 {
        return Err(CoreError::Data(format!(
            "{}: expected 1 channel mask, got {c}",
            path.display()
        )));
    }
    Ok(img.index_axis(ndarray::Axis(2), 0).to_owned().into_shape_with_order((h, w)).unwrap())
}
