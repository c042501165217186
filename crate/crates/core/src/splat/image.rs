//! 8-bit image export: binary PPM and a minimal raw container used for
//! golden-image comparisons.

use std::path::Path;

use crate::error::{Error, Result};

pub const IMGF_MAGIC: &[u8; 4] = b"IMGF";

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn check_len(rgb: &[f64], width: usize, height: usize) -> Result<()> {
    if rgb.len() != width * height * 3 {
        return Err(Error::Dimension(format!(
            "{} values for a {width}x{height} RGB image",
            rgb.len()
        )));
    }
    Ok(())
}

pub fn encode_ppm(rgb: &[f64], width: usize, height: usize) -> Result<Vec<u8>> {
    check_len(rgb, width, height)?;
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend(rgb.iter().map(|v| quantize(*v)));
    Ok(out)
}

pub fn encode_imgf(rgb: &[f64], width: usize, height: usize) -> Result<Vec<u8>> {
    check_len(rgb, width, height)?;
    let mut out = IMGF_MAGIC.to_vec();
    out.extend((width as u32).to_le_bytes());
    out.extend((height as u32).to_le_bytes());
    out.extend(rgb.iter().map(|v| quantize(*v)));
    Ok(out)
}

/// Returns `(width, height, rgb8)`.
pub fn decode_imgf(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    if bytes.len() < 12 || &bytes[..4] != IMGF_MAGIC {
        return Err(Error::format("IMGF", "missing magic"));
    }
    let w = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let payload = &bytes[12..];
    if payload.len() != w * h * 3 {
        return Err(Error::format("IMGF", format!("payload of {} bytes for {w}x{h}", payload.len())));
    }
    Ok((w, h, payload.to_vec()))
}

pub fn write_ppm(path: &Path, rgb: &[f64], width: usize, height: usize) -> Result<()> {
    std::fs::write(path, encode_ppm(rgb, width, height)?).map_err(|e| Error::io(path, e))
}

pub fn write_imgf(path: &Path, rgb: &[f64], width: usize, height: usize) -> Result<()> {
    std::fs::write(path, encode_imgf(rgb, width, height)?).map_err(|e| Error::io(path, e))
}
