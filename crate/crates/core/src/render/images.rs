//! Image I/O: 8-bit PNG for inspection, raw little-endian f32 planes with a
//! JSON header for exact golden-file comparisons.

use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_png_rgb(path: &Path, rgb: &[f64], width: usize, height: usize) -> Result<()> {
    assert_eq!(rgb.len(), width * height * 3);
    let buf: Vec<u8> = rgb.iter().map(|&v| to_u8(v)).collect();
    let img = image::RgbImage::from_raw(width as u32, height as u32, buf)
        .ok_or_else(|| Error::Format("rgb buffer shape mismatch".into()))?;
    img.save(path).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_png_gray(path: &Path, gray: &[f64], width: usize, height: usize) -> Result<()> {
    assert_eq!(gray.len(), width * height);
    let buf: Vec<u8> = gray.iter().map(|&v| to_u8(v)).collect();
    let img = image::GrayImage::from_raw(width as u32, height as u32, buf)
        .ok_or_else(|| Error::Format("gray buffer shape mismatch".into()))?;
    img.save(path).map_err(|e| Error::Format(e.to_string()))
}

pub fn load_png_rgb(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let img = image::open(path).map_err(|e| Error::Format(e.to_string()))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((img.into_raw().iter().map(|&b| b as f64 / 255.0).collect(), w, h))
}

pub fn load_png_gray(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let img = image::open(path).map_err(|e| Error::Format(e.to_string()))?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((img.into_raw().iter().map(|&b| b as f64 / 255.0).collect(), w, h))
}

/// Writes named float planes: one JSON header line, then each plane as raw
/// little-endian f32 in header order.
pub fn write_raw_planes(path: &Path, width: usize, height: usize, planes: &[(&str, &[f64])]) -> Result<()> {
    let header = serde_json::json!({
        "width": width,
        "height": height,
        "planes": planes.iter().map(|(name, data)| {
            serde_json::json!({"name": name, "len": data.len()})
        }).collect::<Vec<_>>(),
    });
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "{header}")?;
    for (_, data) in planes {
        let mut bytes = Vec::with_capacity(data.len() * 4);
        for &v in *data {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        f.write_all(&bytes)?;
    }
    Ok(())
}

pub fn read_raw_planes(path: &Path) -> Result<(usize, usize, Vec<(String, Vec<f32>)>)> {
    let mut f = std::fs::File::open(path)?;
    let mut all = Vec::new();
    f.read_to_end(&mut all)?;
    let newline = all
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("missing raw-plane header".into()))?;
    let header: serde_json::Value = serde_json::from_slice(&all[..newline])?;
    let width = header["width"].as_u64().unwrap_or(0) as usize;
    let height = header["height"].as_u64().unwrap_or(0) as usize;
    let mut off = newline + 1;
    let mut planes = Vec::new();
    for p in header["planes"].as_array().ok_or_else(|| Error::Format("bad planes".into()))? {
        let name = p["name"].as_str().unwrap_or("").to_string();
        let len = p["len"].as_u64().unwrap_or(0) as usize;
        if off + len * 4 > all.len() {
            return Err(Error::Format("truncated raw-plane file".into()));
        }
        let data = all[off..off + len * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        off += len * 4;
        planes.push((name, data));
    }
    Ok((width, height, planes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_planes_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("planes.bin");
        let a: Vec<f64> = (0..12).map(|i| i as f64 * 0.5).collect();
        let b: Vec<f64> = (0..4).map(|i| -(i as f64)).collect();
        write_raw_planes(&path, 4, 3, &[("rgb", &a), ("alpha", &b)]).unwrap();
        let (w, h, planes) = read_raw_planes(&path).unwrap();
        assert_eq!((w, h), (4, 3));
        assert_eq!(planes[0].0, "rgb");
        assert_eq!(planes[0].1.len(), 12);
        assert_eq!(planes[1].1[3], -3.0);
    }
}
