//! On-disk formats for images, depth, masks and float arrays.
//!
//! * Depth PNG: 16-bit grayscale, millimeters, 0 = no reading.
//! * Mask PNG: 8-bit grayscale, values above 127 mark transparent pixels.
//! * RGB PNG: 8-bit sRGB-agnostic triplets mapped linearly to `[0, 1]`.
//! * Float container (`.gdf`): a 16-byte header of four little-endian `u32`
//!   (magic `0x31464447` = `"GDF1"`, height, width, channels) followed by
//!   `height * width * channels` little-endian `f32` values in row-major
//!   height-width-channel order.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::geometry::{DepthMap, TransparencyMask};
use crate::tensor::Tensor;

pub const FLOAT_MAGIC: u32 = u32::from_le_bytes(*b"GDF1");

fn require(path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    Ok(())
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::Corrupt {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    require(path)?;
    image::open(path).map_err(|e| corrupt(path, e.to_string()))
}

pub fn write_depth_png(path: &Path, depth: &DepthMap) -> Result<()> {
    let (h, w) = (depth.height(), depth.width());
    let mut img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::new(w as u32, h as u32);
    for (i, px) in img.pixels_mut().enumerate() {
        let mm = if depth.validity()[i] {
            (depth.values()[i] * 1000.0).round().clamp(1.0, u16::MAX as f64) as u16
        } else {
            0
        };
        *px = Luma([mm]);
    }
    img.save(path)?;
    Ok(())
}

/// Reads a 16-bit millimeter depth PNG; zero pixels become invalid.
pub fn read_depth_png(path: &Path) -> Result<DepthMap> {
    let img = open(path)?;
    let img = match img {
        image::DynamicImage::ImageLuma16(b) => b,
        other => {
            return Err(corrupt(
                path,
                format!("expected 16-bit grayscale depth, found {:?}", other.color()),
            ))
        }
    };
    let (w, h) = img.dimensions();
    let values: Vec<f64> = img.pixels().map(|p| p.0[0] as f64 / 1000.0).collect();
    DepthMap::from_sensor(h as usize, w as usize, values).map_err(|e| corrupt(path, e.to_string()))
}

pub fn write_mask_png(path: &Path, mask: &TransparencyMask) -> Result<()> {
    let img = GrayImage::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        Luma([if mask.mask()[y as usize * mask.width() + x as usize] { 255 } else { 0 }])
    });
    img.save(path)?;
    Ok(())
}

pub fn read_mask_png(path: &Path) -> Result<TransparencyMask> {
    let img = open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    let mask = img.pixels().map(|p| p.0[0] > 127).collect();
    TransparencyMask::new(h as usize, w as usize, mask)
}

/// Writes a `[3, H, W]` tensor with entries in `[0, 1]`.
pub fn write_rgb_png(path: &Path, rgb: &Tensor) -> Result<()> {
    let (c, h, w) = rgb.chw();
    if c != 3 {
        return Err(crate::error::shape(format!("rgb image needs 3 channels, got {c}")));
    }
    let d = rgb.data();
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([q(d[i]), q(d[h * w + i]), q(d[2 * h * w + i])])
    });
    img.save(path)?;
    Ok(())
}

pub fn read_rgb_png(path: &Path) -> Result<Tensor> {
    let img = open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (i, p) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = p.0[c] as f64 / 255.0;
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

/// Writes a `[C, H, W]` tensor into the float container.
pub fn write_float_array(path: &Path, t: &Tensor) -> Result<()> {
    let (c, h, w) = t.chw();
    let mut out = BufWriter::new(fs::File::create(path)?);
    for v in [FLOAT_MAGIC, h as u32, w as u32, c as u32] {
        out.write_all(&v.to_le_bytes())?;
    }
    let d = t.data();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out.write_all(&(d[(ch * h + y) * w + x] as f32).to_le_bytes())?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads a float container back into a `[C, H, W]` tensor.
pub fn read_float_array(path: &Path) -> Result<Tensor> {
    require(path)?;
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 {
        return Err(corrupt(path, "shorter than the 16-byte header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    if word(0) != FLOAT_MAGIC {
        return Err(corrupt(path, "bad magic"));
    }
    let (h, w, c) = (word(1) as usize, word(2) as usize, word(3) as usize);
    let n = h * w * c;
    if bytes.len() != 16 + 4 * n {
        return Err(corrupt(
            path,
            format!("{h}x{w}x{c} needs {} payload bytes, found {}", 4 * n, bytes.len() - 16),
        ));
    }
    let mut data = vec![0.0; n];
    for (i, chunk) in bytes[16..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        let (pix, ch) = (i / c, i % c);
        data[ch * h * w + pix] = v;
    }
    Tensor::from_vec(&[c, h, w], data)
}

/// Depth as a one-channel float container (invalid pixels stored as 0).
pub fn write_depth_float(path: &Path, depth: &DepthMap) -> Result<()> {
    let t = Tensor::from_vec(&[1, depth.height(), depth.width()], depth.sensor_values())?;
    write_float_array(path, &t)
}

pub fn read_depth_float(path: &Path) -> Result<DepthMap> {
    let t = read_float_array(path)?;
    let (c, h, w) = t.chw();
    if c != 1 {
        return Err(corrupt(path, format!("depth container has {c} channels")));
    }
    DepthMap::from_sensor(h, w, t.into_data()).map_err(|e| corrupt(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_png_round_trip_within_half_millimeter() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.png");
        let vals: Vec<f64> = (0..12).map(|i| 0.3 + 0.12345 * i as f64).collect();
        let mut valid = vec![true; 12];
        valid[4] = false;
        let d = DepthMap::new(3, 4, vals, valid).unwrap();
        write_depth_png(&p, &d).unwrap();
        let back = read_depth_png(&p).unwrap();
        assert_eq!(back.validity(), d.validity());
        for i in 0..12 {
            if d.validity()[i] {
                assert!((back.values()[i] - d.values()[i]).abs() <= 0.0005);
            }
        }
    }

    #[test]
    fn float_container_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.gdf");
        let t = Tensor::from_vec(&[2, 2, 3], (0..12).map(|i| i as f64 * 0.5).collect()).unwrap();
        write_float_array(&p, &t).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"GDF1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 2);
        // first pixel, channel 1 is element (1, 0, 0) = 6 * 0.5
        assert_eq!(f32::from_le_bytes(bytes[20..24].try_into().unwrap()), 3.0);
        assert_eq!(read_float_array(&p).unwrap(), t);
    }

    #[test]
    fn missing_and_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            read_depth_png(&dir.path().join("nope.png")),
            Err(Error::MissingInput(_))
        ));
        let p = dir.path().join("bad.png");
        fs::write(&p, b"not a png").unwrap();
        assert!(matches!(read_depth_png(&p), Err(Error::Corrupt { .. })));
        let q = dir.path().join("bad.gdf");
        fs::write(&q, b"GDF1").unwrap();
        assert!(matches!(read_float_array(&q), Err(Error::Corrupt { .. })));
    }
}
