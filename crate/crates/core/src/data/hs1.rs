//! HS1 cube files.
//!
//! Little-endian layout: magic `HS1\0`, `u32` version (1), `u32` height,
//! `u32` width, `u32` channels, then `channels * height * width` `f32`
//! values, band-major and row-major within each band.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{RgbImage, SpectralImage, BANDS, RGB_CHANNELS};

pub const MAGIC: [u8; 4] = *b"HS1\0";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 20;

/// A decoded HS1 payload of any channel count.
#[derive(Clone, Debug, PartialEq)]
pub struct Hs1Cube {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Hs1Cube {
    pub fn into_spectral(self) -> Result<SpectralImage> {
        if self.channels != BANDS {
            return Err(Error::Format {
                offset: 16,
                reason: format!("expected {BANDS} channels, found {}", self.channels),
            });
        }
        SpectralImage::new(self.height, self.width, self.data)
    }

    pub fn into_rgb(self) -> Result<RgbImage> {
        if self.channels != RGB_CHANNELS {
            return Err(Error::Format {
                offset: 16,
                reason: format!("expected {RGB_CHANNELS} channels, found {}", self.channels),
            });
        }
        RgbImage::new(self.height, self.width, self.data)
    }
}

/// Serializes a cube, clamping values to `[0, 1]`.
pub fn encode(channels: usize, height: usize, width: usize, data: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * data.len());
    out.extend_from_slice(&MAGIC);
    for v in [VERSION, height as u32, width as u32, channels as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&(v.clamp(0.0, 1.0) as f32).to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Hs1Cube> {
    let format = |offset: usize, reason: String| Error::Format { offset: offset as u64, reason };
    if bytes.len() < HEADER_LEN {
        return Err(format(bytes.len(), format!("truncated header ({} of {HEADER_LEN} bytes)", bytes.len())));
    }
    if bytes[..4] != MAGIC {
        let at = (0..4).find(|&i| bytes[i] != MAGIC[i]).unwrap_or(0);
        return Err(format(at, format!("bad magic {:?}", &bytes[..4])));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let version = u32_at(4) as u32;
    if version != VERSION {
        return Err(format(4, format!("unsupported version {version}")));
    }
    let (height, width, channels) = (u32_at(8), u32_at(12), u32_at(16));
    if height == 0 || width == 0 || channels == 0 {
        return Err(format(8, format!("empty extents {channels}x{height}x{width}")));
    }
    let count = channels
        .checked_mul(height)
        .and_then(|v| v.checked_mul(width))
        .ok_or_else(|| format(8, "extents overflow".into()))?;
    let expected = HEADER_LEN + 4 * count;
    if bytes.len() < expected {
        return Err(format(bytes.len(), format!("truncated payload: {} of {expected} bytes", bytes.len())));
    }
    if bytes.len() > expected {
        return Err(format(expected, format!("{} trailing bytes", bytes.len() - expected)));
    }
    let data: Vec<f64> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(format(HEADER_LEN + 4 * i, "non-finite value".into()));
    }
    Ok(Hs1Cube {
        channels,
        height,
        width,
        data,
    })
}

pub fn save_hs1(path: &Path, img: &SpectralImage) -> Result<()> {
    write_cube(path, BANDS, img.height(), img.width(), img.data())
}

pub fn save_rgb_hs1(path: &Path, img: &RgbImage) -> Result<()> {
    write_cube(path, RGB_CHANNELS, img.height(), img.width(), img.data())
}

fn write_cube(path: &Path, c: usize, h: usize, w: usize, data: &[f64]) -> Result<()> {
    fs::write(path, encode(c, h, w, data)).map_err(|e| Error::io(path, e))
}

pub fn load_hs1_cube(path: &Path) -> Result<Hs1Cube> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn load_hs1(path: &Path) -> Result<SpectralImage> {
    load_hs1_cube(path)?.into_spectral()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_scene;

    #[test]
    fn round_trip_and_size() {
        let dir = tempfile::tempdir().unwrap();
        let img = synth_scene(8, 16, 3).unwrap();
        let p = dir.path().join("a.hs1");
        save_hs1(&p, &img).unwrap();
        assert_eq!(std::fs::metadata(&p).unwrap().len(), 20 + 4 * 16 * 16 * 31);
        assert_eq!(load_hs1(&p).unwrap(), img.to_f32_precision());
    }

    #[test]
    fn corrupt_headers_are_rejected_with_offsets() {
        let img = SpectralImage::zeros(4, 4);
        let good = encode(BANDS, 4, 4, img.data());

        let mut bad_magic = good.clone();
        bad_magic[1] = b'X';
        match decode(&bad_magic) {
            Err(Error::Format { offset: 1, .. }) => {}
            other => panic!("{other:?}"),
        }

        let mut bad_version = good.clone();
        bad_version[4] = 2;
        assert!(matches!(decode(&bad_version), Err(Error::Format { offset: 4, .. })));

        let truncated = &good[..good.len() - 3];
        assert!(matches!(decode(truncated), Err(Error::Format { .. })));
        assert!(matches!(decode(&good[..10]), Err(Error::Format { offset: 10, .. })));
    }

    #[test]
    fn values_clamped_on_write() {
        let mut img = SpectralImage::zeros(2, 2);
        img.data_mut()[0] = 1.7;
        img.data_mut()[1] = -0.2;
        let cube = decode(&encode(BANDS, 2, 2, img.data())).unwrap();
        assert_eq!(cube.data[0], 1.0);
        assert_eq!(cube.data[1], 0.0);
    }
}
