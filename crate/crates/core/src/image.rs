//! Spectral and RGB image containers.
//!
//! Both store channel-major data: element `(c, y, x)` lives at
//! `(c * height + y) * width + x`. Spectral images always carry 31 bands on
//! the 400..=700 nm grid in 10 nm steps.

use crate::engine::Tensor;
use crate::error::{Error, Result};

pub const BANDS: usize = 31;
pub const RGB_CHANNELS: usize = 3;
pub const FIRST_NM: f64 = 400.0;
pub const STEP_NM: f64 = 10.0;

/// Centre wavelength of band `b` in nanometres.
pub fn wavelength(b: usize) -> f64 {
    FIRST_NM + STEP_NM * b as f64
}

pub fn wavelengths() -> [f64; BANDS] {
    std::array::from_fn(wavelength)
}

/// Band-major `31 x H x W` radiance cube.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

/// Channel-major `3 x H x W` image.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

fn validate(kind: &str, channels: usize, height: usize, width: usize, data: &[f64]) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::Shape(format!("{kind}: empty extent {height}x{width}")));
    }
    if data.len() != channels * height * width {
        return Err(Error::Shape(format!(
            "{kind}: {} values for {channels}x{height}x{width}",
            data.len()
        )));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Shape(format!("{kind}: non-finite value")));
    }
    Ok(())
}

macro_rules! image_common {
    ($ty:ident, $channels:expr) => {
        impl $ty {
            pub const CHANNELS: usize = $channels;

            pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
                validate(stringify!($ty), $channels, height, width, &data)?;
                Ok($ty { height, width, data })
            }

            pub fn zeros(height: usize, width: usize) -> Self {
                $ty {
                    height,
                    width,
                    data: vec![0.0; $channels * height * width],
                }
            }

            pub fn height(&self) -> usize {
                self.height
            }

            pub fn width(&self) -> usize {
                self.width
            }

            pub fn pixels(&self) -> usize {
                self.height * self.width
            }

            pub fn data(&self) -> &[f64] {
                &self.data
            }

            pub fn data_mut(&mut self) -> &mut [f64] {
                &mut self.data
            }

            pub fn channel(&self, c: usize) -> &[f64] {
                let n = self.pixels();
                &self.data[c * n..(c + 1) * n]
            }

            pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
                self.data[(c * self.height + y) * self.width + x]
            }

            pub fn to_tensor(&self) -> Tensor {
                Tensor::new(&[$channels, self.height, self.width], self.data.clone()).unwrap()
            }

            pub fn from_tensor(t: &Tensor) -> Result<Self> {
                match t.shape() {
                    &[c, h, w] if c == $channels => $ty::new(h, w, t.data().to_vec()),
                    s => Err(Error::dim(stringify!($ty), s, &[$channels, 0, 0])),
                }
            }

            /// Copy with every value clamped to `[0, 1]`.
            pub fn clamped(&self) -> Self {
                $ty {
                    height: self.height,
                    width: self.width,
                    data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
                }
            }

            /// Copy with every value rounded through `f32`.
            pub fn to_f32_precision(&self) -> Self {
                $ty {
                    height: self.height,
                    width: self.width,
                    data: self.data.iter().map(|&v| v as f32 as f64).collect(),
                }
            }
        }
    };
}

image_common!(SpectralImage, BANDS);
image_common!(RgbImage, RGB_CHANNELS);

impl SpectralImage {
    pub fn spectrum(&self, y: usize, x: usize) -> [f64; BANDS] {
        std::array::from_fn(|b| self.get(b, y, x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn band_grid() {
        let w = wavelengths();
        assert_eq!(w[0], 400.0);
        assert_eq!(w[15], 550.0);
        assert_eq!(w[30], 700.0);
    }

    #[test]
    fn rejects_wrong_length_and_nan() {
        assert!(SpectralImage::new(2, 2, vec![0.0; 4 * 30]).is_err());
        let mut d = vec![0.0; 12];
        d[3] = f64::NAN;
        assert!(RgbImage::new(2, 2, d).is_err());
    }
}
