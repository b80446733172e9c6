use crate::error::{Error, Result};
use crate::image::{wavelength, RgbImage, SpectralImage, BANDS};

/// Fixed camera response: three Gaussian sensitivities (R, G, B centred at
/// 610, 540 and 470 nm, sigma 40 nm) sampled on the band grid, each row
/// normalized to unit sum.
#[derive(Clone, Debug, PartialEq)]
pub struct ResponseMatrix {
    rows: [[f64; BANDS]; 3],
}

pub const RESPONSE_CENTERS_NM: [f64; 3] = [610.0, 540.0, 470.0];
pub const RESPONSE_SIGMA_NM: f64 = 40.0;

impl ResponseMatrix {
    pub fn standard() -> Self {
        let rows = RESPONSE_CENTERS_NM.map(|c| {
            let raw: [f64; BANDS] = std::array::from_fn(|b| {
                let d = (wavelength(b) - c) / RESPONSE_SIGMA_NM;
                (-0.5 * d * d).exp()
            });
            let s: f64 = raw.iter().sum();
            raw.map(|v| v / s)
        });
        ResponseMatrix { rows }
    }

    pub fn row(&self, c: usize) -> &[f64; BANDS] {
        &self.rows[c]
    }

    pub fn weight(&self, c: usize, band: usize) -> f64 {
        self.rows[c][band]
    }
}

/// Linear projection `rgb = R * spectrum` at every pixel (no gamma).
pub fn project_rgb(hsi: &SpectralImage, r: &ResponseMatrix) -> RgbImage {
    let n = hsi.pixels();
    let mut out = vec![0.0; 3 * n];
    for (c, plane) in out.chunks_mut(n).enumerate() {
        for b in 0..BANDS {
            let w = r.weight(c, b);
            for (o, &v) in plane.iter_mut().zip(hsi.channel(b)) {
                *o += w * v;
            }
        }
    }
    RgbImage::new(hsi.height(), hsi.width(), out).expect("projection preserves extents")
}

/// Checks `rgb` and `hsi` have the same spatial extents.
pub fn check_pair(rgb: &RgbImage, hsi: &SpectralImage) -> Result<()> {
    if (rgb.height(), rgb.width()) != (hsi.height(), hsi.width()) {
        return Err(Error::dim(
            "rgb/hsi pair",
            &[3, rgb.height(), rgb.width()],
            &[BANDS, hsi.height(), hsi.width()],
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_sum_to_one() {
        let r = ResponseMatrix::standard();
        for c in 0..3 {
            let s: f64 = r.row(c).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(r.row(c).iter().all(|&w| w >= 0.0));
        }
    }

    #[test]
    fn flat_spectrum_projects_to_gray() {
        let r = ResponseMatrix::standard();
        let hsi = SpectralImage::new(1, 2, vec![0.4; BANDS * 2]).unwrap();
        let rgb = project_rgb(&hsi, &r);
        for &v in rgb.data() {
            assert!((v - 0.4).abs() < 1e-12);
        }
    }

    #[test]
    fn impulse_projects_to_column() {
        let r = ResponseMatrix::standard();
        for j in [0, 14, 30] {
            let mut d = vec![0.0; BANDS];
            d[j] = 1.0;
            let rgb = project_rgb(&SpectralImage::new(1, 1, d).unwrap(), &r);
            for c in 0..3 {
                assert_eq!(rgb.data()[c], r.weight(c, j));
            }
        }
    }
}
