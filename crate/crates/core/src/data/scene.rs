use std::f64::consts::PI;

use rand::Rng;

use crate::error::{Error, Result};
use crate::image::{wavelength, SpectralImage, BANDS};
use crate::rng::{SeedTree, Stream};

/// A synthetic material: a smooth reflectance-like spectrum.
#[derive(Clone, Debug, PartialEq)]
pub struct Material {
    pub id: usize,
    pub signature: [f64; BANDS],
    /// Peak heights of the Gaussian bumps, after rescaling.
    pub bump_amplitudes: Vec<f64>,
}

const MAX_SIGNATURE: f64 = 0.95;

impl Material {
    /// A floor in `[0.05, 0.15]` plus one to three Gaussian bumps with
    /// widths of 40..100 nm. The first bump is always prominent.
    pub fn random(id: usize, rng: &mut Stream) -> Self {
        let floor = rng.random_range(0.05..0.15);
        let n_bumps = rng.random_range(1..=3);
        let bumps: Vec<(f64, f64, f64)> = (0..n_bumps)
            .map(|i| {
                let amp = if i == 0 { rng.random_range(0.3..0.6) } else { rng.random_range(0.1..0.5) };
                let center = rng.random_range(400.0..700.0);
                let sigma = rng.random_range(40.0..100.0);
                (amp, center, sigma)
            })
            .collect();
        let bump_sum = |b: usize| -> f64 {
            bumps
                .iter()
                .map(|&(a, c, s)| {
                    let d = (wavelength(b) - c) / s;
                    a * (-0.5 * d * d).exp()
                })
                .sum()
        };
        let peak = (0..BANDS).map(bump_sum).fold(0.0, f64::max);
        let scale = if floor + peak > MAX_SIGNATURE { (MAX_SIGNATURE - floor) / peak } else { 1.0 };
        let signature = std::array::from_fn(|b| floor + scale * bump_sum(b));
        Material {
            id,
            signature,
            bump_amplitudes: bumps.iter().map(|b| b.0 * scale).collect(),
        }
    }

    pub fn is_valid(&self) -> bool {
        self.signature.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v))
            && self.bump_amplitudes.iter().any(|&a| a > 0.1)
    }
}

/// Sum of a few random low-frequency cosines over a `size x size` grid.
pub(crate) fn smooth_field(size: usize, rng: &mut Stream) -> Vec<f64> {
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            let fx = rng.random_range(0..=3) as f64;
            let fy = rng.random_range(0..=3) as f64;
            let phase = rng.random_range(0.0..2.0 * PI);
            let amp = rng.random_range(0.5..1.0);
            (fx, fy, phase, amp)
        })
        .collect();
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let (u, v) = (x as f64 / size as f64, y as f64 / size as f64);
            out[y * size + x] = waves
                .iter()
                .map(|&(fx, fy, ph, a)| a * (2.0 * PI * (fx * u + fy * v) + ph).cos())
                .sum();
        }
    }
    out
}

/// Components of a synthetic scene before they are combined.
#[derive(Clone, Debug)]
pub struct SceneParts {
    pub size: usize,
    pub materials: Vec<Material>,
    /// `n_materials x size x size`, non-negative and summing to one per pixel.
    pub abundances: Vec<f64>,
    /// `size x size` multiplicative illumination in `[0.7, 1.0]`.
    pub illumination: Vec<f64>,
}

impl SceneParts {
    pub fn generate(seed: u64, size: usize, n_materials: usize) -> Result<Self> {
        if size == 0 || !size.is_multiple_of(4) {
            return Err(Error::Config(format!("scene size {size} must be a positive multiple of 4")));
        }
        if !(2..=6).contains(&n_materials) {
            return Err(Error::Config(format!("n_materials {n_materials} outside [2, 6]")));
        }
        let tree = SeedTree::new(seed);
        let materials: Vec<Material> =
            (0..n_materials).map(|m| Material::random(m, &mut tree.stream("material", m as u64))).collect();

        let n = size * size;
        let sharpness = tree.stream("sharpness", 0).random_range(2.0..4.0);
        let logits: Vec<Vec<f64>> = (0..n_materials)
            .map(|m| smooth_field(size, &mut tree.stream("abundance", m as u64)))
            .collect();
        let mut abundances = vec![0.0; n_materials * n];
        for p in 0..n {
            let mx = logits.iter().map(|l| l[p]).fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| ((l[p] - mx) * sharpness).exp()).collect();
            let s: f64 = e.iter().sum();
            for m in 0..n_materials {
                abundances[m * n + p] = e[m] / s;
            }
        }

        let illumination = smooth_field(size, &mut tree.stream("illumination", 0))
            .into_iter()
            .map(|v| 0.85 + 0.15 * (0.5 * v).tanh())
            .collect();
        Ok(SceneParts {
            size,
            materials,
            abundances,
            illumination,
        })
    }

    /// Combines abundances, signatures and illumination; values are rounded
    /// to `f32` so that HS1 storage is lossless.
    pub fn render(&self) -> SpectralImage {
        let n = self.size * self.size;
        let mut data = vec![0.0; BANDS * n];
        for b in 0..BANDS {
            for p in 0..n {
                let mix: f64 = self
                    .materials
                    .iter()
                    .enumerate()
                    .map(|(m, mat)| self.abundances[m * n + p] * mat.signature[b])
                    .sum();
                data[b * n + p] = (self.illumination[p] * mix).clamp(0.0, 1.0) as f32 as f64;
            }
        }
        SpectralImage::new(self.size, self.size, data).expect("finite scene")
    }
}

/// A smooth `size x size` spectral scene mixing `n_materials` materials.
pub fn synth_scene(seed: u64, size: usize, n_materials: usize) -> Result<SpectralImage> {
    Ok(SceneParts::generate(seed, size, n_materials)?.render())
}

/// Mean absolute second difference across bands, averaged over pixels.
pub fn spectral_roughness(img: &SpectralImage) -> f64 {
    let n = img.pixels();
    let mut total = 0.0;
    for b in 1..BANDS - 1 {
        let (lo, mid, hi) = (img.channel(b - 1), img.channel(b), img.channel(b + 1));
        for p in 0..n {
            total += (lo[p] - 2.0 * mid[p] + hi[p]).abs();
        }
    }
    total / (n * (BANDS - 2)) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn abundances_form_a_simplex() {
        let parts = SceneParts::generate(11, 16, 4).unwrap();
        let n = 256;
        for p in 0..n {
            let s: f64 = (0..4).map(|m| parts.abundances[m * n + p]).sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!((0..4).all(|m| parts.abundances[m * n + p] >= 0.0));
        }
        assert!(parts.materials.iter().all(Material::is_valid));
    }

    #[test]
    fn same_seed_same_scene() {
        let a = synth_scene(3, 16, 3).unwrap();
        let b = synth_scene(3, 16, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, synth_scene(4, 16, 3).unwrap());
    }

    #[test]
    fn rejects_bad_geometry() {
        assert!(matches!(synth_scene(0, 18, 3), Err(Error::Config(_))));
        assert!(matches!(synth_scene(0, 16, 7), Err(Error::Config(_))));
        assert!(matches!(synth_scene(0, 16, 1), Err(Error::Config(_))));
    }

    #[test]
    fn values_in_unit_range() {
        let img = synth_scene(5, 32, 6).unwrap();
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
