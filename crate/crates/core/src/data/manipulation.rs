//! Planted manipulation artifacts.
//!
//! Each family acts only inside a smooth region mask covering 5-25% of the
//! pixels. The mask has soft edges; outside it every value is left
//! bit-identical.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::scene::smooth_field;
use crate::error::{Error, Result};
use crate::image::{wavelength, SpectralImage, BANDS};
use crate::rng::SeedTree;

pub const MASK_MIN_FRACTION: f64 = 0.05;
pub const MASK_MAX_FRACTION: f64 = 0.25;

/// The three manipulation families, identified by `manip_id` 0, 1, 2.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    BandNotch,
    HighFreqGrid,
    BandShuffleNoise,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::BandNotch, Family::HighFreqGrid, Family::BandShuffleNoise];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Family> {
        Self::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::BandNotch => "band_notch",
            Family::HighFreqGrid => "high_freq_grid",
            Family::BandShuffleNoise => "band_shuffle_noise",
        }
    }

    pub fn default_kind(self) -> ManipulationKind {
        match self {
            Family::BandNotch => ManipulationKind::BandNotch {
                center_nm: 550.0,
                width_bands: 2.0,
                depth: 0.3,
            },
            Family::HighFreqGrid => ManipulationKind::HighFreqGrid {
                period: 2,
                amplitude: 0.03,
                n_bands: 8,
            },
            Family::BandShuffleNoise => ManipulationKind::BandShuffleNoise { sigma: 0.02 },
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown manipulation kind {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ManipulationKind {
    /// Attenuates a Gaussian window of bands, truncated at `width_bands`
    /// bands either side of the centre, by up to `depth`.
    BandNotch { center_nm: f64, width_bands: f64, depth: f64 },
    /// Adds a `+-amplitude` checkerboard of the given pixel period to
    /// `n_bands` randomly chosen bands.
    HighFreqGrid { period: usize, amplitude: f64, n_bands: usize },
    /// Adds independent Gaussian noise to every band.
    BandShuffleNoise { sigma: f64 },
}

impl ManipulationKind {
    pub fn family(&self) -> Family {
        match self {
            ManipulationKind::BandNotch { .. } => Family::BandNotch,
            ManipulationKind::HighFreqGrid { .. } => Family::HighFreqGrid,
            ManipulationKind::BandShuffleNoise { .. } => Family::BandShuffleNoise,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| Err(Error::Config(format!("{}: {what}", self.family())));
        match *self {
            ManipulationKind::BandNotch { center_nm, width_bands, depth } => {
                if !(400.0..=700.0).contains(&center_nm) {
                    return bad(format!("center {center_nm} nm outside 400..=700"));
                }
                if !(0.5..=8.0).contains(&width_bands) {
                    return bad(format!("width {width_bands} bands outside 0.5..=8"));
                }
                if !(0.0..=1.0).contains(&depth) {
                    return bad(format!("depth {depth} outside 0..=1"));
                }
            }
            ManipulationKind::HighFreqGrid { period, amplitude, n_bands } => {
                if period < 2 || period % 2 != 0 {
                    return bad(format!("period {period} must be even and >= 2"));
                }
                if !(0.0..=0.2).contains(&amplitude) {
                    return bad(format!("amplitude {amplitude} outside 0..=0.2"));
                }
                if !(1..=BANDS).contains(&n_bands) {
                    return bad(format!("n_bands {n_bands} outside 1..=31"));
                }
            }
            ManipulationKind::BandShuffleNoise { sigma } => {
                if !(0.0..=0.2).contains(&sigma) {
                    return bad(format!("sigma {sigma} outside 0..=0.2"));
                }
            }
        }
        Ok(())
    }

    /// Per-band weight of the notch window; zero outside it.
    pub fn notch_window(center_nm: f64, width_bands: f64) -> [f64; BANDS] {
        std::array::from_fn(|b| {
            let d = (wavelength(b) - center_nm) / 10.0;
            if d.abs() > width_bands {
                0.0
            } else {
                let s = width_bands / 2.0;
                (-0.5 * (d / s) * (d / s)).exp()
            }
        })
    }
}

/// Soft region mask in `[0, 1]`; the fraction of non-zero pixels lies in
/// `[MASK_MIN_FRACTION, MASK_MAX_FRACTION]`.
pub fn region_mask(size_h: usize, size_w: usize, tree: &SeedTree) -> Vec<f64> {
    let side = size_h.max(size_w);
    let full = smooth_field(side, &mut tree.stream("mask-field", 0));
    let field: Vec<f64> = (0..size_h * size_w).map(|p| full[(p / size_w) * side + p % size_w]).collect();
    let frac = tree.stream("mask-fraction", 0).random_range(MASK_MIN_FRACTION..=MASK_MAX_FRACTION);
    let mut sorted = field.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let n = field.len();
    let keep = ((frac * n as f64).round() as usize).clamp(1, n);
    let threshold = sorted[keep - 1];
    let next = if keep < n { sorted[keep] } else { threshold - 1.0 };
    let lo = (threshold + next) / 2.0;
    // Ramp from the threshold up over a small band of field values.
    let ramp = (sorted[0] - lo).max(1e-9) * 0.3;
    field
        .iter()
        .map(|&v| if v <= lo { 0.0 } else { ((v - lo) / ramp).min(1.0) })
        .collect()
}

/// Applies `kind` inside a seeded region mask; the result is clamped to
/// `[0, 1]` and rounded to `f32` precision.
pub fn apply_manipulation(img: &SpectralImage, kind: &ManipulationKind, seed: u64) -> Result<SpectralImage> {
    kind.validate()?;
    let tree = SeedTree::new(seed);
    let (h, w) = (img.height(), img.width());
    let n = h * w;
    let mask = region_mask(h, w, &tree);
    let mut out = img.clone();
    let data = out.data_mut();
    match *kind {
        ManipulationKind::BandNotch { center_nm, width_bands, depth } => {
            let window = ManipulationKind::notch_window(center_nm, width_bands);
            for (b, &wb) in window.iter().enumerate() {
                if wb == 0.0 {
                    continue;
                }
                for (v, &m) in data[b * n..(b + 1) * n].iter_mut().zip(&mask) {
                    if m > 0.0 {
                        *v *= 1.0 - depth * wb * m;
                    }
                }
            }
        }
        ManipulationKind::HighFreqGrid { period, amplitude, n_bands } => {
            let bands = sample(&mut tree.stream("grid-bands", 0), BANDS, n_bands).into_vec();
            let half = period / 2;
            for b in bands {
                for (p, v) in data[b * n..(b + 1) * n].iter_mut().enumerate() {
                    if mask[p] > 0.0 {
                        let (y, x) = (p / w, p % w);
                        let sign = if (y / half + x / half) % 2 == 0 { 1.0 } else { -1.0 };
                        *v += sign * amplitude * mask[p];
                    }
                }
            }
        }
        ManipulationKind::BandShuffleNoise { sigma } => {
            if sigma > 0.0 {
                let normal = Normal::new(0.0, sigma).expect("valid sigma");
                for b in 0..BANDS {
                    let mut r = tree.stream("band-noise", b as u64);
                    for (v, &m) in data[b * n..(b + 1) * n].iter_mut().zip(&mask) {
                        let e = normal.sample(&mut r);
                        if m > 0.0 {
                            *v += e * m;
                        }
                    }
                }
            }
        }
    }
    for v in data.iter_mut() {
        *v = v.clamp(0.0, 1.0) as f32 as f64;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_scene;

    #[test]
    fn mask_coverage_in_range() {
        for s in 0..30 {
            let m = region_mask(32, 32, &SeedTree::new(s));
            let frac = m.iter().filter(|&&v| v > 0.0).count() as f64 / 1024.0;
            assert!((0.045..=0.255).contains(&frac), "seed {s}: {frac}");
            assert!(m.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn null_parameters_are_identity() {
        let img = synth_scene(1, 16, 3).unwrap();
        for kind in [
            ManipulationKind::BandNotch { center_nm: 550.0, width_bands: 2.0, depth: 0.0 },
            ManipulationKind::HighFreqGrid { period: 2, amplitude: 0.0, n_bands: 8 },
            ManipulationKind::BandShuffleNoise { sigma: 0.0 },
        ] {
            assert_eq!(apply_manipulation(&img, &kind, 9).unwrap(), img, "{kind:?}");
        }
    }

    #[test]
    fn notch_touches_only_window_bands() {
        let img = synth_scene(2, 16, 3).unwrap();
        let out = apply_manipulation(&img, &Family::BandNotch.default_kind(), 4).unwrap();
        let window = ManipulationKind::notch_window(550.0, 2.0);
        let mut changed = false;
        for b in 0..BANDS {
            if window[b] == 0.0 {
                assert_eq!(img.channel(b), out.channel(b), "band {b}");
            } else {
                changed |= img.channel(b) != out.channel(b);
            }
        }
        assert!(changed);
    }

    #[test]
    fn invalid_parameters_rejected() {
        let img = synth_scene(2, 16, 3).unwrap();
        let k = ManipulationKind::BandNotch { center_nm: 550.0, width_bands: 2.0, depth: 1.5 };
        assert!(matches!(apply_manipulation(&img, &k, 0), Err(Error::Config(_))));
        assert!(matches!("sepia".parse::<Family>(), Err(Error::Config(_))));
    }

    #[test]
    fn family_names_round_trip() {
        for f in Family::ALL {
            assert_eq!(f.name().parse::<Family>().unwrap(), f);
            assert_eq!(Family::from_id(f.id()), Some(f));
        }
    }
}
