//! RGB to 31-band spectral reconstruction.
//!
//! An embedding conv lifts RGB to `base_channels`, a cascade of U-shaped
//! stages with spectral-wise attention refines the features, and a head
//! conv produces 31 bands. A learned pointwise 3 -> 31 lift of the input
//! is added to the head output before clamping to `[0, 1]`.

mod attention;
mod sst;
mod train;

use serde::{Deserialize, Serialize};

pub use attention::{init_attention, spectral_attention};
pub use sst::{init_sst, sst_forward, zero_stage_output};
pub use train::{hsr_pretrain, HsrTrainConfig, HsrTrainResult};

use crate::engine::{Bound, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::image::{RgbImage, SpectralImage, BANDS};
use crate::rng::SeedTree;

pub const MRAE_EPS: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HsrConfig {
    pub stages: usize,
    pub base_channels: usize,
    pub heads: usize,
    pub depth: usize,
    pub positional_branch: bool,
}

impl Default for HsrConfig {
    fn default() -> Self {
        HsrConfig {
            stages: 2,
            base_channels: 16,
            heads: 2,
            depth: 2,
            positional_branch: true,
        }
    }
}

impl HsrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 || self.depth == 0 || self.base_channels == 0 {
            return Err(Error::Config(format!("hsr: stages, depth and base_channels must be >= 1: {self:?}")));
        }
        for l in 0..=self.depth {
            let w = self.base_channels << l;
            if self.heads == 0 || !w.is_multiple_of(self.heads) {
                return Err(Error::Config(format!("hsr: {} heads do not divide width {w}", self.heads)));
            }
        }
        Ok(())
    }

    pub fn spatial_multiple(&self) -> usize {
        1 << self.depth
    }
}

/// Freshly initialized reconstruction parameters.
pub fn init_hsr(cfg: &HsrConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let tree = SeedTree::new(seed).child("hsr-init", 0);
    let mut store = ParamStore::new();
    let c = cfg.base_channels;
    sst::init_conv(&mut store, "embed", c, 3, 3, &mut tree.stream("embed", 0))?;
    for s in 0..cfg.stages {
        init_sst(&mut store, &format!("stage{s}"), cfg, &mut tree.stream("stage", s as u64))?;
    }
    sst::init_conv(&mut store, "head", BANDS, c, 3, &mut tree.stream("head", 0))?;
    sst::init_conv(&mut store, "lift", BANDS, 3, 1, &mut tree.stream("lift", 0))?;
    Ok(store)
}

/// Unclamped 31-band estimate for a `3 x H x W` input on the tape.
pub fn hsr_forward(tape: &mut Tape, rgb: Var, p: &Bound, cfg: &HsrConfig) -> Result<Var> {
    let s = tape.shape(rgb).to_vec();
    let m = cfg.spatial_multiple();
    match s[..] {
        [3, h, w] if h % m == 0 && w % m == 0 => {}
        _ => {
            return Err(Error::Shape(format!(
                "hsr input must be 3 x H x W with H, W divisible by {m}, got {s:?}"
            )))
        }
    }
    let mut f = sst::conv(tape, rgb, p, "embed", 1)?;
    for st in 0..cfg.stages {
        f = sst_forward(tape, f, p, &format!("stage{st}"), cfg)?;
    }
    let head = sst::conv(tape, f, p, "head", 1)?;
    let lift = sst::conv(tape, rgb, p, "lift", 1)?;
    tape.add(head, lift)
}

/// Reconstructs a spectral image, clamped to `[0, 1]`.
pub fn hsr_reconstruct(rgb: &RgbImage, params: &ParamStore, cfg: &HsrConfig) -> Result<SpectralImage> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let x = tape.constant(rgb.to_tensor());
    let y = hsr_forward(&mut tape, x, &p, cfg)?;
    let y = tape.clamp(y, 0.0, 1.0);
    SpectralImage::from_tensor(tape.value(y))
}

/// Mean relative absolute error `|pred - target| / (target + 1e-3)`.
pub fn mrae(pred: &SpectralImage, target: &SpectralImage) -> Result<f64> {
    if (pred.height(), pred.width()) != (target.height(), target.width()) {
        return Err(Error::dim(
            "mrae",
            &[BANDS, pred.height(), pred.width()],
            &[BANDS, target.height(), target.width()],
        ));
    }
    let s: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p - t).abs() / (t + MRAE_EPS))
        .sum();
    Ok(s / pred.data().len() as f64)
}

/// MRAE on the tape; `target` is a constant.
pub fn mrae_loss(tape: &mut Tape, pred: Var, target: &Tensor) -> Result<Var> {
    if tape.shape(pred) != target.shape() {
        return Err(Error::dim("mrae", tape.shape(pred), target.shape()));
    }
    let t = tape.constant(target.clone());
    let inv = tape.constant(target.map(|v| 1.0 / (v + MRAE_EPS)));
    let diff = tape.sub(pred, t)?;
    let abs = tape.abs(diff);
    let rel = tape.mul(abs, inv)?;
    Ok(tape.mean(rel))
}
