use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{hsr_forward, init_hsr, mrae_loss, HsrConfig};
use crate::data::check_pair;
use crate::engine::{adam_step, AdamConfig, AdamState, ParamStore, Tape, Tensor};
use crate::error::{Error, Result};
use crate::image::{RgbImage, SpectralImage};
use crate::rng::SeedTree;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HsrTrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    /// Square training crop; `0` trains on whole images.
    pub crop: usize,
}

impl Default for HsrTrainConfig {
    fn default() -> Self {
        HsrTrainConfig {
            steps: 600,
            lr: 2e-3,
            batch: 2,
            crop: 32,
        }
    }
}

#[derive(Clone, Debug)]
pub struct HsrTrainResult {
    pub params: ParamStore,
    /// Mean batch MRAE at every step, measured before that step's update.
    pub history: Vec<f64>,
}

/// Cosine decay from `lr` to `lr / 10` over the run.
pub(crate) fn cosine_lr(lr: f64, step: usize, steps: usize) -> f64 {
    let frac = if steps <= 1 { 0.0 } else { step as f64 / (steps - 1) as f64 };
    lr * (0.1 + 0.9 * 0.5 * (1.0 + (PI * frac).cos()))
}

fn crop(t: &Tensor, top: usize, left: usize, size: usize) -> Tensor {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let mut data = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for y in top..top + size {
            let row = (ch * h + y) * w;
            data.extend_from_slice(&t.data()[row + left..row + left + size]);
        }
    }
    Tensor::new(&[c, size, size], data).unwrap()
}

/// Minimizes MRAE with Adam over random crops of `pairs`. Images are drawn
/// without replacement in shuffled epochs, so every window of
/// `pairs.len() / batch` steps sees each image equally often.
pub fn hsr_pretrain(
    pairs: &[(RgbImage, SpectralImage)],
    cfg: &HsrConfig,
    train: &HsrTrainConfig,
    seed: u64,
) -> Result<HsrTrainResult> {
    if pairs.is_empty() {
        return Err(Error::Config("hsr_pretrain needs at least one pair".into()));
    }
    for (rgb, hsi) in pairs {
        check_pair(rgb, hsi)?;
    }
    if train.batch == 0 {
        return Err(Error::Config("hsr batch must be >= 1".into()));
    }
    let m = cfg.spatial_multiple();
    if !train.crop.is_multiple_of(m) {
        return Err(Error::Config(format!("hsr crop {} must be a multiple of {m}", train.crop)));
    }

    let tree = SeedTree::new(seed);
    let mut params = init_hsr(cfg, seed)?;
    let mut state = AdamState::new(AdamConfig { lr: train.lr, ..AdamConfig::default() });
    let tensors: Vec<(Tensor, Tensor)> = pairs.iter().map(|(r, h)| (r.to_tensor(), h.to_tensor())).collect();
    let mut history = Vec::with_capacity(train.steps);
    let mut order: Vec<usize> = Vec::new();
    let mut drawn = 0usize;

    for step in 0..train.steps {
        let mut r = tree.stream("hsr-batch", step as u64);
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, true);
        let mut losses = Vec::with_capacity(train.batch);
        for _ in 0..train.batch {
            if drawn.is_multiple_of(tensors.len()) {
                order = (0..tensors.len()).collect();
                order.shuffle(&mut tree.stream("hsr-epoch", (drawn / tensors.len()) as u64));
            }
            let (rgb, hsi) = &tensors[order[drawn % tensors.len()]];
            drawn += 1;
            let (h, w) = (rgb.shape()[1], rgb.shape()[2]);
            let (rgb, hsi) = if train.crop == 0 || (train.crop >= h && train.crop >= w) {
                (rgb.clone(), hsi.clone())
            } else {
                let size = train.crop.min(h).min(w);
                let top = r.random_range(0..=h - size);
                let left = r.random_range(0..=w - size);
                (crop(rgb, top, left, size), crop(hsi, top, left, size))
            };
            let x = tape.constant(rgb);
            let y = hsr_forward(&mut tape, x, &p, cfg)?;
            losses.push(mrae_loss(&mut tape, y, &hsi)?);
        }
        let stacked = tape.concat(&losses, 0)?;
        let loss = tape.mean(stacked);
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Training {
                step,
                reason: format!("hsr loss became {value}"),
            });
        }
        history.push(value);
        let grads = tape.backward(loss)?;
        let grads = params.gradients(&p, &grads);
        drop(tape);
        state.hyper.lr = cosine_lr(train.lr, step, train.steps);
        adam_step(&mut params, &grads, &mut state).map_err(|e| match e {
            Error::Training { reason, .. } => Error::Training { step, reason },
            other => other,
        })?;
    }
    Ok(HsrTrainResult { params, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{project_rgb, synth_scene, ResponseMatrix};

    fn pairs(n: usize, size: usize) -> Vec<(RgbImage, SpectralImage)> {
        let r = ResponseMatrix::standard();
        (0..n)
            .map(|i| {
                let hsi = synth_scene(i as u64, size, 3).unwrap();
                (project_rgb(&hsi, &r), hsi)
            })
            .collect()
    }

    fn tiny() -> HsrConfig {
        HsrConfig {
            stages: 1,
            base_channels: 4,
            heads: 2,
            depth: 1,
            positional_branch: true,
        }
    }

    #[test]
    fn one_step_is_logged_and_finite() {
        let t = HsrTrainConfig { steps: 1, lr: 1e-3, batch: 1, crop: 0 };
        let out = hsr_pretrain(&pairs(2, 8), &tiny(), &t, 1).unwrap();
        assert_eq!(out.history.len(), 1);
        assert!(out.history[0].is_finite());
        assert!(out.params.is_finite());
    }

    #[test]
    fn seeded_runs_repeat() {
        let t = HsrTrainConfig { steps: 3, lr: 1e-3, batch: 2, crop: 4 };
        let a = hsr_pretrain(&pairs(3, 8), &tiny(), &t, 9).unwrap();
        let b = hsr_pretrain(&pairs(3, 8), &tiny(), &t, 9).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn empty_dataset_rejected() {
        let t = HsrTrainConfig::default();
        assert!(matches!(hsr_pretrain(&[], &tiny(), &t, 0), Err(Error::Config(_))));
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert!((cosine_lr(1.0, 0, 11) - 1.0).abs() < 1e-12);
        assert!((cosine_lr(1.0, 10, 11) - 0.1).abs() < 1e-12);
    }
}
