use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{forward_pair, init_detector, DetectorConfig};
use crate::data::Label;
use crate::engine::{adam_step, AdamConfig, AdamState, Bound, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::objectives::{
    contrastive_reg_loss, multitask_cls_loss, reconstruction_loss, total_loss, LossBreakdown, LossParts, LossWeights,
};
use crate::rng::SeedTree;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorTrainConfig {
    pub steps: usize,
    pub lr: f64,
    /// Scene pairs per step; each contributes one real and one fake sample.
    pub batch: usize,
    pub margin: f64,
    pub weights: LossWeights,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        DetectorTrainConfig {
            steps: 500,
            lr: 1e-3,
            batch: 4,
            margin: 1.0,
            weights: LossWeights::default(),
        }
    }
}

impl DetectorTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || !(self.lr > 0.0) || !(self.margin > 0.0) {
            return Err(Error::Config(format!("detector training: invalid settings {self:?}")));
        }
        Ok(())
    }
}

/// Detector inputs for one scene: the untouched and the manipulated view.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainPair {
    pub real: Tensor,
    pub fake: Tensor,
    pub manip_id: usize,
}

#[derive(Clone, Debug)]
pub struct DetectorTrainResult {
    pub params: ParamStore,
    /// Loss parts at every step, measured before that step's update.
    pub history: Vec<LossBreakdown>,
}

/// Full training objective for a batch of pairs. Every pair is run through
/// the paired forward pass, so the batch holds `2 * pairs.len()` samples.
pub fn detector_batch_loss(
    tape: &mut Tape,
    p: &Bound,
    pairs: &[&TrainPair],
    cfg: &DetectorConfig,
    train: &DetectorTrainConfig,
) -> Result<(Var, LossBreakdown)> {
    let n = 2 * pairs.len();
    let (mut binary, mut specific, mut embed) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    let (mut selfs, mut crosses, mut originals) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    let (mut labels, mut ids) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for pair in pairs {
        let real = tape.constant(pair.real.clone());
        let fake = tape.constant(pair.fake.clone());
        let (or, of) = forward_pair(tape, real, fake, p, cfg)?;
        for (out, x, label, id) in [(or, real, Label::Real, None), (of, fake, Label::Fake, Some(pair.manip_id))] {
            binary.push(out.binary_logits);
            specific.push(out.specific_logits);
            embed.push(tape.channel_mean(out.fingerprint.common)?);
            selfs.push(out.self_recon);
            crosses.push(out.cross_recon.expect("paired forward yields cross reconstructions"));
            originals.push(x);
            labels.push(label);
            ids.push(id);
        }
    }
    let (cls_binary, cls_specific) = multitask_cls_loss(tape, &binary, &specific, &labels, &ids)?;
    let contrastive = contrastive_reg_loss(tape, &embed, &labels, train.margin)?;
    let reconstruction = reconstruction_loss(tape, &selfs, &crosses, &originals, &train.weights)?;
    let parts = LossParts {
        cls_binary,
        cls_specific,
        contrastive,
        reconstruction,
    };
    total_loss(tape, &parts, &train.weights)
}

/// Trains a freshly initialized detector with Adam on random batches of
/// pairs.
pub fn train_detector(
    pairs: &[TrainPair],
    cfg: &DetectorConfig,
    train: &DetectorTrainConfig,
    seed: u64,
) -> Result<DetectorTrainResult> {
    train.validate()?;
    if pairs.is_empty() {
        return Err(Error::Config("detector training needs at least one pair".into()));
    }
    if let Some(bad) = pairs.iter().find(|p| p.manip_id >= cfg.classes) {
        return Err(Error::Label(format!("manip_id {} outside {} classes", bad.manip_id, cfg.classes)));
    }
    let tree = SeedTree::new(seed);
    let mut params = init_detector(cfg, seed)?;
    let mut state = AdamState::new(AdamConfig {
        lr: train.lr,
        ..AdamConfig::default()
    });
    let mut history = Vec::with_capacity(train.steps);
    for step in 0..train.steps {
        let mut r = tree.stream("det-batch", step as u64);
        let batch: Vec<&TrainPair> = (0..train.batch).map(|_| &pairs[r.random_range(0..pairs.len())]).collect();
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, true);
        let (loss, parts) = detector_batch_loss(&mut tape, &p, &batch, cfg, train).map_err(|e| match e {
            Error::Training { reason, .. } => Error::Training { step, reason },
            other => other,
        })?;
        history.push(parts);
        let grads = tape.backward(loss)?;
        let grads = params.gradients(&p, &grads);
        drop(tape);
        adam_step(&mut params, &grads, &mut state).map_err(|e| match e {
            Error::Training { reason, .. } => Error::Training { step, reason },
            other => other,
        })?;
    }
    Ok(DetectorTrainResult { params, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::InputKind;
    use crate::engine::fan_in_uniform;
    use crate::rng;

    fn cfg() -> DetectorConfig {
        DetectorConfig {
            input: InputKind::Rgb,
            width: 4,
            common_channels: 4,
            classes: 3,
        }
    }

    fn pairs(n: usize) -> Vec<TrainPair> {
        (0..n)
            .map(|i| {
                let real = fan_in_uniform(&[3, 8, 8], 1, &mut rng::stream(i as u64, "real", 0)).map(|v| 0.5 + 0.4 * v);
                let fake = real.map(|v| v * 0.8);
                TrainPair { real, fake, manip_id: i % 3 }
            })
            .collect()
    }

    #[test]
    fn loss_is_finite_and_repeatable() {
        let t = DetectorTrainConfig { steps: 3, batch: 2, ..DetectorTrainConfig::default() };
        let a = train_detector(&pairs(3), &cfg(), &t, 5).unwrap();
        let b = train_detector(&pairs(3), &cfg(), &t, 5).unwrap();
        assert_eq!(a.history.len(), 3);
        assert!(a.history.iter().all(|h| h.total.is_finite()));
        assert_eq!(a.history, b.history);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn rejects_bad_inputs() {
        let t = DetectorTrainConfig::default();
        assert!(matches!(train_detector(&[], &cfg(), &t, 0), Err(Error::Config(_))));
        let mut bad = pairs(1);
        bad[0].manip_id = 3;
        assert!(matches!(train_detector(&bad, &cfg(), &t, 0), Err(Error::Label(_))));
    }

    #[test]
    fn separable_toy_task_learns() {
        let t = DetectorTrainConfig { steps: 60, batch: 2, lr: 3e-3, ..DetectorTrainConfig::default() };
        let out = train_detector(&pairs(4), &cfg(), &t, 2).unwrap();
        let first = out.history[..5].iter().map(|h| h.cls_binary).sum::<f64>();
        let last = out.history[55..].iter().map(|h| h.cls_binary).sum::<f64>();
        assert!(last < first, "{first} -> {last}");
    }
}
