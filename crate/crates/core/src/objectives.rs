//! Training losses for the detector: multi-task classification, a pairwise
//! contrastive regularizer on the common fingerprint, and L1 reconstruction.
//!
//! Everything is built on a [`Tape`] so the losses differentiate through the
//! detector forward pass.

use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::engine::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Column order of the loss-history CSV.
pub const LOSS_CSV_HEADER: &str = "step,cls_binary,cls_specific,contrastive,reconstruction,total";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub cls: f64,
    pub con: f64,
    pub rec: f64,
    /// Relative weights of the self and cross terms inside the reconstruction loss.
    pub rec_self: f64,
    pub rec_cross: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            cls: 1.0,
            con: 0.05,
            rec: 0.3,
            rec_self: 1.0,
            rec_cross: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls_binary: f64,
    pub cls_specific: f64,
    pub contrastive: f64,
    pub reconstruction: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn csv_row(&self, step: usize) -> String {
        format!(
            "{step},{},{},{},{},{}",
            self.cls_binary, self.cls_specific, self.contrastive, self.reconstruction, self.total
        )
    }
}

/// The four loss terms on the tape, each a scalar.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub cls_binary: Var,
    pub cls_specific: Var,
    pub contrastive: Var,
    pub reconstruction: Var,
}

fn zero(tape: &mut Tape) -> Var {
    tape.constant(Tensor::scalar(0.0))
}

/// `-log softmax(logits)[target]`.
fn cross_entropy(tape: &mut Tape, logits: Var, target: usize) -> Result<Var> {
    let &[k] = tape.shape(logits) else {
        return Err(Error::Shape(format!("logits must be a vector, got {:?}", tape.shape(logits))));
    };
    if target >= k {
        return Err(Error::Label(format!("class {target} out of range for {k} logits")));
    }
    let ls = tape.log_softmax(logits, 0)?;
    let picked = tape.slice(ls, 0, target, 1)?;
    Ok(tape.scale(picked, -1.0))
}

fn mean_of(tape: &mut Tape, terms: &[Var], n: usize) -> Result<Var> {
    if terms.is_empty() {
        return Ok(zero(tape));
    }
    let stacked = tape.concat(terms, 0)?;
    let s = tape.sum(stacked);
    Ok(tape.scale(s, 1.0 / n as f64))
}

/// Binary cross-entropy over real/fake (fake is class 1) and family
/// cross-entropy for fakes only; both divided by the full batch size.
pub fn multitask_cls_loss(
    tape: &mut Tape,
    binary: &[Var],
    specific: &[Var],
    labels: &[Label],
    manip_ids: &[Option<usize>],
) -> Result<(Var, Var)> {
    let n = binary.len();
    if n == 0 || specific.len() != n || labels.len() != n || manip_ids.len() != n {
        return Err(Error::dim("multitask_cls_loss", &[n, specific.len()], &[labels.len(), manip_ids.len()]));
    }
    let mut bin_terms = Vec::with_capacity(n);
    let mut spec_terms = Vec::new();
    for i in 0..n {
        if labels[i].is_fake() != manip_ids[i].is_some() {
            return Err(Error::Label(format!("sample {i}: label {:?} with manip_id {:?}", labels[i], manip_ids[i])));
        }
        bin_terms.push(cross_entropy(tape, binary[i], labels[i].is_fake() as usize)?);
        if let Some(id) = manip_ids[i] {
            spec_terms.push(cross_entropy(tape, specific[i], id)?);
        }
    }
    let b = mean_of(tape, &bin_terms, n)?;
    let s = mean_of(tape, &spec_terms, n)?;
    Ok((b, s))
}

/// Pairwise margin loss on L2-normalized embeddings: same-label pairs pay
/// `d^2`, different-label pairs pay `max(0, margin - d)^2`; mean over pairs.
pub fn contrastive_reg_loss(tape: &mut Tape, embeddings: &[Var], labels: &[Label], margin: f64) -> Result<Var> {
    let n = embeddings.len();
    if n < 2 {
        return Err(Error::Contract(format!("contrastive loss needs a batch of at least 2, got {n}")));
    }
    if labels.len() != n {
        return Err(Error::dim("contrastive_reg_loss", &[n], &[labels.len()]));
    }
    let normed = embeddings
        .iter()
        .map(|&e| tape.l2_normalize(e, 0))
        .collect::<Result<Vec<_>>>()?;
    let mut terms = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let diff = tape.sub(normed[i], normed[j])?;
            let sq = tape.mul(diff, diff)?;
            let d2 = tape.sum(sq);
            let term = if labels[i] == labels[j] {
                d2
            } else {
                let d = tape.sqrt(d2);
                let gap = tape.scale(d, -1.0);
                let gap = tape.add_scalar(gap, margin);
                let hinge = tape.relu(gap);
                tape.mul(hinge, hinge)?
            };
            terms.push(term);
        }
    }
    let count = terms.len();
    mean_of(tape, &terms, count)
}

fn l1(tape: &mut Tape, a: Var, target: Var) -> Result<Var> {
    let d = tape.sub(a, target)?;
    let d = tape.abs(d);
    Ok(tape.mean(d))
}

/// `w_self * L1(self, original) + w_cross * L1(cross, original)` averaged
/// over the batch. The cross target is the original of the sample that
/// supplied the content.
pub fn reconstruction_loss(
    tape: &mut Tape,
    self_recons: &[Var],
    cross_recons: &[Var],
    originals: &[Var],
    weights: &LossWeights,
) -> Result<Var> {
    let n = originals.len();
    if n == 0 || self_recons.len() != n || cross_recons.len() != n {
        return Err(Error::dim("reconstruction_loss", &[self_recons.len(), cross_recons.len()], &[n]));
    }
    let mut terms = Vec::with_capacity(n);
    for i in 0..n {
        let s = l1(tape, self_recons[i], originals[i])?;
        let c = l1(tape, cross_recons[i], originals[i])?;
        let s = tape.scale(s, weights.rec_self);
        let c = tape.scale(c, weights.rec_cross);
        terms.push(tape.add(s, c)?);
    }
    mean_of(tape, &terms, n)
}

/// Weighted sum of the parts. Fails with a training error naming the first
/// non-finite component.
pub fn total_loss(tape: &mut Tape, parts: &LossParts, weights: &LossWeights) -> Result<(Var, LossBreakdown)> {
    let named = [
        ("cls_binary", parts.cls_binary),
        ("cls_specific", parts.cls_specific),
        ("contrastive", parts.contrastive),
        ("reconstruction", parts.reconstruction),
    ];
    for (name, v) in named {
        if tape.shape(v) != [1] {
            return Err(Error::Shape(format!("{name} must be a scalar, got {:?}", tape.shape(v))));
        }
        let x = tape.value(v).item();
        if !x.is_finite() {
            return Err(Error::Training {
                step: 0,
                reason: format!("loss component {name} is {x}"),
            });
        }
    }
    let cls = tape.add(parts.cls_binary, parts.cls_specific)?;
    let cls = tape.scale(cls, weights.cls);
    let con = tape.scale(parts.contrastive, weights.con);
    let rec = tape.scale(parts.reconstruction, weights.rec);
    let t = tape.add(cls, con)?;
    let total = tape.add(t, rec)?;
    let breakdown = LossBreakdown {
        cls_binary: tape.value(parts.cls_binary).item(),
        cls_specific: tape.value(parts.cls_specific).item(),
        contrastive: tape.value(parts.contrastive).item(),
        reconstruction: tape.value(parts.reconstruction).item(),
        total: tape.value(total).item(),
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vecs(tape: &mut Tape, rows: &[&[f64]]) -> Vec<Var> {
        rows.iter().map(|r| tape.leaf(Tensor::new(&[r.len()], r.to_vec()).unwrap())).collect()
    }

    #[test]
    fn saturated_and_uniform_binary() {
        let mut tape = Tape::new();
        let b = vecs(&mut tape, &[&[-10.0, 10.0], &[0.0, 0.0]]);
        let s = vecs(&mut tape, &[&[0.0, 0.0, 0.0], &[0.0, 0.0, 0.0]]);
        let (cb, _) = multitask_cls_loss(&mut tape, &b[..1], &s[..1], &[Label::Fake], &[Some(0)]).unwrap();
        assert!(tape.value(cb).item() <= 1e-4);
        let (cb, _) = multitask_cls_loss(&mut tape, &b[1..], &s[1..], &[Label::Real], &[None]).unwrap();
        assert!((tape.value(cb).item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn reals_are_masked_from_specific_head() {
        let mut tape = Tape::new();
        let b = vecs(&mut tape, &[&[0.0, 0.0]]);
        let s = vecs(&mut tape, &[&[5.0, -3.0, 1.0]]);
        let (_, cs) = multitask_cls_loss(&mut tape, &b, &s, &[Label::Real], &[None]).unwrap();
        assert_eq!(tape.value(cs).item(), 0.0);
    }

    #[test]
    fn specific_head_label_checks() {
        let mut tape = Tape::new();
        let b = vecs(&mut tape, &[&[0.0, 0.0]]);
        let s = vecs(&mut tape, &[&[0.0, 0.0, 0.0]]);
        assert!(matches!(
            multitask_cls_loss(&mut tape, &b, &s, &[Label::Fake], &[Some(3)]),
            Err(Error::Label(_))
        ));
        assert!(matches!(
            multitask_cls_loss(&mut tape, &b, &s, &[Label::Real], &[Some(0)]),
            Err(Error::Label(_))
        ));
    }

    #[test]
    fn contrastive_examples() {
        let mut tape = Tape::new();
        let e = vecs(&mut tape, &[&[1.0, 2.0], &[1.0, 2.0], &[2.0, -1.0]]);
        let same = contrastive_reg_loss(&mut tape, &e[..2], &[Label::Real, Label::Real], 1.0).unwrap();
        assert_eq!(tape.value(same).item(), 0.0);
        let diff = contrastive_reg_loss(&mut tape, &e[..2], &[Label::Real, Label::Fake], 1.0).unwrap();
        assert!((tape.value(diff).item() - 1.0).abs() < 1e-12);
        // orthogonal unit vectors sit sqrt(2) apart, beyond a unit margin
        let far = contrastive_reg_loss(&mut tape, &e[1..], &[Label::Real, Label::Fake], 1.0).unwrap();
        assert_eq!(tape.value(far).item(), 0.0);
        assert!(matches!(
            contrastive_reg_loss(&mut tape, &e[..1], &[Label::Real], 1.0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn contrastive_rotation_invariant() {
        let rows: [&[f64]; 4] = [&[0.3, -1.2, 0.5], &[1.0, 0.1, 0.2], &[-0.4, 0.9, 2.0], &[0.7, 0.7, -0.3]];
        let labels = [Label::Real, Label::Fake, Label::Fake, Label::Real];
        let (c, s) = (0.6f64.cos(), 0.6f64.sin());
        let rotate = |v: &[f64]| vec![c * v[0] - s * v[1], s * v[0] + c * v[1], v[2]];
        let mut tape = Tape::new();
        let e = vecs(&mut tape, &rows);
        let rotated: Vec<Vec<f64>> = rows.iter().map(|r| rotate(r)).collect();
        let refs: Vec<&[f64]> = rotated.iter().map(|r| r.as_slice()).collect();
        let er = vecs(&mut tape, &refs);
        let a = contrastive_reg_loss(&mut tape, &e, &labels, 1.5).unwrap();
        let b = contrastive_reg_loss(&mut tape, &er, &labels, 1.5).unwrap();
        assert!((tape.value(a).item() - tape.value(b).item()).abs() <= 1e-9);
    }

    #[test]
    fn reconstruction_examples() {
        let mut tape = Tape::new();
        let orig = tape.constant(Tensor::full(&[2, 2, 2], 0.4));
        let off = tape.constant(Tensor::full(&[2, 2, 2], 0.5));
        let w = LossWeights::default();
        let exact = reconstruction_loss(&mut tape, &[orig], &[orig], &[orig], &w).unwrap();
        assert_eq!(tape.value(exact).item(), 0.0);
        let shifted = reconstruction_loss(&mut tape, &[off], &[orig], &[orig], &w).unwrap();
        assert!((tape.value(shifted).item() - 0.1).abs() < 1e-12);
        let other = tape.constant(Tensor::zeros(&[2, 2, 1]));
        assert!(reconstruction_loss(&mut tape, &[other], &[orig], &[orig], &w).is_err());
    }

    #[test]
    fn reconstruction_symmetric_in_batch_order() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_fn(&[1, 2, 2], |i| i as f64 * 0.1));
        let b = tape.constant(Tensor::from_fn(&[1, 2, 2], |i| 1.0 - i as f64 * 0.2));
        let o = tape.constant(Tensor::full(&[1, 2, 2], 0.3));
        let w = LossWeights::default();
        let x = reconstruction_loss(&mut tape, &[a, b], &[b, a], &[o, o], &w).unwrap();
        let y = reconstruction_loss(&mut tape, &[b, a], &[a, b], &[o, o], &w).unwrap();
        assert_eq!(tape.value(x).item(), tape.value(y).item());
    }

    fn parts(tape: &mut Tape, v: [f64; 4]) -> LossParts {
        let [a, b, c, d] = v.map(|x| tape.leaf(Tensor::scalar(x)));
        LossParts {
            cls_binary: a,
            cls_specific: b,
            contrastive: c,
            reconstruction: d,
        }
    }

    #[test]
    fn total_weighting() {
        let mut tape = Tape::new();
        let p = parts(&mut tape, [0.0; 4]);
        let (_, z) = total_loss(&mut tape, &p, &LossWeights::default()).unwrap();
        assert_eq!(z.total, 0.0);
        let p = parts(&mut tape, [1.0; 4]);
        let (_, one) = total_loss(&mut tape, &p, &LossWeights::default()).unwrap();
        assert!((one.total - 2.35).abs() < 1e-12);
        let doubled = LossWeights { rec: 0.6, ..LossWeights::default() };
        let (_, two) = total_loss(&mut tape, &p, &doubled).unwrap();
        assert!((two.total - one.total - 0.3).abs() < 1e-12);
    }

    #[test]
    fn nan_part_names_component() {
        let mut tape = Tape::new();
        let p = parts(&mut tape, [0.1, 0.2, f64::NAN, 0.0]);
        match total_loss(&mut tape, &p, &LossWeights::default()) {
            Err(Error::Training { reason, .. }) => assert!(reason.contains("contrastive")),
            other => panic!("expected training error, got {other:?}"),
        }
    }

    #[test]
    fn csv_row_has_every_column() {
        let row = LossBreakdown::default().csv_row(7);
        assert_eq!(row.split(',').count(), LOSS_CSV_HEADER.split(',').count());
    }
}
