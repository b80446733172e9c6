//! Central-difference gradient checking.

use rand::seq::index::sample;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng;

/// Relative disagreement of the one-sided slopes above which a kink may lie
/// inside the step.
const KINK_REL: f64 = 1e-4;
/// Relative step of the probes that measure rounding noise in `f`.
const NOISE_STEP: f64 = 1e-11;
/// Noise is never taken below this many units of rounding in `f`.
const MIN_NOISE_ULPS: f64 = 4.0;
/// Changes in `f` below this multiple of the measured noise are not signal.
const NOISE_SAFETY: f64 = 4.0;
/// Largest rounding error, relative to the slope, an estimate may carry.
const RESOLVE: f64 = 2.5e-5;
/// Relative agreement required of the estimates at two steps before a
/// shrinking slope gap is read as curvature.
const AGREE: f64 = 1e-5;

enum Outcome {
    Compared(f64),
    Kink,
    Unresolved,
}

/// Where the largest disagreement was found.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub input: usize,
    pub component: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    /// Components left out because `f` has a kink within the step on
    /// every step size tried.
    pub kinks: usize,
    /// Components whose slope is too small against the rounding noise in
    /// `f` for the finite difference to resolve it.
    pub unresolved: usize,
}

/// Relative error with the `1e-8` floor on the denominator.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Maximum relative error between the tape gradient of `f` and central
/// differences (one Richardson step, `eps` and `eps / 2`), over every
/// component of every input.
///
/// Rounding noise in `f` is measured per component with a symmetric second
/// difference at a tiny step. When the one-sided slopes disagree beyond that
/// noise the step shrinks tenfold, up to `eps / 100`. A gap that shrinks in
/// proportion while the estimates agree is curvature and the coarser
/// estimate stands; anything else is a kink. Components with a kink at every
/// step, or whose slope the noise would blur by more than `2.5e-5`, are
/// counted in [`GradCheckReport`] instead of compared.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    Ok(grad_check_sampled(f, inputs, eps, None, 0)?.max_rel_err)
}

/// Like [`grad_check`], but examines at most `per_input` components of each
/// input (chosen by a seeded draw). Large parameter sets need this to stay
/// within a reasonable number of forward evaluations.
pub fn grad_check_sampled<F>(
    f: F,
    inputs: &[Tensor],
    eps: f64,
    per_input: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Contract(format!("grad_check eps {eps} outside [1e-7, 1e-3]")));
    }
    if inputs.iter().any(|t| !t.is_finite()) {
        return Err(Error::Contract("grad_check inputs must be finite".into()));
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    drop(tape);

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        input: 0,
        component: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        kinks: 0,
        unresolved: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    let base = eval(&work)?;
    for (i, t) in inputs.iter().enumerate() {
        let components: Vec<usize> = match per_input {
            Some(k) if k < t.len() => {
                let mut r = rng::stream(seed, "grad-check", i as u64);
                let mut idx = sample(&mut r, t.len(), k).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..t.len()).collect(),
        };
        for c in components {
            let orig = t.data()[c];
            let a = analytic[i].data()[c];
            let mut at = |x: f64| -> Result<f64> {
                work[i].data_mut()[c] = x;
                let v = eval(&work);
                work[i].data_mut()[c] = orig;
                v
            };
            // Rounding noise of f near x. A symmetric second difference at a
            // step far below `eps` cancels the slope and leaves only rounding.
            let tiny = NOISE_STEP * orig.abs().max(1.0);
            let mut noise = MIN_NOISE_ULPS * f64::EPSILON * base.abs();
            for scale in [1.0, 3.7] {
                noise = noise.max((at(orig + scale * tiny)? + at(orig - scale * tiny)? - 2.0 * base).abs());
            }
            // Smallest change in f that stands out from that noise.
            let floor = NOISE_SAFETY * noise;

            let mut step = eps;
            let mut outcome = Outcome::Kink;
            // Slope gap and estimate at the previous, ten times larger step,
            // if that step held nothing worse than curvature.
            let mut coarser: Option<(f64, f64)> = None;
            for _ in 0..3 {
                let (up, down) = (at(orig + step)?, at(orig - step)?);
                let (up2, down2) = (at(orig + step / 2.0)?, at(orig - step / 2.0)?);
                // Richardson step cancels the second-order truncation term.
                let coarse = (up - down) / (2.0 * step);
                let fine = (up2 - down2) / step;
                let estimate = (4.0 * fine - coarse) / 3.0;
                let slope = estimate.abs();
                // The estimate carries about 3 noise / step of rounding.
                if 3.0 * noise / step > RESOLVE * slope.max(a.abs()).max(1e-8) {
                    outcome = Outcome::Unresolved;
                    break;
                }
                // For smooth f the one-sided slopes differ by f''·h + O(h³),
                // so the gap halves with the step. A single kink inside the
                // step breaks that.
                let (fwd, bwd) = ((up - base) / step, (base - down) / step);
                let half = step / 2.0;
                let (fwd2, bwd2) = ((up2 - base) / half, (base - down2) / half);
                let gap = (fwd - bwd).abs();
                let residual = (2.0 * (fwd2 - bwd2) - (fwd - bwd)).abs();
                let kink = residual * step > 2.0 * floor && residual > KINK_REL * slope;
                let gap_noise = 2.0 * floor / step;
                if !kink {
                    // Many small kinks can mimic curvature at one step, so the
                    // gap must also shrink tenfold and the estimates agree.
                    if let Some((prev_gap, prev_estimate)) = coarser {
                        let scaled = (gap - prev_gap / 10.0).abs() <= 0.25 * prev_gap / 10.0 + gap_noise;
                        let agree = (estimate - prev_estimate).abs()
                            <= AGREE * slope.max(prev_estimate.abs()) + 3.0 * floor / step;
                        if scaled && agree {
                            outcome = Outcome::Compared(prev_estimate);
                            break;
                        }
                    }
                    if gap <= gap_noise || gap <= KINK_REL * slope {
                        outcome = Outcome::Compared(estimate);
                        break;
                    }
                }
                coarser = (!kink).then_some((gap, estimate));
                step /= 10.0;
            }
            let numeric = match outcome {
                Outcome::Compared(n) => n,
                Outcome::Kink => {
                    report.kinks += 1;
                    continue;
                }
                Outcome::Unresolved => {
                    report.unresolved += 1;
                    continue;
                }
            };
            let err = rel_err(a, numeric);
            report.checked += 1;
            if err > report.max_rel_err || report.checked == 1 {
                report = GradCheckReport {
                    max_rel_err: err.max(report.max_rel_err),
                    input: i,
                    component: c,
                    analytic: a,
                    numeric,
                    checked: report.checked,
                    kinks: report.kinks,
                    unresolved: report.unresolved,
                };
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_exact() {
        let x = Tensor::from_fn(&[7], |i| i as f64 * 0.37 - 1.0);
        let err = grad_check(|t, v| Ok(t.sum(v[0])), &[x], 1e-5).unwrap();
        assert!(err <= 1e-9, "{err}");
    }

    #[test]
    fn constant_function_has_near_zero_gradient() {
        let x = Tensor::from_fn(&[5], |i| (i as f64 * 1.3).sin());
        let err = grad_check(
            |t, v| {
                let s = t.softmax(v[0], 0)?;
                Ok(t.sum(s))
            },
            &[x],
            1e-3,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn rejects_bad_eps() {
        let x = Tensor::ones(&[2]);
        assert!(grad_check(|t, v| Ok(t.sum(v[0])), &[x], 1e-1).is_err());
    }

    #[test]
    fn kinks_inside_the_step_are_left_out() {
        // |x| with x within eps of 0: the central difference would be ~0
        let x = Tensor::new(&[3], vec![2e-9, 0.7, -0.4]).unwrap();
        let r = grad_check_sampled(|t, v| Ok({ let a = t.abs(v[0]); t.sum(a) }), &[x], 1e-5, None, 0).unwrap();
        assert_eq!(r.kinks, 1);
        assert_eq!(r.checked, 2);
        assert!(r.max_rel_err <= 1e-9);
    }
}
