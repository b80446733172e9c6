//! The gradient-check suite behind the `grad-check` command: every engine
//! primitive, one reconstruction stage, the reconstruction network and the
//! full detector objective.

use std::fmt;

use crate::data::{fake_of, synth_scene, Family, Label, LabeledSample};
use crate::detector::{detector_batch_loss, init_detector, DetectorConfig, DetectorTrainConfig, TrainPair};
use crate::engine::{grad_check_sampled, Bound, GradCheckReport, ParamStore, Tape, Tensor, Var};
use crate::error::Result;
use crate::hsr::{hsr_forward, init_hsr, init_sst, sst_forward, HsrConfig};
use crate::rng::{self, SeedTree};
use rand::Rng;

pub const PRIMITIVE_TOLERANCE: f64 = 1e-5;
pub const MODEL_TOLERANCE: f64 = 1e-4;
const EPS: f64 = 1e-5;
/// Step for the smooth reconstruction sites. Their objectives sum thousands
/// of activations, so rounding in `f` swamps small slopes at `EPS`, while
/// Richardson keeps truncation negligible at this step.
const SMOOTH_EPS: f64 = 1e-3;

type OpFn = fn(&mut Tape, &[Var]) -> Result<Var>;

/// An engine operation under test, with the shapes of its inputs.
pub struct Primitive {
    pub name: &'static str,
    pub shapes: &'static [&'static [usize]],
    /// Inputs are drawn from `(0.2, 1.2)` instead of `(-1, 1)`.
    pub positive: bool,
    pub op: OpFn,
}

macro_rules! prim {
    ($name:literal, [$($s:expr),+], $pos:expr, |$t:ident, $v:ident| $body:expr) => {
        Primitive {
            name: $name,
            shapes: &[$(&$s),+],
            positive: $pos,
            op: |$t: &mut Tape, $v: &[Var]| -> Result<Var> { $body },
        }
    };
}

pub fn primitives() -> Vec<Primitive> {
    vec![
        prim!("add", [[2, 3], [2, 3]], false, |t, v| t.add(v[0], v[1])),
        prim!("sub", [[2, 3], [2, 3]], false, |t, v| t.sub(v[0], v[1])),
        prim!("mul", [[2, 3], [2, 3]], false, |t, v| t.mul(v[0], v[1])),
        prim!("div", [[2, 3], [2, 3]], true, |t, v| t.div(v[0], v[1])),
        prim!("scale", [[5]], false, |t, v| Ok(t.scale(v[0], -1.7))),
        prim!("add_scalar", [[5]], false, |t, v| Ok(t.add_scalar(v[0], 0.3))),
        prim!("mul_scalar_var", [[2, 3], [1]], false, |t, v| t.mul_scalar_var(v[0], v[1])),
        prim!("relu", [[7]], false, |t, v| Ok(t.relu(v[0]))),
        prim!("gelu", [[7]], false, |t, v| Ok(t.gelu(v[0]))),
        prim!("sigmoid", [[7]], false, |t, v| Ok(t.sigmoid(v[0]))),
        prim!("softplus", [[7]], false, |t, v| Ok(t.softplus(v[0]))),
        prim!("sqrt", [[7]], true, |t, v| Ok(t.sqrt(v[0]))),
        prim!("abs", [[7]], false, |t, v| Ok(t.abs(v[0]))),
        prim!("clamp", [[9]], false, |t, v| Ok(t.clamp(v[0], -0.5, 0.5))),
        prim!("clamp_min", [[9]], false, |t, v| Ok(t.clamp_min(v[0], -0.2))),
        prim!("sum", [[2, 4]], false, |t, v| Ok(t.sum(v[0]))),
        prim!("mean", [[2, 4]], false, |t, v| Ok(t.mean(v[0]))),
        prim!("variance", [[2, 4]], false, |t, v| Ok(t.variance(v[0]))),
        prim!("reshape", [[2, 6]], false, |t, v| t.reshape(v[0], &[3, 4])),
        prim!("transpose", [[2, 5]], false, |t, v| t.transpose(v[0])),
        prim!("concat", [[2, 2, 3], [1, 2, 3]], false, |t, v| t.concat(&[v[0], v[1]], 0)),
        prim!("slice", [[3, 4]], false, |t, v| t.slice(v[0], 1, 1, 2)),
        prim!("matmul", [[3, 4], [4, 2]], false, |t, v| t.matmul(v[0], v[1])),
        prim!("conv2d", [[3, 5, 5], [4, 3, 3, 3], [4]], false, |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1, 1)),
        prim!("conv2d_strided", [[2, 6, 6], [3, 2, 3, 3]], false, |t, v| t.conv2d(v[0], v[1], None, 2, 1, 1)),
        prim!("conv2d_depthwise", [[4, 4, 4], [4, 1, 3, 3]], false, |t, v| t.conv2d(v[0], v[1], None, 1, 1, 4)),
        prim!("upsample2", [[2, 2, 3]], false, |t, v| t.upsample2(v[0])),
        prim!("softmax", [[3, 4]], false, |t, v| t.softmax(v[0], 0)),
        prim!("log_softmax", [[3, 4]], false, |t, v| t.log_softmax(v[0], 1)),
        prim!("l2_normalize", [[3, 4]], false, |t, v| t.l2_normalize(v[0], 1)),
        prim!("channel_mean", [[3, 2, 2]], false, |t, v| t.channel_mean(v[0])),
        prim!("broadcast_channels", [[3]], false, |t, v| t.broadcast_channels(v[0], 2, 3)),
    ]
}

/// Fixed non-uniform weights so a weighted sum exercises every output.
fn probe(shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |i| (1.3 * i as f64 + 0.5).sin() + 0.1)
}

/// `sum(probe * y)`: reduces any output to a scalar with distinct weights.
fn weighted_sum(tape: &mut Tape, y: Var) -> Result<Var> {
    let w = tape.constant(probe(tape.shape(y)));
    let prod = tape.mul(y, w)?;
    Ok(tape.sum(prod))
}

/// Checks one primitive on inputs drawn from `seed`.
pub fn check_primitive(p: &Primitive, seed: u64) -> Result<GradCheckReport> {
    let mut r = rng::stream(seed, p.name, 0);
    let inputs: Vec<Tensor> = p
        .shapes
        .iter()
        .map(|s| {
            let data = (0..s.iter().product::<usize>())
                .map(|_| if p.positive { r.random_range(0.2..1.2) } else { r.random_range(-1.0..1.0) })
                .collect();
            Tensor::new(s, data).expect("primitive shapes are valid")
        })
        .collect();
    let op = p.op;
    grad_check_sampled(
        |tape, v| {
            let y = op(tape, v)?;
            weighted_sum(tape, y)
        },
        &inputs,
        EPS,
        None,
        seed,
    )
}

/// Adds small noise to every parameter so zero-initialized projections
/// still pass gradient to what precedes them.
fn jitter(params: &ParamStore, tree: &SeedTree) -> Vec<(String, Tensor)> {
    params
        .iter()
        .enumerate()
        .map(|(i, (k, t))| {
            let mut r = tree.stream("jitter", i as u64);
            let data = t.data().iter().map(|v| v + r.random_range(-0.1..0.1)).collect();
            (k.clone(), Tensor::new(t.shape(), data).expect("same shape"))
        })
        .collect()
}

fn check_params<F>(
    named: Vec<(String, Tensor)>,
    extra: Vec<Tensor>,
    per_input: usize,
    eps: f64,
    seed: u64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &Bound, &[Var]) -> Result<Var>,
{
    let names: Vec<String> = named.iter().map(|(k, _)| k.clone()).collect();
    let n = names.len();
    let inputs: Vec<Tensor> = named.into_iter().map(|(_, t)| t).chain(extra).collect();
    grad_check_sampled(
        |tape, vars| {
            let p = Bound::from_pairs(names.iter().cloned().zip(vars[..n].iter().copied()));
            f(tape, &p, &vars[n..])
        },
        &inputs,
        eps,
        Some(per_input),
        seed,
    )
}

fn small_hsr() -> HsrConfig {
    HsrConfig {
        stages: 1,
        base_channels: 8,
        heads: 2,
        depth: 2,
        positional_branch: true,
    }
}

/// One reconstruction stage on a `8 x 16 x 16` map, differentiated with
/// respect to its parameters and its input.
pub fn check_sst(seed: u64) -> Result<GradCheckReport> {
    let cfg = small_hsr();
    let tree = SeedTree::new(seed).child("sst-check", 0);
    let mut store = ParamStore::new();
    init_sst(&mut store, "s", &cfg, &mut tree.stream("init", 0))?;
    let mut r = tree.stream("x", 0);
    let x = Tensor::from_fn(&[cfg.base_channels, 16, 16], |_| r.random_range(-1.0..1.0));
    check_params(jitter(&store, &tree), vec![x], 3, SMOOTH_EPS, seed, |tape, p, v| {
        let y = sst_forward(tape, v[0], p, "s", &cfg)?;
        let y = tape.scale(y, 1.0 / 16.0);
        weighted_sum(tape, y)
    })
}

/// Unclamped reconstruction of a `3 x 16 x 16` image, the function
/// pretraining differentiates. The clamp is covered by the primitive checks.
pub fn check_hsr(seed: u64) -> Result<GradCheckReport> {
    let cfg = small_hsr();
    let tree = SeedTree::new(seed).child("hsr-check", 0);
    let params = init_hsr(&cfg, seed)?;
    let mut r = tree.stream("rgb", 0);
    let rgb = Tensor::from_fn(&[3, 16, 16], |_| r.random_range(0.1..0.9));
    check_params(jitter(&params, &tree), vec![rgb], 2, SMOOTH_EPS, seed, |tape, p, v| {
        let y = hsr_forward(tape, v[0], p, &cfg)?;
        let y = tape.scale(y, 1.0 / 16.0);
        weighted_sum(tape, y)
    })
}

/// Total training loss of the default detector on one scene pair, a real
/// and a fake sample at `16 x 16 x 31`.
pub fn check_detector(seed: u64) -> Result<GradCheckReport> {
    let cfg = DetectorConfig::default();
    let train = DetectorTrainConfig::default();
    let tree = SeedTree::new(seed).child("detector-check", 0);
    let params = init_detector(&cfg, seed)?;
    let pairs = [Family::BandNotch]
        .iter()
        .enumerate()
        .map(|(i, &family)| {
            let s = tree.child("scene", i as u64).to_u64();
            let real = LabeledSample::new(synth_scene(s, 16, 3)?, Label::Real, None, s)?;
            let fake = fake_of(&real, family)?;
            Ok(TrainPair {
                real: real.hsi.to_tensor(),
                fake: fake.hsi.to_tensor(),
                manip_id: family.id(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    check_params(jitter(&params, &tree), Vec::new(), 3, EPS, seed, |tape, p, _| {
        let refs: Vec<&TrainPair> = pairs.iter().collect();
        Ok(detector_batch_loss(tape, p, &refs, &cfg, &train)?.0)
    })
}

#[derive(Clone, Debug)]
pub struct SiteResult {
    pub site: String,
    pub tolerance: f64,
    pub report: GradCheckReport,
}

impl SiteResult {
    pub fn passed(&self) -> bool {
        self.report.max_rel_err <= self.tolerance
    }
}

impl fmt::Display for SiteResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<6} {:<28} max_rel_err {:.3e} (tol {:.0e}, {} components)",
            if self.passed() { "ok" } else { "FAILED" },
            self.site,
            self.report.max_rel_err,
            self.tolerance,
            self.report.checked
        )
    }
}

/// Runs every site. The primitives use `PRIMITIVE_TOLERANCE`, the models
/// `MODEL_TOLERANCE`.
pub fn grad_check_suite(seed: u64) -> Result<Vec<SiteResult>> {
    let mut out = Vec::new();
    for p in primitives() {
        out.push(SiteResult {
            site: format!("engine/{}", p.name),
            tolerance: PRIMITIVE_TOLERANCE,
            report: check_primitive(&p, seed)?,
        });
    }
    let models: [(&str, fn(u64) -> Result<GradCheckReport>); 3] =
        [("hsr/sst_stage", check_sst), ("hsr/reconstruct", check_hsr), ("detector/total_loss", check_detector)];
    for (site, check) in models {
        out.push(SiteResult {
            site: site.to_string(),
            tolerance: MODEL_TOLERANCE,
            report: check(seed)?,
        });
    }
    Ok(out)
}

/// The site with the largest error relative to its tolerance.
pub fn worst(results: &[SiteResult]) -> Option<&SiteResult> {
    results
        .iter()
        .max_by(|a, b| (a.report.max_rel_err / a.tolerance).total_cmp(&(b.report.max_rel_err / b.tolerance)))
}
