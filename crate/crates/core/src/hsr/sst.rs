//! One U-shaped refinement stage.

use super::attention::{init_attention, spectral_attention};
use super::HsrConfig;
use crate::engine::{conv_kernel, fan_in_uniform, Bound, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Stream;

pub(crate) fn init_conv(
    store: &mut ParamStore,
    name: &str,
    cout: usize,
    cin: usize,
    k: usize,
    rng: &mut Stream,
) -> Result<()> {
    store.insert(format!("{name}.w"), conv_kernel(cout, cin, k, rng))?;
    store.insert(format!("{name}.b"), fan_in_uniform(&[cout], cin * k * k, rng))?;
    Ok(())
}

pub(crate) fn conv(tape: &mut Tape, x: Var, p: &Bound, name: &str, stride: usize) -> Result<Var> {
    let w = p.get(&format!("{name}.w"))?;
    let b = p.get(&format!("{name}.b"))?;
    let k = tape.shape(w)[2];
    tape.conv2d(x, w, Some(b), stride, k / 2, 1)
}

fn init_block(store: &mut ParamStore, prefix: &str, c: usize, cfg: &HsrConfig, rng: &mut Stream) -> Result<()> {
    init_attention(store, &format!("{prefix}.attn"), c, cfg.heads, cfg.positional_branch, rng)?;
    init_conv(store, &format!("{prefix}.ffn1"), 2 * c, c, 1, rng)?;
    init_conv(store, &format!("{prefix}.ffn2"), c, 2 * c, 1, rng)?;
    Ok(())
}

/// Attention followed by a pointwise GELU feed-forward, both residual.
fn block(tape: &mut Tape, x: Var, p: &Bound, prefix: &str, cfg: &HsrConfig) -> Result<Var> {
    let a = spectral_attention(tape, x, p, &format!("{prefix}.attn"), cfg.heads, cfg.positional_branch, None)?;
    let h = conv(tape, a, p, &format!("{prefix}.ffn1"), 1)?;
    let h = tape.gelu(h);
    let h = conv(tape, h, p, &format!("{prefix}.ffn2"), 1)?;
    tape.add(a, h)
}

/// Registers the parameters of one stage at base width `c` under `prefix`.
pub fn init_sst(store: &mut ParamStore, prefix: &str, cfg: &HsrConfig, rng: &mut Stream) -> Result<()> {
    let c = cfg.base_channels;
    init_conv(store, &format!("{prefix}.embed"), c, c, 3, rng)?;
    for l in 0..cfg.depth {
        let w = c << l;
        init_block(store, &format!("{prefix}.enc{l}"), w, cfg, rng)?;
        init_conv(store, &format!("{prefix}.down{l}"), 2 * w, w, 3, rng)?;
    }
    init_block(store, &format!("{prefix}.mid"), c << cfg.depth, cfg, rng)?;
    for l in (0..cfg.depth).rev() {
        let w = c << l;
        init_conv(store, &format!("{prefix}.up{l}.reduce"), w, 2 * w, 1, rng)?;
        init_conv(store, &format!("{prefix}.up{l}.fuse"), w, 2 * w, 1, rng)?;
        init_block(store, &format!("{prefix}.dec{l}"), w, cfg, rng)?;
    }
    init_conv(store, &format!("{prefix}.out"), c, c, 3, rng)?;
    Ok(())
}

/// Zeroes the output convolution of a stage, making it the identity map.
pub fn zero_stage_output(store: &mut ParamStore, prefix: &str) {
    for suffix in ["w", "b"] {
        if let Some(t) = store.get_mut(&format!("{prefix}.out.{suffix}")) {
            *t = Tensor::zeros(t.shape());
        }
    }
}

/// One stage: embed, `depth` down-levels, bottleneck, `depth` up-levels
/// with skips, output conv, plus a residual from the stage input.
pub fn sst_forward(tape: &mut Tape, x: Var, p: &Bound, prefix: &str, cfg: &HsrConfig) -> Result<Var> {
    let &[_, h, w] = tape.shape(x) else {
        return Err(Error::Shape(format!("sst_forward expects C x H x W, got {:?}", tape.shape(x))));
    };
    let m = 1usize << cfg.depth;
    if h % m != 0 || w % m != 0 {
        return Err(Error::Shape(format!(
            "spatial extents {h}x{w} must be divisible by 2^depth = {m}"
        )));
    }
    let mut f = conv(tape, x, p, &format!("{prefix}.embed"), 1)?;
    let mut skips = Vec::with_capacity(cfg.depth);
    for l in 0..cfg.depth {
        f = block(tape, f, p, &format!("{prefix}.enc{l}"), cfg)?;
        skips.push(f);
        f = conv(tape, f, p, &format!("{prefix}.down{l}"), 2)?;
    }
    f = block(tape, f, p, &format!("{prefix}.mid"), cfg)?;
    for l in (0..cfg.depth).rev() {
        let up = tape.upsample2(f)?;
        let reduced = conv(tape, up, p, &format!("{prefix}.up{l}.reduce"), 1)?;
        let cat = tape.concat(&[reduced, skips[l]], 0)?;
        f = conv(tape, cat, p, &format!("{prefix}.up{l}.fuse"), 1)?;
        f = block(tape, f, p, &format!("{prefix}.dec{l}"), cfg)?;
    }
    let out = conv(tape, f, p, &format!("{prefix}.out"), 1)?;
    tape.add(out, x)
}
