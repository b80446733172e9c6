//! Spectral-wise multi-head self-attention.
//!
//! Each channel's flattened spatial map is one token, so per head the
//! attention matrix is `d x d` with `d = C / heads`: it mixes bands, not
//! pixels.

use crate::engine::{fan_in_uniform, Bound, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Stream;

/// Registers the attention parameters for width `c` under `prefix`.
pub fn init_attention(
    store: &mut ParamStore,
    prefix: &str,
    c: usize,
    heads: usize,
    positional: bool,
    rng: &mut Stream,
) -> Result<()> {
    check_heads(c, heads)?;
    for w in ["wq", "wk", "wv"] {
        store.insert(format!("{prefix}.{w}"), fan_in_uniform(&[c, c], c, rng))?;
    }
    // Zero output projection: the block starts as (nearly) the identity.
    store.insert(format!("{prefix}.wo"), Tensor::zeros(&[c, c]))?;
    store.insert(format!("{prefix}.temp"), Tensor::ones(&[heads]))?;
    if positional {
        store.insert(format!("{prefix}.pos"), fan_in_uniform(&[c, 1, 3, 3], 9, rng))?;
    }
    Ok(())
}

fn check_heads(c: usize, heads: usize) -> Result<()> {
    if heads == 0 || !c.is_multiple_of(heads) {
        return Err(Error::Config(format!("{heads} heads do not divide width {c}")));
    }
    Ok(())
}

/// Spectral attention on a `C x H x W` map, with residual. When `trace` is
/// given, the post-softmax attention matrix of every head is pushed to it.
pub fn spectral_attention(
    tape: &mut Tape,
    x: Var,
    p: &Bound,
    prefix: &str,
    heads: usize,
    positional: bool,
    mut trace: Option<&mut Vec<Var>>,
) -> Result<Var> {
    let &[c, h, w] = tape.shape(x) else {
        return Err(Error::Shape(format!("spectral_attention expects C x H x W, got {:?}", tape.shape(x))));
    };
    check_heads(c, heads)?;
    let d = c / heads;
    let n = h * w;
    let tokens = tape.reshape(x, &[c, n])?;
    let project = |tape: &mut Tape, name: &str| -> Result<Var> {
        let wt = p.get(&format!("{prefix}.{name}"))?;
        tape.matmul(wt, tokens)
    };
    let q = project(tape, "wq")?;
    let k = project(tape, "wk")?;
    let v = project(tape, "wv")?;
    let temp = p.get(&format!("{prefix}.temp"))?;

    let mut outs = Vec::with_capacity(heads);
    for head in 0..heads {
        let qh = tape.slice(q, 0, head * d, d)?;
        let kh = tape.slice(k, 0, head * d, d)?;
        let vh = tape.slice(v, 0, head * d, d)?;
        let qn = tape.l2_normalize(qh, 1)?;
        let kn = tape.l2_normalize(kh, 1)?;
        let qt = tape.transpose(qn)?;
        // logits[j, i] = t * <k_j, q_i>; normalized over keys j.
        let logits = tape.matmul(kn, qt)?;
        let t = tape.slice(temp, 0, head, 1)?;
        let scaled = tape.mul_scalar_var(logits, t)?;
        let attn = tape.softmax(scaled, 0)?;
        if let Some(tr) = trace.as_deref_mut() {
            tr.push(attn);
        }
        let at = tape.transpose(attn)?;
        outs.push(tape.matmul(at, vh)?);
    }
    let merged = if heads == 1 { outs[0] } else { tape.concat(&outs, 0)? };
    let wo = p.get(&format!("{prefix}.wo"))?;
    let projected = tape.matmul(wo, merged)?;
    let mut out = tape.reshape(projected, &[c, h, w])?;
    if positional {
        let vmap = tape.reshape(v, &[c, h, w])?;
        let pos = p.get(&format!("{prefix}.pos"))?;
        let branch = tape.conv2d(vmap, pos, None, 1, 1, c)?;
        out = tape.add(out, branch)?;
    }
    tape.add(out, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn shape_preserved_and_columns_normalized() {
        for &(c, hh, ww, heads) in &[(4, 4, 4, 2), (8, 2, 6, 4), (6, 3, 3, 1)] {
            let mut store = ParamStore::new();
            init_attention(&mut store, "a", c, heads, true, &mut rng::stream(1, "t", 0)).unwrap();
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, false);
            let x = tape.constant(fan_in_uniform(&[c, hh, ww], 1, &mut rng::stream(2, "x", 0)));
            let mut trace = Vec::new();
            let y = spectral_attention(&mut tape, x, &p, "a", heads, true, Some(&mut trace)).unwrap();
            assert_eq!(tape.shape(y), &[c, hh, ww]);
            assert_eq!(trace.len(), heads);
            for a in trace {
                let m = tape.value(a);
                let d = m.shape()[0];
                for col in 0..d {
                    let s: f64 = (0..d).map(|r| m.data()[r * d + col]).sum();
                    assert!((s - 1.0).abs() <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn permuting_channels_within_a_head_permutes_output() {
        let (c, heads) = (6, 2);
        // a permutation inside the second head group
        let perm = [0, 1, 2, 5, 3, 4];
        let mut store = ParamStore::new();
        init_attention(&mut store, "a", c, heads, false, &mut rng::stream(3, "t", 0)).unwrap();
        *store.get_mut("a.wo").unwrap() = fan_in_uniform(&[c, c], c, &mut rng::stream(3, "wo", 0));
        *store.get_mut("a.temp").unwrap() = Tensor::new(&[heads], vec![1.7, 0.6]).unwrap();
        let mut permuted = ParamStore::new();
        for (name, t) in store.iter() {
            let t = if t.shape() == [c, c] {
                Tensor::from_fn(&[c, c], |i| t.data()[perm[i / c] * c + perm[i % c]])
            } else {
                t.clone()
            };
            permuted.insert(name.clone(), t).unwrap();
        }
        let x = fan_in_uniform(&[c, 3, 4], 1, &mut rng::stream(4, "x", 0));
        let n = 12;
        let xp = Tensor::from_fn(x.shape(), |i| x.data()[perm[i / n] * n + i % n]);
        let run = |params: &ParamStore, x: Tensor| {
            let mut tape = Tape::new();
            let p = params.bind(&mut tape, false);
            let xv = tape.constant(x);
            let y = spectral_attention(&mut tape, xv, &p, "a", heads, false, None).unwrap();
            tape.value(y).clone()
        };
        let y = run(&store, x);
        let yp = run(&permuted, xp);
        let expected = Tensor::from_fn(y.shape(), |i| y.data()[perm[i / n] * n + i % n]);
        assert!(yp.max_abs_diff(&expected) <= 1e-10);
    }

    #[test]
    fn heads_must_divide_width() {
        let mut store = ParamStore::new();
        let err = init_attention(&mut store, "a", 6, 4, false, &mut rng::stream(1, "t", 0));
        assert!(matches!(err, Err(Error::Config(_))));
    }
}
