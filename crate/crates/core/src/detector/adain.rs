//! Adaptive instance normalization.
//!
//! `adain(x, y)[c] = sigma_y[c] * (x[c] - mu(x[c])) / max(sigma(x[c]), eps) + mu_y[c]`
//! with spatial statistics per channel and population variance.

use crate::engine::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const STD_EPS: f64 = 1e-5;

/// Per-channel mean and standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleStats {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl StyleStats {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if mu.len() != sigma.len() {
            return Err(Error::dim("style stats", &[mu.len()], &[sigma.len()]));
        }
        if sigma.iter().any(|&s| !(s >= STD_EPS)) {
            return Err(Error::Contract(format!("style sigma must be >= {STD_EPS}")));
        }
        Ok(StyleStats { mu, sigma })
    }

    /// Statistics of a `C x H x W` map (sigma floored at `STD_EPS`).
    pub fn of(x: &Tensor) -> Result<Self> {
        let (mu, sd) = channel_moments(x)?;
        Ok(StyleStats {
            mu,
            sigma: sd.into_iter().map(|s| s.max(STD_EPS)).collect(),
        })
    }

    pub fn channels(&self) -> usize {
        self.mu.len()
    }
}

/// Per-channel spatial mean and population standard deviation.
pub fn channel_moments(x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let &[_, h, w] = x.shape() else {
        return Err(Error::Shape(format!("expected C x H x W, got {:?}", x.shape())));
    };
    let n = (h * w) as f64;
    Ok(x.data()
        .chunks(h * w)
        .map(|p| {
            let m = p.iter().sum::<f64>() / n;
            let v = p.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            (m, v.sqrt())
        })
        .unzip())
}

/// AdaIN on the tape; `mu` and `sigma` are `[C]` vectors.
pub fn adain_var(tape: &mut Tape, x: Var, mu: Var, sigma: Var) -> Result<Var> {
    let &[c, h, w] = tape.shape(x) else {
        return Err(Error::Shape(format!("adain expects C x H x W, got {:?}", tape.shape(x))));
    };
    if tape.shape(mu) != [c] || tape.shape(sigma) != [c] {
        return Err(Error::dim("adain", tape.shape(x), tape.shape(mu)));
    }
    let mean = tape.channel_mean(x)?;
    let mean_b = tape.broadcast_channels(mean, h, w)?;
    let centered = tape.sub(x, mean_b)?;
    let sq = tape.mul(centered, centered)?;
    let var = tape.channel_mean(sq)?;
    let sd = tape.sqrt(var);
    let sd = tape.clamp_min(sd, STD_EPS);
    let sd_b = tape.broadcast_channels(sd, h, w)?;
    let normalized = tape.div(centered, sd_b)?;
    let sigma_b = tape.broadcast_channels(sigma, h, w)?;
    let mu_b = tape.broadcast_channels(mu, h, w)?;
    let scaled = tape.mul(normalized, sigma_b)?;
    tape.add(scaled, mu_b)
}

/// AdaIN of a plain tensor.
pub fn adain(x: &Tensor, style: &StyleStats) -> Result<Tensor> {
    let c = x.shape().first().copied().unwrap_or(0);
    if style.channels() != c {
        return Err(Error::dim("adain", x.shape(), &[style.channels()]));
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let mu = tape.constant(Tensor::new(&[c], style.mu.clone())?);
    let sigma = tape.constant(Tensor::new(&[c], style.sigma.clone())?);
    let y = adain_var(&mut tape, xv, mu, sigma)?;
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_example() {
        // x = [1,2,3]: mu 2, sigma sqrt(2/3); style mu 6, sigma sqrt(8/3) -> [4,6,8]
        let x = Tensor::new(&[1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let style = StyleStats::new(vec![6.0], vec![(8.0f64 / 3.0).sqrt()]).unwrap();
        let y = adain(&x, &style).unwrap();
        for (a, b) in y.data().iter().zip([4.0, 6.0, 8.0]) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn own_statistics_are_identity() {
        let x = Tensor::from_fn(&[3, 4, 5], |i| ((i * 7919) % 101) as f64 / 10.0 - 3.0);
        let y = adain(&x, &StyleStats::of(&x).unwrap()).unwrap();
        assert!(x.max_abs_diff(&y) <= 1e-10);
    }

    #[test]
    fn constant_channel_maps_to_style_mean() {
        let x = Tensor::full(&[1, 2, 2], 3.0);
        let y = adain(&x, &StyleStats::new(vec![0.5], vec![2.0]).unwrap()).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn channel_mismatch_is_dimension_error() {
        let x = Tensor::zeros(&[2, 2, 2]);
        let s = StyleStats::new(vec![0.0; 3], vec![1.0; 3]).unwrap();
        assert!(matches!(adain(&x, &s), Err(Error::Dimension { .. })));
    }
}
