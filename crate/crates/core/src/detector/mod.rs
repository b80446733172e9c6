//! Disentangling manipulation detector.
//!
//! A content encoder and a fingerprint encoder see the same input. The
//! fingerprint splits into a *common* half that drives the real/fake head
//! and a *specific* half that drives the manipulation-family head. A
//! decoder rebuilds the input from content features restyled by AdaIN with
//! statistics predicted from a fingerprint, which enables
//! cross-reconstruction between the two members of a (real, fake) pair.

pub mod adain;
mod train;

use serde::{Deserialize, Serialize};

pub use adain::{adain, adain_var, channel_moments, StyleStats, STD_EPS};
pub use train::{detector_batch_loss, train_detector, DetectorTrainConfig, DetectorTrainResult, TrainPair};

use crate::engine::{conv_kernel, fan_in_uniform, Bound, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::image::{BANDS, RGB_CHANNELS};
use crate::rng::SeedTree;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputKind {
    Rgb,
    Hsi,
}

impl InputKind {
    pub fn channels(self) -> usize {
        match self {
            InputKind::Rgb => RGB_CHANNELS,
            InputKind::Hsi => BANDS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub input: InputKind,
    /// Width of the first encoder stage; the second stage is twice this.
    pub width: usize,
    /// Channels of the fingerprint given to the common half.
    pub common_channels: usize,
    /// Manipulation families known to the specific head.
    pub classes: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            input: InputKind::Hsi,
            width: 32,
            common_channels: 32,
            classes: 3,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.classes == 0 {
            return Err(Error::Config(format!("detector: width and classes must be >= 1: {self:?}")));
        }
        if self.common_channels == 0 || self.common_channels >= self.feature_channels() {
            return Err(Error::Config(format!(
                "detector: common_channels {} must split {} fingerprint channels",
                self.common_channels,
                self.feature_channels()
            )));
        }
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        self.input.channels()
    }

    /// Channels of the content map and of the full fingerprint.
    pub fn feature_channels(&self) -> usize {
        2 * self.width
    }

    pub fn specific_channels(&self) -> usize {
        self.feature_channels() - self.common_channels
    }

    /// Channel widths of the decoder's AdaIN sites, in order.
    pub fn adain_widths(&self) -> [usize; 2] {
        [2 * self.width, self.width]
    }

    pub fn style_len(&self) -> usize {
        2 * self.adain_widths().iter().sum::<usize>()
    }
}

fn init_conv(store: &mut ParamStore, name: &str, cout: usize, cin: usize, tree: &SeedTree) -> Result<()> {
    let mut r = tree.stream(name, 0);
    store.insert(format!("{name}.w"), conv_kernel(cout, cin, 3, &mut r))?;
    store.insert(format!("{name}.b"), fan_in_uniform(&[cout], cin * 9, &mut r))?;
    Ok(())
}

fn init_linear(store: &mut ParamStore, name: &str, out: usize, inp: usize, tree: &SeedTree) -> Result<()> {
    let mut r = tree.stream(name, 0);
    store.insert(format!("{name}.w"), fan_in_uniform(&[out, inp], inp, &mut r))?;
    store.insert(format!("{name}.b"), fan_in_uniform(&[out, 1], inp, &mut r))?;
    Ok(())
}

pub fn init_detector(cfg: &DetectorConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let tree = SeedTree::new(seed).child("detector-init", 0);
    let (cin, w) = (cfg.in_channels(), cfg.width);
    let mut s = ParamStore::new();
    for enc in ["content", "fingerprint"] {
        init_conv(&mut s, &format!("{enc}.conv1"), w, cin, &tree)?;
        init_conv(&mut s, &format!("{enc}.conv2"), 2 * w, w, &tree)?;
    }
    init_linear(&mut s, "head.binary", 2, cfg.common_channels, &tree)?;
    init_linear(&mut s, "head.specific", cfg.classes, cfg.specific_channels(), &tree)?;
    init_linear(&mut s, "style", cfg.style_len(), cfg.feature_channels(), &tree)?;
    let [a, b] = cfg.adain_widths();
    init_conv(&mut s, "decoder.up1", b, a, &tree)?;
    init_conv(&mut s, "decoder.up2", b / 2, b, &tree)?;
    init_conv(&mut s, "decoder.out", cin, b / 2, &tree)?;
    Ok(s)
}

fn conv(tape: &mut Tape, x: Var, p: &Bound, name: &str, stride: usize) -> Result<Var> {
    let w = p.get(&format!("{name}.w"))?;
    let b = p.get(&format!("{name}.b"))?;
    tape.conv2d(x, w, Some(b), stride, 1, 1)
}

/// `W v + b` for a `[n]` vector, returning `[out]`.
fn linear(tape: &mut Tape, v: Var, p: &Bound, name: &str) -> Result<Var> {
    let n = tape.shape(v)[0];
    let col = tape.reshape(v, &[n, 1])?;
    let w = p.get(&format!("{name}.w"))?;
    let b = p.get(&format!("{name}.b"))?;
    let y = tape.matmul(w, col)?;
    let y = tape.add(y, b)?;
    let out = tape.shape(y)[0];
    tape.reshape(y, &[out])
}

fn check_input(tape: &Tape, x: Var, cfg: &DetectorConfig) -> Result<()> {
    match *tape.shape(x) {
        [c, h, w] if c == cfg.in_channels() && h % 4 == 0 && w % 4 == 0 && h > 0 && w > 0 => Ok(()),
        ref s => Err(Error::Shape(format!(
            "detector input must be {} x H x W with H, W multiples of 4, got {s:?}",
            cfg.in_channels()
        ))),
    }
}

/// Two stride-2 convolutions with a ReLU between them. The second stage is
/// left linear so pooled features can take either sign.
fn encoder(tape: &mut Tape, x: Var, p: &Bound, name: &str) -> Result<Var> {
    let h = conv(tape, x, p, &format!("{name}.conv1"), 2)?;
    let h = tape.relu(h);
    conv(tape, h, p, &format!("{name}.conv2"), 2)
}

/// Content features, `2w x H/4 x W/4`.
pub fn encode_content(tape: &mut Tape, x: Var, p: &Bound, cfg: &DetectorConfig) -> Result<Var> {
    check_input(tape, x, cfg)?;
    encoder(tape, x, p, "content")
}

/// Forgery features split into shared and method-specific halves.
#[derive(Clone, Copy, Debug)]
pub struct FingerprintFeature {
    pub full: Var,
    pub common: Var,
    pub specific: Var,
}

pub fn encode_fingerprint(tape: &mut Tape, x: Var, p: &Bound, cfg: &DetectorConfig) -> Result<FingerprintFeature> {
    check_input(tape, x, cfg)?;
    let full = encoder(tape, x, p, "fingerprint")?;
    let common = tape.slice(full, 0, 0, cfg.common_channels)?;
    let specific = tape.slice(full, 0, cfg.common_channels, cfg.specific_channels())?;
    Ok(FingerprintFeature { full, common, specific })
}

/// Global average pool of the common half.
pub fn common_embedding(tape: &mut Tape, f: &FingerprintFeature) -> Result<Var> {
    tape.channel_mean(f.common)
}

/// Binary (real, fake) logits from the common half and `K` family logits
/// from the specific half.
pub fn classify(tape: &mut Tape, f: &FingerprintFeature, p: &Bound) -> Result<(Var, Var)> {
    let common = tape.channel_mean(f.common)?;
    let specific = tape.channel_mean(f.specific)?;
    let binary = linear(tape, common, p, "head.binary")?;
    let family = linear(tape, specific, p, "head.specific")?;
    Ok((binary, family))
}

/// AdaIN statistics on the tape: `mu` and `sigma` each of the summed
/// AdaIN width.
#[derive(Clone, Copy, Debug)]
pub struct StyleVars {
    pub mu: Var,
    pub sigma: Var,
}

/// Pools the whole fingerprint and maps it to AdaIN statistics; the second
/// half goes through `softplus + eps` to give strictly positive sigmas.
pub fn style_from_fingerprint(tape: &mut Tape, f: &FingerprintFeature, p: &Bound, cfg: &DetectorConfig) -> Result<StyleVars> {
    let pooled = tape.channel_mean(f.full)?;
    let raw = linear(tape, pooled, p, "style")?;
    let half = cfg.style_len() / 2;
    let mu = tape.slice(raw, 0, 0, half)?;
    let s = tape.slice(raw, 0, half, half)?;
    let s = tape.softplus(s);
    let sigma = tape.add_scalar(s, STD_EPS);
    Ok(StyleVars { mu, sigma })
}

/// Rebuilds a `Cin x H x W` image from content features and a style. When
/// `trace` is given the post-AdaIN activations are pushed to it along with
/// the style slice each one was given.
pub fn decode(
    tape: &mut Tape,
    content: Var,
    style: StyleVars,
    p: &Bound,
    cfg: &DetectorConfig,
    mut trace: Option<&mut Vec<(Var, Var, Var)>>,
) -> Result<Var> {
    let widths = cfg.adain_widths();
    if tape.shape(style.mu) != [widths.iter().sum::<usize>()] || tape.shape(style.sigma) != tape.shape(style.mu) {
        return Err(Error::dim("decode style", tape.shape(style.mu), &[widths.iter().sum::<usize>()]));
    }
    let mut h = content;
    let mut offset = 0;
    for (level, &width) in widths.iter().enumerate() {
        let mu = tape.slice(style.mu, 0, offset, width)?;
        let sigma = tape.slice(style.sigma, 0, offset, width)?;
        offset += width;
        let styled = adain_var(tape, h, mu, sigma)?;
        if let Some(tr) = trace.as_deref_mut() {
            tr.push((styled, mu, sigma));
        }
        let up = tape.upsample2(styled)?;
        h = conv(tape, up, p, &format!("decoder.up{}", level + 1), 1)?;
        h = tape.relu(h);
    }
    let out = conv(tape, h, p, "decoder.out", 1)?;
    Ok(tape.sigmoid(out))
}

/// All detector outputs for one sample.
#[derive(Clone, Copy, Debug)]
pub struct DetectorOutput {
    pub binary_logits: Var,
    pub specific_logits: Var,
    pub content: Var,
    pub fingerprint: FingerprintFeature,
    pub style: StyleVars,
    pub self_recon: Var,
    /// Content of this sample decoded with the partner's style.
    pub cross_recon: Option<Var>,
}

struct Encoded {
    content: Var,
    fingerprint: FingerprintFeature,
    style: StyleVars,
    binary: Var,
    specific: Var,
}

fn encode_all(tape: &mut Tape, x: Var, p: &Bound, cfg: &DetectorConfig) -> Result<Encoded> {
    let content = encode_content(tape, x, p, cfg)?;
    let fingerprint = encode_fingerprint(tape, x, p, cfg)?;
    let style = style_from_fingerprint(tape, &fingerprint, p, cfg)?;
    let (binary, specific) = classify(tape, &fingerprint, p)?;
    Ok(Encoded {
        content,
        fingerprint,
        style,
        binary,
        specific,
    })
}

/// Unpaired forward: heads and self-reconstruction.
pub fn forward_single(tape: &mut Tape, x: Var, p: &Bound, cfg: &DetectorConfig) -> Result<DetectorOutput> {
    let e = encode_all(tape, x, p, cfg)?;
    let self_recon = decode(tape, e.content, e.style, p, cfg, None)?;
    Ok(DetectorOutput {
        binary_logits: e.binary,
        specific_logits: e.specific,
        content: e.content,
        fingerprint: e.fingerprint,
        style: e.style,
        self_recon,
        cross_recon: None,
    })
}

/// Paired forward: each sample is also decoded with the other's style.
pub fn forward_pair(
    tape: &mut Tape,
    a: Var,
    b: Var,
    p: &Bound,
    cfg: &DetectorConfig,
) -> Result<(DetectorOutput, DetectorOutput)> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::dim("forward_pair", tape.shape(a), tape.shape(b)));
    }
    let ea = encode_all(tape, a, p, cfg)?;
    let eb = encode_all(tape, b, p, cfg)?;
    let out = |own: &Encoded, other: &Encoded, tape: &mut Tape| -> Result<DetectorOutput> {
        let self_recon = decode(tape, own.content, own.style, p, cfg, None)?;
        let cross_recon = decode(tape, own.content, other.style, p, cfg, None)?;
        Ok(DetectorOutput {
            binary_logits: own.binary,
            specific_logits: own.specific,
            content: own.content,
            fingerprint: own.fingerprint,
            style: own.style,
            self_recon,
            cross_recon: Some(cross_recon),
        })
    };
    let oa = out(&ea, &eb, tape)?;
    let ob = out(&eb, &ea, tape)?;
    Ok((oa, ob))
}

/// Probability of the fake class from the binary head.
pub fn fake_probability(x: &Tensor, params: &ParamStore, cfg: &DetectorConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let f = encode_fingerprint(&mut tape, xv, &p, cfg)?;
    let (binary, _) = classify(&mut tape, &f, &p)?;
    let probs = tape.softmax(binary, 0)?;
    Ok(tape.value(probs).data()[1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn cfg() -> DetectorConfig {
        DetectorConfig {
            input: InputKind::Hsi,
            width: 8,
            common_channels: 8,
            classes: 3,
        }
    }

    fn input(seed: u64, h: usize, w: usize) -> Tensor {
        fan_in_uniform(&[BANDS, h, w], 1, &mut rng::stream(seed, "x", 0)).map(|v| 0.5 + 0.5 * v)
    }

    #[test]
    fn shapes_follow_contract() {
        let c = cfg();
        let params = init_detector(&c, 1).unwrap();
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let a = tape.constant(input(1, 16, 12));
        let b = tape.constant(input(2, 16, 12));
        let (oa, ob) = forward_pair(&mut tape, a, b, &p, &c).unwrap();
        for o in [oa, ob] {
            assert_eq!(tape.shape(o.binary_logits), &[2]);
            assert_eq!(tape.shape(o.specific_logits), &[3]);
            assert_eq!(tape.shape(o.content), &[16, 4, 3]);
            assert_eq!(tape.shape(o.fingerprint.common), &[8, 4, 3]);
            assert_eq!(tape.shape(o.fingerprint.specific), &[8, 4, 3]);
            assert_eq!(tape.shape(o.self_recon), &[BANDS, 16, 12]);
            assert_eq!(tape.shape(o.cross_recon.unwrap()), &[BANDS, 16, 12]);
            assert_eq!(tape.shape(o.style.mu).iter().product::<usize>() * 2, c.style_len());
            assert!(tape.value(o.style.sigma).data().iter().all(|&s| s > 0.0));
        }
    }

    #[test]
    fn fingerprint_split_is_a_partition() {
        let c = cfg();
        let params = init_detector(&c, 1).unwrap();
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let x = tape.constant(input(3, 8, 8));
        let f = encode_fingerprint(&mut tape, x, &p, &c).unwrap();
        let joined = tape.concat(&[f.common, f.specific], 0).unwrap();
        assert_eq!(tape.value(joined), tape.value(f.full));
    }

    #[test]
    fn self_pairing_cross_equals_self() {
        let c = cfg();
        let params = init_detector(&c, 4).unwrap();
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let a = tape.constant(input(5, 8, 8));
        let (oa, _) = forward_pair(&mut tape, a, a, &p, &c).unwrap();
        assert_eq!(tape.value(oa.self_recon), tape.value(oa.cross_recon.unwrap()));
    }

    #[test]
    fn rejects_wrong_input_channels_and_pair_mismatch() {
        let c = cfg();
        let params = init_detector(&c, 1).unwrap();
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let rgb = tape.constant(Tensor::zeros(&[3, 8, 8]));
        assert!(encode_content(&mut tape, rgb, &p, &c).is_err());
        let a = tape.constant(input(1, 8, 8));
        let b = tape.constant(input(1, 12, 8));
        assert!(matches!(forward_pair(&mut tape, a, b, &p, &c), Err(Error::Dimension { .. })));
    }

    #[test]
    fn rgb_ablation_uses_three_channels() {
        let c = DetectorConfig { input: InputKind::Rgb, ..cfg() };
        let params = init_detector(&c, 1).unwrap();
        assert_eq!(params.get("content.conv1.w").unwrap().shape(), &[8, 3, 3, 3]);
        assert_eq!(params.get("decoder.out.w").unwrap().shape()[0], 3);
        let p = fake_probability(&Tensor::full(&[3, 8, 8], 0.3), &params, &c).unwrap();
        assert!((0.0..=1.0).contains(&p));
    }

    fn classify_values(tape: &mut Tape, f: &FingerprintFeature, p: &Bound) -> (Vec<f64>, Vec<f64>) {
        let (b, k) = classify(tape, f, p).unwrap();
        (tape.value(b).data().to_vec(), tape.value(k).data().to_vec())
    }

    #[test]
    fn heads_read_only_their_half() {
        let c = cfg();
        let params = init_detector(&c, 2).unwrap();
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let x = tape.constant(input(7, 8, 8));
        let f = encode_fingerprint(&mut tape, x, &p, &c).unwrap();
        let (b0, k0) = classify_values(&mut tape, &f, &p);
        let bumped_specific = tape.value(f.specific).map(|v| v + 0.37);
        let bumped_common = tape.value(f.common).map(|v| v * 1.9 - 0.2);
        let specific = tape.constant(bumped_specific);
        let g = FingerprintFeature { specific, ..f };
        let (b1, k1) = classify_values(&mut tape, &g, &p);
        assert_eq!(b0, b1);
        assert_ne!(k0, k1);
        let common = tape.constant(bumped_common);
        let g = FingerprintFeature { common, ..f };
        let (b2, k2) = classify_values(&mut tape, &g, &p);
        assert_ne!(b0, b2);
        assert_eq!(k0, k2);
    }

    #[test]
    fn logits_ignore_spatial_order() {
        let c = cfg();
        let params = init_detector(&c, 2).unwrap();
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let x = tape.constant(input(8, 8, 8));
        let f = encode_fingerprint(&mut tape, x, &p, &c).unwrap();
        let (b0, k0) = classify_values(&mut tape, &f, &p);
        // reverse the pixel order of every channel
        let flip = |t: &Tensor| {
            let hw = t.shape()[1] * t.shape()[2];
            let data = t.data().chunks(hw).flat_map(|ch| ch.iter().rev().copied()).collect();
            Tensor::new(t.shape(), data).unwrap()
        };
        let (cf, sf) = (flip(tape.value(f.common)), flip(tape.value(f.specific)));
        let g = FingerprintFeature {
            common: tape.constant(cf),
            specific: tape.constant(sf),
            ..f
        };
        let (b1, k1) = classify_values(&mut tape, &g, &p);
        for (a, b) in b0.iter().zip(&b1).chain(k0.iter().zip(&k1)) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn cross_reconstruction_is_swap_symmetric() {
        let c = cfg();
        let params = init_detector(&c, 6).unwrap();
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let a = tape.constant(input(10, 8, 8));
        let b = tape.constant(input(11, 8, 8));
        let (ab_a, ab_b) = forward_pair(&mut tape, a, b, &p, &c).unwrap();
        let (ba_b, ba_a) = forward_pair(&mut tape, b, a, &p, &c).unwrap();
        let pairs = [(ab_a.cross_recon, ba_a.cross_recon), (ab_b.cross_recon, ba_b.cross_recon)];
        for (x, y) in pairs {
            let d = tape.value(x.unwrap()).max_abs_diff(tape.value(y.unwrap()));
            assert!(d <= 1e-12);
        }
    }

    #[test]
    fn post_adain_moments_match_style() {
        let c = cfg();
        let params = init_detector(&c, 12).unwrap();
        for seed in 0..5 {
            let mut tape = Tape::new();
            let p = params.bind(&mut tape, false);
            let x = tape.constant(input(seed, 16, 16));
            let content = encode_content(&mut tape, x, &p, &c).unwrap();
            let f = encode_fingerprint(&mut tape, x, &p, &c).unwrap();
            let style = style_from_fingerprint(&mut tape, &f, &p, &c).unwrap();
            let mut trace = Vec::new();
            decode(&mut tape, content, style, &p, &c, Some(&mut trace)).unwrap();
            assert_eq!(trace.len(), 2);
            for (styled, mu, sigma) in trace {
                let (m, s) = channel_moments(tape.value(styled)).unwrap();
                let (mu, sigma) = (tape.value(mu).data(), tape.value(sigma).data());
                for ch in 0..m.len() {
                    assert!((m[ch] - mu[ch]).abs() <= 1e-6);
                    // a constant input channel has nothing to rescale
                    if s[ch] > 0.0 {
                        assert!((s[ch] - sigma[ch]).abs() <= 1e-6, "{} vs {}", s[ch], sigma[ch]);
                    }
                }
            }
        }
    }

    #[test]
    fn decode_rejects_wrong_style_length() {
        let c = cfg();
        let params = init_detector(&c, 1).unwrap();
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let content = tape.constant(Tensor::full(&[16, 2, 2], 0.1));
        let mu = tape.constant(Tensor::zeros(&[5]));
        let sigma = tape.constant(Tensor::ones(&[5]));
        let r = decode(&mut tape, content, StyleVars { mu, sigma }, &p, &c, None);
        assert!(matches!(r, Err(Error::Dimension { .. })));
    }

    #[test]
    fn planted_artifact_moves_fingerprint_and_style() {
        use crate::data::{apply_manipulation, synth_scene, ManipulationKind};
        let c = cfg();
        let params = init_detector(&c, 3).unwrap();
        let real = synth_scene(21, 16, 3).unwrap();
        let kind = ManipulationKind::HighFreqGrid {
            period: 2,
            amplitude: 0.03,
            n_bands: 8,
        };
        let fake = apply_manipulation(&real, &kind, 5).unwrap();
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let mut run = |img: &crate::image::SpectralImage| {
            let x = tape.constant(img.to_tensor());
            let f = encode_fingerprint(&mut tape, x, &p, &c).unwrap();
            let s = style_from_fingerprint(&mut tape, &f, &p, &c).unwrap();
            (tape.value(f.full).clone(), tape.value(s.mu).clone())
        };
        let (fr, sr) = run(&real);
        let (ff, sf) = run(&fake);
        assert!(fr.max_abs_diff(&ff) > 0.0);
        assert!(sr.max_abs_diff(&sf) > 0.0);
    }
}
