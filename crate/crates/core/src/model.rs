//! Time-domain separator: learned encoder basis, a small dilated
//! convolutional mask network with two ReLU mask heads, and a transposed
//! convolution decoder.
//!
//! Channel roles are fixed: output 0 is the single extracted source, output 1
//! is the residual (everything else).

use crate::checkpoint::Container;
use crate::signal::Waveform;
use crate::tensor::{Graph, Real, Tensor, Var};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CHECKPOINT_KIND: &str = "separator";
const MASK_KERNEL: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeparatorConfig {
    pub n_basis: usize,
    pub enc_kernel: usize,
    pub enc_stride: usize,
    pub mask_layers: usize,
    pub mask_channels: usize,
    pub dilations: Vec<usize>,
    pub segment_len: usize,
    pub seed: u64,
}

impl Default for SeparatorConfig {
    fn default() -> Self {
        SeparatorConfig {
            n_basis: 64,
            enc_kernel: 16,
            enc_stride: 8,
            mask_layers: 4,
            mask_channels: 64,
            dilations: vec![1, 2, 4, 8],
            segment_len: 8000,
            seed: 0,
        }
    }
}

impl SeparatorConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.n_basis,
            self.enc_kernel,
            self.enc_stride,
            self.mask_layers,
            self.mask_channels,
            self.segment_len,
        ];
        if counts.contains(&0) {
            return Err(Error::invalid("separator config counts must be at least 1"));
        }
        if self.enc_stride > self.enc_kernel {
            return Err(Error::invalid(format!(
                "enc_stride {} exceeds enc_kernel {}",
                self.enc_stride, self.enc_kernel
            )));
        }
        if self.segment_len % self.enc_stride != 0 {
            return Err(Error::invalid(format!(
                "segment_len {} is not a multiple of enc_stride {}",
                self.segment_len, self.enc_stride
            )));
        }
        if self.segment_len < self.enc_kernel {
            return Err(Error::invalid("segment_len shorter than enc_kernel"));
        }
        if self.dilations.len() != self.mask_layers || self.dilations.contains(&0) {
            return Err(Error::invalid(format!(
                "need {} positive dilations, got {:?}",
                self.mask_layers, self.dilations
            )));
        }
        Ok(())
    }

    /// Length after padding `t` up to the encoder's stride grid.
    pub fn padded_len(&self, t: usize) -> usize {
        let k = self.enc_kernel;
        let s = self.enc_stride;
        if t <= k {
            k
        } else {
            k + (t - k).div_ceil(s) * s
        }
    }

    /// Names and shapes of all parameter tensors, in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (n, c, k) = (self.n_basis, self.mask_channels, self.enc_kernel);
        let mut out = vec![
            ("enc".to_string(), vec![n, 1, k]),
            ("bottleneck.w".to_string(), vec![c, n, 1]),
            ("bottleneck.b".to_string(), vec![c]),
        ];
        for l in 0..self.mask_layers {
            out.push((format!("layer{l}.w"), vec![c, c, MASK_KERNEL]));
            out.push((format!("layer{l}.b"), vec![c]));
        }
        for h in 1..=2 {
            out.push((format!("head{h}.w"), vec![n, c, 1]));
            out.push((format!("head{h}.b"), vec![n]));
        }
        // Read by conv_transpose1d as [C_in=n × C_out=1 × k].
        out.push(("dec".to_string(), vec![n, 1, k]));
        out
    }

    /// Initialization bound for the parameter with `shape` and `name`.
    pub fn fan_in_bound(&self, name: &str, shape: &[usize]) -> f32 {
        let fan_in = if name == "dec" {
            (self.n_basis * self.enc_kernel / self.enc_stride).max(1)
        } else if shape.len() == 3 {
            shape[1] * shape[2]
        } else {
            1
        };
        1.0 / (fan_in as f32).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeparatorParams {
    pub config: SeparatorConfig,
    pub tensors: Vec<Tensor<f32>>,
}

impl SeparatorParams {
    pub fn names(&self) -> Vec<String> {
        self.config.layout().into_iter().map(|(n, _)| n).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.names()
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn n_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// Places the parameters on `g`, trainable or frozen.
    pub fn bind<F: Real>(&self, g: &mut Graph<F>, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                let t = t.cast::<F>();
                if trainable {
                    g.param(t)
                } else {
                    g.constant(t)
                }
            })
            .collect()
    }

    pub fn to_container(&self) -> Container {
        let c = &self.config;
        let mut out = Container::new(CHECKPOINT_KIND);
        out.set("n_basis", c.n_basis);
        out.set("enc_kernel", c.enc_kernel);
        out.set("enc_stride", c.enc_stride);
        out.set("mask_layers", c.mask_layers);
        out.set("mask_channels", c.mask_channels);
        let dil: Vec<String> = c.dilations.iter().map(usize::to_string).collect();
        out.set("dilations", dil.join(","));
        out.set("segment_len", c.segment_len);
        out.set("seed", c.seed);
        for (name, t) in self.names().into_iter().zip(&self.tensors) {
            out.push(name, t.clone());
        }
        out
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind(CHECKPOINT_KIND)?;
        let dilations = c
            .get("dilations")?
            .split(',')
            .map(|d| {
                d.parse()
                    .map_err(|_| Error::Format(format!("bad dilation `{d}`")))
            })
            .collect::<Result<Vec<usize>>>()?;
        let config = SeparatorConfig {
            n_basis: c.parse("n_basis")?,
            enc_kernel: c.parse("enc_kernel")?,
            enc_stride: c.parse("enc_stride")?,
            mask_layers: c.parse("mask_layers")?,
            mask_channels: c.parse("mask_channels")?,
            dilations,
            segment_len: c.parse("segment_len")?,
            seed: c.parse("seed")?,
        };
        config
            .validate()
            .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        let mut tensors = Vec::new();
        for (name, shape) in config.layout() {
            let t = c.tensor(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "tensor `{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            if !t.all_finite() {
                return Err(Error::Format(format!("tensor `{name}` has non-finite values")));
            }
            tensors.push(t.clone());
        }
        Ok(SeparatorParams { config, tensors })
    }
}

pub fn init_params(config: &SeparatorConfig, seed: u64) -> Result<SeparatorParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = config
        .layout()
        .into_iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            let data = if shape.len() == 1 {
                vec![0.0; n]
            } else {
                let b = config.fan_in_bound(&name, &shape);
                (0..n).map(|_| rng.gen_range(-b..=b)).collect()
            };
            Tensor::new(shape, data)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut config = config.clone();
    config.seed = seed;
    Ok(SeparatorParams { config, tensors })
}

/// Graph handles of one forward pass.
pub struct ForwardVars {
    pub one: Var,
    pub rest: Var,
    pub masks: [Var; 2],
}

/// Runs the separator on `x` (`[1 × T]`) with parameters already bound to `g`.
pub fn forward_graph<F: Real>(
    g: &mut Graph<F>,
    config: &SeparatorConfig,
    p: &[Var],
    x: Var,
) -> Result<ForwardVars> {
    let shape = g.value(x).shape().to_vec();
    if shape.len() != 2 || shape[0] != 1 {
        return Err(Error::invalid(format!("separator input must be [1 × T], got {shape:?}")));
    }
    let t = shape[1];
    if t < config.enc_kernel {
        return Err(Error::invalid(format!(
            "input of {t} samples is shorter than the encoder kernel ({})",
            config.enc_kernel
        )));
    }
    if p.len() != config.layout().len() {
        return Err(Error::invalid("parameter count does not match config"));
    }
    let s = config.enc_stride;
    let tp = config.padded_len(t);
    let xp = if tp > t { g.pad(x, 0, tp - t)? } else { x };

    let enc = g.conv1d(xp, p[0], s, 1)?;
    let e = g.relu(enc)?;
    let b = g.conv1d(e, p[1], 1, 1)?;
    let mut h = g.add_bias(b, p[2])?;
    for (l, &d) in config.dilations.iter().enumerate() {
        let (w, bias) = (p[3 + 2 * l], p[4 + 2 * l]);
        let hp = g.pad(h, d, d)?;
        let c = g.conv1d(hp, w, 1, d)?;
        let c = g.add_bias(c, bias)?;
        let a = g.relu(c)?;
        h = g.add(h, a)?;
    }
    let base = 3 + 2 * config.mask_layers;
    let dec = p[base + 4];
    let mut outs = Vec::with_capacity(2);
    let mut masks = Vec::with_capacity(2);
    for k in 0..2 {
        let m = g.conv1d(h, p[base + 2 * k], 1, 1)?;
        let m = g.add_bias(m, p[base + 2 * k + 1])?;
        let m = g.relu(m)?;
        masks.push(m);
        let me = g.mul(m, e)?;
        let y = g.conv_transpose1d(me, dec, s)?;
        outs.push(if tp > t { g.crop(y, 0, t)? } else { y });
    }
    Ok(ForwardVars {
        one: outs[0],
        rest: outs[1],
        masks: [masks[0], masks[1]],
    })
}

/// Inference on a raw sample slice. Returns `(one, rest)`, each of length `x.len()`.
pub fn forward(params: &SeparatorParams, x: &[f32]) -> Result<(Vec<f32>, Vec<f32>)> {
    let mut g = Graph::<f32>::new();
    let p = params.bind(&mut g, false);
    let xv = g.constant(Tensor::row(x.to_vec())?);
    let out = forward_graph(&mut g, &params.config, &p, xv)?;
    Ok((g.value(out.one).data().to_vec(), g.value(out.rest).data().to_vec()))
}

/// Splits `x` into 50%-overlapping segments of `segment_len`, applies `f` to
/// each and recombines with a triangular cross-fade. Inputs no longer than
/// `segment_len` go straight to `f`.
///
/// The signal is front-padded by half a segment so every input sample lies
/// where two segments overlap and the two fade weights sum to one.
pub fn overlap_add<S>(x: &[f32], segment_len: usize, f: S) -> Result<(Vec<f32>, Vec<f32>)>
where
    S: Fn(&[f32]) -> Result<(Vec<f32>, Vec<f32>)>,
{
    let t = x.len();
    if t <= segment_len {
        return f(x);
    }
    if segment_len < 2 || segment_len % 2 != 0 {
        return Err(Error::invalid("segment_len must be even for overlap-add"));
    }
    let hop = segment_len / 2;
    let n_seg = (hop + t - 1) / hop + 1;
    let total = (n_seg + 1) * hop;
    let mut padded = vec![0.0f32; total];
    padded[hop..hop + t].copy_from_slice(x);
    // Weights on a 2^-24 grid: rise + fall is exactly 1, and each product
    // with an f32 sample is exact in f64, so a constant input survives
    // the cross-fade bit for bit.
    let grid = (1u64 << 24) as f64;
    let rise: Vec<f64> = (0..hop)
        .map(|n| (n as f64 / hop as f64 * grid).round() / grid)
        .collect();
    let fall: Vec<f64> = rise.iter().map(|&r| 1.0 - r).collect();
    let mut acc = [vec![0.0f64; total], vec![0.0f64; total]];
    for m in 0..n_seg {
        let start = m * hop;
        let (one, rest) = f(&padded[start..start + segment_len])?;
        if one.len() != segment_len || rest.len() != segment_len {
            return Err(Error::Internal("segment output length changed".into()));
        }
        for (ch, y) in [one, rest].iter().enumerate() {
            let dst = &mut acc[ch][start..start + segment_len];
            for n in 0..hop {
                dst[n] += rise[n] * y[n] as f64;
                dst[hop + n] += fall[n] * y[hop + n] as f64;
            }
        }
    }
    let out = |a: &[f64]| a[hop..hop + t].iter().map(|&v| v as f32).collect();
    Ok((out(&acc[0]), out(&acc[1])))
}

/// Separates a waveform of any length ≥ `enc_kernel`.
pub fn separate_long(params: &SeparatorParams, w: &Waveform) -> Result<(Waveform, Waveform)> {
    let seg = params.config.segment_len;
    let (one, rest) = overlap_add(w.samples(), seg, |s| forward(params, s))?;
    let check = |v: Vec<f32>| -> Result<Waveform> {
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("separator produced non-finite samples".into()));
        }
        Waveform::new(v, w.sample_rate())
    };
    Ok((check(one)?, check(rest)?))
}

pub fn save_checkpoint(params: &SeparatorParams, path: &Path) -> Result<()> {
    params.to_container().save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<SeparatorParams> {
    SeparatorParams::from_container(&Container::load(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SeparatorConfig {
        SeparatorConfig {
            n_basis: 8,
            enc_kernel: 8,
            enc_stride: 4,
            mask_layers: 2,
            mask_channels: 6,
            dilations: vec![1, 2],
            segment_len: 64,
            seed: 0,
        }
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let c = tiny();
        let a = init_params(&c, 1).unwrap();
        assert_eq!(a, init_params(&c, 1).unwrap());
        assert_ne!(a.tensors, init_params(&c, 2).unwrap().tensors);
        for ((name, shape), t) in c.layout().iter().zip(&a.tensors) {
            let b = c.fan_in_bound(name, shape);
            if shape.len() == 1 {
                assert!(t.data().iter().all(|&v| v == 0.0));
            } else {
                assert!(t.data().iter().all(|v| v.abs() <= b), "{name}");
            }
        }
    }

    #[test]
    fn invalid_configs() {
        let mut c = tiny();
        c.enc_stride = 16;
        assert!(init_params(&c, 0).is_err());
        let mut c = tiny();
        c.segment_len = 66;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.dilations = vec![1];
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let p = init_params(&tiny(), 3).unwrap();
        let (a, b) = forward(&p, &[0.0; 50]).unwrap();
        assert!(a.iter().chain(&b).all(|&v| v == 0.0));
    }

    #[test]
    fn lengths_are_preserved() {
        let p = init_params(&tiny(), 3).unwrap();
        for t in [8, 9, 31, 64, 100] {
            let x: Vec<f32> = (0..t).map(|i| (i as f32 * 0.3).sin()).collect();
            let (a, b) = forward(&p, &x).unwrap();
            assert_eq!((a.len(), b.len()), (t, t));
        }
        assert!(forward(&p, &[0.1; 7]).is_err());
    }

    #[test]
    fn masks_are_nonnegative() {
        let p = init_params(&tiny(), 5).unwrap();
        let mut g = Graph::<f32>::new();
        let vars = p.bind(&mut g, false);
        let x: Vec<f32> = (0..40).map(|i| ((i * 7 % 11) as f32 - 5.0) / 5.0).collect();
        let xv = g.constant(Tensor::row(x).unwrap());
        let out = forward_graph(&mut g, &p.config, &vars, xv).unwrap();
        for m in out.masks {
            assert!(g.value(m).data().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn overlap_add_weights_sum_to_one() {
        let x = vec![0.3f32; 1000];
        for seg in [64, 100, 256] {
            let (a, b) = overlap_add(&x, seg, |s| Ok((vec![1.0; s.len()], vec![-2.5; s.len()]))).unwrap();
            assert!(a.iter().all(|&v| v == 1.0), "seg {seg}");
            assert!(b.iter().all(|&v| v == -2.5), "seg {seg}");
        }
    }

    #[test]
    fn short_input_bypasses_segmentation() {
        let p = init_params(&tiny(), 4).unwrap();
        let x: Vec<f32> = (0..60).map(|i| (i as f32).cos()).collect();
        let w = Waveform::new(x.clone(), 8000).unwrap();
        let (one, rest) = separate_long(&p, &w).unwrap();
        let (a, b) = forward(&p, &x).unwrap();
        assert_eq!(one.samples(), a.as_slice());
        assert_eq!(rest.samples(), b.as_slice());
        let long = Waveform::new((0..300).map(|i| (i as f32 * 0.1).sin()).collect(), 8000).unwrap();
        let (one, _) = separate_long(&p, &long).unwrap();
        assert_eq!(one.len(), 300);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.orp");
        let p = init_params(&tiny(), 9).unwrap();
        save_checkpoint(&p, &path).unwrap();
        let q = load_checkpoint(&path).unwrap();
        assert_eq!(p, q);
        let x: Vec<f32> = (0..77).map(|i| (i as f32 * 0.37).sin()).collect();
        assert_eq!(forward(&p, &x).unwrap(), forward(&q, &x).unwrap());
        let mut c = p.to_container();
        c.set("type", "classifier");
        assert!(matches!(SeparatorParams::from_container(&c), Err(Error::Format(_))));
    }
}
