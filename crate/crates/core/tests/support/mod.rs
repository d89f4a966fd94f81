//! Shared finite-difference gradient suite.
#![allow(dead_code)]

use orpit_core::loss::or_pit_loss;
use orpit_core::model::{forward_graph, init_params, SeparatorConfig};
use orpit_core::tensor::gradcheck::{check, check_against_f64};
use orpit_core::tensor::{Graph, Real, Tensor, Var};
use orpit_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Step size and tolerance for one precision.
pub struct Precision {
    pub eps: f64,
    pub tol: f64,
}

/// The 32-bit reference is taken with 64-bit differences, see [`gradient_suite_f32`].
pub const F32: Precision = Precision { eps: 1e-6, tol: 1e-3 };
pub const F64: Precision = Precision { eps: 1e-6, tol: 1e-6 };

/// Values with magnitude in [0.2, 1] and random sign, away from kinks.
fn signed<F: Real>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.2..1.0);
            F::of(if rng.gen_bool(0.5) { m } else { -m })
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn positive<F: Real>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<F> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| F::of(rng.gen_range(0.5..2.0))).collect()).unwrap()
}

/// Pairs along time differ by at least 0.3 so max-pool has no near ties.
fn separated_pairs<F: Real>(rng: &mut ChaCha8Rng, c: usize, t: usize) -> Tensor<F> {
    let mut data = Vec::with_capacity(c * t);
    for _ in 0..c {
        for i in 0..t {
            let base = if i % 2 == 0 { rng.gen_range(-1.0..1.0) } else { 0.0 };
            data.push(base);
        }
    }
    for ch in 0..c {
        for i in (1..t).step_by(2) {
            let a = data[ch * t + i - 1];
            let d = rng.gen_range(0.3..0.8);
            data[ch * t + i] = if rng.gen_bool(0.5) { a + d } else { a - d };
        }
    }
    Tensor::new(vec![c, t], data.into_iter().map(F::of).collect()).unwrap()
}

/// Contracts any tensor to a scalar with fixed weights so every output
/// element carries a distinct gradient.
fn project<F: Real>(g: &mut Graph<F>, x: Var, seed: u64) -> Result<Var> {
    let shape = g.value(x).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(signed(&mut rng, &shape));
    g.dot(x, w)
}

type Case<F> = (&'static str, Vec<Tensor<F>>, Box<dyn Fn(&mut Graph<F>, &[Var]) -> Result<Var>>);

fn cases<F: Real>() -> Vec<Case<F>> {
    let mut r = ChaCha8Rng::seed_from_u64(11);
    let r = &mut r;
    vec![
        ("conv1d", vec![signed(r, &[2, 13]), signed(r, &[3, 2, 3])],
            Box::new(|g, v| { let y = g.conv1d(v[0], v[1], 2, 2)?; project(g, y, 1) })),
        ("conv_transpose1d", vec![signed(r, &[3, 5]), signed(r, &[3, 2, 4])],
            Box::new(|g, v| { let y = g.conv_transpose1d(v[0], v[1], 3)?; project(g, y, 2) })),
        ("add", vec![signed(r, &[2, 4]), signed(r, &[2, 4])],
            Box::new(|g, v| { let y = g.add(v[0], v[1])?; project(g, y, 3) })),
        ("sub", vec![signed(r, &[2, 4]), signed(r, &[2, 4])],
            Box::new(|g, v| { let y = g.sub(v[0], v[1])?; project(g, y, 4) })),
        ("mul", vec![signed(r, &[2, 4]), signed(r, &[2, 4])],
            Box::new(|g, v| { let y = g.mul(v[0], v[1])?; project(g, y, 5) })),
        ("div", vec![signed(r, &[2, 4]), positive(r, &[2, 4])],
            Box::new(|g, v| { let y = g.div(v[0], v[1])?; project(g, y, 6) })),
        ("scalar_mul", vec![signed(r, &[2, 4]), signed(r, &[1])],
            Box::new(|g, v| { let y = g.scalar_mul(v[0], v[1])?; project(g, y, 7) })),
        ("scale", vec![signed(r, &[2, 4])],
            Box::new(|g, v| { let y = g.scale(v[0], F::of(-1.75))?; project(g, y, 8) })),
        ("relu", vec![signed(r, &[2, 6])],
            Box::new(|g, v| { let y = g.relu(v[0])?; project(g, y, 9) })),
        ("sigmoid", vec![signed(r, &[2, 6])],
            Box::new(|g, v| { let y = g.sigmoid(v[0])?; project(g, y, 10) })),
        ("square", vec![signed(r, &[2, 6])],
            Box::new(|g, v| { let y = g.square(v[0])?; project(g, y, 11) })),
        ("log10_safe", vec![positive(r, &[2, 6])],
            Box::new(|g, v| { let y = g.log10_safe(v[0])?; project(g, y, 12) })),
        ("log10", vec![positive(r, &[2, 6])],
            Box::new(|g, v| { let y = g.log10(v[0])?; project(g, y, 18) })),
        ("sum", vec![signed(r, &[2, 5])],
            Box::new(|g, v| { let s = g.sum(v[0])?; g.square(s) })),
        ("mean", vec![signed(r, &[2, 5])],
            Box::new(|g, v| { let s = g.mean(v[0])?; g.square(s) })),
        ("dot", vec![signed(r, &[7]), signed(r, &[7])],
            Box::new(|g, v| g.dot(v[0], v[1]))),
        ("l2_norm_sq", vec![signed(r, &[2, 5])],
            Box::new(|g, v| g.l2_norm_sq(v[0]))),
        ("add_bias", vec![signed(r, &[3, 4]), signed(r, &[3])],
            Box::new(|g, v| { let y = g.add_bias(v[0], v[1])?; project(g, y, 13) })),
        ("pad", vec![signed(r, &[2, 4])],
            Box::new(|g, v| { let y = g.pad(v[0], 2, 3)?; project(g, y, 14) })),
        ("crop", vec![signed(r, &[2, 9])],
            Box::new(|g, v| { let y = g.crop(v[0], 2, 5)?; project(g, y, 15) })),
        ("max_pool2", vec![separated_pairs(r, 2, 9)],
            Box::new(|g, v| { let y = g.max_pool2(v[0])?; project(g, y, 16) })),
        ("mean_time", vec![signed(r, &[3, 5])],
            Box::new(|g, v| { let y = g.mean_time(v[0])?; project(g, y, 17) })),
        ("bce_with_logits/1", vec![signed(r, &[1])],
            Box::new(|g, v| g.bce_with_logits(v[0], F::one()))),
        ("bce_with_logits/0", vec![signed(r, &[1])],
            Box::new(|g, v| g.bce_with_logits(v[0], F::zero()))),
        ("softmax_cross_entropy", vec![signed(r, &[4])],
            Box::new(|g, v| g.softmax_cross_entropy(v[0], 2))),
        ("or_pit_loss∘forward", separator_inputs(), Box::new(composed)),
    ]
}

fn small_config() -> SeparatorConfig {
    SeparatorConfig {
        n_basis: 4,
        enc_kernel: 4,
        enc_stride: 2,
        mask_layers: 2,
        mask_channels: 4,
        dilations: vec![1, 2],
        segment_len: 64,
        seed: 0,
    }
}

fn separator_inputs<F: Real>() -> Vec<Tensor<F>> {
    init_params(&small_config(), 5).unwrap().tensors.iter().map(|t| t.cast()).collect()
}

fn composed<F: Real>(g: &mut Graph<F>, params: &[Var]) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let sources: Vec<Vec<f64>> = (0..3)
        .map(|_| (0..64).map(|_| rng.gen_range(-0.5..0.5)).collect())
        .collect();
    let mix: Vec<F> = (0..64).map(|i| F::of(sources.iter().map(|s| s[i]).sum())).collect();
    let x = g.constant(Tensor::row(mix)?);
    let out = forward_graph(g, &small_config(), params, x)?;
    Ok(or_pit_loss(g, out.one, out.rest, &sources)?.loss)
}

/// Runs every case in 64-bit mode; returns `(name, max relative error)`.
pub fn gradient_suite_f64() -> Vec<(&'static str, f64)> {
    cases::<f64>()
        .into_iter()
        .map(|(name, inputs, build)| {
            let res = check(&inputs, F64.eps, |g, v| build(g, v)).unwrap_or_else(|e| panic!("{name}: {e}"));
            (name, res.max_error())
        })
        .collect()
}

/// 32-bit analytic gradients against 64-bit central differences.
pub fn gradient_suite_f32() -> Vec<(&'static str, f64)> {
    cases::<f32>()
        .into_iter()
        .zip(cases::<f64>())
        .map(|((name, inputs, build), (_, _, build_ref))| {
            let res = check_against_f64(&inputs, F32.eps, |g, v| build(g, v), |g, v| build_ref(g, v))
                .unwrap_or_else(|e| panic!("{name}: {e}"));
            (name, res.max_error())
        })
        .collect()
}

/// Same-precision central differences at `F` with step `eps`.
pub fn gradient_suite_same_precision<F: Real>(eps: f64) -> Vec<(&'static str, f64)> {
    cases::<F>()
        .into_iter()
        .map(|(name, inputs, build)| {
            let res = check(&inputs, eps, |g, v| build(g, v)).unwrap_or_else(|e| panic!("{name}: {e}"));
            (name, res.max_error())
        })
        .collect()
}
