//! Central finite-difference gradient verification.

use super::{Graph, Real, Tensor, Var};
use crate::Result;

/// Outcome of [`check`]: one relative error per input tensor.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub relative_errors: Vec<f64>,
}

impl GradCheck {
    pub fn max_error(&self) -> f64 {
        self.relative_errors.iter().cloned().fold(0.0, f64::max)
    }
}

/// Compares analytic gradients of `build` against central differences.
///
/// `build` receives a fresh graph and one trainable leaf per entry of
/// `inputs` and must return a scalar. For each input the error is
/// `‖g_analytic − g_numeric‖ / max(‖g_analytic‖, ‖g_numeric‖, 1e-12)`.
pub fn check<F, B>(inputs: &[Tensor<F>], eps: f64, build: B) -> Result<GradCheck>
where
    F: Real,
    B: Fn(&mut Graph<F>, &[Var]) -> Result<Var>,
{
    let analytic = analytic_grads(inputs, &build)?;
    let numeric = numeric_grads(inputs, eps, &build)?;
    Ok(compare(&analytic, &numeric))
}

/// Checks `F` analytic gradients against `f64` central differences of the
/// same function (`build_ref` must build it at `f64`). Separates errors in
/// low-precision backward passes from rounding noise in the difference quotient.
pub fn check_against_f64<F, B, R>(inputs: &[Tensor<F>], eps: f64, build: B, build_ref: R) -> Result<GradCheck>
where
    F: Real,
    B: Fn(&mut Graph<F>, &[Var]) -> Result<Var>,
    R: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let analytic = analytic_grads(inputs, &build)?;
    let wide: Vec<Tensor<f64>> = inputs.iter().map(|t| t.cast()).collect();
    let numeric = numeric_grads(&wide, eps, &build_ref)?;
    Ok(compare(&analytic, &numeric))
}

fn analytic_grads<F, B>(inputs: &[Tensor<F>], build: &B) -> Result<Vec<Vec<f64>>>
where
    F: Real,
    B: Fn(&mut Graph<F>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let grads = g.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| match grads.get(*v) {
            Some(g) => g.data().iter().map(|x| x.as_f64()).collect(),
            None => vec![0.0; t.len()],
        })
        .collect())
}

fn numeric_grads<F, B>(inputs: &[Tensor<F>], eps: f64, build: &B) -> Result<Vec<Vec<f64>>>
where
    F: Real,
    B: Fn(&mut Graph<F>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<F>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.value(out).item().as_f64())
    };
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for idx in 0..inputs.len() {
        let mut grad = Vec::with_capacity(inputs[idx].len());
        for j in 0..inputs[idx].len() {
            let orig = work[idx].data()[j];
            let hi = F::of(orig.as_f64() + eps);
            let lo = F::of(orig.as_f64() - eps);
            work[idx].data_mut()[j] = hi;
            let up = eval(&work)?;
            work[idx].data_mut()[j] = lo;
            let down = eval(&work)?;
            work[idx].data_mut()[j] = orig;
            // divide by the step actually taken after rounding to F
            grad.push((up - down) / (hi.as_f64() - lo.as_f64()));
        }
        out.push(grad);
    }
    Ok(out)
}

fn compare(analytic: &[Vec<f64>], numeric: &[Vec<f64>]) -> GradCheck {
    let relative_errors = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| {
            let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
            diff / na.max(nn).max(1e-12)
        })
        .collect();
    GradCheck { relative_errors }
}
