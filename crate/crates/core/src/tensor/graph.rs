use super::{Real, Tensor};
use crate::{Error, Result};

/// Offset added inside [`Graph::log10_safe`].
pub const LOG_EPS: f64 = 1e-8;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Conv1d {
        input: Var,
        kernel: Var,
        stride: usize,
        dilation: usize,
    },
    ConvTranspose1d {
        input: Var,
        kernel: Var,
        stride: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    ScalarMul {
        x: Var,
        s: Var,
    },
    Scale {
        x: Var,
        c: F,
    },
    Relu(Var),
    Sigmoid(Var),
    Square(Var),
    Log10 { x: Var, eps: F },
    Sum(Var),
    Mean(Var),
    Dot(Var, Var),
    L2NormSq(Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    Pad {
        x: Var,
        left: usize,
        right: usize,
    },
    Crop {
        x: Var,
        start: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    MeanTime(Var),
    BceWithLogits {
        logit: Var,
        target: F,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        class: usize,
        probs: Vec<F>,
    },
}

impl<F> Op<F> {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Conv1d { input, kernel, .. } | ConvTranspose1d { input, kernel, .. } => {
                vec![*input, *kernel]
            }
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | Dot(a, b) => vec![*a, *b],
            ScalarMul { x, s } => vec![*x, *s],
            AddBias { x, bias } => vec![*x, *bias],
            Scale { x, .. }
            | Relu(x)
            | Sigmoid(x)
            | Square(x)
            | Log10 { x, .. }
            | Sum(x)
            | Mean(x)
            | L2NormSq(x)
            | Pad { x, .. }
            | Crop { x, .. }
            | MaxPool { x, .. }
            | MeanTime(x) => vec![*x],
            BceWithLogits { logit, .. } => vec![*logit],
            SoftmaxCrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Tape of primitive applications, rebuilt for every forward pass.
///
/// Nodes are appended in evaluation order, so the tape is topologically
/// sorted by construction. A graph supports a single [`Graph::backward`];
/// call [`Graph::reset`] to reuse the allocation.
#[derive(Debug, Default)]
pub struct Graph<F = f32> {
    nodes: Vec<Node<F>>,
    consumed: bool,
}

/// Gradients of the loss with respect to every leaf that requires them.
#[derive(Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::invalid(format!("{op}: shape mismatch {a:?} vs {b:?}"))
}

#[inline]
fn axpy<F: Real>(y: &mut [F], a: F, x: &[F]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + a * xi;
    }
}

#[inline]
fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    let mut acc = F::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc = acc + x * y;
    }
    acc
}

fn dims2(shape: &[usize], what: &str) -> Result<(usize, usize)> {
    match shape {
        [c, t] => Ok((*c, *t)),
        _ => Err(Error::invalid(format!(
            "{what}: expected a rank-2 [channels × time] tensor, got {shape:?}"
        ))),
    }
}

fn dims3(shape: &[usize], what: &str) -> Result<(usize, usize, usize)> {
    match shape {
        [a, b, c] => Ok((*a, *b, *c)),
        _ => Err(Error::invalid(format!(
            "{what}: expected a rank-3 kernel, got {shape:?}"
        ))),
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    /// Clears the tape so it can record a new forward pass.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that does not receive a gradient.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, value: Tensor<F>, op: Op<F>) -> Var {
        let rg = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, rg)
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::Internal(format!("variable {} not on this tape", v.0)))
        }
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(op, sa, sb));
        }
        Ok(())
    }

    // ---- convolutions -------------------------------------------------

    /// Cross-correlation without padding.
    ///
    /// `input` is `[C_in × T]`, `kernel` is `[C_out × C_in × K]`; the output is
    /// `[C_out × T']` with `T' = (T − dilation·(K−1) − 1) / stride + 1`.
    pub fn conv1d(&mut self, input: Var, kernel: Var, stride: usize, dilation: usize) -> Result<Var> {
        self.check(input)?;
        self.check(kernel)?;
        if stride == 0 || dilation == 0 {
            return Err(Error::invalid("conv1d: stride and dilation must be positive"));
        }
        let (ci, t) = dims2(self.value(input).shape(), "conv1d input")?;
        let (co, kci, kk) = dims3(self.value(kernel).shape(), "conv1d")?;
        if kci != ci {
            return Err(shape_err(
                "conv1d",
                self.value(input).shape(),
                self.value(kernel).shape(),
            ));
        }
        let span = dilation * (kk - 1) + 1;
        if t < span {
            return Err(Error::invalid(format!(
                "conv1d: input length {t} shorter than kernel span {span}"
            )));
        }
        let tout = (t - span) / stride + 1;
        let x = self.value(input).data();
        let w = self.value(kernel).data();
        let mut out = vec![F::zero(); co * tout];
        for o in 0..co {
            let orow = &mut out[o * tout..(o + 1) * tout];
            for c in 0..ci {
                let xrow = &x[c * t..(c + 1) * t];
                let wrow = &w[(o * ci + c) * kk..(o * ci + c + 1) * kk];
                if stride == 1 {
                    for (k, &wk) in wrow.iter().enumerate() {
                        let off = k * dilation;
                        axpy(orow, wk, &xrow[off..off + tout]);
                    }
                } else if dilation == 1 {
                    for (i, y) in orow.iter_mut().enumerate() {
                        let s = i * stride;
                        *y = *y + dot(wrow, &xrow[s..s + kk]);
                    }
                } else {
                    for (k, &wk) in wrow.iter().enumerate() {
                        let off = k * dilation;
                        for (i, y) in orow.iter_mut().enumerate() {
                            *y = *y + wk * xrow[off + i * stride];
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![co, tout], out)?;
        Ok(self.record(
            value,
            Op::Conv1d {
                input,
                kernel,
                stride,
                dilation,
            },
        ))
    }

    /// Transposed convolution (the adjoint of [`Graph::conv1d`] at dilation 1).
    ///
    /// `input` is `[C_in × T]`, `kernel` is `[C_in × C_out × K]`; the output is
    /// `[C_out × (T−1)·stride + K]`. A conv1d kernel `[C_out × C_in × K]` read
    /// with this layout is its own adjoint kernel: no flip, no transpose.
    pub fn conv_transpose1d(&mut self, input: Var, kernel: Var, stride: usize) -> Result<Var> {
        self.check(input)?;
        self.check(kernel)?;
        if stride == 0 {
            return Err(Error::invalid("conv_transpose1d: stride must be positive"));
        }
        let (ci, t) = dims2(self.value(input).shape(), "conv_transpose1d input")?;
        let (kci, co, kk) = dims3(self.value(kernel).shape(), "conv_transpose1d")?;
        if kci != ci {
            return Err(shape_err(
                "conv_transpose1d",
                self.value(input).shape(),
                self.value(kernel).shape(),
            ));
        }
        let tout = (t - 1) * stride + kk;
        let x = self.value(input).data();
        let w = self.value(kernel).data();
        let mut out = vec![F::zero(); co * tout];
        let mut frame = vec![F::zero(); kk];
        for o in 0..co {
            for i in 0..t {
                frame.iter_mut().for_each(|v| *v = F::zero());
                for c in 0..ci {
                    let xv = x[c * t + i];
                    if xv != F::zero() {
                        axpy(&mut frame, xv, &w[(c * co + o) * kk..(c * co + o + 1) * kk]);
                    }
                }
                let s = o * tout + i * stride;
                for (y, &f) in out[s..s + kk].iter_mut().zip(&frame) {
                    *y = *y + f;
                }
            }
        }
        let value = Tensor::new(vec![co, tout], out)?;
        Ok(self.record(
            value,
            Op::ConvTranspose1d {
                input,
                kernel,
                stride,
            },
        ))
    }

    // ---- elementwise --------------------------------------------------

    fn zip_op(&mut self, name: &str, a: Var, b: Var, f: impl Fn(F, F) -> F, op: Op<F>) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.record(value, op))
    }

    fn map_op(&mut self, x: Var, f: impl Fn(F) -> F, op: Op<F>) -> Result<Var> {
        self.check(x)?;
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.record(value, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Multiplies every element of `x` by the one-element tensor `s`.
    pub fn scalar_mul(&mut self, x: Var, s: Var) -> Result<Var> {
        self.check(x)?;
        self.check(s)?;
        if !self.value(s).is_scalar() {
            return Err(Error::invalid(format!(
                "scalar_mul: expected a scalar factor, got {:?}",
                self.value(s).shape()
            )));
        }
        let k = self.value(s).item();
        self.map_op(x, |v| v * k, Op::ScalarMul { x, s })
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, x: Var, c: F) -> Result<Var> {
        self.map_op(x, |v| v * c, Op::Scale { x, c })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map_op(x, |v| if v > F::zero() { v } else { F::zero() }, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map_op(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.map_op(x, |v| v * v, Op::Square(x))
    }

    /// `log10(v + LOG_EPS)`.
    pub fn log10_safe(&mut self, x: Var) -> Result<Var> {
        let eps = F::of(LOG_EPS);
        self.map_op(x, |v| (v + eps).log10(), Op::Log10 { x, eps })
    }

    /// `log10(v)`; every element must be positive.
    pub fn log10(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        if self.value(x).data().iter().any(|&v| !(v > F::zero())) {
            return Err(Error::Numeric("log10 of a non-positive value".into()));
        }
        let eps = F::zero();
        self.map_op(x, |v| v.log10(), Op::Log10 { x, eps })
    }

    // ---- reductions ---------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let s = self.value(x).data().iter().fold(F::zero(), |a, &b| a + b);
        Ok(self.record(Tensor::scalar(s), Op::Sum(x)))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let v = self.value(x);
        let s = v.data().iter().fold(F::zero(), |a, &b| a + b) / F::of(v.len() as f64);
        Ok(self.record(Tensor::scalar(s), Op::Mean(x)))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        if self.value(a).len() != self.value(b).len() {
            return Err(shape_err("dot", self.value(a).shape(), self.value(b).shape()));
        }
        let s = dot(self.value(a).data(), self.value(b).data());
        Ok(self.record(Tensor::scalar(s), Op::Dot(a, b)))
    }

    pub fn l2_norm_sq(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let d = self.value(x).data();
        let s = dot(d, d);
        Ok(self.record(Tensor::scalar(s), Op::L2NormSq(x)))
    }

    // ---- layout and network helpers ------------------------------------

    /// Adds a per-channel bias `[C]` to `[C × T]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.check(x)?;
        self.check(bias)?;
        let (c, t) = dims2(self.value(x).shape(), "add_bias")?;
        if self.value(bias).shape() != [c] {
            return Err(shape_err("add_bias", self.value(x).shape(), self.value(bias).shape()));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for (row, &bc) in data.chunks_mut(t).zip(b) {
            row.iter_mut().for_each(|v| *v = *v + bc);
        }
        Ok(self.record(Tensor::new(vec![c, t], data)?, Op::AddBias { x, bias }))
    }

    /// Zero-pads the time axis of `[C × T]`.
    pub fn pad(&mut self, x: Var, left: usize, right: usize) -> Result<Var> {
        self.check(x)?;
        let (c, t) = dims2(self.value(x).shape(), "pad")?;
        let tn = left + t + right;
        let src = self.value(x).data();
        let mut data = vec![F::zero(); c * tn];
        for ch in 0..c {
            data[ch * tn + left..ch * tn + left + t].copy_from_slice(&src[ch * t..(ch + 1) * t]);
        }
        Ok(self.record(Tensor::new(vec![c, tn], data)?, Op::Pad { x, left, right }))
    }

    /// Keeps time samples `start..start + len` of `[C × T]`.
    pub fn crop(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.check(x)?;
        let (c, t) = dims2(self.value(x).shape(), "crop")?;
        if len == 0 || start + len > t {
            return Err(Error::invalid(format!(
                "crop: window {start}..{} outside length {t}",
                start + len
            )));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(c * len);
        for ch in 0..c {
            data.extend_from_slice(&src[ch * t + start..ch * t + start + len]);
        }
        Ok(self.record(Tensor::new(vec![c, len], data)?, Op::Crop { x, start }))
    }

    /// Max-pool over time with window and stride 2; an odd tail forms its own window.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let (c, t) = dims2(self.value(x).shape(), "max_pool2")?;
        let tout = t.div_ceil(2);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(c * tout);
        let mut argmax = Vec::with_capacity(c * tout);
        for ch in 0..c {
            for i in 0..tout {
                let a = ch * t + 2 * i;
                let mut best = a;
                if 2 * i + 1 < t && src[a + 1] > src[a] {
                    best = a + 1;
                }
                data.push(src[best]);
                argmax.push(best);
            }
        }
        Ok(self.record(Tensor::new(vec![c, tout], data)?, Op::MaxPool { x, argmax }))
    }

    /// Averages `[C × T]` over time into `[C × 1]`.
    pub fn mean_time(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let (c, t) = dims2(self.value(x).shape(), "mean_time")?;
        let inv = F::one() / F::of(t as f64);
        let data = self
            .value(x)
            .data()
            .chunks(t)
            .map(|row| row.iter().fold(F::zero(), |a, &b| a + b) * inv)
            .collect();
        Ok(self.record(Tensor::new(vec![c, 1], data)?, Op::MeanTime(x)))
    }

    /// Binary cross-entropy of a single logit against a 0/1 target.
    pub fn bce_with_logits(&mut self, logit: Var, target: F) -> Result<Var> {
        self.check(logit)?;
        if !self.value(logit).is_scalar() {
            return Err(Error::invalid("bce_with_logits: expected a single logit"));
        }
        let z = self.value(logit).item();
        let loss = z.max(F::zero()) - z * target + (F::one() + (-z.abs()).exp()).ln();
        Ok(self.record(Tensor::scalar(loss), Op::BceWithLogits { logit, target }))
    }

    /// Softmax cross-entropy of `logits` against class index `class`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, class: usize) -> Result<Var> {
        self.check(logits)?;
        let z = self.value(logits).data();
        if class >= z.len() {
            return Err(Error::invalid(format!(
                "softmax_cross_entropy: class {class} out of {} logits",
                z.len()
            )));
        }
        let probs = softmax(z);
        let loss = -(probs[class].max(F::min_positive_value())).ln();
        Ok(self.record(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                class,
                probs,
            },
        ))
    }

    // ---- backward -----------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Gradients accumulate over fan-out.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<F>> {
        if self.consumed {
            return Err(Error::invalid(
                "backward already ran on this graph; reset it first",
            ));
        }
        self.check(loss)?;
        if !self.value(loss).is_scalar() {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);

        for id in (0..n).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                grads[id] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[id].take() else {
                continue;
            };
            for v in node.op.inputs() {
                if v.0 >= id {
                    return Err(Error::Internal(format!(
                        "node {id} consumes later node {}",
                        v.0
                    )));
                }
            }
            self.backprop_node(id, &gout, &mut grads);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match (g, &node.op) {
                (Some(g), Op::Leaf) if node.requires_grad => {
                    Some(Tensor::new(node.value.shape().to_vec(), g).expect("leaf gradient shape"))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, id: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let needs = |v: Var| nodes[v.0].requires_grad;
        let acc = |v: Var, grads: &mut [Option<Vec<F>>], f: &mut dyn FnMut(&mut [F])| {
            if !needs(v) {
                return;
            }
            let len = nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![F::zero(); len]);
            f(slot);
        };
        let out = nodes[id].value.data();

        match &nodes[id].op {
            Op::Leaf => {}
            Op::Conv1d {
                input,
                kernel,
                stride,
                dilation,
            } => {
                let (stride, dilation) = (*stride, *dilation);
                let ishape = nodes[input.0].value.shape();
                let (ci, t) = (ishape[0], ishape[1]);
                let kshape = nodes[kernel.0].value.shape();
                let (co, kk) = (kshape[0], kshape[2]);
                let tout = g.len() / co;
                let x = val(*input);
                let w = val(*kernel);
                acc(*input, grads, &mut |gx| {
                    for o in 0..co {
                        let grow = &g[o * tout..(o + 1) * tout];
                        for c in 0..ci {
                            let gxrow = &mut gx[c * t..(c + 1) * t];
                            let wrow = &w[(o * ci + c) * kk..(o * ci + c + 1) * kk];
                            for (k, &wk) in wrow.iter().enumerate() {
                                let off = k * dilation;
                                if stride == 1 {
                                    axpy(&mut gxrow[off..off + tout], wk, grow);
                                } else {
                                    for (i, &gi) in grow.iter().enumerate() {
                                        let p = off + i * stride;
                                        gxrow[p] = gxrow[p] + wk * gi;
                                    }
                                }
                            }
                        }
                    }
                });
                acc(*kernel, grads, &mut |gw| {
                    for o in 0..co {
                        let grow = &g[o * tout..(o + 1) * tout];
                        for c in 0..ci {
                            let xrow = &x[c * t..(c + 1) * t];
                            for k in 0..kk {
                                let off = k * dilation;
                                let s = if stride == 1 {
                                    dot(grow, &xrow[off..off + tout])
                                } else {
                                    grow.iter()
                                        .enumerate()
                                        .fold(F::zero(), |a, (i, &gi)| a + gi * xrow[off + i * stride])
                                };
                                let p = (o * ci + c) * kk + k;
                                gw[p] = gw[p] + s;
                            }
                        }
                    }
                });
            }
            Op::ConvTranspose1d {
                input,
                kernel,
                stride,
            } => {
                let stride = *stride;
                let ishape = nodes[input.0].value.shape();
                let (ci, t) = (ishape[0], ishape[1]);
                let kshape = nodes[kernel.0].value.shape();
                let (co, kk) = (kshape[1], kshape[2]);
                let tout = g.len() / co;
                let x = val(*input);
                let w = val(*kernel);
                acc(*input, grads, &mut |gx| {
                    for c in 0..ci {
                        for o in 0..co {
                            let wrow = &w[(c * co + o) * kk..(c * co + o + 1) * kk];
                            let grow = &g[o * tout..(o + 1) * tout];
                            for i in 0..t {
                                let s = i * stride;
                                gx[c * t + i] = gx[c * t + i] + dot(wrow, &grow[s..s + kk]);
                            }
                        }
                    }
                });
                acc(*kernel, grads, &mut |gw| {
                    for c in 0..ci {
                        let xrow = &x[c * t..(c + 1) * t];
                        for o in 0..co {
                            let grow = &g[o * tout..(o + 1) * tout];
                            let wg = &mut gw[(c * co + o) * kk..(c * co + o + 1) * kk];
                            for (i, &xi) in xrow.iter().enumerate() {
                                if xi != F::zero() {
                                    let s = i * stride;
                                    axpy(wg, xi, &grow[s..s + kk]);
                                }
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, grads, &mut |ga| axpy(ga, F::one(), g));
                acc(*b, grads, &mut |gb| axpy(gb, F::one(), g));
            }
            Op::Sub(a, b) => {
                acc(*a, grads, &mut |ga| axpy(ga, F::one(), g));
                acc(*b, grads, &mut |gb| axpy(gb, -F::one(), g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, grads, &mut |ga| {
                    for ((d, &gi), &y) in ga.iter_mut().zip(g).zip(vb) {
                        *d = *d + gi * y;
                    }
                });
                acc(*b, grads, &mut |gb| {
                    for ((d, &gi), &x) in gb.iter_mut().zip(g).zip(va) {
                        *d = *d + gi * x;
                    }
                });
            }
            Op::Div(a, b) => {
                let vb = val(*b);
                acc(*a, grads, &mut |ga| {
                    for ((d, &gi), &y) in ga.iter_mut().zip(g).zip(vb) {
                        *d = *d + gi / y;
                    }
                });
                acc(*b, grads, &mut |gb| {
                    for (((d, &gi), &y), &q) in gb.iter_mut().zip(g).zip(vb).zip(out) {
                        *d = *d - gi * q / y;
                    }
                });
            }
            Op::ScalarMul { x, s } => {
                let k = val(*s)[0];
                let vx = val(*x);
                acc(*x, grads, &mut |gx| axpy(gx, k, g));
                acc(*s, grads, &mut |gs| gs[0] = gs[0] + dot(g, vx));
            }
            Op::Scale { x, c } => {
                let c = *c;
                acc(*x, grads, &mut |gx| axpy(gx, c, g));
            }
            Op::Relu(x) => {
                let vx = val(*x);
                acc(*x, grads, &mut |gx| {
                    for ((d, &gi), &v) in gx.iter_mut().zip(g).zip(vx) {
                        if v > F::zero() {
                            *d = *d + gi;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                acc(*x, grads, &mut |gx| {
                    for ((d, &gi), &y) in gx.iter_mut().zip(g).zip(out) {
                        *d = *d + gi * y * (F::one() - y);
                    }
                });
            }
            Op::Square(x) => {
                let vx = val(*x);
                let two = F::of(2.0);
                acc(*x, grads, &mut |gx| {
                    for ((d, &gi), &v) in gx.iter_mut().zip(g).zip(vx) {
                        *d = *d + two * v * gi;
                    }
                });
            }
            Op::Log10 { x, eps } => {
                let vx = val(*x);
                let eps = *eps;
                let ln10 = F::of(std::f64::consts::LN_10);
                acc(*x, grads, &mut |gx| {
                    for ((d, &gi), &v) in gx.iter_mut().zip(g).zip(vx) {
                        *d = *d + gi / ((v + eps) * ln10);
                    }
                });
            }
            Op::Sum(x) => {
                let g0 = g[0];
                acc(*x, grads, &mut |gx| gx.iter_mut().for_each(|d| *d = *d + g0));
            }
            Op::Mean(x) => {
                let g0 = g[0] / F::of(nodes[x.0].value.len() as f64);
                acc(*x, grads, &mut |gx| gx.iter_mut().for_each(|d| *d = *d + g0));
            }
            Op::Dot(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let g0 = g[0];
                acc(*a, grads, &mut |ga| axpy(ga, g0, vb));
                acc(*b, grads, &mut |gb| axpy(gb, g0, va));
            }
            Op::L2NormSq(x) => {
                let vx = val(*x);
                let g2 = g[0] * F::of(2.0);
                acc(*x, grads, &mut |gx| axpy(gx, g2, vx));
            }
            Op::AddBias { x, bias } => {
                let c = nodes[bias.0].value.len();
                let t = g.len() / c;
                acc(*x, grads, &mut |gx| axpy(gx, F::one(), g));
                acc(*bias, grads, &mut |gb| {
                    for (d, row) in gb.iter_mut().zip(g.chunks(t)) {
                        *d = *d + row.iter().fold(F::zero(), |a, &b| a + b);
                    }
                });
            }
            Op::Pad { x, left, right } => {
                let t = nodes[x.0].value.shape()[1];
                let tn = left + t + right;
                let left = *left;
                acc(*x, grads, &mut |gx| {
                    for (dst, src) in gx.chunks_mut(t).zip(g.chunks(tn)) {
                        axpy(dst, F::one(), &src[left..left + t]);
                    }
                });
            }
            Op::Crop { x, start } => {
                let t = nodes[x.0].value.shape()[1];
                let len = nodes[id].value.shape()[1];
                let start = *start;
                acc(*x, grads, &mut |gx| {
                    for (dst, src) in gx.chunks_mut(t).zip(g.chunks(len)) {
                        axpy(&mut dst[start..start + len], F::one(), src);
                    }
                });
            }
            Op::MaxPool { x, argmax } => {
                acc(*x, grads, &mut |gx| {
                    for (&p, &gi) in argmax.iter().zip(g) {
                        gx[p] = gx[p] + gi;
                    }
                });
            }
            Op::MeanTime(x) => {
                let t = nodes[x.0].value.shape()[1];
                let inv = F::one() / F::of(t as f64);
                acc(*x, grads, &mut |gx| {
                    for (row, &gi) in gx.chunks_mut(t).zip(g) {
                        row.iter_mut().for_each(|d| *d = *d + gi * inv);
                    }
                });
            }
            Op::BceWithLogits { logit, target } => {
                let z = val(*logit)[0];
                let d = (sigmoid(z) - *target) * g[0];
                acc(*logit, grads, &mut |gz| gz[0] = gz[0] + d);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                class,
                probs,
            } => {
                let g0 = g[0];
                acc(*logits, grads, &mut |gz| {
                    for (k, (d, &p)) in gz.iter_mut().zip(probs).enumerate() {
                        let y = if k == *class { F::one() } else { F::zero() };
                        *d = *d + g0 * (p - y);
                    }
                });
            }
        }
    }
}

fn sigmoid<F: Real>(v: F) -> F {
    if v >= F::zero() {
        F::one() / (F::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (F::one() + e)
    }
}

pub(crate) fn softmax<F: Real>(z: &[F]) -> Vec<F> {
    let m = z.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
    let e: Vec<F> = z.iter().map(|&v| (v - m).exp()).collect();
    let s = e.iter().fold(F::zero(), |a, &b| a + b);
    e.into_iter().map(|v| v / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> Tensor<f64> {
        Tensor::row(v.to_vec()).unwrap()
    }

    #[test]
    fn conv1d_identity_and_difference() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(row(&[1.0, 2.0, 3.0]));
        let id = g.constant(Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap());
        let y = g.conv1d(x, id, 1, 1).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0]);
        let diff = g.constant(Tensor::new(vec![1, 1, 2], vec![1.0, -1.0]).unwrap());
        let y = g.conv1d(x, diff, 1, 1).unwrap();
        assert_eq!(g.value(y).data(), &[-1.0, -1.0]);
    }

    #[test]
    fn conv1d_output_length_formula() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[2, 20]));
        let k = g.constant(Tensor::zeros(&[3, 2, 3]));
        let y = g.conv1d(x, k, 2, 3).unwrap();
        // (20 - 3*2 - 1)/2 + 1
        assert_eq!(g.value(y).shape(), &[3, 7]);
        let short = g.constant(Tensor::zeros(&[2, 6]));
        assert!(g.conv1d(short, k, 1, 3).is_err());
        let wrong = g.constant(Tensor::zeros(&[3, 1, 3]));
        assert!(matches!(g.conv1d(x, wrong, 1, 1), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn conv_transpose_single_tap_spreading() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(row(&[1.0]));
        let k = g.constant(Tensor::new(vec![1, 1, 3], vec![1.0, 1.0, 1.0]).unwrap());
        let y = g.conv_transpose1d(x, k, 1).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn elementwise_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::vector(vec![-1.0, 2.0]).unwrap());
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 2.0]);
        let z = g.constant(Tensor::scalar(0.0));
        let s = g.sigmoid(z).unwrap();
        assert_eq!(g.value(s).item(), 0.5);
        let a = g.constant(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let b = g.constant(Tensor::vector(vec![3.0, 4.0]).unwrap());
        let d = g.dot(a, b).unwrap();
        assert_eq!(g.value(d).item(), 11.0);
        let n = g.constant(Tensor::vector(vec![3.0, 4.0]).unwrap());
        let n2 = g.l2_norm_sq(n).unwrap();
        assert_eq!(g.value(n2).item(), 25.0);
        let three = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap());
        assert!(g.add(a, three).is_err());
        assert!(g.dot(a, three).is_err());
    }

    #[test]
    fn backward_of_sum_and_norm() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::vector(vec![1.0, -2.0, 3.0, 0.5]).unwrap());
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 4]);

        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::vector(vec![1.0, -2.0, 3.0]).unwrap());
        let n = g.l2_norm_sq(x).unwrap();
        let grads = g.backward(n).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn relu_gradient_at_zero_is_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::vector(vec![0.0, 1.0]).unwrap());
        let r = g.relu(x).unwrap();
        let s = g.sum(r).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::vector(vec![2.0]).unwrap());
        let y = g.mul(x, x).unwrap();
        let z = g.add(y, x).unwrap();
        let s = g.sum(z).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[5.0]);
    }

    #[test]
    fn second_backward_is_an_error() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::vector(vec![2.0]).unwrap());
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert!(g.backward(s).is_err());
        g.reset();
        assert!(g.is_empty());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::vector(vec![2.0, 3.0]).unwrap());
        assert!(matches!(g.backward(x), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn foreign_variable_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::vector(vec![2.0, 3.0]).unwrap());
        let mut other = Graph::<f64>::new();
        let _ = other.constant(Tensor::scalar(1.0));
        assert!(matches!(other.relu(Var(5)), Err(Error::Internal(_))));
        let _ = x;
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let c = g.constant(Tensor::vector(vec![3.0, 4.0]).unwrap());
        let d = g.dot(x, c).unwrap();
        let grads = g.backward(d).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 4.0]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let run = || {
            let mut g = Graph::<f32>::new();
            let x = g.constant(Tensor::row((0..40).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap());
            let k = g.constant(
                Tensor::new(vec![3, 1, 5], (0..15).map(|i| (i as f32 * 0.11).cos()).collect()).unwrap(),
            );
            let y = g.conv1d(x, k, 2, 1).unwrap();
            let k2 = g.constant(Tensor::new(vec![3, 1, 5], vec![0.1; 15]).unwrap());
            let z = g.conv_transpose1d(y, k2, 2).unwrap();
            g.value(z).clone()
        };
        assert_eq!(run(), run());
    }
}
