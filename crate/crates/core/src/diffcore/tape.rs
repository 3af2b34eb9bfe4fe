//! Wengert tape: every op appends a node holding its value; `backward`
//! replays the nodes in reverse exactly once per call.

use std::sync::Arc;

use super::dual::{jacobian, SmoothFn};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation tags accepted by [`Tape::apply`].
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    MatMul,
    Add,
    Mul,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, end: usize },
    Softmax { axis: usize },
    /// Inputs: `[x, gamma, beta]`, gamma/beta sized like `x.shape[axis]`.
    LayerNorm { axis: usize },
    Gelu,
    Sigmoid,
    Relu,
    Sum,
    Mean,
    /// Mean absolute value.
    L1,
    /// Mean squared value.
    L2,
    Log,
    Exp,
    Transpose,
    Reshape { shape: Vec<usize> },
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { ta: bool, tb: bool },
    Add,
    AddBias,
    Sub,
    Mul,
    Scale(f64),
    AddScalar,
    Concat { axis: usize },
    Slice { axis: usize, start: usize },
    Rows(Vec<usize>),
    Softmax { axis: usize },
    LayerNorm { axis: usize },
    Gelu,
    Sigmoid,
    Relu,
    Sum,
    Mean,
    L1,
    L2,
    Log,
    Exp,
    Transpose,
    Reshape,
    RowNorm,
    BceLogits(Arc<Vec<f64>>),
    Custom { jac: Vec<f64>, n_in: usize },
}

#[derive(Clone, Debug, Default)]
enum Saved {
    #[default]
    None,
    /// Per-lane (mean, rstd) for layer norm.
    Stats(Vec<(f64, f64)>),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    inputs: Vec<usize>,
    requires_grad: bool,
    param: Option<usize>,
    saved: Saved,
}

/// Records operations and computes reverse-mode gradients.
pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
    grads: Vec<Option<Vec<f64>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_A: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_B: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_A * (x + GELU_B * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_A * (x + GELU_B * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_A * (1.0 + 3.0 * GELU_B * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `(outer, n, inner)` decomposition of `shape` around `axis`.
fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let n = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, n, inner)
}

/// `c = alpha·op(a)·op(b) + beta·c` with arbitrary strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    // SAFETY: callers pass buffers whose extents cover every strided index
    // (m-1)*rs + (k-1)*cs etc.; all are dense row-major tensors.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

fn matrix_dims(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::shape(op, t.shape(), &[0, 0]));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
            grads: Vec::new(),
        }
    }

    /// A tape that never records gradients; forward values are unchanged.
    pub fn no_grad() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any has been propagated.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: Vec<usize>, saved: Saved) -> Var {
        let requires_grad = self.recording && inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.push_node(Node {
            value: Arc::new(value),
            op,
            inputs,
            requires_grad,
            param: None,
            saved,
        })
    }

    fn push_node(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf_arc(Arc::new(t), false, None)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.leaf_arc(Arc::new(t), requires_grad, None)
    }

    /// Leaf backed by a shared parameter buffer; `id` tags its gradient.
    pub fn param(&mut self, value: Arc<Tensor>, id: usize, trainable: bool) -> Var {
        self.leaf_arc(value, trainable, Some(id))
    }

    fn leaf_arc(&mut self, value: Arc<Tensor>, requires_grad: bool, param: Option<usize>) -> Var {
        let requires_grad = requires_grad && self.recording;
        self.push_node(Node {
            value,
            op: Op::Leaf,
            inputs: vec![],
            requires_grad,
            param,
            saved: Saved::None,
        })
    }

    /// Generic entry point dispatching on an operation tag.
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let want = match &kind {
            OpKind::MatMul | OpKind::Add | OpKind::Mul => 2,
            OpKind::LayerNorm { .. } => 3,
            OpKind::Concat { .. } => inputs.len().max(1),
            _ => 1,
        };
        if inputs.len() != want {
            return Err(Error::Contract(format!(
                "{kind:?} expects {want} inputs, got {}",
                inputs.len()
            )));
        }
        match kind {
            OpKind::MatMul => self.matmul(inputs[0], inputs[1]),
            OpKind::Add => self.add(inputs[0], inputs[1]),
            OpKind::Mul => self.mul(inputs[0], inputs[1]),
            OpKind::Concat { axis } => self.concat(inputs, axis),
            OpKind::Slice { axis, start, end } => self.slice(inputs[0], axis, start, end),
            OpKind::Softmax { axis } => self.softmax(inputs[0], axis),
            OpKind::LayerNorm { axis } => self.layernorm(inputs[0], inputs[1], inputs[2], axis),
            OpKind::Gelu => Ok(self.gelu(inputs[0])),
            OpKind::Sigmoid => Ok(self.sigmoid(inputs[0])),
            OpKind::Relu => Ok(self.relu(inputs[0])),
            OpKind::Sum => Ok(self.sum(inputs[0])),
            OpKind::Mean => Ok(self.mean(inputs[0])),
            OpKind::L1 => Ok(self.l1(inputs[0])),
            OpKind::L2 => Ok(self.l2(inputs[0])),
            OpKind::Log => self.log(inputs[0]),
            OpKind::Exp => self.exp(inputs[0]),
            OpKind::Transpose => self.transpose(inputs[0]),
            OpKind::Reshape { shape } => self.reshape(inputs[0], &shape),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a)·op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let (ar, ac) = matrix_dims(av, "matmul")?;
        let (br, bc) = matrix_dims(bv, "matmul")?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::shape("matmul", av.shape(), bv.shape()));
        }
        let (rsa, csa) = if ta { (1, ac as isize) } else { (ac as isize, 1) };
        let (rsb, csb) = if tb { (1, bc as isize) } else { (bc as isize, 1) };
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            av.data(),
            rsa,
            csa,
            bv.data(),
            rsb,
            csb,
            0.0,
            &mut out,
            n as isize,
            1,
        );
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul { ta, tb }, vec![a.0, b.0], Saved::None))
    }

    fn binary_same(&mut self, a: Var, b: Var, op: Op, name: &'static str) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        if av.shape() != bv.shape() {
            return Err(Error::shape(name, av.shape(), bv.shape()));
        }
        let f: fn(f64, f64) -> f64 = match op {
            Op::Add => |x, y| x + y,
            Op::Sub => |x, y| x - y,
            Op::Mul => |x, y| x * y,
            _ => unreachable!(),
        };
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(t, op, vec![a.0, b.0], Saved::None))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, Op::Add, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, Op::Sub, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, Op::Mul, "mul")
    }

    /// `x + bias` where `bias` matches the trailing axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let bv = &self.nodes[bias.0].value;
        let n = *xv.shape().last().unwrap_or(&1);
        if bv.numel() != n || xv.rank() == 0 {
            return Err(Error::shape("add_bias", xv.shape(), bv.shape()));
        }
        let bd = bv.data();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[i % n])
            .collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(t, Op::AddBias, vec![x.0, bias.0], Saved::None))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let xv = &self.nodes[x.0].value;
        let t = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|v| v * s).collect())
            .expect("same shape");
        self.push(t, Op::Scale(s), vec![x.0], Saved::None)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let xv = &self.nodes[x.0].value;
        let t = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|v| v + s).collect())
            .expect("same shape");
        self.push(t, Op::AddScalar, vec![x.0], Saved::None)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Contract("concat of zero tensors".into()));
        }
        let first = self.nodes[xs[0].0].value.shape().to_vec();
        if axis >= first.len() {
            return Err(Error::Contract(format!("concat axis {axis} for rank {}", first.len())));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.nodes[x.0].value.shape();
            let ok = s.len() == first.len()
                && s.iter().enumerate().all(|(d, &v)| d == axis || v == first[d]);
            if !ok {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = lanes(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &x in xs {
                let v = &self.nodes[x.0].value;
                let block = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * block..(o + 1) * block]);
            }
        }
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Concat { axis }, xs.iter().map(|v| v.0).collect(), Saved::None))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if axis >= xv.rank() || start > end || end > xv.shape()[axis] {
            return Err(Error::Contract(format!(
                "slice [{start}, {end}) on axis {axis} of {:?}",
                xv.shape()
            )));
        }
        let (outer, n, inner) = lanes(xv.shape(), axis);
        let mut shape = xv.shape().to_vec();
        shape[axis] = end - start;
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * n * inner;
            out.extend_from_slice(&xv.data()[base + start * inner..base + end * inner]);
        }
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Slice { axis, start }, vec![x.0], Saved::None))
    }

    /// Gathers rows of a matrix (indices may repeat).
    pub fn rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let (r, c) = matrix_dims(xv, "rows")?;
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::Contract(format!("row {i} out of {r}")));
            }
            out.extend_from_slice(&xv.data()[i * c..(i + 1) * c]);
        }
        let t = Tensor::new(vec![idx.len(), c], out)?;
        Ok(self.push(t, Op::Rows(idx.to_vec()), vec![x.0], Saved::None))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if axis >= xv.rank() {
            return Err(Error::Contract(format!("softmax axis {axis} of {:?}", xv.shape())));
        }
        let (outer, n, inner) = lanes(xv.shape(), axis);
        let src = xv.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * n * inner + k * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for k in 0..n {
                    mx = mx.max(src[at(k)]);
                }
                let mut s = 0.0;
                for k in 0..n {
                    let e = (src[at(k)] - mx).exp();
                    out[at(k)] = e;
                    s += e;
                }
                for k in 0..n {
                    out[at(k)] /= s;
                }
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(t, Op::Softmax { axis }, vec![x.0], Saved::None))
    }

    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, axis: usize) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if axis >= xv.rank() {
            return Err(Error::Contract(format!("layernorm axis {axis} of {:?}", xv.shape())));
        }
        let (outer, n, inner) = lanes(xv.shape(), axis);
        let g = self.nodes[gamma.0].value.data();
        let b = self.nodes[beta.0].value.data();
        if g.len() != n || b.len() != n {
            return Err(Error::shape("layernorm", xv.shape(), &[g.len(), b.len()]));
        }
        let src = xv.data();
        let mut out = vec![0.0; src.len()];
        let mut stats = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * n * inner + k * inner + i;
                let mut mean = 0.0;
                for k in 0..n {
                    mean += src[at(k)];
                }
                mean /= n as f64;
                let mut var = 0.0;
                for k in 0..n {
                    let d = src[at(k)] - mean;
                    var += d * d;
                }
                var /= n as f64;
                let rstd = 1.0 / (var + LN_EPS).sqrt();
                for k in 0..n {
                    out[at(k)] = (src[at(k)] - mean) * rstd * g[k] + b[k];
                }
                stats.push((mean, rstd));
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm { axis },
            vec![x.0, gamma.0, beta.0],
            Saved::Stats(stats),
        ))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let xv = &self.nodes[x.0].value;
        let t = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&v| f(v)).collect())
            .expect("same shape");
        self.push(t, op, vec![x.0], Saved::None)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Gelu, gelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid, sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu, |v| v.max(0.0))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.nodes[x.0].value.data().iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        Ok(self.unary(x, Op::Log, f64::ln))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.nodes[x.0].value.data().iter().find(|&&v| !(v <= 700.0)) {
            return Err(Error::Domain(format!("exp overflow for input {bad}")));
        }
        Ok(self.unary(x, Op::Exp, f64::exp))
    }

    fn reduce(&mut self, x: Var, op: Op, f: impl Fn(&[f64]) -> f64) -> Var {
        let v = f(self.nodes[x.0].value.data());
        self.push(Tensor::scalar(v), op, vec![x.0], Saved::None)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        self.reduce(x, Op::Sum, |d| d.iter().sum())
    }

    pub fn mean(&mut self, x: Var) -> Var {
        self.reduce(x, Op::Mean, |d| {
            d.iter().sum::<f64>() / d.len().max(1) as f64
        })
    }

    pub fn l1(&mut self, x: Var) -> Var {
        self.reduce(x, Op::L1, |d| {
            d.iter().map(|v| v.abs()).sum::<f64>() / d.len().max(1) as f64
        })
    }

    pub fn l2(&mut self, x: Var) -> Var {
        self.reduce(x, Op::L2, |d| {
            d.iter().map(|v| v * v).sum::<f64>() / d.len().max(1) as f64
        })
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let (r, c) = matrix_dims(xv, "transpose")?;
        let src = xv.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let t = Tensor::new(vec![c, r], out)?;
        Ok(self.push(t, Op::Transpose, vec![x.0], Saved::None))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let n: usize = shape.iter().product();
        if n != xv.numel() {
            return Err(Error::shape("reshape", xv.shape(), shape));
        }
        let t = Tensor::new(shape.to_vec(), xv.data().to_vec())?;
        Ok(self.push(t, Op::Reshape, vec![x.0], Saved::None))
    }

    /// Euclidean norm along the last axis.
    pub fn row_norm(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if xv.rank() == 0 {
            return Err(Error::Contract("row_norm of a scalar".into()));
        }
        let (r, c) = xv.as_matrix_dims();
        let src = xv.data();
        let out = (0..r)
            .map(|i| src[i * c..(i + 1) * c].iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let shape = xv.shape()[..xv.rank() - 1].to_vec();
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::RowNorm, vec![x.0], Saved::None))
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and `labels`,
    /// evaluated in the numerically stable softplus form.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        let xv = &self.nodes[logits.0].value;
        if xv.numel() != labels.len() {
            return Err(Error::shape("bce", xv.shape(), &[labels.len()]));
        }
        let n = labels.len().max(1) as f64;
        let loss = xv
            .data()
            .iter()
            .zip(labels)
            .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceLogits(Arc::new(labels.to_vec())),
            vec![logits.0],
            Saved::None,
        ))
    }

    /// Applies a smooth function to the concatenation of `inputs`; the exact
    /// Jacobian is obtained by forward-mode passes when gradients are needed.
    pub fn custom<F: SmoothFn>(&mut self, f: &F, inputs: &[Var], out_shape: &[usize]) -> Result<Var> {
        let mut x = Vec::with_capacity(f.n_in());
        for &v in inputs {
            x.extend_from_slice(self.nodes[v.0].value.data());
        }
        if x.len() != f.n_in() || out_shape.iter().product::<usize>() != f.n_out() {
            return Err(Error::shape("custom", &[x.len(), f.n_out()], out_shape));
        }
        let needs = self.recording && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let (value, jac) = if needs {
            jacobian(f, &x)
        } else {
            (f.eval(&x), Vec::new())
        };
        let t = Tensor::new(out_shape.to_vec(), value)?;
        Ok(self.push(
            t,
            Op::Custom {
                jac,
                n_in: f.n_in(),
            },
            inputs.iter().map(|v| v.0).collect(),
            Saved::None,
        ))
    }

    /// Propagates d(loss)/d(leaf) into every leaf that requires a gradient.
    /// Repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        if self.grads.len() < self.nodes.len() {
            self.grads.resize(self.nodes.len(), None);
        }
        let mut local: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        local[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = local[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                accumulate(&mut self.grads[i], &g);
                continue;
            }
            let contributions = self.node_backward(i, &g);
            for (input, dg) in contributions {
                if self.nodes[input].requires_grad {
                    accumulate(&mut local[input], &dg);
                }
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, g: &[f64]) -> Vec<(usize, Vec<f64>)> {
        let node = &self.nodes[i];
        let ins = &node.inputs;
        let inp = |k: usize| &self.nodes[ins[k]].value;
        let out = &node.value;
        let needs = |k: usize| self.nodes[ins[k]].requires_grad;
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul { ta, tb } => {
                let (a, b) = (inp(0), inp(1));
                let (ar, ac) = (a.shape()[0], a.shape()[1]);
                let (br, bc) = (b.shape()[0], b.shape()[1]);
                let (m, k) = if *ta { (ac, ar) } else { (ar, ac) };
                let n = if *tb { br } else { bc };
                let mut res = Vec::new();
                if needs(0) {
                    // d op(A) = dC · op(B)^T, written straight into A's layout
                    let mut da = vec![0.0; ar * ac];
                    let (rsb, csb) = if *tb { (bc as isize, 1) } else { (1, bc as isize) };
                    let (rsc, csc) = if *ta { (1, ac as isize) } else { (ac as isize, 1) };
                    gemm(m, n, k, g, n as isize, 1, b.data(), rsb, csb, 0.0, &mut da, rsc, csc);
                    res.push((ins[0], da));
                }
                if needs(1) {
                    // d op(B) = op(A)^T · dC
                    let mut db = vec![0.0; br * bc];
                    let (rsa, csa) = if *ta { (ac as isize, 1) } else { (1, ac as isize) };
                    let (rsc, csc) = if *tb { (1, bc as isize) } else { (bc as isize, 1) };
                    gemm(k, m, n, a.data(), rsa, csa, g, n as isize, 1, 0.0, &mut db, rsc, csc);
                    res.push((ins[1], db));
                }
                res
            }
            Op::Add => vec![(ins[0], g.to_vec()), (ins[1], g.to_vec())],
            Op::Sub => vec![(ins[0], g.to_vec()), (ins[1], g.iter().map(|v| -v).collect())],
            Op::Mul => {
                let (a, b) = (inp(0).data(), inp(1).data());
                vec![
                    (ins[0], g.iter().zip(b).map(|(g, b)| g * b).collect()),
                    (ins[1], g.iter().zip(a).map(|(g, a)| g * a).collect()),
                ]
            }
            Op::AddBias => {
                let n = inp(1).numel();
                let mut db = vec![0.0; n];
                for (k, v) in g.iter().enumerate() {
                    db[k % n] += v;
                }
                vec![(ins[0], g.to_vec()), (ins[1], db)]
            }
            Op::Scale(s) => vec![(ins[0], g.iter().map(|v| v * s).collect())],
            Op::AddScalar | Op::Reshape => vec![(ins[0], g.to_vec())],
            Op::Concat { axis } => {
                let (outer, _, inner) = lanes(out.shape(), *axis);
                let total_block = out.shape()[*axis] * inner;
                let mut offset = 0;
                let mut res = Vec::with_capacity(ins.len());
                for &input in ins {
                    let block = self.nodes[input].value.shape()[*axis] * inner;
                    let mut dg = Vec::with_capacity(outer * block);
                    for o in 0..outer {
                        let base = o * total_block + offset;
                        dg.extend_from_slice(&g[base..base + block]);
                    }
                    offset += block;
                    res.push((input, dg));
                }
                res
            }
            Op::Slice { axis, start } => {
                let x = inp(0);
                let (outer, n, inner) = lanes(x.shape(), *axis);
                let len = out.shape()[*axis];
                let mut dx = vec![0.0; x.numel()];
                for o in 0..outer {
                    let dst = o * n * inner + start * inner;
                    let src = o * len * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                vec![(ins[0], dx)]
            }
            Op::Rows(idx) => {
                let x = inp(0);
                let c = x.shape()[1];
                let mut dx = vec![0.0; x.numel()];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        dx[i * c + j] += g[r * c + j];
                    }
                }
                vec![(ins[0], dx)]
            }
            Op::Softmax { axis } => {
                let (outer, n, inner) = lanes(out.shape(), *axis);
                let y = out.data();
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| o * n * inner + k * inner + i;
                        let mut dot = 0.0;
                        for k in 0..n {
                            dot += g[at(k)] * y[at(k)];
                        }
                        for k in 0..n {
                            dx[at(k)] = y[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                vec![(ins[0], dx)]
            }
            Op::LayerNorm { axis } => {
                let Saved::Stats(stats) = &node.saved else {
                    unreachable!("layernorm saves stats")
                };
                let x = inp(0);
                let gamma = inp(1).data();
                let (outer, n, inner) = lanes(x.shape(), *axis);
                let src = x.data();
                let mut dx = vec![0.0; src.len()];
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                let mut xhat = vec![0.0; n];
                let mut dxhat = vec![0.0; n];
                for o in 0..outer {
                    for i in 0..inner {
                        let (mean, rstd) = stats[o * inner + i];
                        let at = |k: usize| o * n * inner + k * inner + i;
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for k in 0..n {
                            xhat[k] = (src[at(k)] - mean) * rstd;
                            dxhat[k] = g[at(k)] * gamma[k];
                            dgamma[k] += g[at(k)] * xhat[k];
                            dbeta[k] += g[at(k)];
                            m1 += dxhat[k];
                            m2 += dxhat[k] * xhat[k];
                        }
                        m1 /= n as f64;
                        m2 /= n as f64;
                        for k in 0..n {
                            dx[at(k)] = rstd * (dxhat[k] - m1 - xhat[k] * m2);
                        }
                    }
                }
                vec![(ins[0], dx), (ins[1], dgamma), (ins[2], dbeta)]
            }
            Op::Gelu => {
                let x = inp(0).data();
                vec![(ins[0], g.iter().zip(x).map(|(g, &x)| g * gelu_grad(x)).collect())]
            }
            Op::Sigmoid => {
                let y = out.data();
                vec![(ins[0], g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect())]
            }
            Op::Relu => {
                let x = inp(0).data();
                vec![(
                    ins[0],
                    g.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect(),
                )]
            }
            Op::Log => {
                let x = inp(0).data();
                vec![(ins[0], g.iter().zip(x).map(|(g, x)| g / x).collect())]
            }
            Op::Exp => {
                let y = out.data();
                vec![(ins[0], g.iter().zip(y).map(|(g, y)| g * y).collect())]
            }
            Op::Sum => vec![(ins[0], vec![g[0]; inp(0).numel()])],
            Op::Mean => {
                let n = inp(0).numel().max(1) as f64;
                vec![(ins[0], vec![g[0] / n; inp(0).numel()])]
            }
            Op::L1 => {
                let x = inp(0).data();
                let n = x.len().max(1) as f64;
                vec![(
                    ins[0],
                    x.iter()
                        .map(|&v| {
                            let s = if v > 0.0 {
                                1.0
                            } else if v < 0.0 {
                                -1.0
                            } else {
                                0.0
                            };
                            g[0] * s / n
                        })
                        .collect(),
                )]
            }
            Op::L2 => {
                let x = inp(0).data();
                let n = x.len().max(1) as f64;
                vec![(ins[0], x.iter().map(|v| g[0] * 2.0 * v / n).collect())]
            }
            Op::Transpose => {
                let (r, c) = (out.shape()[0], out.shape()[1]);
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[j * r + i] = g[i * c + j];
                    }
                }
                vec![(ins[0], dx)]
            }
            Op::RowNorm => {
                let x = inp(0);
                let (r, c) = x.as_matrix_dims();
                let y = out.data();
                let mut dx = vec![0.0; x.numel()];
                for i in 0..r {
                    if y[i] > 0.0 {
                        for j in 0..c {
                            dx[i * c + j] = g[i] * x.data()[i * c + j] / y[i];
                        }
                    }
                }
                vec![(ins[0], dx)]
            }
            Op::BceLogits(labels) => {
                let x = inp(0).data();
                let n = labels.len().max(1) as f64;
                vec![(
                    ins[0],
                    x.iter()
                        .zip(labels.iter())
                        .map(|(&x, &y)| g[0] * (sigmoid(x) - y) / n)
                        .collect(),
                )]
            }
            Op::Custom { jac, n_in } => {
                let n_out = out.numel();
                let mut dx = vec![0.0; *n_in];
                for (o, &go) in g.iter().enumerate().take(n_out) {
                    if go == 0.0 {
                        continue;
                    }
                    let row = &jac[o * n_in..(o + 1) * n_in];
                    for (d, j) in dx.iter_mut().zip(row) {
                        *d += go * j;
                    }
                }
                let mut res = Vec::with_capacity(ins.len());
                let mut off = 0;
                for &input in ins {
                    let len = self.nodes[input].value.numel();
                    res.push((input, dx[off..off + len].to_vec()));
                    off += len;
                }
                res
            }
        }
    }

    /// `(param id, gradient)` for every parameter leaf that received one.
    pub fn param_grads(&self) -> impl Iterator<Item = (usize, &[f64])> + '_ {
        self.nodes.iter().enumerate().filter_map(|(i, n)| {
            let id = n.param?;
            let g = self.grads.get(i)?.as_deref()?;
            Some((id, g))
        })
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_constants_is_uniform() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![0.0; 4]));
        let y = t.softmax(x, 0).unwrap();
        assert_eq!(t.value(y).data(), &[0.25; 4]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::scalar(0.0));
        let y = t.sigmoid(x);
        assert_eq!(t.value(y).item(), 0.5);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, -2.0, 3.0, 0.5, 7.0]), true);
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0; 5]);
        // accumulation across calls
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0; 5]);
        t.zero_grad();
        assert!(t.grad(x).is_none());
    }

    #[test]
    fn l2_of_self_difference_has_zero_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![0.3, -1.0, 2.0]), true);
        let d = t.sub(x, x).unwrap();
        let l = t.l2(d);
        t.backward(l).unwrap();
        assert!(t.grad(x).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let y = t.scale(x, 2.0);
        assert!(matches!(t.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(vec![2, 3]));
        let b = t.constant(Tensor::zeros(vec![2, 2]));
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
        assert!(t.add(a, b).is_err());
    }

    #[test]
    fn domain_errors() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![1.0, 0.0]));
        assert!(matches!(t.log(x), Err(Error::Domain(_))));
        let y = t.constant(Tensor::vector(vec![1000.0]));
        assert!(matches!(t.exp(y), Err(Error::Domain(_))));
    }

    #[test]
    fn apply_dispatches_tags() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::new(vec![2, 3], (0..6).map(f64::from).collect()).unwrap());
        let tr = t.apply(OpKind::Transpose, &[a]).unwrap();
        assert_eq!(t.shape(tr), &[3, 2]);
        let r = t.apply(OpKind::Reshape { shape: vec![6] }, &[a]).unwrap();
        assert_eq!(t.shape(r), &[6]);
        let s = t.apply(OpKind::Slice { axis: 1, start: 1, end: 3 }, &[a]).unwrap();
        assert_eq!(t.value(s).data(), &[1.0, 2.0, 4.0, 5.0]);
        let c = t.apply(OpKind::Concat { axis: 0 }, &[a, a]).unwrap();
        assert_eq!(t.shape(c), &[4, 3]);
        assert!(t.apply(OpKind::MatMul, &[a]).is_err());
    }

    #[test]
    fn no_grad_tape_matches_forward_values() {
        let build = |t: &mut Tape| {
            let x = t.leaf(Tensor::vector(vec![0.2, -0.4, 1.5]), true);
            let g = t.gelu(x);
            let s = t.softmax(g, 0).unwrap();
            t.value(s).clone()
        };
        let mut a = Tape::new();
        let mut b = Tape::no_grad();
        assert_eq!(build(&mut a), build(&mut b));
    }
}
