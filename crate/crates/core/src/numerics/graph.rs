//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the tape is topologically
//! sorted by construction and `backward` is a single reverse sweep. A graph
//! lives for one step; build a fresh one (or call [`Graph::reset`]) per step.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use super::tensor::{gemm_nt, gemm_tn, Precision, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation whose forward pass is computed outside the graph.
pub trait CustomOp: fmt::Debug {
    fn name(&self) -> &'static str;

    /// Vector-Jacobian products, one per input (`None` for no contribution).
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
    ) -> Result<Vec<Option<Tensor>>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Exp,
    Log,
    Sigmoid,
    Silu,
    Softplus,
    Gelu,
    Tanh,
    /// `(e^z - 1) / z`, with the removable singularity at zero filled in.
    Expm1Ratio,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Unary(Var, Unary),
    Sum(Var),
    SumRows(Var),
    Softmax(Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Transpose(Var),
    CumsumRows(Var),
    CausalConv { x: Var, w: Var, b: Var },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Tensor, count: usize },
    RmsNorm { x: Var, w: Var, inv_rms: Vec<f64> },
    GatherRows(Var, Vec<usize>),
    Patchify { src: Var, geom: PatchGeometry },
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

/// Non-overlapping patch extraction over an `h × w` grid of `c`-channel rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGeometry {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub ph: usize,
    pub pw: usize,
}

impl PatchGeometry {
    pub fn out_h(&self) -> usize {
        self.h / self.ph
    }
    pub fn out_w(&self) -> usize {
        self.w / self.pw
    }
    pub fn patch_len(&self) -> usize {
        self.ph * self.pw * self.c
    }
    /// Source row for element `k` of the patch at output position `(i, j)`.
    fn source(&self, i: usize, j: usize, k: usize) -> (usize, usize) {
        let a = k / (self.pw * self.c);
        let b = (k / self.c) % self.pw;
        let ch = k % self.c;
        ((i * self.ph + a) * self.w + j * self.pw + b, ch)
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
    grad_enabled: bool,
    check_finite: bool,
    trainable: Option<BTreeSet<String>>,
    bindings: BTreeMap<String, Var>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.len())
            .field("precision", &self.precision)
            .field("grad_enabled", &self.grad_enabled)
            .finish()
    }
}

pub const RMS_EPS: f64 = 1e-5;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044715;

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

const EXPM1_RATIO_TAYLOR: f64 = 1e-6;

pub(crate) fn expm1_ratio(z: f64) -> f64 {
    if z.abs() < EXPM1_RATIO_TAYLOR {
        1.0 + z / 2.0 + z * z / 6.0
    } else {
        z.exp_m1() / z
    }
}

fn expm1_ratio_grad(z: f64) -> f64 {
    if z.abs() < EXPM1_RATIO_TAYLOR {
        0.5 + z / 3.0
    } else {
        (z * z.exp() - z.exp_m1()) / (z * z)
    }
}

impl Unary {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Silu => x * sigmoid(x),
            Unary::Softplus => softplus(x),
            Unary::Gelu => gelu(x),
            Unary::Tanh => x.tanh(),
            Unary::Expm1Ratio => expm1_ratio(x),
        }
    }

    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Silu => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
            Unary::Softplus => sigmoid(x),
            Unary::Gelu => gelu_grad(x),
            Unary::Tanh => 1.0 - y * y,
            Unary::Expm1Ratio => expm1_ratio_grad(x),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Sigmoid => "sigmoid",
            Unary::Silu => "silu",
            Unary::Softplus => "softplus",
            Unary::Gelu => "gelu",
            Unary::Tanh => "tanh",
            Unary::Expm1Ratio => "expm1_ratio",
        }
    }
}

/// Matrix view used by the broadcasting elementwise ops.
fn as_matrix(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (1, *n),
        [m, n] => (*m, *n),
        s => (s[..s.len() - 1].iter().product(), s[s.len() - 1]),
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b {
        return Ok(a.to_vec());
    }
    let (am, an) = as_matrix(a);
    let (bm, bn) = as_matrix(b);
    let m = if am == bm || bm == 1 {
        am
    } else if am == 1 {
        bm
    } else {
        return Err(Error::shape("broadcast", a, b));
    };
    let n = if an == bn || bn == 1 {
        an
    } else if an == 1 {
        bn
    } else {
        return Err(Error::shape("broadcast", a, b));
    };
    if a.len() > 2 || b.len() > 2 {
        return Err(Error::shape("broadcast", a, b));
    }
    Ok(vec![m, n])
}

fn broadcast_apply(a: &Tensor, b: &Tensor, out_shape: &[usize], f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(out_shape, data).expect("shape");
    }
    let (m, n) = as_matrix(out_shape);
    let (am, an) = as_matrix(a.shape());
    let (bm, bn) = as_matrix(b.shape());
    let (ad, bd) = (a.data(), b.data());
    let mut data = Vec::with_capacity(m * n);
    for i in 0..m {
        let ai = if am == 1 { 0 } else { i };
        let bi = if bm == 1 { 0 } else { i };
        for j in 0..n {
            let x = ad[ai * an + if an == 1 { 0 } else { j }];
            let y = bd[bi * bn + if bn == 1 { 0 } else { j }];
            data.push(f(x, y));
        }
    }
    Tensor::new(out_shape, data).expect("shape")
}

/// Sum a gradient of `out_shape` back down to an operand's (broadcast) shape.
fn reduce_to(grad: &Tensor, target: &[usize]) -> Tensor {
    if grad.shape() == target {
        return grad.clone();
    }
    let (m, n) = as_matrix(grad.shape());
    let (tm, tn) = as_matrix(target);
    let mut out = vec![0.0; tm * tn];
    let g = grad.data();
    for i in 0..m {
        let ti = if tm == 1 { 0 } else { i };
        for j in 0..n {
            let tj = if tn == 1 { 0 } else { j };
            out[ti * tn + tj] += g[i * n + j];
        }
    }
    Tensor::new(target, out).expect("shape")
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            precision: Precision::F64,
            grad_enabled: true,
            check_finite: false,
            trainable: None,
            bindings: BTreeMap::new(),
        }
    }

    /// A graph that records values only; nothing is differentiable.
    pub fn inference() -> Self {
        Graph {
            grad_enabled: false,
            ..Graph::new()
        }
    }

    pub fn with_precision(mut self, p: Precision) -> Self {
        self.precision = p;
        self
    }

    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    /// Restrict which named parameters receive gradients.
    pub fn with_trainable(mut self, names: BTreeSet<String>) -> Self {
        self.trainable = Some(names);
        self
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    /// Swap the working precision, returning the previous one.
    pub fn set_precision(&mut self, p: Precision) -> Precision {
        std::mem::replace(&mut self.precision, p)
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Drop every recorded node and parameter binding.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.bindings.clear();
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

    fn push(&mut self, mut value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        value.round_to(self.precision);
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = requires_grad && self.grad_enabled;
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        let rg = requires_grad && self.grad_enabled;
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: rg,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    /// Bind a named parameter, reusing the node if it was already bound.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Var {
        if let Some(&v) = self.bindings.get(name) {
            return v;
        }
        let rg = self.trainable.as_ref().is_none_or(|s| s.contains(name));
        let v = self.leaf(t.clone(), rg);
        self.bindings.insert(name.to_string(), v);
        v
    }

    pub fn bindings(&self) -> &BTreeMap<String, Var> {
        &self.bindings
    }

    // ---- operations -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let out = ta.matmul(tb)?;
        let rg = self.any_grad(&[a, b]);
        self.push(out, Op::MatMul(a, b), rg, "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = broadcast_shape(self.shape(a), self.shape(b))?;
        let out = broadcast_apply(self.value(a), self.value(b), &shape, |x, y| x + y);
        let rg = self.any_grad(&[a, b]);
        self.push(out, Op::Add(a, b), rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = broadcast_shape(self.shape(a), self.shape(b))?;
        let out = broadcast_apply(self.value(a), self.value(b), &shape, |x, y| x - y);
        let rg = self.any_grad(&[a, b]);
        self.push(out, Op::Sub(a, b), rg, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = broadcast_shape(self.shape(a), self.shape(b))?;
        let out = broadcast_apply(self.value(a), self.value(b), &shape, |x, y| x * y);
        let rg = self.any_grad(&[a, b]);
        self.push(out, Op::Mul(a, b), rg, "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).scale(c);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Scale(a, c), rg, "scale")
    }

    pub fn unary(&mut self, a: Var, f: Unary) -> Result<Var> {
        let out = self.value(a).map(|x| f.eval(x));
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Unary(a, f), rg, f.name())
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Exp)
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Log)
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sigmoid)
    }
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Silu)
    }
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Softplus)
    }
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Gelu)
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Tanh)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Sum(a), rg, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Column sums: `[m×n] -> [1×n]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = t.dims2()?;
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, v) in out.iter_mut().zip(t.row(i)) {
                *o += v;
            }
        }
        let rg = self.any_grad(&[a]);
        self.push(Tensor::new(&[1, n], out)?, Op::SumRows(a), rg, "sum_rows")
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = t.dims2()?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            softmax_row(t.row(i), &mut out[i * n..(i + 1) * n]);
        }
        let out = Tensor::new(t.shape(), out)?;
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Softmax(a), rg, "softmax")
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = t.dims2()?;
        if t.rank() != 2 || start + len > n {
            return Err(Error::shape("slice_cols", t.shape(), &[start, len]));
        }
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&t.row(i)[start..start + len]);
        }
        let rg = self.any_grad(&[a]);
        self.push(Tensor::new(&[m, len], out)?, Op::SliceCols(a, start), rg, "slice_cols")
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = t.dims2()?;
        if t.rank() != 2 || start + len > m {
            return Err(Error::shape("slice_rows", t.shape(), &[start, len]));
        }
        let out = t.data()[start * n..(start + len) * n].to_vec();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::new(&[len, n], out)?, Op::SliceRows(a, start), rg, "slice_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.value(parts[0]).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.value(p).dims2()?;
            if pm != m || self.value(p).rank() != 2 {
                return Err(Error::shape("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = self.any_grad(parts);
        self.push(Tensor::new(&[m, n], out)?, Op::ConcatCols(parts.to_vec()), rg, "concat_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.value(parts[0]).dims2()?.1;
        let mut m = 0;
        let mut out = Vec::new();
        for &p in parts {
            let t = self.value(p);
            let (pm, pn) = t.dims2()?;
            if pn != n {
                return Err(Error::shape("concat_rows", self.shape(parts[0]), t.shape()));
            }
            m += pm;
            out.extend_from_slice(t.data());
        }
        let rg = self.any_grad(parts);
        self.push(Tensor::new(&[m, n], out)?, Op::ConcatRows(parts.to_vec()), rg, "concat_rows")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Reshape(a), rg, "reshape")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Transpose(a), rg, "transpose")
    }

    /// Inclusive cumulative sum down the rows.
    pub fn cumsum_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = t.dims2()?;
        let mut out = t.data().to_vec();
        for i in 1..m {
            for j in 0..n {
                out[i * n + j] += out[(i - 1) * n + j];
            }
        }
        let out = Tensor::new(t.shape(), out)?;
        let rg = self.any_grad(&[a]);
        self.push(out, Op::CumsumRows(a), rg, "cumsum_rows")
    }

    /// Depthwise causal convolution of `x[T×C]` with kernel `w[K×C]` and bias `b[C]`.
    ///
    /// `y[t,c] = b[c] + Σ_k w[k,c]·x[t+k-(K-1), c]`, positions before 0 read as zero.
    pub fn causal_conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (t_len, c) = tx.dims2()?;
        let (k, wc) = tw.dims2()?;
        if wc != c || tb.len() != c {
            return Err(Error::shape("causal_conv1d", tx.shape(), tw.shape()));
        }
        let (xd, wd, bd) = (tx.data(), tw.data(), tb.data());
        let mut out = vec![0.0; t_len * c];
        for t in 0..t_len {
            let orow = &mut out[t * c..(t + 1) * c];
            orow.copy_from_slice(bd);
            for kk in 0..k {
                let src = t as isize + kk as isize - (k as isize - 1);
                if src < 0 {
                    continue;
                }
                let xrow = &xd[src as usize * c..(src as usize + 1) * c];
                let wrow = &wd[kk * c..(kk + 1) * c];
                for ((o, xv), wv) in orow.iter_mut().zip(xrow).zip(wrow) {
                    *o += xv * wv;
                }
            }
        }
        let rg = self.any_grad(&[x, w, b]);
        self.push(Tensor::new(&[t_len, c], out)?, Op::CausalConv { x, w, b }, rg, "causal_conv1d")
    }

    /// Mean next-token cross-entropy over rows that carry a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let t = self.value(logits);
        let (m, n) = t.dims2()?;
        if targets.len() != m {
            return Err(Error::shape("cross_entropy", t.shape(), &[targets.len()]));
        }
        let count = targets.iter().filter(|x| x.is_some()).count();
        if count == 0 {
            return Err(Error::contract("cross_entropy needs at least one target"));
        }
        let mut probs = vec![0.0; m * n];
        let mut total = 0.0;
        for (i, tgt) in targets.iter().enumerate() {
            let Some(tgt) = *tgt else { continue };
            if tgt >= n {
                return Err(Error::contract(format!("target id {tgt} outside vocab of {n}")));
            }
            let row = t.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[tgt];
            softmax_row(row, &mut probs[i * n..(i + 1) * n]);
        }
        let probs = Tensor::new(&[m, n], probs)?;
        let rg = self.any_grad(&[logits]);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
            count,
        };
        self.push(Tensor::scalar(total / count as f64), op, rg, "cross_entropy")
    }

    /// Row-wise RMS normalization with learned gain `w[D]`.
    pub fn rms_norm(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (m, n) = tx.dims2()?;
        if tw.len() != n {
            return Err(Error::shape("rms_norm", tx.shape(), tw.shape()));
        }
        let mut out = vec![0.0; m * n];
        let mut inv = Vec::with_capacity(m);
        for i in 0..m {
            let row = tx.row(i);
            let ms = row.iter().map(|v| v * v).sum::<f64>() / n as f64;
            let r = 1.0 / (ms + RMS_EPS).sqrt();
            inv.push(r);
            for j in 0..n {
                out[i * n + j] = row[j] * r * tw.data()[j];
            }
        }
        let rg = self.any_grad(&[x, w]);
        let out = Tensor::new(tx.shape(), out)?;
        self.push(out, Op::RmsNorm { x, w, inv_rms: inv }, rg, "rms_norm")
    }

    /// Select rows of a matrix (embedding lookup, permutations).
    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(src);
        let (m, n) = t.dims2()?;
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= m {
                return Err(Error::contract(format!("row index {i} out of range for {m} rows")));
            }
            out.extend_from_slice(t.row(i));
        }
        let rg = self.any_grad(&[src]);
        self.push(Tensor::new(&[idx.len(), n], out)?, Op::GatherRows(src, idx.to_vec()), rg, "gather_rows")
    }

    /// Extract non-overlapping `ph × pw` patches from an `h × w` grid stored as `[h·w × c]`.
    pub fn patchify(&mut self, src: Var, geom: PatchGeometry) -> Result<Var> {
        let t = self.value(src);
        let (m, c) = t.dims2()?;
        if m != geom.h * geom.w || c != geom.c || geom.h % geom.ph != 0 || geom.w % geom.pw != 0 {
            return Err(Error::shape(
                "patchify",
                t.shape(),
                &[geom.h, geom.w, geom.c, geom.ph, geom.pw],
            ));
        }
        let (oh, ow, pl) = (geom.out_h(), geom.out_w(), geom.patch_len());
        let mut out = vec![0.0; oh * ow * pl];
        let d = t.data();
        for i in 0..oh {
            for j in 0..ow {
                let base = (i * ow + j) * pl;
                for a in 0..geom.ph {
                    for b in 0..geom.pw {
                        let r = (i * geom.ph + a) * geom.w + j * geom.pw + b;
                        let k = (a * geom.pw + b) * c;
                        out[base + k..base + k + c].copy_from_slice(&d[r * c..(r + 1) * c]);
                    }
                }
            }
        }
        let rg = self.any_grad(&[src]);
        self.push(Tensor::new(&[oh * ow, pl], out)?, Op::Patchify { src, geom }, rg, "patchify")
    }

    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Result<Var> {
        let rg = self.any_grad(inputs);
        let name = op.name();
        self.push(output, Op::Custom(inputs.to_vec(), op), rg, name)
    }

    // ---- reverse sweep ----------------------------------------------------

    /// Gradients of the scalar `loss` with respect to every node requiring them.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients {
                grads,
                bindings: self.bindings.clone(),
            });
        }
        grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            bindings: self.bindings.clone(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        let g = if g.shape() != self.shape(v) {
            g.reshape(self.shape(v))?
        } else {
            g
        };
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims2()?;
                let n = tb.dims2()?.1;
                if self.requires_grad(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm_nt(m, n, k, g.data(), tb.data(), &mut ga);
                    self.accumulate(grads, *a, Tensor::new(&[m, k], ga)?)?;
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm_tn(m, k, n, ta.data(), g.data(), &mut gb);
                    self.accumulate(grads, *b, Tensor::new(&[k, n], gb)?)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, reduce_to(g, self.shape(*a)))?;
                self.accumulate(grads, *b, reduce_to(g, self.shape(*b)))?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, reduce_to(g, self.shape(*a)))?;
                self.accumulate(grads, *b, reduce_to(&g.scale(-1.0), self.shape(*b)))?;
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let full = broadcast_apply(g, tb, g.shape(), |x, y| x * y);
                    self.accumulate(grads, *a, reduce_to(&full, ta.shape()))?;
                }
                if self.requires_grad(*b) {
                    let full = broadcast_apply(g, ta, g.shape(), |x, y| x * y);
                    self.accumulate(grads, *b, reduce_to(&full, tb.shape()))?;
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.scale(*c))?,
            Op::Unary(a, f) => {
                let x = self.value(*a);
                let data = x
                    .data()
                    .iter()
                    .zip(out.data())
                    .zip(g.data())
                    .map(|((&xv, &yv), &gv)| gv * f.derivative(xv, yv))
                    .collect();
                self.accumulate(grads, *a, Tensor::new(x.shape(), data)?)?;
            }
            Op::Sum(a) => {
                let s = self.shape(*a);
                self.accumulate(grads, *a, Tensor::full(s, g.item()))?;
            }
            Op::SumRows(a) => {
                let s = self.shape(*a).to_vec();
                let (m, n) = as_matrix(&s);
                let mut data = Vec::with_capacity(m * n);
                for _ in 0..m {
                    data.extend_from_slice(g.data());
                }
                self.accumulate(grads, *a, Tensor::new(&s, data)?)?;
            }
            Op::Softmax(a) => {
                let (m, n) = out.dims2()?;
                let mut data = vec![0.0; m * n];
                for i in 0..m {
                    let y = out.row(i);
                    let gr = g.row(i);
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        data[i * n + j] = y[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(out.shape(), data)?)?;
            }
            Op::SliceCols(a, start) => {
                let (m, n) = self.value(*a).dims2()?;
                let len = out.dims2()?.1;
                let mut data = vec![0.0; m * n];
                for i in 0..m {
                    data[i * n + start..i * n + start + len].copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *a, Tensor::new(&[m, n], data)?)?;
            }
            Op::SliceRows(a, start) => {
                let (m, n) = self.value(*a).dims2()?;
                let mut data = vec![0.0; m * n];
                data[start * n..start * n + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, *a, Tensor::new(&[m, n], data)?)?;
            }
            Op::ConcatCols(parts) => {
                let (m, n) = out.dims2()?;
                let mut off = 0;
                for &p in parts {
                    let pn = self.value(p).dims2()?.1;
                    if self.requires_grad(p) {
                        let mut data = Vec::with_capacity(m * pn);
                        for i in 0..m {
                            data.extend_from_slice(&g.data()[i * n + off..i * n + off + pn]);
                        }
                        self.accumulate(grads, p, Tensor::new(&[m, pn], data)?)?;
                    }
                    off += pn;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.requires_grad(p) {
                        let data = g.data()[off..off + len].to_vec();
                        self.accumulate(grads, p, Tensor::new(self.shape(p), data)?)?;
                    }
                    off += len;
                }
            }
            Op::Reshape(a) => {
                self.accumulate(grads, *a, g.reshape(self.shape(*a))?)?;
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()?)?,
            Op::CumsumRows(a) => {
                let (m, n) = g.dims2()?;
                let mut data = g.data().to_vec();
                for i in (0..m.saturating_sub(1)).rev() {
                    for j in 0..n {
                        data[i * n + j] += data[(i + 1) * n + j];
                    }
                }
                self.accumulate(grads, *a, Tensor::new(g.shape(), data)?)?;
            }
            Op::CausalConv { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (t_len, c) = tx.dims2()?;
                let k = tw.dims2()?.0;
                let (xd, wd, gd) = (tx.data(), tw.data(), g.data());
                let mut gx = vec![0.0; t_len * c];
                let mut gw = vec![0.0; k * c];
                let mut gb = vec![0.0; c];
                for t in 0..t_len {
                    let grow = &gd[t * c..(t + 1) * c];
                    for (acc, gv) in gb.iter_mut().zip(grow) {
                        *acc += gv;
                    }
                    for kk in 0..k {
                        let src = t as isize + kk as isize - (k as isize - 1);
                        if src < 0 {
                            continue;
                        }
                        let s = src as usize;
                        for ch in 0..c {
                            gx[s * c + ch] += wd[kk * c + ch] * grow[ch];
                            gw[kk * c + ch] += xd[s * c + ch] * grow[ch];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(&[t_len, c], gx)?)?;
                self.accumulate(grads, *w, Tensor::new(tw.shape(), gw)?)?;
                let bshape = self.shape(*b).to_vec();
                self.accumulate(grads, *b, Tensor::new(&bshape, gb)?)?;
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let (m, n) = probs.dims2()?;
                let scale = g.item() / *count as f64;
                let mut data = vec![0.0; m * n];
                for (i, tgt) in targets.iter().enumerate() {
                    let Some(tgt) = *tgt else { continue };
                    for j in 0..n {
                        data[i * n + j] = probs.data()[i * n + j] * scale;
                    }
                    data[i * n + tgt] -= scale;
                }
                self.accumulate(grads, *logits, Tensor::new(&[m, n], data)?)?;
            }
            Op::RmsNorm { x, w, inv_rms } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (m, n) = tx.dims2()?;
                let wd = tw.data();
                let mut gx = vec![0.0; m * n];
                let mut gw = vec![0.0; n];
                for i in 0..m {
                    let row = tx.row(i);
                    let gr = g.row(i);
                    let r = inv_rms[i];
                    let dot: f64 = (0..n).map(|j| gr[j] * wd[j] * row[j]).sum();
                    for j in 0..n {
                        gx[i * n + j] = r * gr[j] * wd[j] - r * r * r * row[j] * dot / n as f64;
                        gw[j] += gr[j] * row[j] * r;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(tx.shape(), gx)?)?;
                self.accumulate(grads, *w, Tensor::new(tw.shape(), gw)?)?;
            }
            Op::GatherRows(src, idx) => {
                let t = self.value(*src);
                let (m, n) = t.dims2()?;
                let mut data = vec![0.0; m * n];
                for (r, &i) in idx.iter().enumerate() {
                    for (d, gv) in data[i * n..(i + 1) * n].iter_mut().zip(g.row(r)) {
                        *d += gv;
                    }
                }
                self.accumulate(grads, *src, Tensor::new(t.shape(), data)?)?;
            }
            Op::Patchify { src, geom } => {
                let t = self.value(*src);
                let c = geom.c;
                let mut data = vec![0.0; t.len()];
                let (oh, ow, pl) = (geom.out_h(), geom.out_w(), geom.patch_len());
                for i in 0..oh {
                    for j in 0..ow {
                        for k in (0..pl).step_by(c) {
                            let (r, _) = geom.source(i, j, k);
                            let base = (i * ow + j) * pl + k;
                            for ch in 0..c {
                                data[r * c + ch] += g.data()[base + ch];
                            }
                        }
                    }
                }
                self.accumulate(grads, *src, Tensor::new(t.shape(), data)?)?;
            }
            Op::Custom(inputs, op) => {
                let vals: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let gs = op.backward(&vals, out, g)?;
                for (v, gi) in inputs.iter().zip(gs) {
                    if let Some(gi) = gi {
                        self.accumulate(grads, *v, gi)?;
                    }
                }
            }
        }
        Ok(())
    }
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

/// Result of a reverse sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    bindings: BTreeMap<String, Var>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` when the loss does not depend on it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    /// Gradients of every bound parameter that received one, by name.
    pub fn by_name(&self) -> BTreeMap<String, Tensor> {
        self.bindings
            .iter()
            .filter_map(|(k, v)| self.get(*v).map(|g| (k.clone(), g.clone())))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_form_gradient() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn independent_leaf_has_no_gradient() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
        let u = g.leaf(Tensor::from_vec(vec![3.0]), true);
        let loss = g.sum(w).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get_or_zeros(u, &[1]).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_on_non_scalar_is_contract_error() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
        let y = g.exp(w).unwrap();
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn gradient_accumulates_across_uses() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::scalar(3.0), true);
        let a = g.scale(w, 2.0).unwrap();
        let b = g.add(a, w).unwrap();
        let grads = g.backward(b).unwrap();
        assert_eq!(grads.get(w).unwrap().item(), 3.0);
    }

    #[test]
    fn softplus_values() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((softplus(100.0) - 100.0).abs() < 1e-12);
        assert!(softplus(1000.0).is_finite());
        // ln(1 + e^-3) evaluated at 50 digits.
        assert!((softplus(-3.0) - 0.048_587_351_573_742_06).abs() < 1e-12);
    }

    #[test]
    fn expm1_ratio_is_continuous_at_zero() {
        assert_eq!(expm1_ratio(0.0), 1.0);
        for z in [0.99e-6f64, -0.99e-6] {
            let direct = z.exp_m1() / z;
            assert!((expm1_ratio(z) - direct).abs() < 1e-12);
            let direct_grad = (z * z.exp() - z.exp_m1()) / (z * z);
            assert!((expm1_ratio_grad(z) - direct_grad).abs() < 1e-6);
        }
    }

    #[test]
    fn nan_detection_in_checked_mode() {
        let mut g = Graph::new().with_finite_checks(true);
        let x = g.leaf(Tensor::from_vec(vec![-1.0]), true);
        assert!(matches!(g.log(x), Err(Error::NonFinite { op: "log" })));
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![-1.0]), true);
        assert!(g.log(x).is_ok());
    }

    #[test]
    fn f32_mode_rounds_values() {
        let mut g = Graph::new().with_precision(Precision::F32);
        let x = g.leaf(Tensor::from_vec(vec![0.1]), false);
        let y = g.scale(x, 1.0).unwrap();
        assert_eq!(g.value(y).item(), 0.1f32 as f64);
    }

    #[test]
    fn inference_graph_records_no_gradients() {
        let mut g = Graph::inference();
        let w = g.param("w", &Tensor::from_vec(vec![1.0]));
        let y = g.exp(w).unwrap();
        let s = g.sum(y).unwrap();
        assert!(!g.requires_grad(s));
        assert!(g.backward(s).unwrap().by_name().is_empty());
    }

    #[test]
    fn patchify_layout_is_time_major() {
        // 4×2 grid, one channel, 2×2 patches -> 2 patches of 4.
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(&[8, 1], (0..8).map(f64::from).collect()).unwrap(), false);
        let geom = PatchGeometry { h: 4, w: 2, c: 1, ph: 2, pw: 2 };
        let p = g.patchify(x, geom).unwrap();
        assert_eq!(g.value(p).data(), &[0., 1., 2., 3., 4., 5., 6., 7.]);
        assert_eq!(geom.source(1, 0, 3), (7, 0));
    }
}
