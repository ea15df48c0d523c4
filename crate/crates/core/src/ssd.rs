//! Selective state-space scan with Mamba-2's scalar-times-identity heads.
//!
//! Each head `h` owns a `P × N` state updated as
//!
//! ```text
//! h_t = exp(Δ_t a) · h_{t-1} + b̄_t · x_t ⊗ B_t
//! y_t = h_t · C_t
//! ```
//!
//! where `B_t`, `C_t` are shared by the heads of a parameter group. Three
//! evaluation strategies are provided and agree to rounding: a sequential
//! recurrence, the full lower-triangular (semiseparable) operator, and a
//! chunked form that applies the operator inside chunks and carries the state
//! between them.
//!
//! Everything is expressed on a [`Graph`] so that all three modes are
//! differentiable. The recurrent mode is a fused op with a hand-written
//! adjoint; the other two are composed from primitives and differentiated by
//! the tape, which gives two independent gradient routes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{CustomOp, Graph, Precision, Tensor, Unary, Var};

/// How `b̄` is derived from `Δ`, `a` and `B`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Discretization {
    /// `b̄ = Δ·B`.
    #[default]
    Simplified,
    /// `b̄ = (Δa)⁻¹(exp(Δa) − 1)·Δ·B`.
    ExactZoh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ScanMode {
    Recurrent,
    Convolutional,
    Chunked { chunk_len: usize },
}

impl Default for ScanMode {
    fn default() -> Self {
        ScanMode::Chunked { chunk_len: 16 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SsdDims {
    pub heads: usize,
    pub head_dim: usize,
    pub groups: usize,
    pub state: usize,
}

impl SsdDims {
    pub fn group_of(&self, head: usize) -> usize {
        head * self.groups / self.heads
    }

    fn check(&self) -> Result<()> {
        if self.heads == 0 || self.head_dim == 0 || self.groups == 0 || self.state == 0 {
            return Err(Error::contract(format!("ssd dims must be positive: {self:?}")));
        }
        if self.heads % self.groups != 0 {
            return Err(Error::contract(format!(
                "heads ({}) must be a multiple of groups ({})",
                self.heads, self.groups
            )));
        }
        Ok(())
    }

    pub fn state_len(&self) -> usize {
        self.heads * self.head_dim * self.state
    }
}

/// Per-head hidden state `H × P × N` plus the number of tokens consumed.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanState {
    pub h: Tensor,
    pub step_index: usize,
}

impl ScanState {
    pub fn zeros(dims: &SsdDims) -> Self {
        ScanState {
            h: Tensor::zeros(&[dims.heads, dims.head_dim, dims.state]),
            step_index: 0,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.h.data().iter().all(|&v| v == 0.0)
    }

    fn check(&self, dims: &SsdDims) -> Result<()> {
        let want = [dims.heads, dims.head_dim, dims.state];
        if self.h.shape() != want {
            return Err(Error::shape("scan state", self.h.shape(), &want));
        }
        Ok(())
    }
}

/// Selective parameters for one sequence, in their natural layouts.
#[derive(Clone, Debug)]
pub struct SelectiveParams {
    /// `T × H`, strictly positive.
    pub delta: Tensor,
    /// `H`, the continuous-time per-head scalar.
    pub a: Tensor,
    /// `T × G × N`.
    pub b: Tensor,
    /// `T × G × N`.
    pub c: Tensor,
    /// `T × H × P`.
    pub x: Tensor,
}

impl SelectiveParams {
    pub fn dims(&self) -> Result<(usize, SsdDims)> {
        let [t, h, p] = self.x.shape() else {
            return Err(Error::shape("x", self.x.shape(), &[0, 0, 0]));
        };
        let [tb, g, n] = self.b.shape() else {
            return Err(Error::shape("B", self.b.shape(), &[*t, 0, 0]));
        };
        let dims = SsdDims {
            heads: *h,
            head_dim: *p,
            groups: *g,
            state: *n,
        };
        dims.check()?;
        if *tb != *t || self.c.shape() != self.b.shape() {
            return Err(Error::shape("B/C", self.b.shape(), self.c.shape()));
        }
        if self.delta.shape() != [*t, *h] {
            return Err(Error::shape("delta", self.delta.shape(), &[*t, *h]));
        }
        if self.a.len() != *h {
            return Err(Error::shape("a", self.a.shape(), &[*h]));
        }
        if let Some(bad) = self.delta.data().iter().find(|&&d| !(d > 0.0)) {
            return Err(Error::contract(format!("delta must be > 0, found {bad}")));
        }
        Ok((*t, dims))
    }

    /// Random valid parameters: `Δ = softplus(·) > 0`, `a = −exp(·) < 0`.
    pub fn random<R: Rng + ?Sized>(t: usize, dims: SsdDims, rng: &mut R) -> Self {
        let SsdDims {
            heads,
            head_dim,
            groups,
            state,
        } = dims;
        let delta = Tensor::randn(&[t, heads], 1.0, rng).map(|v| crate::numerics::softplus(v - 1.0));
        let a = Tensor::uniform(&[heads], -1.5, 1.0, rng).map(|v| -v.exp());
        SelectiveParams {
            delta,
            a,
            b: Tensor::randn(&[t, groups, state], 1.0, rng),
            c: Tensor::randn(&[t, groups, state], 1.0, rng),
            x: Tensor::randn(&[t, heads, head_dim], 1.0, rng),
        }
    }
}

/// Discretized `(ā, b̄)`: `ā` is `T × H`, `b̄` is `T × H × N`.
pub fn discretize_zoh(
    delta: &Tensor,
    a: &Tensor,
    b: &Tensor,
    heads: usize,
    disc: Discretization,
) -> Result<(Tensor, Tensor)> {
    let (t, h) = delta.dims2()?;
    if h != heads || a.len() != heads {
        return Err(Error::shape("discretize_zoh", delta.shape(), a.shape()));
    }
    let (groups, n) = match b.shape() {
        [tb, g, n] if *tb == t => (*g, *n),
        s => return Err(Error::shape("discretize_zoh", s, &[t, 0, 0])),
    };
    if groups == 0 || heads % groups != 0 {
        return Err(Error::contract("heads must be a multiple of groups"));
    }
    let mut g = Graph::inference();
    let dv = g.constant(delta.clone());
    let av = g.constant(a.reshape(&[1, heads])?);
    let (ld, bs) = discretize(&mut g, dv, av, disc)?;
    let a_bar = g.value(ld).map(f64::exp);
    let bs = g.value(bs);
    let mut b_bar = vec![0.0; t * heads * n];
    for ti in 0..t {
        for hi in 0..heads {
            let gi = hi * groups / heads;
            for ni in 0..n {
                b_bar[(ti * heads + hi) * n + ni] = bs.at2(ti, hi) * b.data()[(ti * groups + gi) * n + ni];
            }
        }
    }
    Ok((a_bar, Tensor::new(&[t, heads, n], b_bar)?))
}

/// Graph form of the discretization: returns `(log ā, b̄ scale)`, both `T × H`.
///
/// `delta` is `T × H`, `a` is `1 × H`.
pub fn discretize(g: &mut Graph, delta: Var, a: Var, disc: Discretization) -> Result<(Var, Var)> {
    let log_decay = g.mul(delta, a)?;
    let scale = match disc {
        Discretization::Simplified => delta,
        Discretization::ExactZoh => {
            let phi = g.unary(log_decay, Unary::Expm1Ratio)?;
            g.mul(phi, delta)?
        }
    };
    Ok((log_decay, scale))
}

/// Graph inputs to a scan. `x` is `T × (H·P)`, `log_decay`/`b_scale` are `T × H`, `b`/`c` are `T × (G·N)`.
#[derive(Clone, Copy, Debug)]
pub struct ScanInputs {
    pub x: Var,
    pub log_decay: Var,
    pub b_scale: Var,
    pub b: Var,
    pub c: Var,
}

#[derive(Debug)]
pub struct ScanOutput {
    /// `T × (H·P)`.
    pub y: Var,
    pub final_state: ScanState,
    /// `T + 1` states (initial first), only from a traced recurrent scan.
    pub states: Option<Vec<Tensor>>,
}

fn check_inputs(g: &Graph, inp: &ScanInputs, dims: &SsdDims) -> Result<usize> {
    dims.check()?;
    let t = g.shape(inp.x)[0];
    let want = [
        (inp.x, dims.heads * dims.head_dim),
        (inp.log_decay, dims.heads),
        (inp.b_scale, dims.heads),
        (inp.b, dims.groups * dims.state),
        (inp.c, dims.groups * dims.state),
    ];
    for (v, cols) in want {
        if g.shape(v) != [t, cols] {
            return Err(Error::shape("scan inputs", g.shape(v), &[t, cols]));
        }
    }
    Ok(t)
}

/// Run the scan in the requested mode.
pub fn scan(
    g: &mut Graph,
    inp: ScanInputs,
    dims: &SsdDims,
    mode: ScanMode,
    initial: Option<&ScanState>,
    trace: bool,
) -> Result<ScanOutput> {
    if trace && mode != ScanMode::Recurrent {
        return Err(Error::contract("state tracing requires the recurrent scan mode"));
    }
    match mode {
        ScanMode::Recurrent => scan_recurrent_graph(g, inp, dims, initial, trace),
        ScanMode::Convolutional => {
            if initial.is_some_and(|s| !s.is_zero()) {
                return Err(Error::contract("convolutional mode assumes a zero initial state"));
            }
            scan_convolutional_graph(g, inp, dims)
        }
        ScanMode::Chunked { chunk_len } => scan_chunked_graph(g, inp, dims, chunk_len, initial),
    }
}

// ---- recurrent ------------------------------------------------------------

#[derive(Debug)]
struct RecurrentScan {
    dims: SsdDims,
    /// `(T+1) · H·P·N`, state before each step followed by the final state.
    states: Vec<f64>,
}

fn recurrent_forward(
    dims: &SsdDims,
    t_len: usize,
    x: &[f64],
    ld: &[f64],
    bs: &[f64],
    b: &[f64],
    c: &[f64],
    h0: &[f64],
    mut keep: Option<&mut Vec<f64>>,
) -> (Vec<f64>, Vec<f64>) {
    let SsdDims {
        heads,
        head_dim: p_dim,
        groups,
        state: n_dim,
    } = *dims;
    let hp = heads * p_dim;
    let gn = groups * n_dim;
    let mut st = h0.to_vec();
    let mut y = vec![0.0; t_len * hp];
    if let Some(k) = keep.as_deref_mut() {
        k.extend_from_slice(&st);
    }
    for t in 0..t_len {
        let brow = &b[t * gn..(t + 1) * gn];
        let crow = &c[t * gn..(t + 1) * gn];
        for h in 0..heads {
            let decay = ld[t * heads + h].exp();
            let s = bs[t * heads + h];
            let g = dims.group_of(h);
            let bg = &brow[g * n_dim..(g + 1) * n_dim];
            let cg = &crow[g * n_dim..(g + 1) * n_dim];
            for p in 0..p_dim {
                let xv = s * x[t * hp + h * p_dim + p];
                let srow = &mut st[(h * p_dim + p) * n_dim..(h * p_dim + p + 1) * n_dim];
                let mut acc = 0.0;
                for ((sv, &bv), &cv) in srow.iter_mut().zip(bg).zip(cg) {
                    *sv = decay * *sv + xv * bv;
                    acc += *sv * cv;
                }
                y[t * hp + h * p_dim + p] = acc;
            }
        }
        if let Some(k) = keep.as_deref_mut() {
            k.extend_from_slice(&st);
        }
    }
    (y, st)
}

impl CustomOp for RecurrentScan {
    fn name(&self) -> &'static str {
        "scan_recurrent"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let SsdDims {
            heads,
            head_dim: p_dim,
            groups,
            state: n_dim,
        } = self.dims;
        let (x, ld, bs, b, c) = (inputs[0], inputs[1], inputs[2], inputs[3], inputs[4]);
        let t_len = x.shape()[0];
        let hp = heads * p_dim;
        let gn = groups * n_dim;
        let sl = self.dims.state_len();
        let (xd, ldd, bsd, bd, cd, gy) = (x.data(), ld.data(), bs.data(), b.data(), c.data(), grad.data());
        let mut gx = vec![0.0; t_len * hp];
        let mut gld = vec![0.0; t_len * heads];
        let mut gbs = vec![0.0; t_len * heads];
        let mut gb = vec![0.0; t_len * gn];
        let mut gc = vec![0.0; t_len * gn];
        // Adjoint of the state, carried backwards in time.
        let mut gh = vec![0.0; sl];
        for t in (0..t_len).rev() {
            let prev = &self.states[t * sl..(t + 1) * sl];
            let cur = &self.states[(t + 1) * sl..(t + 2) * sl];
            for h in 0..heads {
                let g = self.dims.group_of(h);
                let decay = ldd[t * heads + h].exp();
                let s = bsd[t * heads + h];
                let boff = t * gn + g * n_dim;
                let mut g_decay = 0.0;
                let mut g_scale = 0.0;
                for p in 0..p_dim {
                    let gyv = gy[t * hp + h * p_dim + p];
                    let xv = xd[t * hp + h * p_dim + p];
                    let base = (h * p_dim + p) * n_dim;
                    let mut gxv = 0.0;
                    for n in 0..n_dim {
                        let idx = base + n;
                        gc[boff + n] += gyv * cur[idx];
                        let ghv = gh[idx] + gyv * cd[boff + n];
                        g_decay += ghv * prev[idx];
                        let bv = bd[boff + n];
                        g_scale += ghv * xv * bv;
                        gxv += ghv * bv;
                        gb[boff + n] += s * ghv * xv;
                        gh[idx] = ghv * decay;
                    }
                    gx[t * hp + h * p_dim + p] = s * gxv;
                }
                gld[t * heads + h] = g_decay * decay;
                gbs[t * heads + h] = g_scale;
            }
        }
        Ok(vec![
            Some(Tensor::new(x.shape(), gx)?),
            Some(Tensor::new(ld.shape(), gld)?),
            Some(Tensor::new(bs.shape(), gbs)?),
            Some(Tensor::new(b.shape(), gb)?),
            Some(Tensor::new(c.shape(), gc)?),
        ])
    }
}

fn scan_recurrent_graph(
    g: &mut Graph,
    inp: ScanInputs,
    dims: &SsdDims,
    initial: Option<&ScanState>,
    trace: bool,
) -> Result<ScanOutput> {
    let t_len = check_inputs(g, &inp, dims)?;
    let zero;
    let initial = match initial {
        Some(s) => {
            s.check(dims)?;
            s
        }
        None => {
            zero = ScanState::zeros(dims);
            &zero
        }
    };
    let ins = [inp.x, inp.log_decay, inp.b_scale, inp.b, inp.c];
    let needs_states = trace || (g.grad_enabled() && ins.iter().any(|&v| g.requires_grad(v)));
    let mut states = Vec::new();
    let (y, fin) = recurrent_forward(
        dims,
        t_len,
        g.value(inp.x).data(),
        g.value(inp.log_decay).data(),
        g.value(inp.b_scale).data(),
        g.value(inp.b).data(),
        g.value(inp.c).data(),
        initial.h.data(),
        needs_states.then_some(&mut states),
    );
    let traced = trace.then(|| {
        states
            .chunks(dims.state_len())
            .map(|s| Tensor::new(&[dims.heads, dims.head_dim, dims.state], s.to_vec()).expect("state"))
            .collect()
    });
    let y_t = Tensor::new(&[t_len, dims.heads * dims.head_dim], y)?;
    let yv = g.custom(&ins, y_t, Box::new(RecurrentScan { dims: *dims, states }))?;
    Ok(ScanOutput {
        y: yv,
        final_state: ScanState {
            h: Tensor::new(&[dims.heads, dims.head_dim, dims.state], fin)?,
            step_index: initial.step_index + t_len,
        },
        states: traced,
    })
}

// ---- semiseparable operator -------------------------------------------------

/// `L[t,s] = exp(Σ_{r=s+1..=t} ld_r)` for `s ≤ t`, zero above the diagonal.
#[derive(Debug)]
struct SegmentDecay;

fn segment_decay_forward(ld: &[f64]) -> Vec<f64> {
    let t_len = ld.len();
    let mut out = vec![0.0; t_len * t_len];
    for t in 0..t_len {
        let mut acc = 0.0;
        out[t * t_len + t] = 1.0;
        for s in (0..t).rev() {
            acc += ld[s + 1];
            out[t * t_len + s] = acc.exp();
        }
    }
    out
}

impl CustomOp for SegmentDecay {
    fn name(&self) -> &'static str {
        "segment_decay"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let t_len = inputs[0].len();
        let (l, gd) = (output.data(), grad.data());
        // d L[t,s] / d ld_r = L[t,s] for s < r ≤ t.
        let mut gl = vec![0.0; t_len];
        for t in 0..t_len {
            let mut prefix = 0.0;
            for r in 1..=t {
                let s = r - 1;
                prefix += gd[t * t_len + s] * l[t * t_len + s];
                gl[r] += prefix;
            }
        }
        Ok(vec![Some(Tensor::new(inputs[0].shape(), gl)?)])
    }
}

/// Lower-triangular decay matrix for a `T × 1` column of log-decays.
pub fn segment_decay(g: &mut Graph, log_decay_col: Var) -> Result<Var> {
    let v = g.value(log_decay_col);
    let t_len = v.len();
    if v.shape() != [t_len, 1] {
        return Err(Error::shape("segment_decay", v.shape(), &[t_len, 1]));
    }
    let out = Tensor::new(&[t_len, t_len], segment_decay_forward(v.data()))?;
    g.custom(&[log_decay_col], out, Box::new(SegmentDecay))
}

struct HeadViews {
    x: Vec<Var>,
    ld: Vec<Var>,
    bs: Vec<Var>,
    b: Vec<Var>,
    c: Vec<Var>,
}

fn head_views(g: &mut Graph, inp: &ScanInputs, dims: &SsdDims) -> Result<HeadViews> {
    let mut v = HeadViews {
        x: Vec::new(),
        ld: Vec::new(),
        bs: Vec::new(),
        b: Vec::new(),
        c: Vec::new(),
    };
    for h in 0..dims.heads {
        v.x.push(g.slice_cols(inp.x, h * dims.head_dim, dims.head_dim)?);
        v.ld.push(g.slice_cols(inp.log_decay, h, 1)?);
        v.bs.push(g.slice_cols(inp.b_scale, h, 1)?);
    }
    for gi in 0..dims.groups {
        v.b.push(g.slice_cols(inp.b, gi * dims.state, dims.state)?);
        v.c.push(g.slice_cols(inp.c, gi * dims.state, dims.state)?);
    }
    Ok(v)
}

/// `y = (CBᵀ ∘ L ∘ b̄ᵀ) x` for one head over one span.
fn intra_span(g: &mut Graph, cb: Var, ld: Var, bs: Var, x: Var) -> Result<(Var, Var)> {
    let l = segment_decay(g, ld)?;
    let bs_row = g.transpose(bs)?;
    let m = g.mul(cb, l)?;
    let m = g.mul(m, bs_row)?;
    Ok((g.matmul(m, x)?, l))
}

fn scan_convolutional_graph(g: &mut Graph, inp: ScanInputs, dims: &SsdDims) -> Result<ScanOutput> {
    let t_len = check_inputs(g, &inp, dims)?;
    let v = head_views(g, &inp, dims)?;
    let mut cbs = Vec::with_capacity(dims.groups);
    for gi in 0..dims.groups {
        let bt = g.transpose(v.b[gi])?;
        cbs.push(g.matmul(v.c[gi], bt)?);
    }
    let mut ys = Vec::with_capacity(dims.heads);
    for h in 0..dims.heads {
        let (y, _) = intra_span(g, cbs[dims.group_of(h)], v.ld[h], v.bs[h], v.x[h])?;
        ys.push(y);
    }
    let y = g.concat_cols(&ys)?;
    let final_state = final_state_direct(g, &inp, dims, t_len)?;
    Ok(ScanOutput {
        y,
        final_state,
        states: None,
    })
}

/// Final state of a zero-initialised scan, evaluated outside the tape.
fn final_state_direct(g: &Graph, inp: &ScanInputs, dims: &SsdDims, t_len: usize) -> Result<ScanState> {
    let (_, fin) = recurrent_forward(
        dims,
        t_len,
        g.value(inp.x).data(),
        g.value(inp.log_decay).data(),
        g.value(inp.b_scale).data(),
        g.value(inp.b).data(),
        g.value(inp.c).data(),
        &vec![0.0; dims.state_len()],
        None,
    );
    Ok(ScanState {
        h: Tensor::new(&[dims.heads, dims.head_dim, dims.state], fin)?,
        step_index: t_len,
    })
}

// ---- chunked ----------------------------------------------------------------

fn scan_chunked_graph(
    g: &mut Graph,
    inp: ScanInputs,
    dims: &SsdDims,
    chunk_len: usize,
    initial: Option<&ScanState>,
) -> Result<ScanOutput> {
    if chunk_len == 0 {
        return Err(Error::contract("chunk_len must be >= 1"));
    }
    let t_len = check_inputs(g, &inp, dims)?;
    let (p_dim, n_dim) = (dims.head_dim, dims.state);
    let mut carry: Vec<Var> = Vec::with_capacity(dims.heads);
    let start_step = match initial {
        Some(s) => {
            s.check(dims)?;
            for h in 0..dims.heads {
                let d = s.h.data()[h * p_dim * n_dim..(h + 1) * p_dim * n_dim].to_vec();
                carry.push(g.constant(Tensor::new(&[p_dim, n_dim], d)?));
            }
            s.step_index
        }
        None => {
            for _ in 0..dims.heads {
                carry.push(g.constant(Tensor::zeros(&[p_dim, n_dim])));
            }
            0
        }
    };
    let v = head_views(g, &inp, dims)?;
    let mut chunks = Vec::new();
    let mut k0 = 0;
    while k0 < t_len {
        let len = chunk_len.min(t_len - k0);
        let mut bc = Vec::with_capacity(dims.groups);
        let mut cc = Vec::with_capacity(dims.groups);
        let mut cbs = Vec::with_capacity(dims.groups);
        for gi in 0..dims.groups {
            let b = g.slice_rows(v.b[gi], k0, len)?;
            let c = g.slice_rows(v.c[gi], k0, len)?;
            let bt = g.transpose(b)?;
            cbs.push(g.matmul(c, bt)?);
            bc.push(b);
            cc.push(c);
        }
        let mut ys = Vec::with_capacity(dims.heads);
        for h in 0..dims.heads {
            let gi = dims.group_of(h);
            let x = g.slice_rows(v.x[h], k0, len)?;
            let ld = g.slice_rows(v.ld[h], k0, len)?;
            let bs = g.slice_rows(v.bs[h], k0, len)?;
            let (y_intra, l) = intra_span(g, cbs[gi], ld, bs, x)?;

            // Contribution of the carried state: exp(cumsum ld)_t · (C_t · hᵀ).
            let cs = g.cumsum_rows(ld)?;
            let ecs = g.exp(cs)?;
            let ht = g.transpose(carry[h])?;
            let from_state = g.matmul(cc[gi], ht)?;
            let from_state = g.mul(from_state, ecs)?;
            ys.push(g.add(y_intra, from_state)?);

            // Carry the chunk boundary state at full precision.
            let saved = g.set_precision(Precision::F64);
            let last_row = g.slice_rows(l, len - 1, 1)?;
            let w = g.transpose(last_row)?;
            let w = g.mul(w, bs)?;
            let wb = g.mul(bc[gi], w)?;
            let xt = g.transpose(x)?;
            let inflow = g.matmul(xt, wb)?;
            let total_decay = g.slice_rows(ecs, len - 1, 1)?;
            let kept = g.mul(carry[h], total_decay)?;
            carry[h] = g.add(kept, inflow)?;
            g.set_precision(saved);
        }
        chunks.push(g.concat_cols(&ys)?);
        k0 += len;
    }
    let y = if chunks.is_empty() {
        g.constant(Tensor::zeros(&[0, dims.heads * p_dim]))
    } else {
        g.concat_rows(&chunks)?
    };
    let mut fin = Vec::with_capacity(dims.state_len());
    for &c in &carry {
        fin.extend_from_slice(g.value(c).data());
    }
    Ok(ScanOutput {
        y,
        final_state: ScanState {
            h: Tensor::new(&[dims.heads, p_dim, n_dim], fin)?,
            step_index: start_step + t_len,
        },
        states: None,
    })
}

// ---- plain-tensor entry points ----------------------------------------------

fn run_plain(
    params: &SelectiveParams,
    mode: ScanMode,
    initial: Option<&ScanState>,
    disc: Discretization,
) -> Result<(Tensor, ScanState)> {
    let (t, dims) = params.dims()?;
    let mut g = Graph::inference();
    let hp = dims.heads * dims.head_dim;
    let gn = dims.groups * dims.state;
    let x = g.constant(params.x.reshape(&[t, hp])?);
    let delta = g.constant(params.delta.clone());
    let a = g.constant(params.a.reshape(&[1, dims.heads])?);
    let b = g.constant(params.b.reshape(&[t, gn])?);
    let c = g.constant(params.c.reshape(&[t, gn])?);
    let (log_decay, b_scale) = discretize(&mut g, delta, a, disc)?;
    let out = scan(
        &mut g,
        ScanInputs {
            x,
            log_decay,
            b_scale,
            b,
            c,
        },
        &dims,
        mode,
        initial,
        false,
    )?;
    let y = g.value(out.y).reshape(&[t, dims.heads, dims.head_dim])?;
    Ok((y, out.final_state))
}

/// Sequential recurrence; feeding `final` back as `initial` continues the sequence.
pub fn scan_recurrent(
    params: &SelectiveParams,
    initial: &ScanState,
    disc: Discretization,
) -> Result<(Tensor, ScanState)> {
    run_plain(params, ScanMode::Recurrent, Some(initial), disc)
}

/// Semiseparable-operator evaluation; only defined from a zero initial state.
pub fn scan_convolutional(
    params: &SelectiveParams,
    initial: Option<&ScanState>,
    disc: Discretization,
) -> Result<Tensor> {
    Ok(run_plain(params, ScanMode::Convolutional, initial, disc)?.0)
}

pub fn scan_chunked(
    params: &SelectiveParams,
    chunk_len: usize,
    initial: &ScanState,
    disc: Discretization,
) -> Result<(Tensor, ScanState)> {
    run_plain(params, ScanMode::Chunked { chunk_len }, Some(initial), disc)
}

/// Analytic floating-point operation count of one scan (multiply and add counted separately).
///
/// Recurrent: each token and head updates a `P × N` state (scale, outer product,
/// accumulate) and contracts it with `C`. Convolutional: the full `T × T`
/// operator per head. Chunked: the operator inside each chunk plus the state
/// read-out and hand-off at chunk granularity.
pub fn count_flops(t: u64, n: u64, h: u64, p: u64, mode: ScanMode) -> u64 {
    match mode {
        ScanMode::Recurrent => t * h * (5 * p * n + p),
        ScanMode::Convolutional => h * t * t * (2 * n + 2 * p + 2),
        ScanMode::Chunked { chunk_len } => {
            let q = chunk_len.max(1) as u64;
            let chunk = |len: u64| len * len * (2 * n + 2 * p + 2) + 4 * len * p * n + len * p + 2 * len * n + 2 * p * n;
            h * ((t / q) * chunk(q) + if t % q > 0 { chunk(t % q) } else { 0 })
        }
    }
}
