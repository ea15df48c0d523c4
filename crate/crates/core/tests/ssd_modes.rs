use mac_core::numerics::gradcheck::relative_error;
use mac_core::numerics::{Graph, Tensor, Var};
use mac_core::ssd::{
    discretize, scan, scan_chunked, scan_convolutional, scan_recurrent, Discretization, ScanInputs, ScanMode,
    ScanState, SelectiveParams, SsdDims,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const DIMS: SsdDims = SsdDims {
    heads: 4,
    head_dim: 16,
    groups: 1,
    state: 16,
};

fn slice_time(p: &SelectiveParams, from: usize, to: usize) -> SelectiveParams {
    let cut = |t: &Tensor| {
        let row: usize = t.shape()[1..].iter().product();
        let mut shape = t.shape().to_vec();
        shape[0] = to - from;
        Tensor::new(&shape, t.data()[from * row..to * row].to_vec()).unwrap()
    };
    SelectiveParams {
        delta: cut(&p.delta),
        a: p.a.clone(),
        b: cut(&p.b),
        c: cut(&p.c),
        x: cut(&p.x),
    }
}

#[test]
fn convolutional_matches_recurrent_on_time_varying_params() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let p = SelectiveParams::random(17, DIMS, &mut rng);
    let (yr, _) = scan_recurrent(&p, &ScanState::zeros(&DIMS), Discretization::Simplified).unwrap();
    let yc = scan_convolutional(&p, None, Discretization::Simplified).unwrap();
    assert!(yr.max_abs_diff(&yc) <= 1e-10);
}

#[test]
fn chunked_matches_recurrent_t64() {
    let mut rng = ChaCha8Rng::seed_from_u64(64);
    let p = SelectiveParams::random(64, DIMS, &mut rng);
    let zero = ScanState::zeros(&DIMS);
    let (yr, fr) = scan_recurrent(&p, &zero, Discretization::Simplified).unwrap();
    let (yk, fk) = scan_chunked(&p, 16, &zero, Discretization::Simplified).unwrap();
    assert!(yr.max_abs_diff(&yk) <= 1e-8);
    assert!(fr.h.max_abs_diff(&fk.h) <= 1e-8);
    assert_eq!(fk.step_index, 64);
}

#[test]
fn degenerate_chunk_sizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = SelectiveParams::random(12, DIMS, &mut rng);
    let zero = ScanState::zeros(&DIMS);
    let (yr, _) = scan_recurrent(&p, &zero, Discretization::ExactZoh).unwrap();
    let yc = scan_convolutional(&p, None, Discretization::ExactZoh).unwrap();
    let (y1, _) = scan_chunked(&p, 1, &zero, Discretization::ExactZoh).unwrap();
    let (yt, _) = scan_chunked(&p, 12, &zero, Discretization::ExactZoh).unwrap();
    assert!(y1.max_abs_diff(&yr) <= 1e-12);
    assert!(yt.max_abs_diff(&yc) <= 1e-12);
}

#[test]
fn split_scan_equals_single_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let dims = SsdDims {
        heads: 4,
        head_dim: 8,
        groups: 2,
        state: 16,
    };
    let p = SelectiveParams::random(40, dims, &mut rng);
    let zero = ScanState::zeros(&dims);
    let (full, full_fin) = scan_recurrent(&p, &zero, Discretization::Simplified).unwrap();
    for k in [1, 13, 39] {
        let (ya, mid) = scan_recurrent(&slice_time(&p, 0, k), &zero, Discretization::Simplified).unwrap();
        let (yb, fin) = scan_recurrent(&slice_time(&p, k, 40), &mid, Discretization::Simplified).unwrap();
        let joined: Vec<f64> = ya.data().iter().chain(yb.data()).copied().collect();
        let joined = Tensor::new(full.shape(), joined).unwrap();
        assert!(joined.max_abs_diff(&full) <= 1e-12, "split at {k}");
        assert!(fin.h.max_abs_diff(&full_fin.h) <= 1e-12);
        assert_eq!(fin.step_index, 40);

        // The chunked mode continues from a carried state the same way.
        let (yc, _) = scan_chunked(&slice_time(&p, k, 40), 7, &mid, Discretization::Simplified).unwrap();
        assert!(yc.max_abs_diff(&yb) <= 1e-10);
    }
}

#[test]
fn state_stays_bounded_over_long_sequences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4096);
    let p = SelectiveParams::random(4096, DIMS, &mut rng);
    let (y, fin) = scan_recurrent(&p, &ScanState::zeros(&DIMS), Discretization::Simplified).unwrap();
    assert!(y.all_finite() && fin.h.all_finite());
    // Geometric-series bound per head: sup|b̄ x B| / (1 − sup ā).
    let (t, h) = (4096, DIMS.heads);
    for head in 0..h {
        let a = p.a.data()[head];
        let mut sup_decay: f64 = 0.0;
        let mut sup_in: f64 = 0.0;
        for ti in 0..t {
            let d = p.delta.data()[ti * h + head];
            sup_decay = sup_decay.max((d * a).exp());
            let xmax = (0..DIMS.head_dim).map(|q| p.x.data()[(ti * h + head) * DIMS.head_dim + q].abs()).fold(0.0, f64::max);
            let bmax = (0..DIMS.state).map(|n| p.b.data()[ti * DIMS.state + n].abs()).fold(0.0, f64::max);
            sup_in = sup_in.max(d * xmax * bmax);
        }
        let bound = sup_in / (1.0 - sup_decay);
        let off = head * DIMS.head_dim * DIMS.state;
        let got = fin.h.data()[off..off + DIMS.head_dim * DIMS.state].iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(got <= bound, "head {head}: |h| = {got} > {bound}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn three_modes_agree(t in 1usize..=64, chunk in 1usize..=20, seed in any::<u64>(), exact in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = SelectiveParams::random(t, DIMS, &mut rng);
        let disc = if exact { Discretization::ExactZoh } else { Discretization::Simplified };
        let zero = ScanState::zeros(&DIMS);
        let (yr, fr) = scan_recurrent(&p, &zero, disc).unwrap();
        let yc = scan_convolutional(&p, None, disc).unwrap();
        let (yk, fk) = scan_chunked(&p, chunk, &zero, disc).unwrap();
        prop_assert!(yr.max_abs_diff(&yc) <= 1e-8);
        prop_assert!(yr.max_abs_diff(&yk) <= 1e-8);
        prop_assert!(fr.h.max_abs_diff(&fk.h) <= 1e-8);
    }
}

/// Loss `Σ y ∘ probe` for a scan driven from raw (Δ pre-activation, log_a) parameters.
struct GradProblem {
    t: usize,
    dims: SsdDims,
    x: Tensor,
    raw_delta: Tensor,
    log_a: Tensor,
    b: Tensor,
    c: Tensor,
    probe: Tensor,
}

impl GradProblem {
    fn new(t: usize, dims: SsdDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hp = dims.heads * dims.head_dim;
        let gn = dims.groups * dims.state;
        GradProblem {
            t,
            dims,
            x: Tensor::randn(&[t, hp], 1.0, &mut rng),
            raw_delta: Tensor::randn(&[t, dims.heads], 1.0, &mut rng),
            log_a: Tensor::randn(&[1, dims.heads], 0.5, &mut rng),
            b: Tensor::randn(&[t, gn], 1.0, &mut rng),
            c: Tensor::randn(&[t, gn], 1.0, &mut rng),
            probe: Tensor::randn(&[t, hp], 1.0, &mut rng),
        }
    }

    fn inputs(&self) -> [&Tensor; 5] {
        [&self.x, &self.raw_delta, &self.log_a, &self.b, &self.c]
    }

    fn build(&self, g: &mut Graph, vals: [&Tensor; 5], grad: bool, mode: ScanMode, disc: Discretization) -> (Vec<Var>, Var) {
        let vars: Vec<Var> = vals.iter().map(|t| g.leaf((*t).clone(), grad)).collect();
        let delta = g.softplus(vars[1]).unwrap();
        let ea = g.exp(vars[2]).unwrap();
        let a = g.scale(ea, -1.0).unwrap();
        let (log_decay, b_scale) = discretize(g, delta, a, disc).unwrap();
        let out = scan(
            g,
            ScanInputs { x: vars[0], log_decay, b_scale, b: vars[3], c: vars[4] },
            &self.dims,
            mode,
            None,
            false,
        )
        .unwrap();
        let p = g.constant(self.probe.clone());
        let m = g.mul(out.y, p).unwrap();
        let s = g.sum(m).unwrap();
        (vars, s)
    }

    fn grads(&self, mode: ScanMode, disc: Discretization) -> Vec<Tensor> {
        let mut g = Graph::new();
        let (vars, loss) = self.build(&mut g, self.inputs(), true, mode, disc);
        let gr = g.backward(loss).unwrap();
        vars.iter().zip(self.inputs()).map(|(v, t)| gr.get_or_zeros(*v, t.shape())).collect()
    }

    fn loss(&self, vals: [&Tensor; 5], mode: ScanMode, disc: Discretization) -> f64 {
        let mut g = Graph::inference();
        let (_, s) = self.build(&mut g, vals, false, mode, disc);
        g.value(s).item()
    }
}

#[test]
fn gradients_of_all_modes_agree_with_finite_differences() {
    let dims = SsdDims {
        heads: 2,
        head_dim: 3,
        groups: 1,
        state: 4,
    };
    let prob = GradProblem::new(11, dims, 2024);
    assert_eq!(prob.t, 11);
    let modes = [
        ScanMode::Recurrent,
        ScanMode::Convolutional,
        ScanMode::Chunked { chunk_len: 4 },
    ];
    for disc in [Discretization::Simplified, Discretization::ExactZoh] {
        let all: Vec<Vec<Tensor>> = modes.iter().map(|&m| prob.grads(m, disc)).collect();
        for other in &all[1..] {
            for (a, b) in all[0].iter().zip(other) {
                assert!(a.max_abs_diff(b) < 1e-9, "mode gradients disagree");
            }
        }
        for (mi, &mode) in modes.iter().enumerate() {
            for k in 0..5 {
                let base = prob.inputs()[k];
                for i in 0..base.len() {
                    let mut up = base.clone();
                    up.data_mut()[i] += 1e-4;
                    let mut dn = base.clone();
                    dn.data_mut()[i] -= 1e-4;
                    let mut vu = prob.inputs();
                    vu[k] = &up;
                    let mut vd = prob.inputs();
                    vd[k] = &dn;
                    let fd = (prob.loss(vu, mode, disc) - prob.loss(vd, mode, disc)) / 2e-4;
                    let err = relative_error(all[mi][k].data()[i], fd, 1e-6);
                    assert!(err < 1e-4, "{mode:?} {disc:?} input {k}[{i}]: {err:e}");
                }
            }
        }
    }
}

#[test]
fn grouped_heads_gradients_match_finite_differences() {
    let dims = SsdDims {
        heads: 4,
        head_dim: 2,
        groups: 2,
        state: 3,
    };
    let prob = GradProblem::new(9, dims, 7);
    let gr = prob.grads(ScanMode::Chunked { chunk_len: 3 }, Discretization::Simplified);
    let gr_rec = prob.grads(ScanMode::Recurrent, Discretization::Simplified);
    for (a, b) in gr.iter().zip(&gr_rec) {
        assert!(a.max_abs_diff(b) < 1e-9);
    }
}
