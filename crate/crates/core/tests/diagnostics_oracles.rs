use mac_core::blocks::lm_forward;
use mac_core::diagnostics::{
    distances_from_states, erank, erank_of_tokens, mean_pairwise_cosine, normalized_covariance, singular_values,
    state_update_distances, ErankSource, FeatureMatrix, StateNorm,
};
use mac_core::numerics::{Graph, Parameters, Tensor};
use mac_core::pipeline::config::DEFAULT_PROMPT;
use mac_core::pipeline::{AudioInput, Config, MacModel, Vocab};
use mac_core::audio::AudioTokenGrid;
use mac_core::ssd::{discretize, scan, Discretization, ScanInputs, ScanMode, SsdDims};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(s: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(s)
}

fn brute_covariance(h: &Tensor) -> Tensor {
    let (n, d) = h.dims2().unwrap();
    let mean: Vec<f64> = (0..d).map(|j| (0..n).map(|i| h.at2(i, j)).sum::<f64>() / n as f64).collect();
    let mut s = Tensor::zeros(&[d, d]);
    for i in 0..n {
        let u: Vec<f64> = (0..d).map(|j| h.at2(i, j) - mean[j]).collect();
        let len = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        for a in 0..d {
            for b in 0..d {
                s.data_mut()[a * d + b] += u[a] / len * u[b] / len / n as f64;
            }
        }
    }
    s
}

#[test]
fn covariance_matches_double_loop() {
    let h = Tensor::randn(&[50, 16], 1.0, &mut rng(1));
    let cov = normalized_covariance(&h).unwrap();
    assert!(cov.max_abs_diff(&brute_covariance(&h)) <= 1e-12);
    let trace: f64 = (0..16).map(|i| cov.at2(i, i)).sum();
    assert!((trace - 1.0).abs() <= 1e-10);
    assert!(cov.max_abs_diff(&cov.transpose().unwrap()) == 0.0);
    // Positive semidefinite: every singular value of a symmetric PSD matrix is an eigenvalue.
    let s = singular_values(&cov).unwrap();
    assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-10);
}

#[test]
fn hand_set_cosine_matches_six_pairs() {
    let rows = vec![vec![1.0, 2.0, 0.5], vec![-0.3, 1.0, 2.0], vec![0.0, -1.0, 1.0], vec![4.0, 0.1, -0.2]];
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (n(a) * n(b))
    };
    let mut want = 0.0;
    for i in 0..4 {
        for j in i + 1..4 {
            want += cos(&rows[i], &rows[j]);
        }
    }
    want /= 6.0;
    let fm = FeatureMatrix::new(Tensor::from_rows(&rows).unwrap(), "hand").unwrap();
    assert!((mean_pairwise_cosine(&fm).unwrap() - want).abs() <= 1e-12);
}

#[test]
fn isotropic_tokens_have_full_effective_rank() {
    for seed in 0..10 {
        let h = Tensor::randn(&[4000, 8], 1.0, &mut rng(100 + seed));
        let e = erank_of_tokens(&FeatureMatrix::new(h, "iso").unwrap(), ErankSource::Covariance).unwrap();
        assert!((e - 8.0).abs() <= 0.8, "seed {seed}: {e}");
    }
}

#[test]
fn centered_token_source_is_bounded_too() {
    let h = Tensor::randn(&[30, 6], 1.0, &mut rng(7));
    let fm = FeatureMatrix::new(h, "x").unwrap();
    let e = erank_of_tokens(&fm, ErankSource::CenteredTokens).unwrap();
    assert!((1.0..=6.0).contains(&e));
}

/// Orthogonal factor of a Gaussian matrix by modified Gram–Schmidt.
fn random_orthogonal(n: usize, seed: u64) -> Tensor {
    let a = Tensor::randn(&[n, n], 1.0, &mut rng(seed));
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..n).map(|i| a.at2(i, j)).collect()).collect();
    for j in 0..n {
        for k in 0..j {
            let dot: f64 = cols[j].iter().zip(&cols[k]).map(|(x, y)| x * y).sum();
            let ck = cols[k].clone();
            for (x, y) in cols[j].iter_mut().zip(ck) {
                *x -= dot * y;
            }
        }
        let len = cols[j].iter().map(|x| x * x).sum::<f64>().sqrt();
        cols[j].iter_mut().for_each(|x| *x /= len);
    }
    Tensor::new(&[n, n], (0..n * n).map(|k| cols[k % n][k / n]).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn erank_is_scale_and_orthogonal_invariant(seed in any::<u64>(), r in 2usize..9, c in 2usize..9, k in 0.01f64..100.0) {
        let m = Tensor::randn(&[r, c], 1.0, &mut rng(seed));
        let base = erank(&m).unwrap();
        prop_assert!((erank(&m.scale(k)).unwrap() - base).abs() <= 1e-8);
        let u = random_orthogonal(r, seed ^ 1);
        let v = random_orthogonal(c, seed ^ 2);
        let rotated = u.matmul(&m).unwrap().matmul(&v).unwrap();
        prop_assert!((erank(&rotated).unwrap() - base).abs() <= 1e-8);
        prop_assert!(base >= 1.0 - 1e-12 && base <= r.min(c) as f64 + 1e-12);
    }

    #[test]
    fn token_statistics_stay_in_range(seed in any::<u64>(), n in 2usize..40, d in 1usize..12) {
        let h = Tensor::randn(&[n, d], 1.0, &mut rng(seed));
        let fm = FeatureMatrix::new(h, "p").unwrap();
        let e = erank_of_tokens(&fm, ErankSource::Covariance).unwrap();
        prop_assert!(e >= 1.0 - 1e-9 && e <= d.min(n) as f64 + 1e-9);
        let c = mean_pairwise_cosine(&fm).unwrap();
        prop_assert!((-1.0..=1.0).contains(&c));
    }
}

#[test]
fn zero_input_segment_has_zero_distances() {
    let dims = SsdDims { heads: 2, head_dim: 3, groups: 1, state: 4 };
    let t = 6;
    let mut r = rng(3);
    let mut g = Graph::inference();
    let x = g.constant(Tensor::zeros(&[t, 6]));
    let delta = g.constant(Tensor::uniform(&[t, 2], 0.1, 1.0, &mut r));
    let a = g.constant(Tensor::new(&[1, 2], vec![-0.5, -1.5]).unwrap());
    let b = g.constant(Tensor::randn(&[t, 4], 1.0, &mut r));
    let c = g.constant(Tensor::randn(&[t, 4], 1.0, &mut r));
    let (log_decay, b_scale) = discretize(&mut g, delta, a, Discretization::Simplified).unwrap();
    let out = scan(&mut g, ScanInputs { x, log_decay, b_scale, b, c }, &dims, ScanMode::Recurrent, None, true).unwrap();
    let states = out.states.expect("traced");
    let d = distances_from_states(&[states], 0, t, StateNorm::Frobenius).unwrap();
    assert_eq!(d.mean, vec![0.0; t - 1]);
}

fn small_model(seed: u64) -> (MacModel, AudioInput) {
    let mut cfg = Config::default();
    cfg.seed = seed;
    cfg.model.n_layers = Some(2);
    cfg.model.d_model = Some(32);
    cfg.model.n_heads = Some(2);
    cfg.model.d_state = Some(8);
    let vocab = Vocab::build([DEFAULT_PROMPT, "a short click"]);
    let mut model = MacModel::init(&cfg, vocab).unwrap();
    // Nonzero adapters so the traced path differs from the base model.
    let mut r = rng(seed ^ 5);
    model.visit_mut(&mut |name, t| {
        if name.ends_with("lora_up") {
            *t = Tensor::randn(t.shape(), 0.05, &mut r);
        }
    });
    let c = model.connector_cfg.clone();
    let grid = AudioTokenGrid::new(Tensor::randn(&[c.grid_t * c.grid_f, c.d_enc], 1.0, &mut r), c.grid_t, c.grid_f).unwrap();
    (model, AudioInput::Grid(grid))
}

#[test]
fn traced_distances_match_an_independent_streaming_rescan() {
    let (model, audio) = small_model(11);
    for reduce in [StateNorm::Frobenius, StateNorm::HeadMean] {
        let traced = state_update_distances(&model, &audio, reduce).unwrap();
        assert_eq!(traced.mean.len(), model.audio_len() - 1);

        // Re-run the audio embeddings one position at a time and read each layer's carried state.
        let mut g = Graph::inference();
        let (e, _) = model.audio_embeddings(&mut g, &audio).unwrap();
        let e = g.value(e).clone();
        let (n, d) = e.dims2().unwrap();
        let mut caches = model.lm.new_caches(&model.lm_cfg);
        let mut opts = model.options;
        opts.mode = ScanMode::Recurrent;
        let mut states: Vec<Vec<Tensor>> = vec![Vec::new(); caches.len()];
        for t in 0..n {
            let mut g = Graph::inference();
            let xt = g.constant(Tensor::new(&[1, d], e.row(t).to_vec()).unwrap());
            lm_forward(&mut g, &model.lm, &model.lm_cfg, xt, opts, Some(&mut caches)).unwrap();
            for (l, c) in caches.iter().enumerate() {
                states[l].push(c.ssm.h.clone());
            }
        }
        let norm = |a: &Tensor, b: &Tensor| -> f64 {
            let diff: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
            match reduce {
                StateNorm::Frobenius => diff.iter().map(|v| v * v).sum::<f64>().sqrt(),
                StateNorm::HeadMean => {
                    let h = a.shape()[0];
                    diff.chunks(diff.len() / h).map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt()).sum::<f64>() / h as f64
                }
            }
        };
        for (l, layer) in states.iter().enumerate() {
            for t in 1..n {
                let want = norm(&layer[t], &layer[t - 1]);
                assert!((traced.per_layer[l][t - 1] - want).abs() <= 1e-10, "layer {l} t {t}");
            }
        }
        for t in 0..n - 1 {
            let avg = traced.per_layer.iter().map(|l| l[t]).sum::<f64>() / traced.per_layer.len() as f64;
            assert!((traced.mean[t] - avg).abs() <= 1e-15);
        }
    }
}
