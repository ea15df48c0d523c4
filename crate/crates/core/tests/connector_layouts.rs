use mac_core::audio::AudioTokenGrid;
use mac_core::connector::{connect_tensor, ConnectorConfig, ConnectorVariant, MlpWeights, Segment, SeparatorPlacement};
use mac_core::numerics::gradcheck::max_relative_error;
use mac_core::numerics::{Graph, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn config(variant: ConnectorVariant, t: usize, f: usize, d_enc: usize) -> ConnectorConfig {
    ConnectorConfig {
        variant,
        d_enc,
        grid_t: t,
        grid_f: f,
        d_model: 6,
        hidden_mult: 2,
        separator: SeparatorPlacement::Prefix,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn length_formulas_hold(t in 1usize..=64, f in 1usize..=64, suffix in any::<bool>()) {
        for v in [ConnectorVariant::Concatenation, ConnectorVariant::TimeMajor, ConnectorVariant::FrequencyMajor] {
            let mut c = config(v, t, f, 2);
            if suffix {
                c.separator = SeparatorPlacement::Suffix;
            }
            let want = match v {
                ConnectorVariant::Concatenation => t,
                ConnectorVariant::TimeMajor => t * (f + 1),
                ConnectorVariant::FrequencyMajor => (t + 1) * f,
            };
            prop_assert_eq!(c.layout().len(), want);
            prop_assert_eq!(c.output_len(), want);
            let seps = c.segments().iter().filter(|s| **s == Segment::Separator).count();
            let audio: Vec<usize> = c.layout().into_iter().flatten().collect();
            let mut sorted = audio.clone();
            sorted.sort();
            if v != ConnectorVariant::Concatenation {
                prop_assert_eq!(sorted, (0..t * f).collect::<Vec<_>>());
                prop_assert_eq!(seps, want - t * f);
            }
        }
    }

    #[test]
    fn time_major_separators_sit_at_f_mod_f_plus_one(t in 1usize..=16, f in 1usize..=16) {
        let c = config(ConnectorVariant::TimeMajor, t, f, 2);
        for (i, s) in c.segments().iter().enumerate() {
            prop_assert_eq!(*s == Segment::Separator, i % (f + 1) == f);
        }
    }
}

#[test]
fn time_and_frequency_major_are_permutations() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (t, f, d) = (5, 3, 4);
    let grid = AudioTokenGrid::new(Tensor::randn(&[t * f, d], 1.0, &mut rng), t, f).unwrap();
    let cb = config(ConnectorVariant::TimeMajor, t, f, d);
    let cc = config(ConnectorVariant::FrequencyMajor, t, f, d);
    let mlp = MlpWeights::for_config(&cb, &mut rng);
    let sep = Tensor::randn(&[1, 6], 1.0, &mut rng);
    let collect = |c: &ConnectorConfig| {
        let seq = connect_tensor(&grid, c, &mlp, &sep).unwrap();
        let mut rows: Vec<Vec<u64>> = seq
            .segments
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == Segment::Audio)
            .map(|(i, _)| seq.vectors.row(i).iter().map(|v| v.to_bits()).collect())
            .collect();
        rows.sort();
        (rows, seq)
    };
    let (rb, sb) = collect(&cb);
    let (rc, sc) = collect(&cc);
    assert_eq!(rb, rc);
    // Separator rows are the separator embedding itself.
    for seq in [sb, sc] {
        for (i, s) in seq.segments.iter().enumerate() {
            if *s == Segment::Separator {
                assert_eq!(seq.vectors.row(i), sep.row(0));
            }
        }
    }
}

#[test]
fn connect_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let grid = AudioTokenGrid::new(Tensor::randn(&[6, 4], 1.0, &mut rng), 3, 2).unwrap();
    let c = config(ConnectorVariant::FrequencyMajor, 3, 2, 4);
    let mlp = MlpWeights::for_config(&c, &mut rng);
    let sep = Tensor::randn(&[1, 6], 1.0, &mut rng);
    let a = connect_tensor(&grid, &c, &mlp, &sep).unwrap();
    let b = connect_tensor(&grid, &c, &mlp, &sep).unwrap();
    assert!(a.vectors.bit_eq(&b.vectors));
}

#[test]
fn mlp_and_separator_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (t, f, d) = (3, 2, 3);
    for variant in [ConnectorVariant::Concatenation, ConnectorVariant::TimeMajor, ConnectorVariant::FrequencyMajor] {
        let c = config(variant, t, f, d);
        let mlp = MlpWeights::for_config(&c, &mut rng);
        let grid = Tensor::randn(&[t * f, d], 1.0, &mut rng);
        let sep = Tensor::randn(&[1, 6], 1.0, &mut rng);
        let probe = Tensor::randn(&[c.output_len(), 6], 1.0, &mut rng);
        let run = |g: &mut Graph, mlp: &MlpWeights, grid: &Tensor, sep: &Tensor, grad: bool| {
            let gv = g.leaf(grid.clone(), grad);
            let sv = g.leaf(sep.clone(), grad);
            let (y, _) = mac_core::connector::connect(g, gv, &c, mlp, sv).unwrap();
            let p = g.constant(probe.clone());
            let m = g.mul(y, p).unwrap();
            (gv, sv, g.sum(m).unwrap())
        };
        let mut g = Graph::new();
        let (gv, sv, loss) = run(&mut g, &mlp, &grid, &sep, true);
        let grads = g.backward(loss).unwrap();
        let by_name = grads.by_name();
        let eval = |mlp: &MlpWeights, grid: &Tensor, sep: &Tensor| {
            let mut g = Graph::inference();
            let (_, _, l) = run(&mut g, mlp, grid, sep, false);
            g.value(l).item()
        };
        let all = |t: &Tensor| (0..t.len()).collect::<Vec<_>>();
        let e = max_relative_error(&grid, grads.get(gv).unwrap(), &all(&grid), 1e-4, 1e-6, |x| eval(&mlp, x, &sep));
        assert!(e < 1e-4, "{variant:?} grid {e:e}");
        if variant != ConnectorVariant::Concatenation {
            let e = max_relative_error(&sep, grads.get(sv).unwrap(), &all(&sep), 1e-4, 1e-6, |x| eval(&mlp, &grid, x));
            assert!(e < 1e-4, "{variant:?} sep {e:e}");
        }
        let e = max_relative_error(&mlp.w1, &by_name["connector.w1"], &all(&mlp.w1), 1e-4, 1e-6, |x| {
            eval(&MlpWeights { w1: x.clone(), ..mlp.clone() }, &grid, &sep)
        });
        assert!(e < 1e-4, "{variant:?} w1 {e:e}");
        let e = max_relative_error(&mlp.w2, &by_name["connector.w2"], &all(&mlp.w2), 1e-4, 1e-6, |x| {
            eval(&MlpWeights { w2: x.clone(), ..mlp.clone() }, &grid, &sep)
        });
        assert!(e < 1e-4, "{variant:?} w2 {e:e}");
    }
}
