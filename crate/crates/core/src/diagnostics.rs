//! Representation and scaling analyses: effective rank of audio tokens, mean
//! pairwise cosine similarity, adjacent state-update distances, and a timed
//! scan benchmark with analytic FLOP counts.

use std::fmt::Write as _;
use std::time::Instant;

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audio::{encode_tensor, AudioTokenGrid};
use crate::blocks::lm_forward;
use crate::connector::ConnectorVariant;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor};
use crate::pipeline::{AudioInput, MacModel};
use crate::ssd::{count_flops, scan_chunked, scan_convolutional, scan_recurrent, Discretization, ScanMode, ScanState, SelectiveParams, SsdDims};

/// Centered tokens with a norm below this are dropped from covariance statistics.
pub const ZERO_NORM: f64 = 1e-12;

/// Audio tokens `N × d` with a tag naming where they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub rows: Tensor,
    pub source: String,
}

impl FeatureMatrix {
    pub fn new(rows: Tensor, source: impl Into<String>) -> Result<Self> {
        rows.dims2()?;
        Ok(FeatureMatrix {
            rows,
            source: source.into(),
        })
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Tokens minus their mean, each scaled to unit length; near-zero rows are skipped.
fn unit_centered(h: &Tensor) -> Result<Vec<Vec<f64>>> {
    let (n, d) = h.dims2()?;
    if n < 2 {
        return Err(Error::contract(format!("covariance needs at least 2 tokens, got {n}")));
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, x) in mean.iter_mut().zip(h.row(i)) {
            *m += x / n as f64;
        }
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let u: Vec<f64> = h.row(i).iter().zip(&mean).map(|(x, m)| x - m).collect();
        let len = norm(&u);
        if len < ZERO_NORM {
            warn!("token {i} equals the token mean; skipped");
            continue;
        }
        out.push(u.into_iter().map(|x| x / len).collect());
    }
    if out.is_empty() {
        return Err(Error::contract("every token equals the token mean; covariance undefined"));
    }
    Ok(out)
}

/// `Σ = (1/N') Σ_i u_i u_iᵀ` over the `N'` usable unit-normalized centered tokens.
/// Symmetric PSD with unit trace.
pub fn normalized_covariance(h: &Tensor) -> Result<Tensor> {
    let us = unit_centered(h)?;
    let d = us[0].len();
    let mut s = vec![0.0; d * d];
    for u in &us {
        for i in 0..d {
            let ui = u[i];
            for j in i..d {
                s[i * d + j] += ui * u[j];
            }
        }
    }
    let k = us.len() as f64;
    for i in 0..d {
        for j in i..d {
            let v = s[i * d + j] / k;
            s[i * d + j] = v;
            s[j * d + i] = v;
        }
    }
    Tensor::new(&[d, d], s)
}

/// Singular values in descending order by one-sided Jacobi rotations.
pub fn singular_values(m: &Tensor) -> Result<Vec<f64>> {
    let (r, c) = m.dims2()?;
    // Orthogonalize the columns of the taller orientation.
    let a = if r >= c { m.clone() } else { m.transpose()? };
    let (rows, cols) = a.dims2()?;
    let mut col: Vec<Vec<f64>> = (0..cols).map(|j| (0..rows).map(|i| a.at2(i, j)).collect()).collect();
    for _ in 0..80 {
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let alpha: f64 = col[p].iter().map(|x| x * x).sum();
                let beta: f64 = col[q].iter().map(|x| x * x).sum();
                let gamma: f64 = col[p].iter().zip(&col[q]).map(|(x, y)| x * y).sum();
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                let (lo, hi) = col.split_at_mut(q);
                for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
                    let (xp, yq) = (*x, *y);
                    *x = cs * xp - sn * yq;
                    *y = sn * xp + cs * yq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut s: Vec<f64> = col.iter().map(|v| norm(v)).collect();
    s.sort_by(|a, b| b.total_cmp(a));
    Ok(s)
}

/// `exp(−Σ p_i ln p_i)` with `p = σ / Σσ`; zero values contribute nothing.
pub fn erank_from_singular_values(s: &[f64]) -> Result<f64> {
    let total: f64 = s.iter().sum();
    if !(total > 0.0) {
        return Err(Error::contract("effective rank of an all-zero matrix is undefined"));
    }
    let h: f64 = s
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| {
            let p = v / total;
            -p * p.ln()
        })
        .sum();
    Ok(h.exp())
}

pub fn erank(m: &Tensor) -> Result<f64> {
    erank_from_singular_values(&singular_values(m)?)
}

/// Which matrix supplies the singular values for token eRank.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ErankSource {
    /// The normalized covariance of the tokens.
    #[default]
    Covariance,
    /// The matrix of unit-normalized centered tokens itself.
    CenteredTokens,
}

pub fn erank_of_tokens(h: &FeatureMatrix, source: ErankSource) -> Result<f64> {
    match source {
        ErankSource::Covariance => erank(&normalized_covariance(&h.rows)?),
        ErankSource::CenteredTokens => {
            let us = unit_centered(&h.rows)?;
            erank(&Tensor::from_rows(&us)?)
        }
    }
}

/// Mean of `cos(h_i, h_j)` over unordered pairs of nonzero tokens.
pub fn mean_pairwise_cosine(h: &FeatureMatrix) -> Result<f64> {
    let (n, _) = h.rows.dims2()?;
    let units: Vec<Vec<f64>> = (0..n)
        .filter_map(|i| {
            let r = h.rows.row(i);
            let len = norm(r);
            if len < ZERO_NORM {
                warn!("token {i} has zero norm; excluded from cosine similarity");
                None
            } else {
                Some(r.iter().map(|x| x / len).collect())
            }
        })
        .collect();
    let k = units.len();
    if k < 2 {
        return Err(Error::contract(format!("cosine similarity needs 2 nonzero tokens, got {k}")));
    }
    let mut total = 0.0;
    for i in 0..k {
        for j in i + 1..k {
            total += units[i].iter().zip(&units[j]).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    let pairs = (k * (k - 1) / 2) as f64;
    Ok((total / pairs).clamp(-1.0, 1.0))
}

/// Encoder output tokens `H_a` for one clip.
pub fn audio_tokens(model: &MacModel, audio: &AudioInput) -> Result<AudioTokenGrid> {
    match audio {
        AudioInput::Grid(g) => Ok(g.clone()),
        AudioInput::Mel(m) => encode_tensor(m, &model.encoder, &model.encoder_cfg),
    }
}

/// How one state difference `H × P × N` is reduced to a scalar.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum StateNorm {
    /// Frobenius norm over the whole state.
    #[default]
    Frobenius,
    /// Mean over heads of each head's Frobenius norm.
    HeadMean,
}

fn state_distance(a: &Tensor, b: &Tensor, reduce: StateNorm) -> f64 {
    let diff: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    match reduce {
        StateNorm::Frobenius => norm(&diff),
        StateNorm::HeadMean => {
            let heads = a.shape()[0];
            let per = diff.len() / heads;
            diff.chunks(per).map(norm).sum::<f64>() / heads as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StateDistances {
    /// Per layer, one distance per adjacent pair of segment positions.
    pub per_layer: Vec<Vec<f64>>,
    /// Layer average.
    pub mean: Vec<f64>,
}

/// Distances between the states after consecutive positions `from..to` of a
/// traced run. `states[l]` holds `T + 1` states with the initial one first.
pub fn distances_from_states(states: &[Vec<Tensor>], from: usize, to: usize, reduce: StateNorm) -> Result<StateDistances> {
    if states.is_empty() {
        return Err(Error::contract("state tracing was not enabled for this forward pass"));
    }
    let mut per_layer = Vec::with_capacity(states.len());
    for layer in states {
        if layer.len() < to + 1 || from > to {
            return Err(Error::contract(format!("segment {from}..{to} outside a trace of {} states", layer.len())));
        }
        // Position t's state is layer[t + 1].
        per_layer.push((from + 1..to).map(|t| state_distance(&layer[t + 1], &layer[t], reduce)).collect::<Vec<_>>());
    }
    let len = per_layer[0].len();
    let mean = (0..len)
        .map(|i| per_layer.iter().map(|l| l[i]).sum::<f64>() / per_layer.len() as f64)
        .collect();
    Ok(StateDistances { per_layer, mean })
}

/// Adjacent state-update distances across the audio segment (separators included),
/// from a traced recurrent forward pass over the audio embeddings.
pub fn state_update_distances(model: &MacModel, audio: &AudioInput, reduce: StateNorm) -> Result<StateDistances> {
    let mut g = Graph::inference();
    let (e, _) = model.audio_embeddings(&mut g, audio)?;
    let len = g.value(e).dims2()?.0;
    let mut opts = model.options;
    opts.mode = ScanMode::Recurrent;
    opts.trace = true;
    let out = lm_forward(&mut g, &model.lm, &model.lm_cfg, e, opts, None)?;
    distances_from_states(&out.states, 0, len, reduce)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub t: usize,
    pub seconds: f64,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub mode: ScanMode,
    pub rows: Vec<BenchRow>,
    /// Least-squares slope of ln(time) against ln(T).
    pub slope: f64,
}

impl BenchReport {
    pub fn csv(&self) -> String {
        let mut s = String::from("T,wall_time,analytic_flops\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{}", r.t, r.seconds, r.flops);
        }
        s
    }
}

/// Ordinary least-squares slope of `ln y` on `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::contract("slope fit needs at least two paired points"));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let num: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    Ok(num / den)
}

/// Times one scan per length (best of `repeats`) on the calling thread.
pub fn scaling_bench(lengths: &[usize], mode: ScanMode, dims: SsdDims, repeats: usize) -> Result<BenchReport> {
    if lengths.is_empty() || lengths.windows(2).any(|w| w[0] >= w[1]) || lengths[0] == 0 {
        return Err(Error::contract("benchmark lengths must be positive and strictly increasing"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let zero = ScanState::zeros(&dims);
    let mut rows = Vec::with_capacity(lengths.len());
    for &t in lengths {
        let p = SelectiveParams::random(t, dims, &mut rng);
        let mut best = f64::INFINITY;
        for _ in 0..repeats.max(1) {
            let start = Instant::now();
            let y = match mode {
                ScanMode::Recurrent => scan_recurrent(&p, &zero, Discretization::Simplified)?.0,
                ScanMode::Chunked { chunk_len } => scan_chunked(&p, chunk_len, &zero, Discretization::Simplified)?.0,
                ScanMode::Convolutional => scan_convolutional(&p, None, Discretization::Simplified)?,
            };
            best = best.min(start.elapsed().as_secs_f64());
            std::hint::black_box(y);
        }
        let flops = count_flops(t as u64, dims.state as u64, dims.heads as u64, dims.head_dim as u64, mode);
        rows.push(BenchRow { t, seconds: best, flops });
    }
    let slope = if rows.len() >= 2 {
        let xs: Vec<f64> = rows.iter().map(|r| r.t as f64).collect();
        let ys: Vec<f64> = rows.iter().map(|r| r.seconds.max(1e-9)).collect();
        loglog_slope(&xs, &ys)?
    } else {
        f64::NAN
    };
    Ok(BenchReport { mode, rows, slope })
}

/// One measured value for a model size and connector layout.
#[derive(Clone, Debug, PartialEq)]
pub struct TableCell {
    pub model: String,
    pub variant: ConnectorVariant,
    pub value: f64,
}

/// Model rows by connector columns `(a)`, `(b)`, `(c)`; absent cells are empty.
/// Rows keep the order in which models first appear.
pub fn table_csv(metric: &str, cells: &[TableCell]) -> String {
    let variants = [ConnectorVariant::Concatenation, ConnectorVariant::TimeMajor, ConnectorVariant::FrequencyMajor];
    let mut models: Vec<&str> = Vec::new();
    for c in cells {
        if !models.contains(&c.model.as_str()) {
            models.push(&c.model);
        }
    }
    let mut s = format!("model,metric,{}\n", variants.map(|v| v.tag()).join(","));
    for m in models {
        let vals: Vec<String> = variants
            .iter()
            .map(|v| {
                cells
                    .iter()
                    .rfind(|c| c.model == m && c.variant == *v)
                    .map(|c| format!("{}", c.value))
                    .unwrap_or_default()
            })
            .collect();
        let _ = writeln!(s, "{m},{metric},{}", vals.join(","));
    }
    s
}

/// Short size label such as `L4-D64`.
pub fn model_label(model: &MacModel) -> String {
    format!("L{}-D{}", model.lm_cfg.n_layers, model.lm_cfg.d_model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fm(rows: &[Vec<f64>]) -> FeatureMatrix {
        FeatureMatrix::new(Tensor::from_rows(rows).unwrap(), "test").unwrap()
    }

    #[test]
    fn antipodal_tokens_give_rank_one_covariance() {
        let s = 0.5f64.sqrt();
        let cov = normalized_covariance(&fm(&[vec![s, s], vec![-s, -s]]).rows).unwrap();
        for v in cov.data() {
            assert!((v - 0.5).abs() < 1e-15);
        }
        assert!((erank(&cov).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn symmetric_orthonormal_pair_gives_half_identity() {
        let rows = vec![vec![1.0, 0.0, 0.0], vec![-1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, -1.0, 0.0]];
        let cov = normalized_covariance(&fm(&rows).rows).unwrap();
        let want = [0.5, 0.0, 0.0, 0.0, 0.5, 0.0, 0.0, 0.0, 0.0];
        assert!(cov.max_abs_diff(&Tensor::new(&[3, 3], want.to_vec()).unwrap()) < 1e-15);
    }

    #[test]
    fn constructed_spectra() {
        assert!((erank_from_singular_values(&[3.0, 0.0, 0.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((erank_from_singular_values(&[1.0, 1.0]).unwrap() - 2.0).abs() < 1e-15);
        assert!((erank_from_singular_values(&[2.0, 1.0, 1.0]).unwrap() - 2.828_427_124_746_19).abs() < 1e-12);
        assert!(erank_from_singular_values(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn jacobi_recovers_diagonal_and_rank_one_spectra() {
        let d = Tensor::new(&[3, 3], vec![0.0, 0.0, 2.0, 0.0, -3.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(singular_values(&d).unwrap(), vec![3.0, 2.0, 1.0]);
        let u = Tensor::new(&[4, 1], vec![1.0, 2.0, 2.0, 4.0]).unwrap();
        let v = Tensor::new(&[1, 3], vec![2.0, 1.0, 2.0]).unwrap();
        let s = singular_values(&u.matmul(&v).unwrap()).unwrap();
        assert!((s[0] - 15.0).abs() < 1e-12 && s[1].abs() < 1e-12 && s[2].abs() < 1e-12);
    }

    #[test]
    fn identical_tokens_are_an_error() {
        let rows = vec![vec![1.0, 2.0]; 5];
        assert!(erank_of_tokens(&fm(&rows), ErankSource::Covariance).is_err());
        assert!((mean_pairwise_cosine(&fm(&rows)).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(mean_pairwise_cosine(&fm(&[vec![1.0, 0.0], vec![0.0, 2.0]])).unwrap(), 0.0);
        assert!(mean_pairwise_cosine(&fm(&[vec![1.0, 0.0], vec![0.0, 0.0]])).is_err());
    }

    #[test]
    fn empty_trace_is_an_error() {
        assert!(distances_from_states(&[], 0, 4, StateNorm::Frobenius).is_err());
    }

    #[test]
    fn single_position_segment_has_no_distances() {
        let states = vec![vec![Tensor::zeros(&[1, 1, 1]), Tensor::full(&[1, 1, 1], 2.0)]];
        let d = distances_from_states(&states, 0, 1, StateNorm::Frobenius).unwrap();
        assert!(d.mean.is_empty());
    }

    #[test]
    fn head_mean_averages_head_norms() {
        let a = Tensor::zeros(&[2, 1, 2]);
        let b = Tensor::new(&[2, 1, 2], vec![3.0, 4.0, 0.0, 1.0]).unwrap();
        assert_eq!(state_distance(&b, &a, StateNorm::HeadMean), 3.0);
        assert!((state_distance(&b, &a, StateNorm::Frobenius) - 26f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn table_layout_has_one_row_per_model() {
        let cells = vec![
            TableCell { model: "L4-D64".into(), variant: ConnectorVariant::Concatenation, value: 1.5 },
            TableCell { model: "L8-D128".into(), variant: ConnectorVariant::FrequencyMajor, value: 2.0 },
            TableCell { model: "L4-D64".into(), variant: ConnectorVariant::TimeMajor, value: 3.0 },
        ];
        assert_eq!(
            table_csv("erank", &cells),
            "model,metric,a,b,c\nL4-D64,erank,1.5,3,\nL8-D128,erank,,,2\n"
        );
    }

    #[test]
    fn unsorted_bench_lengths_are_rejected() {
        let dims = SsdDims { heads: 1, head_dim: 1, groups: 1, state: 1 };
        assert!(scaling_bench(&[8, 4], ScanMode::Recurrent, dims, 1).is_err());
    }
}
