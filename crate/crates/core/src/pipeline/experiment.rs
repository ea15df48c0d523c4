//! End-to-end runs: data preparation, staged training, per-epoch evaluation,
//! metrics CSV, and the ablation harness.

use std::fmt::Write as _;
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{Config, EncoderInit, CLASSIFY_PROMPT};
use super::data::{load_dataset, prepare_all, AudioSource, Sample};
use super::generate::{generate_ids, token_f1, DecodeMode};
use super::model::{AudioInput, MacModel, SequencePlan};
use super::store::save_model;
use super::train::{precompute_audio, train_step, TrainState};
use crate::audio::{encode, EncoderConfig, EncoderWeights, MelFrontEnd, MelSpec};
use crate::audio::synth::LABELS;
use crate::connector::ConnectorVariant;
use crate::error::{Error, Result};
use crate::numerics::{AdamW, Graph, Tensor};

pub const CSV_HEADER: &str = "epoch,stage,loss,token_acc,caption_f1,seed";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    /// 0 for the classification warmup, then 1 and 2 for the learning-rate stages.
    pub stage: usize,
    pub loss: f64,
    pub token_acc: f64,
    pub caption_f1: f64,
    pub seed: u64,
}

impl MetricsRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.stage, self.loss, self.token_acc, self.caption_f1, self.seed
        )
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{}", r.csv());
    }
    s
}

#[derive(Debug)]
pub struct ExperimentResult {
    pub rows: Vec<MetricsRow>,
    pub state: TrainState,
    /// Optimizer steps taken, including warmup.
    pub steps: u64,
    /// Whether every training caption was reproduced by greedy decoding at the end.
    pub memorized: bool,
}

impl ExperimentResult {
    pub fn csv(&self) -> String {
        metrics_csv(&self.rows)
    }
}

struct Prepared {
    sample: Sample,
    audio: AudioInput,
}

fn prepare(model: &MacModel, samples: &[Sample]) -> Result<Vec<Prepared>> {
    let sources: Vec<&AudioSource> = samples.iter().map(|s| &s.audio).collect();
    let audio = prepare_all(&sources, &MelFrontEnd::new(), &model.encoder_cfg)?;
    Ok(samples
        .iter()
        .zip(audio)
        .map(|(s, audio)| Prepared {
            sample: s.clone(),
            audio,
        })
        .collect())
}

/// Teacher-forced token accuracy and mean greedy caption F1 over `set`.
fn evaluate(model: &MacModel, set: &[Prepared], max_len: usize) -> Result<(f64, f64, bool)> {
    let (mut hit, mut total, mut f1) = (0usize, 0usize, 0.0);
    let mut exact = true;
    for p in set {
        let plan = model.build_sequence(p.audio.clone(), &p.sample.prompt, Some(&p.sample.caption))?;
        let mut g = Graph::inference();
        let logits = model.logits(&mut g, &plan)?;
        let lv = g.value(logits);
        for (i, t) in plan.masked_targets().iter().enumerate() {
            if let Some(t) = t {
                let row = lv.row(i);
                let arg = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap_or(0);
                hit += usize::from(arg == *t);
                total += 1;
            }
        }
        let ids = generate_ids(model, &p.audio, &p.sample.prompt, max_len, DecodeMode::Streaming)?;
        let pred = model.vocab.decode(&ids);
        exact &= pred == p.sample.caption;
        f1 += token_f1(&pred, &p.sample.caption);
    }
    let n = set.len().max(1) as f64;
    Ok((hit as f64 / total.max(1) as f64, f1 / n, exact))
}

fn all_reproduced(model: &MacModel, set: &[Prepared], max_len: usize) -> Result<bool> {
    for p in set {
        let ids = generate_ids(model, &p.audio, &p.sample.prompt, max_len, DecodeMode::Streaming)?;
        if model.vocab.decode(&ids) != p.sample.caption {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Short label-classification run on mean-pooled encoder tokens; returns the
/// trained encoder weights.
pub fn pretrain_encoder(
    cfg: &EncoderConfig,
    init: EncoderWeights,
    mels: &[(MelSpec, usize)],
    steps: usize,
    seed: u64,
) -> Result<EncoderWeights> {
    struct Pretext {
        enc: EncoderWeights,
        head: Tensor,
    }
    impl crate::numerics::Parameters for Pretext {
        fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
            self.enc.visit(f);
            f("pretext.head", &self.head);
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
            self.enc.visit_mut(f);
            f("pretext.head", &mut self.head);
        }
    }
    if mels.is_empty() || steps == 0 {
        return Ok(init);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let d = cfg.d_enc();
    let mut p = Pretext {
        enc: init,
        head: Tensor::randn(&[d, LABELS.len()], 1.0 / (d as f64).sqrt(), &mut rng),
    };
    let (t, f) = cfg.grid();
    let mut opt = AdamW::new(0.9, 0.95, 0.0);
    for _ in 0..steps {
        let mut g = Graph::new();
        let head = g.param("pretext.head", &p.head);
        let mut pooled = Vec::new();
        for (mel, _) in mels {
            let tokens = encode(&mut g, mel, &p.enc, cfg, false)?;
            let s = g.sum_rows(tokens)?;
            pooled.push(g.scale(s, 1.0 / (t * f) as f64)?);
        }
        let x = g.concat_rows(&pooled)?;
        let logits = g.matmul(x, head)?;
        let targets: Vec<Option<usize>> = mels.iter().map(|(_, l)| Some(*l)).collect();
        let loss = g.cross_entropy(logits, &targets)?;
        let grads = g.backward(loss)?.by_name();
        opt.step(&mut p, &grads, 1e-3)?;
    }
    Ok(p.enc)
}

/// Runs the configured experiment. Deterministic for a fixed config in 64-bit mode.
pub fn run_experiment(cfg: &Config) -> Result<ExperimentResult> {
    cfg.validate()?;
    let ds = load_dataset(cfg)?;
    if ds.train.is_empty() {
        return Err(Error::Config(vec!["dataset has no training samples".into()]));
    }
    let vocab = ds.vocab();
    let mut model = MacModel::init(cfg, vocab)?;
    let mut train = prepare(&model, &ds.train)?;
    let mut eval = prepare(&model, &ds.eval)?;

    if cfg.encoder.init == EncoderInit::Pretext {
        let mels: Vec<(MelSpec, usize)> = train
            .iter()
            .filter_map(|p| match (&p.audio, &p.sample.label) {
                (AudioInput::Mel(m), Some(l)) => LABELS.iter().position(|x| x == l).map(|i| (m.clone(), i)),
                _ => None,
            })
            .collect();
        model.encoder = pretrain_encoder(&model.encoder_cfg, model.encoder.clone(), &mels, cfg.encoder.pretext_steps, cfg.seed)?;
    }
    for p in train.iter_mut().chain(eval.iter_mut()) {
        p.audio = precompute_audio(&model, p.audio.clone())?;
    }

    let plans: Vec<SequencePlan> = train
        .iter()
        .map(|p| model.build_sequence(p.audio.clone(), &p.sample.prompt, Some(&p.sample.caption)))
        .collect::<Result<_>>()?;
    let warmup_plans: Vec<SequencePlan> = train
        .iter()
        .filter_map(|p| p.sample.label.as_ref().map(|l| (p, l)))
        .map(|(p, l)| model.build_sequence(p.audio.clone(), CLASSIFY_PROMPT, Some(l)))
        .collect::<Result<_>>()?;

    let out_dir = &cfg.output.dir;
    let mut state = TrainState::new(model, cfg.clone());
    state.dump_dir = Some(out_dir.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = Vec::new();
    let mut next_batch = |n: usize, rng: &mut ChaCha8Rng| -> Vec<usize> {
        let bs = cfg.train.batch_size.min(n);
        let mut out = Vec::with_capacity(bs);
        while out.len() < bs {
            if order.is_empty() {
                order = (0..n).collect();
                order.shuffle(rng);
            }
            out.push(order.pop().expect("refilled"));
        }
        out
    };

    let eval_set = if eval.is_empty() { &train } else { &eval };
    let max_len = cfg.train.max_decode_len;
    let mut rows = Vec::new();

    if cfg.train.classification_warmup_steps > 0 && !warmup_plans.is_empty() {
        let mut sum = 0.0;
        let mut wrng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
        let mut worder: Vec<usize> = Vec::new();
        for _ in 0..cfg.train.classification_warmup_steps {
            let bs = cfg.train.batch_size.min(warmup_plans.len());
            let mut idx = Vec::with_capacity(bs);
            while idx.len() < bs {
                if worder.is_empty() {
                    worder = (0..warmup_plans.len()).collect();
                    worder.shuffle(&mut wrng);
                }
                idx.push(worder.pop().expect("refilled"));
            }
            let batch: Vec<&SequencePlan> = idx.iter().map(|&i| &warmup_plans[i]).collect();
            sum += train_step(&mut state, &batch, cfg.train.lr)?.loss;
        }
        let (acc, f1, _) = evaluate(&state.model, eval_set, max_len)?;
        rows.push(MetricsRow {
            epoch: 0,
            stage: 0,
            loss: sum / cfg.train.classification_warmup_steps as f64,
            token_acc: acc,
            caption_f1: f1,
            seed: cfg.seed,
        });
    }

    let mut memorized = false;
    for epoch in 0..cfg.train.epochs {
        let lr = cfg.lr_for_epoch(epoch);
        let stage = if epoch >= cfg.train.stage2_epoch { 2 } else { 1 };
        let mut sum = 0.0;
        for _ in 0..cfg.train.steps_per_epoch {
            let idx = next_batch(plans.len(), &mut rng);
            let batch: Vec<&SequencePlan> = idx.iter().map(|&i| &plans[i]).collect();
            sum += train_step(&mut state, &batch, lr)?.loss;
        }
        let loss = sum / cfg.train.steps_per_epoch as f64;
        let (acc, f1, _) = evaluate(&state.model, eval_set, max_len)?;
        info!("epoch {} stage {stage} loss {loss:.5} token_acc {acc:.4} caption_f1 {f1:.4}", epoch + 1);
        rows.push(MetricsRow {
            epoch: epoch + 1,
            stage,
            loss,
            token_acc: acc,
            caption_f1: f1,
            seed: cfg.seed,
        });
        if cfg.train.early_stop_loss > 0.0 && loss < cfg.train.early_stop_loss {
            memorized = all_reproduced(&state.model, &train, max_len)?;
            if memorized {
                break;
            }
        }
    }
    if !memorized {
        memorized = all_reproduced(&state.model, &train, max_len)?;
    }

    if !out_dir.as_os_str().is_empty() {
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let csv_path = out_dir.join("metrics.csv");
        std::fs::write(&csv_path, metrics_csv(&rows)).map_err(|e| Error::io(&csv_path, e))?;
        if cfg.output.save_checkpoint {
            save_model(&out_dir.join("model.ckpt"), &state.model, cfg)?;
        }
    }
    let steps = state.step;
    Ok(ExperimentResult {
        rows,
        state,
        steps,
        memorized,
    })
}

/// One ablation cell: a tag and the overrides that define it.
pub fn ablation_grid() -> Vec<(String, Vec<String>)> {
    let mut cells = vec![
        ("rank8".to_string(), vec!["model.lora_rank=8".to_string()]),
        ("rank256".to_string(), vec!["model.lora_rank=256".to_string()]),
        ("encoder_frozen".to_string(), vec!["encoder.trainable=false".to_string()]),
        ("encoder_trainable".to_string(), vec!["encoder.trainable=true".to_string()]),
    ];
    for v in [ConnectorVariant::Concatenation, ConnectorVariant::TimeMajor, ConnectorVariant::FrequencyMajor] {
        let name = toml::Value::try_from(v).expect("variant serializes");
        cells.push((
            format!("connector_{}", v.tag()),
            vec![format!("connector.variant={name}")],
        ));
    }
    cells
}

/// Runs every ablation cell from `base` and returns the tagged summary CSV
/// (`tag,` followed by the metrics columns). Each cell writes into `dir/<tag>`.
pub fn run_ablation(base: &Config, dir: &Path) -> Result<String> {
    let mut out = format!("tag,{CSV_HEADER}\n");
    for (tag, overrides) in ablation_grid() {
        let mut text = base.to_toml();
        text.push('\n');
        let mut all = overrides.clone();
        all.push(format!("output.dir=\"{}\"", dir.join(&tag).display()));
        let cfg = Config::from_toml_with_overrides(&text, &all)?;
        info!("ablation cell {tag}");
        let res = run_experiment(&cfg)?;
        for r in &res.rows {
            let _ = writeln!(out, "{tag},{}", r.csv());
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("ablation.csv");
    std::fs::write(&path, &out).map_err(|e| Error::io(&path, e))?;
    Ok(out)
}
