//! One optimizer step over a batch of sequence plans.

use std::collections::BTreeSet;
use std::path::PathBuf;

use super::config::Config;
use super::model::{AudioInput, MacModel, SequencePlan};
use super::store::save_model;
use crate::audio::encode_tensor;
use crate::error::{Error, Result};
use crate::numerics::{clip_grad_norm, AdamW, Graph};

#[derive(Debug)]
pub struct TrainState {
    pub model: MacModel,
    pub optimizer: AdamW,
    pub config: Config,
    pub step: u64,
    /// Where divergence dumps go; `None` disables dumping.
    pub dump_dir: Option<PathBuf>,
    trainable: BTreeSet<String>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    /// Mean cross-entropy over every unmasked position in the batch.
    pub loss: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    /// Teacher-forced argmax hits and unmasked positions.
    pub correct: usize,
    pub tokens: usize,
}

impl TrainState {
    pub fn new(model: MacModel, config: Config) -> Self {
        let t = &config.train;
        let mut optimizer = AdamW::new(t.beta1, t.beta2, t.weight_decay);
        optimizer.precision = config.precision;
        let trainable = model.trainable();
        TrainState {
            model,
            optimizer,
            config,
            step: 0,
            dump_dir: None,
            trainable,
        }
    }

    pub fn trainable(&self) -> &BTreeSet<String> {
        &self.trainable
    }

    fn graph(&self) -> Graph {
        Graph::new()
            .with_precision(self.config.precision)
            .with_finite_checks(self.config.train.finite_checks)
            .with_trainable(self.trainable.clone())
    }

    fn diverged(&self, loss: f64) -> Error {
        let dump = self.dump_dir.as_ref().and_then(|d| {
            std::fs::create_dir_all(d).ok()?;
            let path = d.join(format!("diverged-step{}.ckpt", self.step));
            save_model(&path, &self.model, &self.config).ok().map(|_| path)
        });
        Error::Diverged {
            step: self.step,
            loss,
            dump,
        }
    }
}

/// Encodes mel inputs once when the encoder is frozen; its output cannot change.
pub fn precompute_audio(model: &MacModel, audio: AudioInput) -> Result<AudioInput> {
    match audio {
        AudioInput::Mel(m) if !model.encoder_trainable => {
            Ok(AudioInput::Grid(encode_tensor(&m, &model.encoder, &model.encoder_cfg)?))
        }
        other => Ok(other),
    }
}

pub fn train_step(state: &mut TrainState, batch: &[&SequencePlan], lr: f64) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let total: usize = batch.iter().map(|p| p.loss_mask.iter().filter(|&&m| m).count()).sum();
    let mut g = state.graph();
    let mut loss = None;
    let mut correct = 0;
    for plan in batch {
        let n = plan.loss_mask.iter().filter(|&&m| m).count();
        let logits = match state.model.logits(&mut g, plan) {
            Ok(l) => l,
            Err(Error::NonFinite { .. }) => return Err(state.diverged(f64::NAN)),
            Err(e) => return Err(e),
        };
        let lv = g.value(logits);
        for (i, t) in plan.masked_targets().iter().enumerate() {
            if let Some(t) = t {
                let row = lv.row(i);
                let arg = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap_or(0);
                correct += usize::from(arg == *t);
            }
        }
        let ce = g.cross_entropy(logits, &plan.masked_targets())?;
        let weighted = g.scale(ce, n as f64 / total as f64)?;
        loss = Some(match loss {
            None => weighted,
            Some(acc) => g.add(acc, weighted)?,
        });
    }
    let loss = loss.expect("non-empty batch");
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(state.diverged(value));
    }
    let mut grads = g.backward(loss)?.by_name();
    grads.retain(|k, _| state.trainable.contains(k));
    let grad_norm = clip_grad_norm(&mut grads, state.config.train.clip_norm);
    if !grad_norm.is_finite() {
        return Err(state.diverged(value));
    }
    state.optimizer.step(&mut state.model, &grads, lr)?;
    state.step += 1;
    Ok(StepReport {
        loss: value,
        grad_norm,
        correct,
        tokens: total,
    })
}
