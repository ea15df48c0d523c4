//! Model checkpoints: full weights, or adapters only over a reproducible base.

use std::path::Path;

use super::config::Config;
use super::model::MacModel;
use super::vocab::Vocab;
use crate::error::{Error, Result};
use crate::numerics::Parameters;
use crate::pipeline::checkpoint::Checkpoint;

const KIND_FULL: &str = "mac-model";
const KIND_ADAPTERS: &str = "mac-adapters";

fn checkpoint_of(model: &MacModel, cfg: &Config, kind: &str, only_trainable: bool) -> Checkpoint {
    let mut ck = Checkpoint::new()
        .with_meta("kind", kind)
        .with_meta("vocab", model.vocab.words().join(" "));
    ck.config = cfg.to_toml();
    let keep = model.trainable();
    model.visit(&mut |name, t| {
        if !only_trainable || keep.contains(name) {
            ck.tensors.insert(name.to_string(), t.clone());
        }
    });
    ck
}

pub fn save_model(path: &Path, model: &MacModel, cfg: &Config) -> Result<()> {
    checkpoint_of(model, cfg, KIND_FULL, false).save(path)
}

/// Trainable tensors only (adapters, connector, separator, and a trainable encoder).
pub fn save_adapters(path: &Path, model: &MacModel, cfg: &Config) -> Result<()> {
    checkpoint_of(model, cfg, KIND_ADAPTERS, true).save(path)
}

pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<(Config, MacModel)> {
    let cfg = Config::from_toml(&ck.config)?;
    let words = ck
        .meta
        .get("vocab")
        .ok_or_else(|| Error::Metadata("checkpoint has no vocabulary".into()))?;
    let vocab = Vocab::from_words(words.split(' ').map(str::to_string).collect())?;
    let mut model = MacModel::init(&cfg, vocab)?;
    let kind = ck.meta.get("kind").map(String::as_str).unwrap_or("");
    let expected: Vec<String> = match kind {
        KIND_FULL => model.named_tensors().into_keys().collect(),
        KIND_ADAPTERS => model.trainable().into_iter().collect(),
        other => return Err(Error::Checkpoint(format!("unknown checkpoint kind `{other}`"))),
    };
    for name in &expected {
        if !ck.tensors.contains_key(name) {
            return Err(Error::Checkpoint(format!("missing tensor `{name}`")));
        }
    }
    if let Some(extra) = ck.tensors.keys().find(|k| !expected.contains(k)) {
        return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
    }
    let mut err = None;
    model.visit_mut(&mut |name, t| {
        if let Some(src) = ck.tensors.get(name) {
            if src.shape() == t.shape() {
                *t = src.clone();
            } else {
                err.get_or_insert(Error::shape("load_checkpoint", t.shape(), src.shape()));
            }
        }
    });
    err.map_or(Ok((cfg, model)), Err)
}

pub fn load_model(path: &Path) -> Result<(Config, MacModel)> {
    model_from_checkpoint(&Checkpoint::load(path)?)
}
