//! Experiment configuration: a TOML document with defaults for every key,
//! dotted-key overrides, and exhaustive validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::EncoderConfig;
use crate::blocks::LmConfig;
use crate::connector::{ConnectorConfig, ConnectorVariant, SeparatorPlacement};
use crate::error::{Error, Result};
use crate::numerics::Precision;
use crate::ssd::{Discretization, ScanMode};

pub const DEFAULT_PROMPT: &str = "Write an audio caption describing the sound";
pub const CLASSIFY_PROMPT: &str = "Classify the sound";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub precision: Precision,
    pub model: ModelSection,
    pub encoder: EncoderSection,
    pub connector: ConnectorSection,
    pub data: DataSection,
    pub train: TrainSection,
    pub output: OutputSection,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Nano,
    Small,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub preset: Preset,
    pub n_layers: Option<usize>,
    pub d_model: Option<usize>,
    pub n_heads: Option<usize>,
    pub head_dim: Option<usize>,
    pub d_state: Option<usize>,
    pub n_groups: Option<usize>,
    pub tie_embeddings: bool,
    pub lora_rank: usize,
    pub discretization: Discretization,
    pub scan_mode: ScanMode,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            preset: Preset::Nano,
            n_layers: None,
            d_model: None,
            n_heads: None,
            head_dim: None,
            d_state: None,
            n_groups: None,
            tie_embeddings: true,
            lora_rank: 8,
            discretization: Discretization::Simplified,
            scan_mode: ScanMode::Recurrent,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Geometry {
    /// 16 × 8 token grid.
    Desk,
    /// 64 × 8 grid of 768-dimensional tokens.
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderInit {
    Random,
    /// Weights from a short audio-classification pretext run.
    Pretext,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub trainable: bool,
    pub geometry: Geometry,
    pub init: EncoderInit,
    pub pretext_steps: usize,
}

impl Default for EncoderSection {
    fn default() -> Self {
        EncoderSection {
            trainable: true,
            geometry: Geometry::Desk,
            init: EncoderInit::Random,
            pretext_steps: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConnectorSection {
    pub variant: ConnectorVariant,
    pub hidden_mult: usize,
    pub separator: SeparatorPlacement,
}

impl Default for ConnectorSection {
    fn default() -> Self {
        ConnectorSection {
            variant: ConnectorVariant::FrequencyMajor,
            hidden_mult: 4,
            separator: SeparatorPlacement::Prefix,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Corpus manifest written by `make-data`; empty means an in-memory synthetic corpus.
    pub manifest: String,
    pub n_train: usize,
    pub n_eval: usize,
    pub corpus_seed: u64,
    pub prompt: String,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            manifest: String::new(),
            n_train: 8,
            n_eval: 8,
            corpus_seed: 0,
            prompt: DEFAULT_PROMPT.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    /// First epoch (0-based) trained at the reduced learning rate.
    pub stage2_epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub stage2_lr_ratio: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// Steps of label prediction ("Classify the sound") before captioning.
    pub classification_warmup_steps: usize,
    /// Stop once the epoch loss is below this and every training caption is reproduced; 0 disables.
    pub early_stop_loss: f64,
    pub max_decode_len: usize,
    pub finite_checks: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 20,
            steps_per_epoch: 25,
            stage2_epoch: 15,
            batch_size: 8,
            lr: 1e-3,
            stage2_lr_ratio: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.0,
            clip_norm: 1.0,
            classification_warmup_steps: 0,
            early_stop_loss: 0.0,
            max_decode_len: 24,
            finite_checks: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub save_checkpoint: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: PathBuf::from("runs/default"),
            save_checkpoint: true,
        }
    }
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            precision: Precision::F64,
            model: ModelSection::default(),
            encoder: EncoderSection::default(),
            connector: ConnectorSection::default(),
            data: DataSection::default(),
            train: TrainSection::default(),
            output: OutputSection::default(),
        }
    }
}

fn parse_scalar(raw: &str) -> toml::Value {
    // Reuse the TOML grammar for the right-hand side; fall back to a bare string.
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Sets `a.b.c = value` inside a TOML table, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(vec![format!("override `{assignment}` is not of the form key=value")]))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(vec![format!("override key `{key}` is malformed")]));
    }
    let mut cur = table;
    for p in &path[..path.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(vec![format!("override `{key}`: `{p}` is not a section")]))?;
    }
    cur.insert(path[path.len() - 1].to_string(), parse_scalar(raw.trim()));
    Ok(())
}

impl Config {
    /// Parses TOML text, applies overrides, and validates.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(vec![e.message().to_string()]))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Config = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(vec![e.message().to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with_overrides(text, &[])
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_with_overrides(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn lm_config(&self, vocab_size: usize) -> LmConfig {
        let base = match self.model.preset {
            Preset::Nano => LmConfig::nano(vocab_size),
            Preset::Small => LmConfig::small(vocab_size),
        };
        let m = &self.model;
        LmConfig {
            n_layers: m.n_layers.unwrap_or(base.n_layers),
            d_model: m.d_model.unwrap_or(base.d_model),
            n_heads: m.n_heads.unwrap_or(base.n_heads),
            head_dim: m.head_dim.unwrap_or(base.head_dim),
            d_state: m.d_state.unwrap_or(base.d_state),
            n_groups: m.n_groups.unwrap_or(base.n_groups),
            vocab_size,
            tie_embeddings: m.tie_embeddings,
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        match self.encoder.geometry {
            Geometry::Desk => EncoderConfig::desk(),
            Geometry::Full => EncoderConfig::full_scale(),
        }
    }

    pub fn connector_config(&self, d_model: usize) -> ConnectorConfig {
        let enc = self.encoder_config();
        let (t, f) = enc.grid();
        ConnectorConfig {
            variant: self.connector.variant,
            d_enc: enc.d_enc(),
            grid_t: t,
            grid_f: f,
            d_model,
            hidden_mult: self.connector.hidden_mult,
            separator: self.connector.separator,
        }
    }

    pub fn total_steps(&self) -> usize {
        self.train.epochs * self.train.steps_per_epoch
    }

    /// Learning rate of a (0-based) epoch under the two-stage schedule.
    pub fn lr_for_epoch(&self, epoch: usize) -> f64 {
        if epoch >= self.train.stage2_epoch {
            self.train.lr * self.train.stage2_lr_ratio
        } else {
            self.train.lr
        }
    }

    /// Every violated constraint, not just the first.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let lm = self.lm_config(8);
        if let Err(e) = lm.validate() {
            errs.push(format!("model: {e}"));
        }
        if self.model.lora_rank == 0 {
            errs.push("model.lora_rank must be positive".into());
        }
        if let ScanMode::Chunked { chunk_len: 0 } = self.model.scan_mode {
            errs.push("model.scan_mode.chunk_len must be at least 1".into());
        }
        if self.model.scan_mode == ScanMode::Convolutional {
            errs.push("model.scan_mode = convolutional cannot carry decode state; use recurrent or chunked".into());
        }
        if self.connector.hidden_mult == 0 {
            errs.push("connector.hidden_mult must be positive".into());
        }
        let t = &self.train;
        if t.steps_per_epoch == 0 {
            errs.push("train.steps_per_epoch must be positive".into());
        }
        if t.batch_size == 0 {
            errs.push("train.batch_size must be positive".into());
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            errs.push("train.lr must be positive and finite".into());
        }
        if !(t.stage2_lr_ratio > 0.0 && t.stage2_lr_ratio <= 1.0) {
            errs.push("train.stage2_lr_ratio must lie in (0, 1]".into());
        }
        for (name, b) in [("beta1", t.beta1), ("beta2", t.beta2)] {
            if !(0.0..1.0).contains(&b) {
                errs.push(format!("train.{name} must lie in [0, 1)"));
            }
        }
        if !(t.weight_decay >= 0.0) {
            errs.push("train.weight_decay must be non-negative".into());
        }
        if !(t.clip_norm > 0.0) {
            errs.push("train.clip_norm must be positive".into());
        }
        if !(t.early_stop_loss >= 0.0) {
            errs.push("train.early_stop_loss must be non-negative".into());
        }
        if self.data.manifest.is_empty() && self.data.n_train == 0 {
            errs.push("data.n_train must be positive".into());
        }
        if self.data.prompt.split_whitespace().next().is_none() {
            errs.push("data.prompt must be non-empty".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}
