//! The full captioning model: encoder, connector and adapted language model,
//! plus sequence assembly `[audio, prompt, caption ⊕ <eos>]`.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::Config;
use super::vocab::Vocab;
use crate::audio::{encode, AudioTokenGrid, EncoderConfig, EncoderWeights, MelSpec};
use crate::blocks::{embed_tokens, lm_forward, trainable_parameter_selection, BlockCache, ForwardOptions, LmConfig, LmWeights};
use crate::connector::{connect, ConnectorConfig, MlpWeights, Segment};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Parameters, Tensor, Var};

/// Audio ready for the model: a fitted mel spectrogram, or a precomputed grid
/// that bypasses the encoder.
#[derive(Clone, Debug, PartialEq)]
pub enum AudioInput {
    Mel(MelSpec),
    Grid(AudioTokenGrid),
}

#[derive(Clone, Debug, PartialEq)]
pub struct MacModel {
    pub lm_cfg: LmConfig,
    pub encoder_cfg: EncoderConfig,
    pub connector_cfg: ConnectorConfig,
    pub encoder_trainable: bool,
    pub options: ForwardOptions,
    pub vocab: Vocab,
    pub encoder: EncoderWeights,
    pub connector: MlpWeights,
    pub lm: LmWeights,
}

impl Parameters for MacModel {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.encoder.visit(f);
        self.connector.visit(f);
        self.lm.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.encoder.visit_mut(f);
        self.connector.visit_mut(f);
        self.lm.visit_mut(f);
    }
}

/// Model inputs and per-position training targets for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SequencePlan {
    pub audio: AudioInput,
    /// Prompt ids, then (in training) caption ids and `<eos>`.
    pub text_ids: Vec<usize>,
    pub segments: Vec<Segment>,
    /// Next-token id for every position (`<pad>` where undefined).
    pub targets: Vec<usize>,
    /// True exactly at positions whose next token is a caption token or `<eos>`.
    pub loss_mask: Vec<bool>,
}

impl SequencePlan {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn masked_targets(&self) -> Vec<Option<usize>> {
        self.targets.iter().zip(&self.loss_mask).map(|(&t, &m)| m.then_some(t)).collect()
    }
}

impl MacModel {
    /// Deterministic from `cfg.seed`: the same config and vocabulary always
    /// give the same base weights, so adapter-only checkpoints can be replayed.
    pub fn init(cfg: &Config, vocab: Vocab) -> Result<Self> {
        let lm_cfg = cfg.lm_config(vocab.len());
        let encoder_cfg = cfg.encoder_config();
        let connector_cfg = cfg.connector_config(lm_cfg.d_model);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let lm = LmWeights::init(&lm_cfg, Some(cfg.model.lora_rank), &mut rng)?;
        let encoder = EncoderWeights::init(&encoder_cfg, &mut rng)?;
        let connector = MlpWeights::for_config(&connector_cfg, &mut rng);
        Ok(MacModel {
            lm_cfg,
            encoder_cfg,
            connector_cfg,
            encoder_trainable: cfg.encoder.trainable,
            options: ForwardOptions {
                mode: cfg.model.scan_mode,
                discretization: cfg.model.discretization,
                trace: false,
            },
            vocab,
            encoder,
            connector,
            lm,
        })
    }

    pub fn trainable(&self) -> BTreeSet<String> {
        trainable_parameter_selection(self, self.encoder_trainable)
    }

    pub fn audio_len(&self) -> usize {
        self.connector_cfg.output_len()
    }

    /// Audio embeddings `E_a` and their segment labels.
    pub fn audio_embeddings(&self, g: &mut Graph, audio: &AudioInput) -> Result<(Var, Vec<Segment>)> {
        let grid = match audio {
            AudioInput::Mel(m) => encode(g, m, &self.encoder, &self.encoder_cfg, !self.encoder_trainable)?,
            AudioInput::Grid(grid) => {
                let c = &self.connector_cfg;
                if (grid.grid_t, grid.grid_f, grid.dim()) != (c.grid_t, c.grid_f, c.d_enc) {
                    return Err(Error::contract(format!(
                        "feature grid {}×{}×{} does not match the model's {}×{}×{}",
                        grid.grid_t,
                        grid.grid_f,
                        grid.dim(),
                        c.grid_t,
                        c.grid_f,
                        c.d_enc
                    )));
                }
                g.constant(grid.tokens.clone())
            }
        };
        let sep = g.param("lm.separator", &self.lm.separator);
        connect(g, grid, &self.connector_cfg, &self.connector, sep)
    }

    /// Training plan `[audio, prompt, caption, <eos>]`; inference plan `[audio, prompt]`.
    pub fn build_sequence(&self, audio: AudioInput, prompt: &str, caption: Option<&str>) -> Result<SequencePlan> {
        let prompt_ids = self.vocab.encode(prompt)?;
        if prompt_ids.is_empty() {
            return Err(Error::contract("prompt is empty"));
        }
        let caption_ids = match caption {
            Some(c) => {
                let ids = self.vocab.encode(c)?;
                if ids.is_empty() {
                    return Err(Error::contract("training caption is empty"));
                }
                Some(ids)
            }
            None => None,
        };
        let mut segments = self.connector_cfg.segments();
        segments.extend(std::iter::repeat_n(Segment::Prompt, prompt_ids.len()));
        let mut text_ids = prompt_ids;
        if let Some(c) = &caption_ids {
            text_ids.extend_from_slice(c);
            text_ids.push(self.vocab.eos());
            segments.extend(std::iter::repeat_n(Segment::Caption, c.len() + 1));
        }
        let audio_len = self.audio_len();
        let n = segments.len();
        let mut targets = vec![self.vocab.pad(); n];
        let mut loss_mask = vec![false; n];
        for i in audio_len..n.saturating_sub(1) {
            targets[i] = text_ids[i + 1 - audio_len];
            loss_mask[i] = segments[i + 1] == Segment::Caption;
        }
        if audio_len > 0 && n > audio_len {
            // The last audio position predicts the first prompt token.
            targets[audio_len - 1] = text_ids[0];
        }
        Ok(SequencePlan {
            audio,
            text_ids,
            segments,
            targets,
            loss_mask,
        })
    }

    /// Input embeddings for the whole plan.
    pub fn embed_plan(&self, g: &mut Graph, plan: &SequencePlan) -> Result<Var> {
        let (audio, _) = self.audio_embeddings(g, &plan.audio)?;
        let text = embed_tokens(g, &self.lm, &plan.text_ids, Some(self.vocab.separator()))?;
        g.concat_rows(&[audio, text])
    }

    /// Logits `L × vocab` for the plan.
    pub fn logits(&self, g: &mut Graph, plan: &SequencePlan) -> Result<Var> {
        let x = self.embed_plan(g, plan)?;
        Ok(lm_forward(g, &self.lm, &self.lm_cfg, x, self.options, None)?.logits)
    }

    /// Mean cross-entropy over the plan's masked positions.
    pub fn loss(&self, g: &mut Graph, plan: &SequencePlan) -> Result<Var> {
        let logits = self.logits(g, plan)?;
        g.cross_entropy(logits, &plan.masked_targets())
    }

    /// Logits computed one position at a time through the streaming caches.
    pub fn streaming_logits(&self, plan: &SequencePlan) -> Result<Tensor> {
        let mut g = Graph::inference();
        let x = self.embed_plan(&mut g, plan)?;
        let x = g.value(x).clone();
        let mut caches: Vec<BlockCache> = self.lm.new_caches(&self.lm_cfg);
        let (n, d) = x.dims2()?;
        let mut rows = Vec::with_capacity(n * self.lm_cfg.vocab_size);
        for t in 0..n {
            let mut g = Graph::inference();
            let xt = g.constant(Tensor::new(&[1, d], x.row(t).to_vec())?);
            let out = lm_forward(&mut g, &self.lm, &self.lm_cfg, xt, self.options, Some(&mut caches))?;
            rows.extend_from_slice(g.value(out.logits).data());
        }
        Tensor::new(&[n, self.lm_cfg.vocab_size], rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::connector::ConnectorVariant;
    use crate::pipeline::config::DEFAULT_PROMPT;

    fn small_model(variant: ConnectorVariant) -> MacModel {
        let mut cfg = Config::default();
        cfg.connector.variant = variant;
        cfg.model.n_layers = Some(1);
        let vocab = Vocab::build([DEFAULT_PROMPT, "a low hum"]);
        MacModel::init(&cfg, vocab).unwrap()
    }

    fn grid(m: &MacModel) -> AudioInput {
        let c = &m.connector_cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        AudioInput::Grid(AudioTokenGrid::new(Tensor::randn(&[c.grid_t * c.grid_f, c.d_enc], 1.0, &mut rng), c.grid_t, c.grid_f).unwrap())
    }

    #[test]
    fn segments_are_ordered_and_mask_counts_caption_plus_eos() {
        let m = small_model(ConnectorVariant::FrequencyMajor);
        let plan = m.build_sequence(grid(&m), DEFAULT_PROMPT, Some("a low hum")).unwrap();
        let rank = |s: &Segment| match s {
            Segment::Audio | Segment::Separator => 0,
            Segment::Prompt => 1,
            Segment::Caption => 2,
        };
        assert!(plan.segments.windows(2).all(|w| rank(&w[0]) <= rank(&w[1])));
        assert_eq!(plan.loss_mask.iter().filter(|&&b| b).count(), 3 + 1);
        assert_eq!(plan.len(), m.audio_len() + 7 + 4);
        // The last prompt position predicts the first caption word.
        let first_caption = m.audio_len() + 6;
        assert!(plan.loss_mask[first_caption]);
        assert_eq!(plan.targets[first_caption], m.vocab.id("a").unwrap());
        assert_eq!(*plan.targets.iter().rev().nth(1).unwrap(), m.vocab.eos());
    }

    #[test]
    fn empty_caption_is_rejected() {
        let m = small_model(ConnectorVariant::Concatenation);
        assert!(m.build_sequence(grid(&m), DEFAULT_PROMPT, Some("  ")).is_err());
        let infer = m.build_sequence(grid(&m), DEFAULT_PROMPT, None).unwrap();
        assert!(infer.loss_mask.iter().all(|b| !b));
        assert_eq!(infer.len(), m.audio_len() + 7);
    }

    #[test]
    fn masked_targets_do_not_affect_loss() {
        let m = small_model(ConnectorVariant::TimeMajor);
        let plan = m.build_sequence(grid(&m), DEFAULT_PROMPT, Some("a low hum")).unwrap();
        let loss = |p: &SequencePlan| {
            let mut g = Graph::inference();
            let l = m.loss(&mut g, p).unwrap();
            g.value(l).item()
        };
        let base = loss(&plan);
        let mut perturbed = plan.clone();
        for (t, &on) in perturbed.targets.iter_mut().zip(&plan.loss_mask) {
            if !on {
                *t = (*t + 5) % m.vocab.len();
            }
        }
        assert_eq!(loss(&perturbed).to_bits(), base.to_bits());
    }

    #[test]
    fn streaming_logits_match_full_forward() {
        let m = small_model(ConnectorVariant::Concatenation);
        let plan = m.build_sequence(grid(&m), DEFAULT_PROMPT, Some("a low hum")).unwrap();
        let mut g = Graph::inference();
        let full = m.logits(&mut g, &plan).unwrap();
        let full = g.value(full).clone();
        assert!(m.streaming_logits(&plan).unwrap().max_abs_diff(&full) <= 1e-10);
    }
}
