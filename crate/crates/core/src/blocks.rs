//! Mamba-2 language model: gated SSM blocks in a pre-norm residual stack,
//! token embedding, LM head, and LoRA adapters on `in_proj` / `out_proj`.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Parameters, Tensor, Var};
use crate::ssd::{self, Discretization, ScanInputs, ScanMode, ScanState, SsdDims};

/// Depthwise convolution width over the x/B/C channels.
pub const CONV_WIDTH: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub d_state: usize,
    pub n_groups: usize,
    pub vocab_size: usize,
    pub tie_embeddings: bool,
}

impl LmConfig {
    pub fn nano(vocab_size: usize) -> Self {
        LmConfig {
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            head_dim: 16,
            d_state: 16,
            n_groups: 1,
            vocab_size,
            tie_embeddings: true,
        }
    }

    pub fn small(vocab_size: usize) -> Self {
        LmConfig {
            n_layers: 8,
            d_model: 128,
            n_heads: 8,
            head_dim: 16,
            ..LmConfig::nano(vocab_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model != self.n_heads * self.head_dim {
            return Err(Error::contract(format!(
                "d_model ({}) must equal n_heads·head_dim ({}·{})",
                self.d_model, self.n_heads, self.head_dim
            )));
        }
        if self.n_layers == 0 || self.vocab_size == 0 || self.d_state == 0 {
            return Err(Error::contract("n_layers, vocab_size and d_state must be positive"));
        }
        self.ssd_dims().heads.checked_rem(self.n_groups).filter(|r| *r == 0).ok_or_else(|| {
            Error::contract(format!("n_heads ({}) must be a multiple of n_groups ({})", self.n_heads, self.n_groups))
        })?;
        Ok(())
    }

    pub fn ssd_dims(&self) -> SsdDims {
        SsdDims {
            heads: self.n_heads,
            head_dim: self.head_dim,
            groups: self.n_groups,
            state: self.d_state,
        }
    }

    fn inner(&self) -> usize {
        self.n_heads * self.head_dim
    }

    /// Width of `in_proj`: gate z, SSM input x, B, C, and Δ.
    pub fn in_proj_width(&self) -> usize {
        2 * self.inner() + 2 * self.n_groups * self.d_state + self.n_heads
    }

    /// Channels seen by the depthwise convolution (x, B, C).
    pub fn conv_channels(&self) -> usize {
        self.inner() + 2 * self.n_groups * self.d_state
    }
}

// ---- LoRA --------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub rank: usize,
    pub alpha: f64,
    /// `D_in × r`.
    pub down: Tensor,
    /// `r × D_out`, zero at initialization.
    pub up: Tensor,
}

impl LoraAdapter {
    /// New adapter with `alpha = 2·rank`.
    pub fn new<R: Rng + ?Sized>(d_in: usize, d_out: usize, rank: usize, rng: &mut R) -> Result<Self> {
        if rank == 0 {
            return Err(Error::contract("LoRA rank must be positive"));
        }
        let bound = 1.0 / (d_in as f64).sqrt();
        Ok(LoraAdapter {
            rank,
            alpha: 2.0 * rank as f64,
            down: Tensor::uniform(&[d_in, rank], -bound, bound, rng),
            up: Tensor::zeros(&[rank, d_out]),
        })
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    fn check(&self, base: &Tensor) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::contract("LoRA rank must be positive"));
        }
        let (d_in, d_out) = base.dims2()?;
        if self.down.shape() != [d_in, self.rank] || self.up.shape() != [self.rank, d_out] {
            return Err(Error::shape("lora", base.shape(), self.down.shape()));
        }
        Ok(())
    }
}

/// `x·base + (α/r)·(x·down)·up`.
pub fn lora_apply(base: &Tensor, adapter: &LoraAdapter, x: &Tensor) -> Result<Tensor> {
    adapter.check(base)?;
    let mut out = x.matmul(base)?;
    let delta = x.matmul(&adapter.down)?.matmul(&adapter.up)?.scale(adapter.scale());
    out.add_assign(&delta)?;
    Ok(out)
}

/// `base + (α/r)·down·up` as a plain matrix.
pub fn lora_merge(base: &Tensor, adapter: &LoraAdapter) -> Result<Tensor> {
    adapter.check(base)?;
    let mut out = base.clone();
    out.add_assign(&adapter.down.matmul(&adapter.up)?.scale(adapter.scale()))?;
    Ok(out)
}

/// A frozen projection with an optional low-rank adapter.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraLinear {
    /// `D_in × D_out`.
    pub weight: Tensor,
    pub adapter: Option<LoraAdapter>,
}

impl LoraLinear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}.weight"), &self.weight);
        if let Some(a) = &self.adapter {
            f(&format!("{prefix}.lora_down"), &a.down);
            f(&format!("{prefix}.lora_up"), &a.up);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        if let Some(a) = &mut self.adapter {
            f(&format!("{prefix}.lora_down"), &mut a.down);
            f(&format!("{prefix}.lora_up"), &mut a.up);
        }
    }

    pub fn forward(&self, g: &mut Graph, prefix: &str, x: Var) -> Result<Var> {
        let w = g.param(&format!("{prefix}.weight"), &self.weight);
        let base = g.matmul(x, w)?;
        let Some(a) = &self.adapter else { return Ok(base) };
        let down = g.param(&format!("{prefix}.lora_down"), &a.down);
        let up = g.param(&format!("{prefix}.lora_up"), &a.up);
        let h = g.matmul(x, down)?;
        let h = g.matmul(h, up)?;
        let h = g.scale(h, a.scale())?;
        g.add(base, h)
    }
}

// ---- block -------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct MambaBlockWeights {
    /// Pre-norm gain applied to the residual stream before the block.
    pub pre_norm: Tensor,
    pub in_proj: LoraLinear,
    /// `CONV_WIDTH × conv_channels`.
    pub conv_weight: Tensor,
    pub conv_bias: Tensor,
    pub delta_bias: Tensor,
    pub log_a: Tensor,
    pub d_skip: Tensor,
    /// Gain of the gated RMS norm before `out_proj`.
    pub norm: Tensor,
    pub out_proj: LoraLinear,
}

fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl MambaBlockWeights {
    pub fn init<R: Rng + ?Sized>(cfg: &LmConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        let inner = cfg.inner();
        let h = cfg.n_heads;
        let cw = 1.0 / (CONV_WIDTH as f64).sqrt();
        let delta_bias = Tensor::from_vec(
            (0..h)
                .map(|_| {
                    let dt = (rng.random_range(0.001f64.ln()..0.1f64.ln())).exp();
                    inverse_softplus(dt)
                })
                .collect(),
        );
        let log_a = Tensor::from_vec((0..h).map(|_| rng.random_range(1.0f64..16.0).ln()).collect());
        MambaBlockWeights {
            pre_norm: Tensor::full(&[d], 1.0),
            in_proj: LoraLinear {
                weight: Tensor::randn(&[d, cfg.in_proj_width()], 1.0 / (d as f64).sqrt(), rng),
                adapter: None,
            },
            conv_weight: Tensor::uniform(&[CONV_WIDTH, cfg.conv_channels()], -cw, cw, rng),
            conv_bias: Tensor::zeros(&[cfg.conv_channels()]),
            delta_bias,
            log_a,
            d_skip: Tensor::full(&[h], 1.0),
            norm: Tensor::full(&[inner], 1.0),
            out_proj: LoraLinear {
                weight: Tensor::randn(
                    &[inner, d],
                    1.0 / (inner as f64).sqrt() / (2.0 * cfg.n_layers as f64).sqrt(),
                    rng,
                ),
                adapter: None,
            },
        }
    }

    pub fn attach_lora<R: Rng + ?Sized>(&mut self, rank: usize, rng: &mut R) -> Result<()> {
        let (i0, i1) = self.in_proj.weight.dims2()?;
        let (o0, o1) = self.out_proj.weight.dims2()?;
        self.in_proj.adapter = Some(LoraAdapter::new(i0, i1, rank, rng)?);
        self.out_proj.adapter = Some(LoraAdapter::new(o0, o1, rank, rng)?);
        Ok(())
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}.pre_norm"), &self.pre_norm);
        self.in_proj.visit(&format!("{prefix}.in_proj"), f);
        f(&format!("{prefix}.conv_weight"), &self.conv_weight);
        f(&format!("{prefix}.conv_bias"), &self.conv_bias);
        f(&format!("{prefix}.delta_bias"), &self.delta_bias);
        f(&format!("{prefix}.log_a"), &self.log_a);
        f(&format!("{prefix}.d_skip"), &self.d_skip);
        f(&format!("{prefix}.norm"), &self.norm);
        self.out_proj.visit(&format!("{prefix}.out_proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.pre_norm"), &mut self.pre_norm);
        self.in_proj.visit_mut(&format!("{prefix}.in_proj"), f);
        f(&format!("{prefix}.conv_weight"), &mut self.conv_weight);
        f(&format!("{prefix}.conv_bias"), &mut self.conv_bias);
        f(&format!("{prefix}.delta_bias"), &mut self.delta_bias);
        f(&format!("{prefix}.log_a"), &mut self.log_a);
        f(&format!("{prefix}.d_skip"), &mut self.d_skip);
        f(&format!("{prefix}.norm"), &mut self.norm);
        self.out_proj.visit_mut(&format!("{prefix}.out_proj"), f);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct ForwardOptions {
    pub mode: ScanMode,
    pub discretization: Discretization,
    /// Record every SSM state (recurrent mode only).
    pub trace: bool,
}

/// Carried state for streaming: the last `CONV_WIDTH − 1` conv inputs and the SSM state.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockCache {
    pub conv: Tensor,
    pub ssm: ScanState,
}

impl BlockCache {
    pub fn new(cfg: &LmConfig) -> Self {
        BlockCache {
            conv: Tensor::zeros(&[CONV_WIDTH - 1, cfg.conv_channels()]),
            ssm: ScanState::zeros(&cfg.ssd_dims()),
        }
    }

    /// Floats held per block, independent of how many tokens were consumed.
    pub fn footprint(&self) -> usize {
        self.conv.len() + self.ssm.h.len()
    }
}

#[derive(Debug)]
pub struct BlockOutput {
    pub y: Var,
    /// `T + 1` SSM states when tracing.
    pub states: Option<Vec<Tensor>>,
}

/// `out_proj(rmsnorm(ssm(silu(conv(x_part))) ⊙ silu(z)))`; the caller adds the residual.
pub fn block_forward(
    g: &mut Graph,
    prefix: &str,
    w: &MambaBlockWeights,
    cfg: &LmConfig,
    x: Var,
    opts: ForwardOptions,
    cache: Option<&mut BlockCache>,
) -> Result<BlockOutput> {
    let (t_len, d) = g.value(x).dims2()?;
    if d != cfg.d_model {
        return Err(Error::shape("block_forward", g.shape(x), &[t_len, cfg.d_model]));
    }
    let dims = cfg.ssd_dims();
    let inner = cfg.inner();
    let gn = cfg.n_groups * cfg.d_state;
    let conv_c = cfg.conv_channels();

    let proj = w.in_proj.forward(g, &format!("{prefix}.in_proj"), x)?;
    let z = g.slice_cols(proj, 0, inner)?;
    let xbc = g.slice_cols(proj, inner, conv_c)?;
    let dt = g.slice_cols(proj, inner + conv_c, cfg.n_heads)?;

    let cw = g.param(&format!("{prefix}.conv_weight"), &w.conv_weight);
    let cb = g.param(&format!("{prefix}.conv_bias"), &w.conv_bias);
    let (conv, initial) = match cache.as_deref() {
        Some(c) => {
            let hist = g.constant(c.conv.clone());
            let xin = g.concat_rows(&[hist, xbc])?;
            let full = g.causal_conv1d(xin, cw, cb)?;
            (g.slice_rows(full, CONV_WIDTH - 1, t_len)?, Some(c.ssm.clone()))
        }
        None => (g.causal_conv1d(xbc, cw, cb)?, None),
    };
    let act = g.silu(conv)?;
    let xs = g.slice_cols(act, 0, inner)?;
    let b = g.slice_cols(act, inner, gn)?;
    let c = g.slice_cols(act, inner + gn, gn)?;

    let db = g.param(&format!("{prefix}.delta_bias"), &w.delta_bias);
    let dt = g.add(dt, db)?;
    let delta = g.softplus(dt)?;
    let log_a = g.param(&format!("{prefix}.log_a"), &w.log_a);
    let a = g.exp(log_a)?;
    let a = g.scale(a, -1.0)?;
    let (log_decay, b_scale) = ssd::discretize(g, delta, a, opts.discretization)?;
    let out = ssd::scan(
        g,
        ScanInputs {
            x: xs,
            log_decay,
            b_scale,
            b,
            c,
        },
        &dims,
        opts.mode,
        initial.as_ref(),
        opts.trace,
    )?;

    let skip = g.param(&format!("{prefix}.d_skip"), &w.d_skip);
    let skip = g.reshape(skip, &[cfg.n_heads, 1])?;
    let per_channel: Vec<usize> = (0..inner).map(|i| i / cfg.head_dim).collect();
    let skip = g.gather_rows(skip, &per_channel)?;
    let skip = g.transpose(skip)?;
    let skipped = g.mul(xs, skip)?;
    let y = g.add(out.y, skipped)?;

    let gate = g.silu(z)?;
    let y = g.mul(y, gate)?;
    let nw = g.param(&format!("{prefix}.norm"), &w.norm);
    let y = g.rms_norm(y, nw)?;
    let y = w.out_proj.forward(g, &format!("{prefix}.out_proj"), y)?;

    if let Some(c) = cache {
        let xv = g.value(xbc);
        let keep = CONV_WIDTH - 1;
        let mut hist: Vec<f64> = c.conv.data().to_vec();
        hist.extend_from_slice(xv.data());
        let start = hist.len() - keep * conv_c;
        c.conv = Tensor::new(&[keep, conv_c], hist[start..].to_vec())?;
        c.ssm = out.final_state;
    }
    Ok(BlockOutput { y, states: out.states })
}

// ---- language model ----------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct LmWeights {
    /// `vocab × D`.
    pub embedding: Tensor,
    pub blocks: Vec<MambaBlockWeights>,
    pub final_norm: Tensor,
    /// `D × vocab`; `None` when tied to the embedding.
    pub lm_head: Option<Tensor>,
    /// Trainable embedding of the separator token (`1 × D`).
    pub separator: Tensor,
}

/// Embedding init scale; large enough that a frozen tied head can express confident logits.
const EMBED_STD: f64 = 0.5;

impl LmWeights {
    pub fn init<R: Rng + ?Sized>(cfg: &LmConfig, lora_rank: Option<usize>, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let embedding = Tensor::randn(&[cfg.vocab_size, cfg.d_model], EMBED_STD, rng);
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            blocks.push(MambaBlockWeights::init(cfg, rng));
        }
        let lm_head = (!cfg.tie_embeddings)
            .then(|| Tensor::randn(&[cfg.d_model, cfg.vocab_size], EMBED_STD, rng));
        let separator = Tensor::randn(&[1, cfg.d_model], EMBED_STD, rng);
        let mut w = LmWeights {
            embedding,
            blocks,
            final_norm: Tensor::full(&[cfg.d_model], 1.0),
            lm_head,
            separator,
        };
        if let Some(r) = lora_rank {
            w.attach_lora(r, rng)?;
        }
        Ok(w)
    }

    pub fn attach_lora<R: Rng + ?Sized>(&mut self, rank: usize, rng: &mut R) -> Result<()> {
        for b in &mut self.blocks {
            b.attach_lora(rank, rng)?;
        }
        Ok(())
    }

    pub fn detach_lora(&mut self) {
        for b in &mut self.blocks {
            b.in_proj.adapter = None;
            b.out_proj.adapter = None;
        }
    }

    /// Fold every adapter into its base projection and drop it.
    pub fn merge_lora(&mut self) -> Result<()> {
        for b in &mut self.blocks {
            for lin in [&mut b.in_proj, &mut b.out_proj] {
                if let Some(a) = lin.adapter.take() {
                    lin.weight = lora_merge(&lin.weight, &a)?;
                }
            }
        }
        Ok(())
    }

    pub fn lora_rank(&self) -> Option<usize> {
        self.blocks
            .first()
            .and_then(|b| b.in_proj.adapter.as_ref())
            .map(|a| a.rank)
    }

    pub fn new_caches(&self, cfg: &LmConfig) -> Vec<BlockCache> {
        (0..self.blocks.len()).map(|_| BlockCache::new(cfg)).collect()
    }
}

impl Parameters for LmWeights {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("lm.embedding", &self.embedding);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("lm.layers.{i}"), f);
        }
        f("lm.final_norm", &self.final_norm);
        if let Some(h) = &self.lm_head {
            f("lm.lm_head", h);
        }
        f("lm.separator", &self.separator);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("lm.embedding", &mut self.embedding);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("lm.layers.{i}"), f);
        }
        f("lm.final_norm", &mut self.final_norm);
        if let Some(h) = &mut self.lm_head {
            f("lm.lm_head", h);
        }
        f("lm.separator", &mut self.separator);
    }
}

/// Embeddings for token ids; the separator id maps to the dedicated separator vector.
pub fn embed_tokens(g: &mut Graph, w: &LmWeights, ids: &[usize], separator_id: Option<usize>) -> Result<Var> {
    let table = g.param("lm.embedding", &w.embedding);
    if separator_id.is_none_or(|s| !ids.contains(&s)) {
        return g.gather_rows(table, ids);
    }
    let sep = g.param("lm.separator", &w.separator);
    let mut parts = Vec::new();
    let mut run = Vec::new();
    for &id in ids {
        if Some(id) == separator_id {
            if !run.is_empty() {
                parts.push(g.gather_rows(table, &run)?);
                run.clear();
            }
            parts.push(sep);
        } else {
            run.push(id);
        }
    }
    if !run.is_empty() {
        parts.push(g.gather_rows(table, &run)?);
    }
    g.concat_rows(&parts)
}

#[derive(Debug)]
pub struct LmOutput {
    /// `T × vocab`.
    pub logits: Var,
    /// Per layer, `T + 1` SSM states when tracing.
    pub states: Vec<Vec<Tensor>>,
}

/// Residual stack, final norm and LM head over a `T × D` sequence of input embeddings.
pub fn lm_forward(
    g: &mut Graph,
    w: &LmWeights,
    cfg: &LmConfig,
    input: Var,
    opts: ForwardOptions,
    mut caches: Option<&mut [BlockCache]>,
) -> Result<LmOutput> {
    let (_, d) = g.value(input).dims2()?;
    if d != cfg.d_model || g.value(input).rank() != 2 {
        return Err(Error::shape("lm_forward", g.shape(input), &[cfg.d_model]));
    }
    if caches.as_ref().is_some_and(|c| c.len() != w.blocks.len()) {
        return Err(Error::contract("one cache per block required"));
    }
    let mut h = input;
    let mut states = Vec::new();
    for (i, bw) in w.blocks.iter().enumerate() {
        let prefix = format!("lm.layers.{i}");
        let pn = g.param(&format!("{prefix}.pre_norm"), &bw.pre_norm);
        let normed = g.rms_norm(h, pn)?;
        let cache = caches.as_deref_mut().map(|c| &mut c[i]);
        let out = block_forward(g, &prefix, bw, cfg, normed, opts, cache)?;
        if let Some(s) = out.states {
            states.push(s);
        }
        h = g.add(h, out.y)?;
    }
    let fw = g.param("lm.final_norm", &w.final_norm);
    let h = g.rms_norm(h, fw)?;
    let head = match &w.lm_head {
        Some(t) => g.param("lm.lm_head", t),
        None => {
            let e = g.param("lm.embedding", &w.embedding);
            g.transpose(e)?
        }
    };
    let logits = g.matmul(h, head)?;
    Ok(LmOutput { logits, states })
}

/// Parameters that receive gradients: every LoRA factor, the connector, the
/// separator embedding, and the audio encoder when it is trainable. The base
/// language model is always frozen.
pub fn trainable_parameter_selection(model: &dyn Parameters, encoder_trainable: bool) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    model.visit(&mut |name, _| {
        let keep = name.ends_with(".lora_down")
            || name.ends_with(".lora_up")
            || name.starts_with("connector.")
            || name == "lm.separator"
            || (encoder_trainable && name.starts_with("encoder."));
        if keep {
            out.insert(name.to_string());
        }
    });
    out
}

/// Mapping from this crate's parameter names to the reference Mamba-2
/// checkpoint layout, for importing pretrained weights.
///
/// Linear weights there are stored `out × in` (transpose of ours), the conv
/// kernel as `channels × 1 × width`, and `A_log` equals our `log_a`. Adapter
/// tensors have no counterpart.
pub fn pretrained_name_map(n_layers: usize) -> Vec<(String, String)> {
    let mut out = vec![("lm.embedding".to_string(), "backbone.embeddings.weight".to_string())];
    for i in 0..n_layers {
        let ours = format!("lm.layers.{i}");
        let theirs = format!("backbone.layers.{i}");
        for (a, b) in [
            ("pre_norm", "norm.weight"),
            ("in_proj.weight", "mixer.in_proj.weight"),
            ("conv_weight", "mixer.conv1d.weight"),
            ("conv_bias", "mixer.conv1d.bias"),
            ("delta_bias", "mixer.dt_bias"),
            ("log_a", "mixer.A_log"),
            ("d_skip", "mixer.D"),
            ("norm", "mixer.norm.weight"),
            ("out_proj.weight", "mixer.out_proj.weight"),
        ] {
            out.push((format!("{ours}.{a}"), format!("{theirs}.{b}")));
        }
    }
    out.push(("lm.final_norm".to_string(), "backbone.norm_f.weight".to_string()));
    out.push(("lm.lm_head".to_string(), "lm_head.weight".to_string()));
    out
}

/// Convenience: full-sequence forward of one block on plain tensors.
pub fn block_forward_tensor(x: &Tensor, w: &MambaBlockWeights, cfg: &LmConfig, opts: ForwardOptions) -> Result<Tensor> {
    let mut g = Graph::inference();
    let xv = g.constant(x.clone());
    let out = block_forward(&mut g, "block", w, cfg, xv, opts, None)?;
    Ok(g.value(out.y).clone())
}
