//! Audio token grid to LLM-dimension embeddings: concatenation, time-major
//! and frequency-major layouts with separator embeddings, then a two-layer MLP.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::AudioTokenGrid;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Parameters, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConnectorVariant {
    /// Each time step's frequency tokens are concatenated into one wide token.
    Concatenation,
    /// `t` outer, `f` inner; a separator after each time step.
    TimeMajor,
    /// `f` outer, `t` inner; one separator per frequency band.
    #[default]
    FrequencyMajor,
}

impl ConnectorVariant {
    pub fn tag(self) -> &'static str {
        match self {
            ConnectorVariant::Concatenation => "a",
            ConnectorVariant::TimeMajor => "b",
            ConnectorVariant::FrequencyMajor => "c",
        }
    }
}

/// Where the frequency-major separator sits relative to its band.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeparatorPlacement {
    #[default]
    Prefix,
    Suffix,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Segment {
    Audio,
    Separator,
    Prompt,
    Caption,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConnectorConfig {
    pub variant: ConnectorVariant,
    pub d_enc: usize,
    pub grid_t: usize,
    pub grid_f: usize,
    pub d_model: usize,
    pub hidden_mult: usize,
    pub separator: SeparatorPlacement,
}

impl ConnectorConfig {
    /// Per-token MLP input width.
    pub fn d_in(&self) -> usize {
        match self.variant {
            ConnectorVariant::Concatenation => self.grid_f * self.d_enc,
            _ => self.d_enc,
        }
    }

    pub fn hidden(&self) -> usize {
        self.hidden_mult * self.d_model
    }

    /// Length of the audio segment.
    pub fn output_len(&self) -> usize {
        let (t, f) = (self.grid_t, self.grid_f);
        match self.variant {
            ConnectorVariant::Concatenation => t,
            ConnectorVariant::TimeMajor => t * (f + 1),
            ConnectorVariant::FrequencyMajor => (t + 1) * f,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_enc == 0 || self.grid_t == 0 || self.grid_f == 0 || self.d_model == 0 || self.hidden_mult == 0 {
            return Err(Error::contract("connector extents must be positive"));
        }
        Ok(())
    }

    /// Output positions and their segment labels; `None` marks a separator,
    /// `Some(i)` the `i`-th MLP output row.
    pub fn layout(&self) -> Vec<Option<usize>> {
        let (t_len, f_len) = (self.grid_t, self.grid_f);
        match self.variant {
            ConnectorVariant::Concatenation => (0..t_len).map(Some).collect(),
            ConnectorVariant::TimeMajor => (0..t_len)
                .flat_map(|t| (0..f_len).map(move |f| Some(t * f_len + f)).chain([None]))
                .collect(),
            ConnectorVariant::FrequencyMajor => {
                let prefix = self.separator == SeparatorPlacement::Prefix;
                (0..f_len)
                    .flat_map(|f| {
                        let band = (0..t_len).map(move |t| Some(t * f_len + f));
                        let head = prefix.then_some(None);
                        let tail = (!prefix).then_some(None);
                        head.into_iter().chain(band).chain(tail)
                    })
                    .collect()
            }
        }
    }

    pub fn segments(&self) -> Vec<Segment> {
        self.layout()
            .into_iter()
            .map(|p| if p.is_some() { Segment::Audio } else { Segment::Separator })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpWeights {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl MlpWeights {
    pub fn init<R: Rng + ?Sized>(d_in: usize, hidden: usize, d_out: usize, rng: &mut R) -> Self {
        MlpWeights {
            w1: Tensor::randn(&[d_in, hidden], 1.0 / (d_in as f64).sqrt(), rng),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::randn(&[hidden, d_out], 1.0 / (hidden as f64).sqrt(), rng),
            b2: Tensor::zeros(&[d_out]),
        }
    }

    pub fn for_config<R: Rng + ?Sized>(cfg: &ConnectorConfig, rng: &mut R) -> Self {
        Self::init(cfg.d_in(), cfg.hidden(), cfg.d_model, rng)
    }
}

impl Parameters for MlpWeights {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("connector.w1", &self.w1);
        f("connector.b1", &self.b1);
        f("connector.w2", &self.w2);
        f("connector.b2", &self.b2);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("connector.w1", &mut self.w1);
        f("connector.b1", &mut self.b1);
        f("connector.w2", &mut self.w2);
        f("connector.b2", &mut self.b2);
    }
}

/// `gelu(x·w1 + b1)·w2 + b2`, row by row.
pub fn mlp_forward(g: &mut Graph, w: &MlpWeights, x: Var) -> Result<Var> {
    let w1 = g.param("connector.w1", &w.w1);
    let b1 = g.param("connector.b1", &w.b1);
    let w2 = g.param("connector.w2", &w.w2);
    let b2 = g.param("connector.b2", &w.b2);
    let h = g.matmul(x, w1)?;
    let h = g.add(h, b1)?;
    let h = g.gelu(h)?;
    let y = g.matmul(h, w2)?;
    g.add(y, b2)
}

/// Audio segment of the LLM input. `grid` is `(T_a·F_a) × d_enc` in
/// time-major order; `separator` is `1 × d_model`.
pub fn connect(g: &mut Graph, grid: Var, cfg: &ConnectorConfig, mlp: &MlpWeights, separator: Var) -> Result<(Var, Vec<Segment>)> {
    cfg.validate()?;
    let want = [cfg.grid_t * cfg.grid_f, cfg.d_enc];
    if g.shape(grid) != want {
        return Err(Error::shape("connect", g.shape(grid), &want));
    }
    if g.shape(separator) != [1, cfg.d_model] {
        return Err(Error::shape("connect separator", g.shape(separator), &[1, cfg.d_model]));
    }
    if cfg.variant == ConnectorVariant::Concatenation {
        let wide = g.reshape(grid, &[cfg.grid_t, cfg.d_in()])?;
        return Ok((mlp_forward(g, mlp, wide)?, cfg.segments()));
    }
    let tokens = mlp_forward(g, mlp, grid)?;
    let pool = g.concat_rows(&[tokens, separator])?;
    let sep_row = cfg.grid_t * cfg.grid_f;
    let layout = cfg.layout();
    let idx: Vec<usize> = layout.iter().map(|p| p.unwrap_or(sep_row)).collect();
    Ok((g.gather_rows(pool, &idx)?, cfg.segments()))
}

/// Baseline reduction: average each time step over frequency, then the MLP
/// (input width `d_enc`), giving `T_a` embeddings without separators.
pub fn connect_mean_pool(g: &mut Graph, grid: Var, cfg: &ConnectorConfig, mlp: &MlpWeights) -> Result<Var> {
    let want = [cfg.grid_t * cfg.grid_f, cfg.d_enc];
    if g.shape(grid) != want {
        return Err(Error::shape("connect_mean_pool", g.shape(grid), &want));
    }
    let wide = g.reshape(grid, &[cfg.grid_t, cfg.grid_f * cfg.d_enc])?;
    let mut avg = vec![0.0; cfg.grid_f * cfg.d_enc * cfg.d_enc];
    for f in 0..cfg.grid_f {
        for d in 0..cfg.d_enc {
            avg[(f * cfg.d_enc + d) * cfg.d_enc + d] = 1.0 / cfg.grid_f as f64;
        }
    }
    let avg = g.constant(Tensor::new(&[cfg.grid_f * cfg.d_enc, cfg.d_enc], avg)?);
    let pooled = g.matmul(wide, avg)?;
    mlp_forward(g, mlp, pooled)
}

/// LLM-dimension vectors with a segment label per position.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSequence {
    pub vectors: Tensor,
    pub segments: Vec<Segment>,
}

/// Plain-tensor [`connect`].
pub fn connect_tensor(grid: &AudioTokenGrid, cfg: &ConnectorConfig, mlp: &MlpWeights, separator: &Tensor) -> Result<EmbeddingSequence> {
    if (grid.grid_t, grid.grid_f, grid.dim()) != (cfg.grid_t, cfg.grid_f, cfg.d_enc) {
        return Err(Error::contract(format!(
            "grid {}×{}×{} does not match connector {}×{}×{}",
            grid.grid_t,
            grid.grid_f,
            grid.dim(),
            cfg.grid_t,
            cfg.grid_f,
            cfg.d_enc
        )));
    }
    let mut g = Graph::inference();
    let gv = g.constant(grid.tokens.clone());
    let sv = g.constant(separator.clone());
    let (out, segments) = connect(&mut g, gv, cfg, mlp, sv)?;
    Ok(EmbeddingSequence {
        vectors: g.value(out).clone(),
        segments,
    })
}
