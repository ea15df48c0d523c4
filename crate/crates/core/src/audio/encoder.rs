//! Strided patch-convolution encoder: log-mel `T_mel × 128` to a `T_a × F_a`
//! grid of `d_enc`-dimensional tokens.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mel::{MelSpec, N_MELS};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Parameters, PatchGeometry, Tensor, Var};
use crate::pipeline::checkpoint::Checkpoint;

/// Fixed affine normalization of log-mel inputs.
const MEL_SHIFT: f64 = 6.0;
const MEL_SCALE: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Frames the mel spectrogram is cropped or padded to before encoding.
    pub mel_frames: usize,
    pub time_strides: Vec<usize>,
    pub freq_strides: Vec<usize>,
    /// Output channels per layer; the last entry is `d_enc`.
    pub channels: Vec<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl EncoderConfig {
    /// 16 × 8 grid.
    pub fn desk() -> Self {
        EncoderConfig {
            mel_frames: 1024,
            time_strides: vec![4, 4, 2, 2],
            freq_strides: vec![2, 2, 2, 2],
            channels: vec![16, 32, 64, 64],
        }
    }

    /// 64 × 8 grid of 768-dimensional tokens.
    pub fn full_scale() -> Self {
        EncoderConfig {
            mel_frames: 1024,
            time_strides: vec![2, 2, 2, 2],
            freq_strides: vec![2, 2, 2, 2],
            channels: vec![32, 64, 128, 768],
        }
    }

    pub fn d_enc(&self) -> usize {
        self.channels.last().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.channels.len();
        if n == 0 || self.time_strides.len() != n || self.freq_strides.len() != n {
            return Err(Error::contract("encoder strides and channels must have one entry per layer"));
        }
        if self.channels.contains(&0) || self.time_strides.contains(&0) || self.freq_strides.contains(&0) {
            return Err(Error::contract("encoder strides and channels must be positive"));
        }
        let tt: usize = self.time_strides.iter().product();
        let ft: usize = self.freq_strides.iter().product();
        if self.mel_frames % tt != 0 || N_MELS % ft != 0 {
            return Err(Error::contract(format!(
                "mel grid {}×{N_MELS} is not divisible by total strides {tt}×{ft}",
                self.mel_frames
            )));
        }
        Ok(())
    }

    /// `(T_a, F_a)`.
    pub fn grid(&self) -> (usize, usize) {
        (
            self.mel_frames / self.time_strides.iter().product::<usize>(),
            N_MELS / self.freq_strides.iter().product::<usize>(),
        )
    }
}

/// Encoder output `H_a`: row `t·F_a + f` holds the token at time `t`, band `f`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioTokenGrid {
    pub tokens: Tensor,
    pub grid_t: usize,
    pub grid_f: usize,
}

impl AudioTokenGrid {
    pub fn new(tokens: Tensor, grid_t: usize, grid_f: usize) -> Result<Self> {
        let (n, _) = tokens.dims2()?;
        if n != grid_t * grid_f {
            return Err(Error::shape("audio grid", tokens.shape(), &[grid_t * grid_f]));
        }
        Ok(AudioTokenGrid { tokens, grid_t, grid_f })
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn token(&self, t: usize, f: usize) -> &[f64] {
        self.tokens.row(t * self.grid_f + f)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new()
            .with_meta("kind", "audio-features")
            .with_meta("grid_t", self.grid_t)
            .with_meta("grid_f", self.grid_f)
            .with_meta("dim", self.dim());
        ck.tensors.insert("features".into(), self.tokens.clone());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let (t, f, d) = (ck.meta_usize("grid_t")?, ck.meta_usize("grid_f")?, ck.meta_usize("dim")?);
        let tokens = ck
            .tensors
            .get("features")
            .ok_or_else(|| Error::Metadata("feature file has no `features` tensor".into()))?;
        if tokens.shape() != [t * f, d] {
            return Err(Error::Metadata(format!(
                "features tensor {:?} does not match declared grid {t}×{f}×{d}",
                tokens.shape()
            )));
        }
        AudioTokenGrid::new(tokens.clone(), t, f)
    }
}

pub fn save_features(path: &Path, grid: &AudioTokenGrid) -> Result<()> {
    grid.to_checkpoint().save(path)
}

pub fn load_features(path: &Path) -> Result<AudioTokenGrid> {
    AudioTokenGrid::from_checkpoint(&Checkpoint::load(path)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderWeights {
    /// Per layer: `(ph·pw·c_in) × c_out` kernel and `c_out` bias.
    pub layers: Vec<(Tensor, Tensor)>,
}

impl EncoderWeights {
    pub fn init<R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut c_in = 1;
        let mut layers = Vec::new();
        for ((&pt, &pf), &c_out) in cfg.time_strides.iter().zip(&cfg.freq_strides).zip(&cfg.channels) {
            let fan_in = pt * pf * c_in;
            layers.push((
                Tensor::randn(&[fan_in, c_out], 1.0 / (fan_in as f64).sqrt(), rng),
                Tensor::zeros(&[c_out]),
            ));
            c_in = c_out;
        }
        Ok(EncoderWeights { layers })
    }
}

impl Parameters for EncoderWeights {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, (w, b)) in self.layers.iter().enumerate() {
            f(&format!("encoder.layers.{i}.weight"), w);
            f(&format!("encoder.layers.{i}.bias"), b);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, (w, b)) in self.layers.iter_mut().enumerate() {
            f(&format!("encoder.layers.{i}.weight"), w);
            f(&format!("encoder.layers.{i}.bias"), b);
        }
    }
}

/// Token grid as a graph value of shape `(T_a·F_a) × d_enc`. When `frozen`,
/// the weights enter as constants and receive no gradient.
pub fn encode(g: &mut Graph, mel: &MelSpec, w: &EncoderWeights, cfg: &EncoderConfig, frozen: bool) -> Result<Var> {
    cfg.validate()?;
    if mel.frames.shape() != [cfg.mel_frames, N_MELS] {
        return Err(Error::shape("encode", mel.frames.shape(), &[cfg.mel_frames, N_MELS]));
    }
    if w.layers.len() != cfg.channels.len() {
        return Err(Error::contract("encoder weights do not match the configured depth"));
    }
    let input = mel.frames.map(|v| (v + MEL_SHIFT) * MEL_SCALE);
    let input = input.reshape(&[cfg.mel_frames * N_MELS, 1])?;
    let mut x = g.constant(input);
    let (mut h, mut wd, mut c) = (cfg.mel_frames, N_MELS, 1);
    let last = w.layers.len() - 1;
    for (i, (wt, bt)) in w.layers.iter().enumerate() {
        let geom = PatchGeometry {
            h,
            w: wd,
            c,
            ph: cfg.time_strides[i],
            pw: cfg.freq_strides[i],
        };
        let patches = g.patchify(x, geom)?;
        let (wv, bv) = if frozen {
            (g.constant(wt.clone()), g.constant(bt.clone()))
        } else {
            (
                g.param(&format!("encoder.layers.{i}.weight"), wt),
                g.param(&format!("encoder.layers.{i}.bias"), bt),
            )
        };
        let y = g.matmul(patches, wv)?;
        x = g.add(y, bv)?;
        if i != last {
            x = g.gelu(x)?;
        }
        h = geom.out_h();
        wd = geom.out_w();
        c = cfg.channels[i];
    }
    Ok(x)
}

/// Plain-tensor encoder forward.
pub fn encode_tensor(mel: &MelSpec, w: &EncoderWeights, cfg: &EncoderConfig) -> Result<AudioTokenGrid> {
    let mut g = Graph::inference();
    let v = encode(&mut g, mel, w, cfg, true)?;
    let (t, f) = cfg.grid();
    AudioTokenGrid::new(g.value(v).clone(), t, f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::mel::melspectrogram;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mel(frames: usize) -> MelSpec {
        let x: Vec<f64> = (0..16_000).map(|i| ((i * 7919) % 101) as f64 / 101.0 - 0.5).collect();
        melspectrogram(&x).unwrap().fit_frames(frames)
    }

    #[test]
    fn desk_grid_is_16_by_8() {
        let cfg = EncoderConfig::desk();
        assert_eq!(cfg.grid(), (16, 8));
        let w = EncoderWeights::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let grid = encode_tensor(&mel(1024), &w, &cfg).unwrap();
        assert_eq!(grid.tokens.shape(), &[128, 64]);
        assert!(grid.tokens.all_finite());
    }

    #[test]
    fn full_scale_grid_is_64_by_8() {
        let cfg = EncoderConfig::full_scale();
        assert_eq!(cfg.grid(), (64, 8));
        assert_eq!(cfg.d_enc(), 768);
    }

    #[test]
    fn indivisible_geometry_is_rejected() {
        let mut cfg = EncoderConfig::desk();
        cfg.mel_frames = 1000;
        assert!(cfg.validate().is_err());
        cfg.mel_frames = 1024;
        cfg.freq_strides = vec![2, 2, 2, 3];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn wrong_frame_count_is_rejected() {
        let cfg = EncoderConfig::desk();
        let w = EncoderWeights::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(encode_tensor(&mel(998), &w, &cfg).is_err());
    }

    #[test]
    fn encoder_is_deterministic() {
        let cfg = EncoderConfig::desk();
        let w = EncoderWeights::init(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let m = mel(1024);
        let a = encode_tensor(&m, &w, &cfg).unwrap();
        let b = encode_tensor(&m, &w, &cfg).unwrap();
        assert!(a.tokens.bit_eq(&b.tokens));
    }

    #[test]
    fn frozen_encoder_has_no_gradient_path() {
        let cfg = EncoderConfig::desk();
        let w = EncoderWeights::init(&cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let mut g = Graph::new();
        let v = encode(&mut g, &mel(1024), &w, &cfg, true).unwrap();
        assert!(!g.requires_grad(v));
        let mut g = Graph::new();
        let v = encode(&mut g, &mel(1024), &w, &cfg, false).unwrap();
        assert!(g.requires_grad(v));
    }
}
