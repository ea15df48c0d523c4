//! Log-mel spectrogram: Hann-windowed STFT (no centering), HTK mel filterbank.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const SAMPLE_RATE: f64 = 16_000.0;
pub const WIN: usize = 400;
pub const HOP: usize = 160;
pub const N_FFT: usize = 512;
pub const N_MELS: usize = 128;
pub const LOG_FLOOR: f64 = 1e-6;

/// `frames` is `T_mel × 128` of `ln(power + 1e-6)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpec {
    pub frames: Tensor,
    pub sample_rate: u32,
    pub hop: usize,
    pub win: usize,
}

impl MelSpec {
    pub fn n_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    /// Crop or pad (with the log floor) to exactly `n` frames.
    pub fn fit_frames(&self, n: usize) -> MelSpec {
        let mut data = self.frames.data().to_vec();
        data.resize(n * N_MELS, LOG_FLOOR.ln());
        MelSpec {
            frames: Tensor::new(&[n, N_MELS], data).expect("frame count"),
            ..*self
        }
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Centre frequencies (Hz) of the 128 triangular filters spanning 0–8 kHz.
pub fn filter_centers() -> Vec<f64> {
    edges()[1..=N_MELS].to_vec()
}

fn edges() -> Vec<f64> {
    let top = hz_to_mel(SAMPLE_RATE / 2.0);
    (0..N_MELS + 2)
        .map(|i| mel_to_hz(top * i as f64 / (N_MELS + 1) as f64))
        .collect()
}

/// `(N_FFT/2 + 1) × 128` triangular weights, unnormalized peaks of 1.
pub fn filterbank() -> Tensor {
    let e = edges();
    let bins = N_FFT / 2 + 1;
    let mut w = vec![0.0; bins * N_MELS];
    for k in 0..bins {
        let f = k as f64 * SAMPLE_RATE / N_FFT as f64;
        for m in 0..N_MELS {
            let (lo, c, hi) = (e[m], e[m + 1], e[m + 2]);
            let v = if f > lo && f <= c {
                (f - lo) / (c - lo)
            } else if f > c && f < hi {
                (hi - f) / (hi - c)
            } else {
                0.0
            };
            w[k * N_MELS + m] = v;
        }
    }
    Tensor::new(&[bins, N_MELS], w).expect("filterbank shape")
}

/// Reusable FFT plan, window and filterbank.
pub struct MelFrontEnd {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    bank: Tensor,
}

impl Default for MelFrontEnd {
    fn default() -> Self {
        Self::new()
    }
}

impl MelFrontEnd {
    pub fn new() -> Self {
        let window = (0..WIN)
            .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / WIN as f64).cos())
            .collect();
        MelFrontEnd {
            fft: FftPlanner::new().plan_fft_forward(N_FFT),
            window,
            bank: filterbank(),
        }
    }

    /// Power spectra, one row per frame.
    fn power(&self, x: &[f64]) -> Tensor {
        let n_frames = if x.len() <= WIN { 1 } else { 1 + (x.len() - WIN) / HOP };
        let bins = N_FFT / 2 + 1;
        let mut out = Vec::with_capacity(n_frames * bins);
        let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
        for f in 0..n_frames {
            let start = f * HOP;
            for (i, slot) in buf.iter_mut().enumerate() {
                let v = if i < WIN { x.get(start + i).copied().unwrap_or(0.0) * self.window[i] } else { 0.0 };
                *slot = Complex::new(v, 0.0);
            }
            self.fft.process(&mut buf);
            out.extend(buf[..bins].iter().map(|c| c.norm_sqr()));
        }
        Tensor::new(&[n_frames, bins], out).expect("power shape")
    }

    pub fn compute(&self, waveform: &[f64]) -> Result<MelSpec> {
        if waveform.is_empty() {
            return Err(Error::contract("melspectrogram of an empty waveform"));
        }
        let mel = self.power(waveform).matmul(&self.bank)?;
        Ok(MelSpec {
            frames: mel.map(|p| (p + LOG_FLOOR).ln()),
            sample_rate: SAMPLE_RATE as u32,
            hop: HOP,
            win: WIN,
        })
    }
}

pub fn melspectrogram(waveform: &[f64]) -> Result<MelSpec> {
    MelFrontEnd::new().compute(waveform)
}
