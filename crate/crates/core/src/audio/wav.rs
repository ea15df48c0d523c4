//! RIFF/WAVE PCM16 reader and writer.

use std::path::Path;

use crate::error::{Error, Result};

pub const TARGET_RATE: u32 = 16_000;
pub const CLIP_SECONDS: usize = 10;
pub const CLIP_SAMPLES: usize = TARGET_RATE as usize * CLIP_SECONDS;

const FORMAT_PCM: u16 = 1;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

/// Decoded audio before resampling; channels already averaged to mono.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

fn fail(offset: usize, msg: impl Into<String>) -> Error {
    Error::WavFormat {
        offset: offset as u64,
        msg: msg.into(),
    }
}

fn u16_at(b: &[u8], at: usize) -> Result<u16> {
    b.get(at..at + 2)
        .map(|s| u16::from_le_bytes([s[0], s[1]]))
        .ok_or_else(|| fail(at, "unexpected end of file"))
}

fn u32_at(b: &[u8], at: usize) -> Result<u32> {
    b.get(at..at + 4)
        .map(|s| u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
        .ok_or_else(|| fail(at, "unexpected end of file"))
}

struct Format {
    channels: u16,
    rate: u32,
}

fn parse_fmt(b: &[u8], at: usize, size: usize) -> Result<Format> {
    if size < 16 {
        return Err(fail(at, format!("fmt chunk too short ({size} bytes)")));
    }
    let mut tag = u16_at(b, at)?;
    let channels = u16_at(b, at + 2)?;
    let rate = u32_at(b, at + 4)?;
    let block_align = u16_at(b, at + 12)?;
    let bits = u16_at(b, at + 14)?;
    if tag == FORMAT_EXTENSIBLE {
        if size < 40 {
            return Err(fail(at, "extensible fmt chunk too short"));
        }
        // The first two bytes of the sub-format GUID carry the codec tag.
        tag = u16_at(b, at + 24)?;
    }
    if tag != FORMAT_PCM {
        return Err(fail(at, format!("unsupported codec tag {tag:#06x}; only PCM is read")));
    }
    if bits != 16 {
        return Err(fail(at + 14, format!("unsupported bit depth {bits}; only 16-bit PCM is read")));
    }
    if !(1..=2).contains(&channels) {
        return Err(fail(at + 2, format!("unsupported channel count {channels}")));
    }
    if rate == 0 {
        return Err(fail(at + 4, "sample rate is zero"));
    }
    if block_align != 2 * channels {
        return Err(fail(at + 12, format!("block align {block_align} inconsistent with {channels} channels")));
    }
    Ok(Format { channels, rate })
}

/// Parses a PCM16 WAV image. Unknown chunks are skipped; chunk bodies of odd
/// length are followed by one pad byte.
pub fn decode_wav(b: &[u8]) -> Result<Waveform> {
    if b.get(0..4) != Some(b"RIFF") {
        return Err(fail(0, "missing RIFF tag"));
    }
    if b.get(8..12) != Some(b"WAVE") {
        return Err(fail(8, "missing WAVE form type"));
    }
    let riff_end = (8 + u32_at(b, 4)? as usize).min(b.len());
    let mut at = 12;
    let mut fmt: Option<Format> = None;
    while at + 8 <= riff_end {
        let id = &b[at..at + 4];
        let size = u32_at(b, at + 4)? as usize;
        let body = at + 8;
        match id {
            b"fmt " => {
                if body + size > b.len() {
                    return Err(fail(at, "fmt chunk runs past end of file"));
                }
                fmt = Some(parse_fmt(b, body, size)?);
            }
            b"data" => {
                let f = fmt.ok_or_else(|| fail(at, "data chunk before fmt chunk"))?;
                let avail = size.min(b.len() - body);
                // Streaming writers leave the size at its maximum; read to end of file then.
                if avail < size && size != u32::MAX as usize {
                    return Err(fail(at, format!("data chunk declares {size} bytes, {avail} present")));
                }
                let frame = 2 * f.channels as usize;
                let frames = avail / frame;
                let ch = f.channels as usize;
                let samples = (0..frames)
                    .map(|i| {
                        let base = body + i * frame;
                        let sum: f64 = (0..ch)
                            .map(|c| i16::from_le_bytes([b[base + 2 * c], b[base + 2 * c + 1]]) as f64 / 32768.0)
                            .sum();
                        sum / ch as f64
                    })
                    .collect();
                return Ok(Waveform {
                    samples,
                    sample_rate: f.rate,
                });
            }
            _ => {}
        }
        at = body + size + (size & 1);
    }
    Err(fail(at.min(b.len()), if fmt.is_some() { "no data chunk" } else { "no fmt chunk" }))
}

/// Linear-interpolation resampling.
pub fn resample_linear(x: &[f64], from: u32, to: u32) -> Vec<f64> {
    if from == to || x.is_empty() {
        return x.to_vec();
    }
    let n = ((x.len() as u128 * to as u128 + from as u128 / 2) / from as u128) as usize;
    let step = from as f64 / to as f64;
    (0..n)
        .map(|i| {
            let pos = i as f64 * step;
            let k = pos.floor() as usize;
            let frac = pos - k as f64;
            let a = x[k.min(x.len() - 1)];
            let b = x[(k + 1).min(x.len() - 1)];
            a + (b - a) * frac
        })
        .collect()
}

/// Crop or zero-pad to exactly `len` samples.
pub fn fit_length(mut x: Vec<f64>, len: usize) -> Vec<f64> {
    x.resize(len, 0.0);
    x
}

/// Mono waveform at 16 kHz, exactly ten seconds long.
pub fn load_wav(path: &Path) -> Result<Vec<f64>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let w = decode_wav(&bytes)?;
    Ok(fit_length(resample_linear(&w.samples, w.sample_rate, TARGET_RATE), CLIP_SAMPLES))
}

/// Encodes interleaved samples in [−1, 1] as PCM16 (values clamped).
pub fn encode_wav(interleaved: &[f64], rate: u32, channels: u16) -> Vec<u8> {
    let data_len = interleaved.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len + (data_len & 1)) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&FORMAT_PCM.to_le_bytes());
    out.extend_from_slice(&channels.to_le_bytes());
    out.extend_from_slice(&rate.to_le_bytes());
    out.extend_from_slice(&(rate * 2 * channels as u32).to_le_bytes());
    out.extend_from_slice(&(2 * channels).to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &v in interleaved {
        let q = (v.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

pub fn write_wav(path: &Path, interleaved: &[f64], rate: u32, channels: u16) -> Result<()> {
    std::fs::write(path, encode_wav(interleaved, rate, channels)).map_err(|e| Error::io(path, e))
}
