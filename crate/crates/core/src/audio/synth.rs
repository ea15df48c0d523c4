//! Parametric synthetic clips with template captions and class labels.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::wav::{CLIP_SAMPLES, TARGET_RATE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClipSpec {
    Tone { freq: f64, start: f64, dur: f64, amp: f64 },
    Chirp { f0: f64, f1: f64, start: f64, dur: f64, amp: f64 },
    NoiseBurst { start: f64, dur: f64, amp: f64, seed: u64 },
    ClickTrain { rate: f64, start: f64, dur: f64, amp: f64 },
    Overlap { parts: Vec<ClipSpec> },
}

pub const LABELS: [&str; 5] = ["tone", "chirp", "noise", "clicks", "overlap"];

fn timing(start: f64) -> &'static str {
    if start < 3.0 {
        "at the start"
    } else if start < 6.0 {
        "in the middle"
    } else {
        "near the end"
    }
}

fn pitch(freq: f64) -> &'static str {
    if freq < 400.0 {
        "low"
    } else if freq < 1500.0 {
        "medium"
    } else {
        "high"
    }
}

impl ClipSpec {
    pub fn label(&self) -> &'static str {
        match self {
            ClipSpec::Tone { .. } => LABELS[0],
            ClipSpec::Chirp { .. } => LABELS[1],
            ClipSpec::NoiseBurst { .. } => LABELS[2],
            ClipSpec::ClickTrain { .. } => LABELS[3],
            ClipSpec::Overlap { .. } => LABELS[4],
        }
    }

    pub fn label_id(&self) -> usize {
        LABELS.iter().position(|l| *l == self.label()).expect("known label")
    }

    fn phrase(&self) -> String {
        match self {
            ClipSpec::Tone { freq, start, .. } => format!("a {} pitched tone hums {}", pitch(*freq), timing(*start)),
            ClipSpec::Chirp { f0, f1, start, .. } => {
                format!("a chirp sweeps {} {}", if f1 > f0 { "upward" } else { "downward" }, timing(*start))
            }
            ClipSpec::NoiseBurst { start, amp, .. } => {
                format!("a {} burst of noise {}", if *amp > 0.3 { "loud" } else { "soft" }, timing(*start))
            }
            ClipSpec::ClickTrain { rate, start, .. } => {
                format!("a {} train of clicks {}", if *rate > 8.0 { "fast" } else { "slow" }, timing(*start))
            }
            ClipSpec::Overlap { parts } => parts.iter().map(ClipSpec::phrase).collect::<Vec<_>>().join(" while "),
        }
    }

    pub fn caption(&self) -> String {
        self.phrase()
    }

    /// Ten seconds of mono audio at 16 kHz.
    pub fn render(&self) -> Vec<f64> {
        let mut out = vec![0.0; CLIP_SAMPLES];
        self.render_into(&mut out);
        out
    }

    fn render_into(&self, out: &mut [f64]) {
        let sr = TARGET_RATE as f64;
        let span = |start: f64, dur: f64| {
            let a = ((start * sr) as usize).min(out.len());
            let b = (((start + dur) * sr) as usize).min(out.len());
            a..b
        };
        match *self {
            ClipSpec::Tone { freq, start, dur, amp } => {
                for i in span(start, dur) {
                    out[i] += amp * (2.0 * PI * freq * i as f64 / sr).sin();
                }
            }
            ClipSpec::Chirp { f0, f1, start, dur, amp } => {
                let r = span(start, dur);
                let first = r.start;
                for i in r {
                    let t = (i - first) as f64 / sr;
                    let phase = 2.0 * PI * (f0 * t + 0.5 * (f1 - f0) / dur * t * t);
                    out[i] += amp * phase.sin();
                }
            }
            ClipSpec::NoiseBurst { start, dur, amp, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                for i in span(start, dur) {
                    out[i] += amp * rng.random_range(-1.0..1.0);
                }
            }
            ClipSpec::ClickTrain { rate, start, dur, amp } => {
                let r = span(start, dur);
                let period = (sr / rate).max(1.0) as usize;
                let first = r.start;
                for i in r {
                    let k = (i - first) % period;
                    if k < 16 {
                        out[i] += amp * (1.0 - k as f64 / 16.0);
                    }
                }
            }
            ClipSpec::Overlap { ref parts } => {
                for p in parts {
                    p.render_into(out);
                }
            }
        }
        for v in out.iter_mut() {
            *v = v.clamp(-1.0, 1.0);
        }
    }

    /// Random clip of the given class (index into [`LABELS`]).
    pub fn random_of<R: Rng + ?Sized>(class: usize, rng: &mut R) -> ClipSpec {
        let start = rng.random_range(0.0..7.0);
        let dur = rng.random_range(1.5..3.0);
        let amp = rng.random_range(0.15..0.6);
        match class % LABELS.len() {
            0 => ClipSpec::Tone {
                freq: [200.0, 800.0, 3000.0][rng.random_range(0..3)] * rng.random_range(0.9..1.1),
                start,
                dur,
                amp,
            },
            1 => {
                let (lo, hi) = (rng.random_range(200.0..800.0), rng.random_range(2000.0..6000.0));
                let up = rng.random_bool(0.5);
                ClipSpec::Chirp {
                    f0: if up { lo } else { hi },
                    f1: if up { hi } else { lo },
                    start,
                    dur,
                    amp,
                }
            }
            2 => ClipSpec::NoiseBurst {
                start,
                dur,
                amp,
                seed: rng.random(),
            },
            3 => ClipSpec::ClickTrain {
                rate: [4.0, 16.0][rng.random_range(0..2)],
                start,
                dur,
                amp,
            },
            _ => {
                let a = ClipSpec::random_of(0, rng);
                let b = ClipSpec::random_of(rng.random_range(1..4), rng);
                ClipSpec::Overlap { parts: vec![a, b] }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthClip {
    pub id: String,
    pub spec: ClipSpec,
    pub caption: String,
    pub label: String,
}

/// `n` clips cycling through the classes, with pairwise distinct captions
/// whenever the template space allows it.
pub fn generate_corpus(n: usize, seed: u64) -> Vec<SynthClip> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<SynthClip> = Vec::with_capacity(n);
    for i in 0..n {
        let mut spec = ClipSpec::random_of(i, &mut rng);
        for _ in 0..32 {
            if !out.iter().any(|c| c.caption == spec.caption()) {
                break;
            }
            spec = ClipSpec::random_of(i, &mut rng);
        }
        out.push(SynthClip {
            id: format!("clip{i:04}"),
            caption: spec.caption(),
            label: spec.label().to_string(),
            spec,
        });
    }
    out
}
