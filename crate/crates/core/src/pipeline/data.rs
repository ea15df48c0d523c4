//! Samples, the synthetic corpus manifest, and audio preparation.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use super::config::{Config, CLASSIFY_PROMPT};
use super::model::AudioInput;
use super::vocab::Vocab;
use crate::audio::synth::LABELS;
use crate::audio::wav::{write_wav, TARGET_RATE};
use crate::audio::{generate_corpus, load_features, load_wav, ClipSpec, EncoderConfig, MelFrontEnd};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AudioSource {
    Wav { path: PathBuf },
    Features { path: PathBuf },
    Synthetic { spec: ClipSpec },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub audio: AudioSource,
    pub prompt: String,
    pub caption: String,
    pub label: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
}

impl Dataset {
    /// Every prompt, caption and label, plus the classification prompt.
    pub fn vocab(&self) -> Vocab {
        let mut texts: Vec<&str> = vec![CLASSIFY_PROMPT];
        texts.extend(LABELS);
        for s in self.train.iter().chain(&self.eval) {
            texts.push(&s.prompt);
            texts.push(&s.caption);
            if let Some(l) = &s.label {
                texts.push(l);
            }
        }
        Vocab::build(texts)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: String,
    /// Relative to the manifest's directory.
    pub wav: String,
    pub caption: String,
    pub label: String,
    pub spec: ClipSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub clip: Vec<ManifestEntry>,
}

pub const MANIFEST_NAME: &str = "manifest.toml";

/// Writes `n_train + n_eval` WAV clips and a manifest into `dir`; returns the manifest path.
pub fn make_data(dir: &Path, n_train: usize, n_eval: usize, seed: u64) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut clip = Vec::new();
    for (i, c) in generate_corpus(n_train + n_eval, seed).into_iter().enumerate() {
        let wav = format!("{}.wav", c.id);
        write_wav(&dir.join(&wav), &c.spec.render(), TARGET_RATE, 1)?;
        clip.push(ManifestEntry {
            id: c.id,
            split: if i < n_train { "train" } else { "eval" }.into(),
            wav,
            caption: c.caption,
            label: c.label,
            spec: c.spec,
        });
    }
    let path = dir.join(MANIFEST_NAME);
    let text = toml::to_string(&Manifest { clip }).map_err(|e| Error::contract(e.to_string()))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn load_manifest(path: &Path, prompt: &str) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m: Manifest = toml::from_str(&text).map_err(|e| Error::Config(vec![format!("{}: {}", path.display(), e.message())]))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut ds = Dataset::default();
    for e in m.clip {
        let s = Sample {
            id: e.id,
            audio: AudioSource::Wav { path: base.join(&e.wav) },
            prompt: prompt.to_string(),
            caption: e.caption,
            label: Some(e.label),
        };
        match e.split.as_str() {
            "train" => ds.train.push(s),
            "eval" => ds.eval.push(s),
            other => return Err(Error::Config(vec![format!("{}: unknown split `{other}`", path.display())])),
        }
    }
    Ok(ds)
}

/// In-memory synthetic corpus (no files).
pub fn synthetic_dataset(n_train: usize, n_eval: usize, seed: u64, prompt: &str) -> Dataset {
    let all = generate_corpus(n_train + n_eval, seed);
    let to_sample = |c: crate::audio::SynthClip| Sample {
        id: c.id,
        audio: AudioSource::Synthetic { spec: c.spec },
        prompt: prompt.to_string(),
        caption: c.caption,
        label: Some(c.label),
    };
    let mut it = all.into_iter();
    Dataset {
        train: it.by_ref().take(n_train).map(to_sample).collect(),
        eval: it.map(to_sample).collect(),
    }
}

pub fn load_dataset(cfg: &Config) -> Result<Dataset> {
    if cfg.data.manifest.is_empty() {
        Ok(synthetic_dataset(cfg.data.n_train, cfg.data.n_eval, cfg.data.corpus_seed, &cfg.data.prompt))
    } else {
        load_manifest(Path::new(&cfg.data.manifest), &cfg.data.prompt)
    }
}

/// Decodes the source into model-ready audio.
pub fn prepare_audio(src: &AudioSource, front: &MelFrontEnd, enc: &EncoderConfig) -> Result<AudioInput> {
    let wave = match src {
        AudioSource::Features { path } => return Ok(AudioInput::Grid(load_features(path)?)),
        AudioSource::Wav { path } => load_wav(path)?,
        AudioSource::Synthetic { spec } => spec.render(),
    };
    Ok(AudioInput::Mel(front.compute(&wave)?.fit_frames(enc.mel_frames)))
}

static MAX_THREADS: AtomicUsize = AtomicUsize::new(0);

/// Caps the worker threads used for audio preparation; 0 restores the default
/// (the machine's available parallelism).
pub fn set_max_threads(n: usize) {
    MAX_THREADS.store(n, Ordering::Relaxed);
}

pub fn max_threads() -> usize {
    match MAX_THREADS.load(Ordering::Relaxed) {
        0 => std::thread::available_parallelism().map_or(1, usize::from),
        n => n,
    }
}

/// [`prepare_audio`] over many sources on up to [`max_threads`] workers; output order
/// follows the input.
pub fn prepare_all(sources: &[&AudioSource], front: &MelFrontEnd, enc: &EncoderConfig) -> Result<Vec<AudioInput>> {
    let workers = max_threads().min(sources.len()).max(1);
    if workers == 1 {
        return sources.iter().map(|s| prepare_audio(s, front, enc)).collect();
    }
    let per = sources.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = sources
            .chunks(per)
            .map(|part| scope.spawn(move || part.iter().map(|s| prepare_audio(s, front, enc)).collect::<Result<Vec<_>>>()))
            .collect();
        let mut out = Vec::with_capacity(sources.len());
        for h in handles {
            out.extend(h.join().map_err(|_| Error::contract("audio worker panicked"))??);
        }
        Ok(out)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::config::DEFAULT_PROMPT;

    #[test]
    fn make_data_round_trips_through_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let path = make_data(dir.path(), 3, 2, 4).unwrap();
        let ds = load_manifest(&path, DEFAULT_PROMPT).unwrap();
        assert_eq!((ds.train.len(), ds.eval.len()), (3, 2));
        let mem = synthetic_dataset(3, 2, 4, DEFAULT_PROMPT);
        for (a, b) in ds.train.iter().zip(&mem.train) {
            assert_eq!(a.caption, b.caption);
            assert_eq!(a.label, b.label);
        }
        // Quantized WAV and in-memory render give nearly the same features.
        let front = MelFrontEnd::new();
        let enc = EncoderConfig::desk();
        let AudioInput::Mel(from_file) = prepare_audio(&ds.train[0].audio, &front, &enc).unwrap() else { panic!() };
        let AudioInput::Mel(from_mem) = prepare_audio(&mem.train[0].audio, &front, &enc).unwrap() else { panic!() };
        assert_eq!(from_file.frames.shape(), &[1024, 128]);
        let close = from_file
            .frames
            .data()
            .iter()
            .zip(from_mem.frames.data())
            .filter(|(a, b)| (*a - *b).abs() < 0.05)
            .count();
        assert!(close as f64 > 0.95 * from_file.frames.len() as f64);
    }

    #[test]
    fn vocab_covers_corpus() {
        let ds = synthetic_dataset(6, 2, 1, DEFAULT_PROMPT);
        let v = ds.vocab();
        for s in ds.train.iter().chain(&ds.eval) {
            v.encode(&s.caption).unwrap();
            v.encode(&s.prompt).unwrap();
        }
        v.encode(CLASSIFY_PROMPT).unwrap();
        assert!(v.len() <= 512);
    }
}
