//! Audio ingestion: WAV decoding, log-mel features, the patch encoder, and a
//! synthetic captioned corpus.

pub mod encoder;
pub mod mel;
pub mod synth;
pub mod wav;

pub use encoder::{encode, encode_tensor, load_features, save_features, AudioTokenGrid, EncoderConfig, EncoderWeights};
pub use mel::{melspectrogram, MelFrontEnd, MelSpec};
pub use synth::{generate_corpus, ClipSpec, SynthClip};
pub use wav::{decode_wav, load_wav, Waveform};
