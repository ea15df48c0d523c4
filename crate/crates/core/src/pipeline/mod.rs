//! Tokenizer, sequence assembly, training, decoding, checkpoints and configuration.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod experiment;
pub mod generate;
pub mod model;
pub mod store;
pub mod train;
pub mod vocab;

pub use checkpoint::Checkpoint;
pub use config::Config;
pub use data::{load_dataset, make_data, max_threads, prepare_all, prepare_audio, set_max_threads, AudioSource, Dataset, Sample};
pub use experiment::{run_ablation, run_experiment, ExperimentResult, MetricsRow};
pub use generate::{generate_greedy, generate_ids, token_f1, DecodeMode};
pub use model::{AudioInput, MacModel, SequencePlan};
pub use store::{load_model, save_adapters, save_model};
pub use train::{train_step, StepReport, TrainState};
pub use vocab::Vocab;
