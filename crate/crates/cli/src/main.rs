//! `mac`: train, run inference, analyse and benchmark audio-captioning models.
//!
//! Exit codes: 0 success, 1 usage error, 2 configuration error, 3 runtime failure.
//! Every error line on stderr starts with `error_code=<n>`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mac_core::audio::MelFrontEnd;
use mac_core::diagnostics::{
    audio_tokens, erank_of_tokens, mean_pairwise_cosine, model_label, scaling_bench, state_update_distances,
    table_csv, ErankSource, FeatureMatrix, StateNorm, TableCell,
};
use mac_core::pipeline::config::DEFAULT_PROMPT;
use mac_core::pipeline::data::{load_manifest, MANIFEST_NAME};
use mac_core::pipeline::{
    generate_greedy, load_model, make_data, prepare_all, prepare_audio, run_ablation, run_experiment, set_max_threads,
    AudioSource, Config, MacModel,
};
use mac_core::ssd::{ScanMode, SsdDims};
use mac_core::Error;

const THREADS_ENV: &str = "MAC_NUM_THREADS";

#[derive(Parser, Debug)]
#[command(name = "mac", version, about = "Mamba-2 audio captioning at desk scale")]
struct Cli {
    /// Print the effective configuration (defaults plus any --config/--set) and exit.
    #[arg(long)]
    dump_config: bool,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Args, Debug, Clone, Default)]
struct ConfigArgs {
    /// TOML configuration file; unspecified keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted-key override applied after the file, e.g. `train.lr=0.0005`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> mac_core::Result<Config> {
        let mut overrides = self.overrides.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        Config::load(self.config.as_deref(), &overrides)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train per the configuration; writes metrics.csv (also printed) and model.ckpt.
    Train {
        /// Output directory (overrides `output.dir`).
        #[arg(long)]
        output: Option<PathBuf>,
        /// Run the ablation grid (rank, encoder, connector) instead of a single experiment.
        #[arg(long)]
        ablation: bool,
    },
    /// Caption one clip with a trained checkpoint.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// 16-bit PCM WAV input.
        #[arg(long, conflicts_with = "features", required_unless_present = "features")]
        wav: Option<PathBuf>,
        /// Precomputed audio-token grid instead of a WAV file.
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long, default_value = DEFAULT_PROMPT)]
        prompt: String,
        /// Maximum caption length in tokens (default from the checkpoint's config).
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Representation analyses of audio tokens and scan states.
    Diagnose {
        #[command(subcommand)]
        analysis: Analysis,
    },
    /// Time the scan over increasing sequence lengths.
    Bench {
        /// Strictly increasing sequence lengths.
        #[arg(long, value_delimiter = ',', default_values_t = [256usize, 512, 1024, 2048, 4096, 8192])]
        lengths: Vec<usize>,
        #[arg(long, value_enum, default_value_t = BenchMode::Recurrent)]
        mode: BenchMode,
        #[arg(long, default_value_t = 16)]
        chunk_len: usize,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        #[arg(long, default_value_t = 16)]
        head_dim: usize,
        #[arg(long, default_value_t = 16)]
        state: usize,
    },
    /// Write a synthetic caption corpus (WAV clips and a manifest).
    MakeData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        n_train: usize,
        #[arg(long, default_value_t = 8)]
        n_eval: usize,
        #[arg(long = "corpus-seed", default_value_t = 0)]
        corpus_seed: u64,
    },
    /// Print the effective configuration as TOML.
    DumpConfig,
}

#[derive(Subcommand, Debug)]
enum Analysis {
    /// Effective rank of the encoder's audio tokens, one cell per checkpoint.
    Erank {
        #[command(flatten)]
        target: DiagnoseTarget,
        /// Take singular values of the centered tokens rather than their covariance.
        #[arg(long)]
        centered: bool,
    },
    /// Mean pairwise cosine similarity of the encoder's audio tokens.
    Cosine {
        #[command(flatten)]
        target: DiagnoseTarget,
    },
    /// Adjacent state-update distances across the audio segment of one clip.
    StateDistance {
        #[command(flatten)]
        target: DiagnoseTarget,
        /// Index of the clip within the chosen split.
        #[arg(long, default_value_t = 0)]
        sample: usize,
        /// Average per-head norms instead of one norm over all heads.
        #[arg(long)]
        per_head: bool,
    },
}

#[derive(Args, Debug)]
struct DiagnoseTarget {
    /// Trained checkpoint. Repeat to fill a model × connector table.
    #[arg(long, required = true)]
    checkpoint: Vec<PathBuf>,
    /// Corpus manifest, or the directory holding it.
    #[arg(long)]
    dataset: PathBuf,
    /// Split to analyse; `auto` takes eval clips when present, else train.
    #[arg(long, value_enum, default_value_t = Split::Auto)]
    split: Split,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Split {
    Auto,
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BenchMode {
    Recurrent,
    Chunked,
    Convolutional,
}

enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type Outcome = Result<(), Failure>;

fn report(f: Failure) -> ExitCode {
    match f {
        Failure::Usage(msg) => {
            eprintln!("error_code=1 usage: {msg}");
            ExitCode::from(1)
        }
        Failure::Core(Error::Config(problems)) => {
            for p in &problems {
                eprintln!("error_code=2 config: {p}");
            }
            ExitCode::from(2)
        }
        Failure::Core(e) => {
            if let Error::Diverged { dump: Some(p), .. } = &e {
                eprintln!("error_code=3 dump: {}", p.display());
            }
            eprintln!("error_code=3 runtime: {e}");
            ExitCode::from(3)
        }
    }
}

fn apply_thread_cap() -> Outcome {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => {
                set_max_threads(n);
                Ok(())
            }
            _ => Err(Failure::Usage(format!("{THREADS_ENV} must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", msg.trim_end());
            return report(Failure::Usage(first.to_string()));
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => report(f),
    }
}

fn run(cli: Cli) -> Outcome {
    apply_thread_cap()?;
    if cli.dump_config {
        return dump_config(&cli.config);
    }
    let Some(command) = cli.command else {
        return Err(Failure::Usage("a subcommand is required (see --help)".into()));
    };
    match command {
        Command::Train { output, ablation } => train(&cli.config, output, ablation),
        Command::Infer {
            checkpoint,
            wav,
            features,
            prompt,
            max_len,
        } => infer(&checkpoint, wav, features, &prompt, max_len),
        Command::Diagnose { analysis } => diagnose(analysis),
        Command::Bench {
            lengths,
            mode,
            chunk_len,
            repeats,
            heads,
            head_dim,
            state,
        } => {
            let mode = match mode {
                BenchMode::Recurrent => ScanMode::Recurrent,
                BenchMode::Chunked => ScanMode::Chunked { chunk_len },
                BenchMode::Convolutional => ScanMode::Convolutional,
            };
            let dims = SsdDims {
                heads,
                head_dim,
                groups: 1,
                state,
            };
            let report = scaling_bench(&lengths, mode, dims, repeats)?;
            print!("{}", report.csv());
            eprintln!("loglog_slope={:.4}", report.slope);
            Ok(())
        }
        Command::MakeData {
            out,
            n_train,
            n_eval,
            corpus_seed,
        } => {
            let manifest = make_data(&out, n_train, n_eval, corpus_seed)?;
            println!("{}", manifest.display());
            Ok(())
        }
        Command::DumpConfig => dump_config(&cli.config),
    }
}

fn dump_config(args: &ConfigArgs) -> Outcome {
    let cfg = args.load()?;
    cfg.validate()?;
    print!("{}", cfg.to_toml());
    Ok(())
}

fn train(args: &ConfigArgs, output: Option<PathBuf>, ablation: bool) -> Outcome {
    let mut cfg = args.load()?;
    if let Some(dir) = output {
        cfg.output.dir = dir;
    }
    cfg.validate()?;
    if ablation {
        let dir = cfg.output.dir.clone();
        print!("{}", run_ablation(&cfg, &dir)?);
    } else {
        print!("{}", run_experiment(&cfg)?.csv());
    }
    Ok(())
}

fn infer(checkpoint: &Path, wav: Option<PathBuf>, features: Option<PathBuf>, prompt: &str, max_len: Option<usize>) -> Outcome {
    let (cfg, model) = load_model(checkpoint)?;
    let src = match (wav, features) {
        (Some(path), None) => AudioSource::Wav { path },
        (None, Some(path)) => AudioSource::Features { path },
        _ => return Err(Failure::Usage("give exactly one of --wav or --features".into())),
    };
    let audio = prepare_audio(&src, &MelFrontEnd::new(), &model.encoder_cfg)?;
    let caption = generate_greedy(&model, &audio, prompt, max_len.unwrap_or(cfg.train.max_decode_len))?;
    println!("{caption}");
    Ok(())
}

fn clips(target: &DiagnoseTarget) -> mac_core::Result<Vec<AudioSource>> {
    let path = if target.dataset.is_dir() {
        target.dataset.join(MANIFEST_NAME)
    } else {
        target.dataset.clone()
    };
    let ds = load_manifest(&path, DEFAULT_PROMPT)?;
    let set = match target.split {
        Split::Train => ds.train,
        Split::Eval => ds.eval,
        Split::Auto if ds.eval.is_empty() => ds.train,
        Split::Auto => ds.eval,
    };
    if set.is_empty() {
        return Err(Error::Config(vec![format!("{}: selected split has no clips", path.display())]));
    }
    Ok(set.into_iter().map(|s| s.audio).collect())
}

/// Per-clip encoder tokens for one checkpoint.
fn token_matrices(model: &MacModel, sources: &[AudioSource]) -> mac_core::Result<Vec<FeatureMatrix>> {
    let refs: Vec<&AudioSource> = sources.iter().collect();
    prepare_all(&refs, &MelFrontEnd::new(), &model.encoder_cfg)?
        .iter()
        .map(|a| FeatureMatrix::new(audio_tokens(model, a)?.tokens, model_label(model)))
        .collect()
}

fn diagnose(analysis: Analysis) -> Outcome {
    match analysis {
        Analysis::Erank { target, centered } => {
            let source = if centered { ErankSource::CenteredTokens } else { ErankSource::Covariance };
            table(&target, "erank", |fm| erank_of_tokens(fm, source))
        }
        Analysis::Cosine { target } => table(&target, "cosine", mean_pairwise_cosine),
        Analysis::StateDistance {
            target,
            sample,
            per_head,
        } => {
            let sources = clips(&target)?;
            let src = sources
                .get(sample)
                .ok_or_else(|| Failure::Usage(format!("--sample {sample} out of range ({} clips)", sources.len())))?;
            let reduce = if per_head { StateNorm::HeadMean } else { StateNorm::Frobenius };
            let mut out = String::from("checkpoint,position,mean");
            let mut body = String::new();
            let mut layers = 0;
            for ck in &target.checkpoint {
                let (_, model) = load_model(ck)?;
                let audio = prepare_audio(src, &MelFrontEnd::new(), &model.encoder_cfg)?;
                let d = state_update_distances(&model, &audio, reduce)?;
                layers = layers.max(d.per_layer.len());
                for (i, m) in d.mean.iter().enumerate() {
                    let per: Vec<String> = d.per_layer.iter().map(|l| l[i].to_string()).collect();
                    body.push_str(&format!("{},{},{m},{}\n", ck.display(), i + 1, per.join(",")));
                }
            }
            for l in 0..layers {
                out.push_str(&format!(",layer_{l}"));
            }
            print!("{out}\n{body}");
            Ok(())
        }
    }
}

/// Model × connector table of a per-clip statistic averaged over clips.
fn table(target: &DiagnoseTarget, metric: &str, stat: impl Fn(&FeatureMatrix) -> mac_core::Result<f64>) -> Outcome {
    let sources = clips(target)?;
    let mut cells = Vec::new();
    for ck in &target.checkpoint {
        let (_, model) = load_model(ck)?;
        let values = token_matrices(&model, &sources)?
            .iter()
            .map(&stat)
            .collect::<mac_core::Result<Vec<f64>>>()?;
        cells.push(TableCell {
            model: model_label(&model),
            variant: model.connector_cfg.variant,
            value: values.iter().sum::<f64>() / values.len() as f64,
        });
    }
    print!("{}", table_csv(metric, &cells));
    Ok(())
}
