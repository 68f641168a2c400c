use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use emofuse::data::{generate_synthetic, load_manifest, SynthConfig, SynthMode};
use emofuse::featfile::FeatureKind;
use emofuse::harness::{
    evaluate_checkpoint, featurize_dir, render_report, run_hpo, run_training, HpoSpace, RunConfig,
};
use emofuse::audio::SpeechConfig;
use emofuse::Error;

#[derive(Parser)]
#[command(name = "emofuse", version, about = "Multimodal emotion classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModalityArg {
    Speech,
    Text,
    Mocap,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthModeArg {
    Separable,
    PartialSignal,
}

#[derive(Subcommand)]
enum Command {
    /// Write a balanced synthetic corpus with manifest.
    SynthData {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "separable")]
        mode: SynthModeArg,
        #[arg(long, default_value_t = 300)]
        embedding_dim: usize,
    },
    /// Materialize feature files for a manifest.
    Featurize {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum)]
        modality: ModalityArg,
        #[arg(long)]
        out: PathBuf,
        /// Embedding table (default: embeddings.txt beside the manifest).
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Train a model or fusion network from a TOML run config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score a checkpoint on a split of the run that produced it.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Also write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Random search over fusion hyperparameters.
    Hpo {
        #[arg(long)]
        space: PathBuf,
        #[arg(long)]
        budget: usize,
        #[arg(long)]
        config: PathBuf,
    },
    /// Summarize a run directory.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::SynthData {
            n,
            seed,
            out,
            mode,
            embedding_dim,
        } => {
            let cfg = SynthConfig {
                n,
                seed,
                mode: match mode {
                    SynthModeArg::Separable => SynthMode::Separable,
                    SynthModeArg::PartialSignal => SynthMode::PartialSignal,
                },
                embedding_dim,
                ..SynthConfig::default()
            };
            let corpus = generate_synthetic(&cfg, &out)?;
            println!("{} utterances written to {}", corpus.utterances.len(), out.display());
        }
        Command::Featurize {
            manifest,
            modality,
            out,
            embeddings,
        } => {
            let corpus = load_manifest(&manifest)?;
            let kinds = match modality {
                ModalityArg::Speech => vec![FeatureKind::Speech],
                ModalityArg::Text => vec![FeatureKind::Text, FeatureKind::Tokens],
                ModalityArg::Mocap => vec![FeatureKind::Mocap],
                ModalityArg::All => vec![FeatureKind::Speech, FeatureKind::Text, FeatureKind::Tokens, FeatureKind::Mocap],
            };
            let embeddings = embeddings.unwrap_or_else(|| {
                manifest.parent().unwrap_or(std::path::Path::new("")).join("embeddings.txt")
            });
            for p in featurize_dir(&corpus, &out, &kinds, &SpeechConfig::default(), &embeddings, true)? {
                println!("{}", p.display());
            }
        }
        Command::Train { config } => {
            let cfg = RunConfig::load(&config)?;
            let out = run_training(&cfg)?;
            print!("{}", render_report(&out.dir)?);
        }
        Command::Evaluate { checkpoint, split, out } => {
            let (report, _) = evaluate_checkpoint(&checkpoint, &split)?;
            let json = report.to_json();
            if let Some(path) = out {
                std::fs::write(&path, &json).map_err(|e| Error::io(&path, e))?;
            }
            print!("{json}");
        }
        Command::Hpo { space, budget, config } => {
            let mut space = HpoSpace::load(&space)?;
            space.budget = budget;
            let cfg = RunConfig::load(&config)?;
            let outcome = run_hpo(&space, &cfg)?;
            println!(
                "winner: trial {} (validation {:.4}), test accuracy {:.4}",
                outcome.winner.trial,
                outcome.winner.validation_accuracy.unwrap_or(f64::NAN),
                outcome.test_report.accuracy
            );
        }
        Command::Report { run_dir } => print!("{}", render_report(&run_dir)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
