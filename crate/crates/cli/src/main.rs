use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use entlink::kb::Mode;
use entlink::pipeline::{Pipeline, PipelineConfig};
use entlink::synth::SynthConfig;

/// Three-stage entity linking for speech transcripts.
///
/// Paths may be overridden with ENTLINK_KB, ENTLINK_CORPUS,
/// ENTLINK_MODEL_DIR and ENTLINK_OUT_DIR.
#[derive(Parser)]
#[command(name = "entlink", version)]
struct Cli {
    /// TOML configuration; defaults apply when omitted.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Replaces the configured mode.
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,
    /// Log progress (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Track1,
    Track2,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Standard,
    Ambiguous,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic KB and corpus at the configured paths.
    Synth {
        /// Start from a preset instead of the config's `[synth]` table.
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        entities: Option<usize>,
        #[arg(long)]
        documents: Option<usize>,
    },
    /// Validate the KB and write a summary to the model directory.
    BuildKb,
    /// Stage 1: train the sentence retriever and build the entity index.
    TrainRetriever,
    /// Stage 2: train the mention recognizer.
    TrainNer {
        /// Seed for both initialization and shuffling (ensemble members).
        #[arg(long)]
        seed: Option<u64>,
        /// Parameter file to write instead of `<model_dir>/ner.bin`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Stage 3: train the mention encoder and ranker.
    TrainLinker {
        #[arg(long)]
        seed: Option<u64>,
        /// Directory to write instead of the model directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Recognize and link on the evaluation data.
    RunTrack1,
    /// Link gold mentions of the evaluation data.
    RunTrack2,
    /// Run every track the mode supports and write `report.{json,txt}`.
    Eval {
        /// Train all three stages first.
        #[arg(long)]
        train: bool,
    },
}

fn load_config(cli: &Cli) -> anyhow::Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    cfg.apply_env_overrides(|k| std::env::var(k).ok());
    if let Some(m) = cli.mode {
        cfg.mode = match m {
            ModeArg::Track1 => Mode::Track1,
            ModeArg::Track2 => Mode::Track2,
        };
    }
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = load_config(&cli)?;
    let pipeline = Pipeline::new(cfg)?;
    match cli.command {
        Command::Synth {
            preset,
            seed,
            entities,
            documents,
        } => {
            let mut synth = match preset {
                None => pipeline.config().synth.clone(),
                Some(Preset::Standard) => SynthConfig::default(),
                Some(Preset::Ambiguous) => SynthConfig::ambiguous(),
            };
            synth.seed = seed.unwrap_or(synth.seed);
            synth.entities = entities.unwrap_or(synth.entities);
            synth.documents = documents.unwrap_or(synth.documents);
            pipeline.synth(&synth)?;
            let paths = &pipeline.config().paths;
            println!("wrote {} and {}", paths.kb.display(), paths.corpus.display());
        }
        Command::BuildKb => {
            let s = pipeline.build_kb()?;
            println!("{} entities, {} aliases, digest {}", s.entities, s.aliases, s.digest);
        }
        Command::TrainRetriever => pipeline.train_retriever()?,
        Command::TrainNer { seed, output } => pipeline.train_ner(output.as_deref(), seed)?,
        Command::TrainLinker { seed, output } => pipeline.train_linker(output.as_deref(), seed)?,
        Command::RunTrack1 => print!("{}", pipeline.run_track1()?.render_text()),
        Command::RunTrack2 => print!("{}", pipeline.run_track2()?.render_text()),
        Command::Eval { train } => {
            if train {
                pipeline.train_all().context("training")?;
            }
            print!("{}", pipeline.eval()?.render_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
