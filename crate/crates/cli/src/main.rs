mod commands;

use clap::{Parser, Subcommand, ValueEnum};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "vaenar", version, about = "Non-autoregressive VAE text-to-spectrogram toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum NoiseArg {
    Zeros,
    Sample,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus: one VSPG file per utterance plus index.tsv.
    GenCorpus {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model, writing metrics.csv, checkpoint.vnck and best.vnck into --out.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint; the metrics log in --out is kept up to its epoch.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Synthesize a spectrogram for --text in parallel and report timing.
    Synthesize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        text: String,
        #[arg(long)]
        out: PathBuf,
        /// Frames added to the predicted length.
        #[arg(long)]
        length_bias: Option<usize>,
        #[arg(long, value_enum, default_value_t = NoiseArg::Zeros)]
        noise: NoiseArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Export each decoder block's cross-attention as CSV plus diagnostics.txt into the --out directory.
    DumpAlignment {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        text: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the numerical oracle suite.
    Selfcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenCorpus { config, out } => commands::gen_corpus(config.as_deref(), &out),
        Command::Train {
            config,
            corpus,
            out,
            resume,
        } => commands::train(config.as_deref(), &corpus, &out, resume.as_deref()),
        Command::Synthesize {
            checkpoint,
            text,
            out,
            length_bias,
            noise,
            seed,
        } => commands::synthesize(&checkpoint, &text, &out, length_bias, noise, seed),
        Command::DumpAlignment { checkpoint, text, out } => commands::dump_alignment(&checkpoint, &text, &out),
        Command::Selfcheck { seed } => commands::selfcheck(seed),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
