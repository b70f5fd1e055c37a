//! `a2i`: vocabulary, embeddings, synthetic data, training, evaluation and
//! reports for audio-to-intent classification.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "a2i", version, about = "Audio-to-intent classification experiments")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug)]
pub struct GlobalArgs {
    /// Experiment config (JSON); flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output file or directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true, env = "A2I_THREADS")]
    pub threads: Option<usize>,
    /// Increase log verbosity (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Learn a BPE vocabulary from a text corpus.
    BuildVocab {
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Target vocabulary size.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Train CBOW subword embeddings.
    TrainCbow {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        window: Option<usize>,
    },
    /// Synthesize labelled posterior files and a dataset manifest.
    SynthData {
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Confuse tokens along embedding neighbours instead of at random.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Template file of the in-domain grammar; built-in when omitted.
        #[arg(long)]
        intended_grammar: Option<PathBuf>,
        /// Template file of the background grammar; built-in when omitted.
        #[arg(long)]
        unintended_grammar: Option<PathBuf>,
        #[arg(long)]
        per_class: Option<usize>,
        /// Train,validation,eval fractions, e.g. 0.7,0.15,0.15.
        #[arg(long, value_parser = parse_ratios)]
        ratios: Option<a2i::scenarios::SplitRatios>,
        #[arg(long)]
        intended_temperature: Option<f64>,
        #[arg(long)]
        unintended_temperature: Option<f64>,
    },
    /// Train an A2I classifier.
    Train {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Score a partition with a checkpoint and report EER and FAR.
    Eval {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Partition::Eval)]
        partition: Partition,
        /// Target true-positive rate for the FAR operating point.
        #[arg(long)]
        tpr: Option<f64>,
        /// Also write DET points as CSV.
        #[arg(long)]
        det_csv: Option<PathBuf>,
    },
    /// Train and evaluate a grid of configurations.
    Ablate {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// JSON array of partial model configs; a Top-N x PosEnc grid plus the acoustic and fused systems when omitted.
        #[arg(long)]
        grid: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Report SoP entropy per class and top-token overlap.
    Analyze {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Partition::All)]
        partition: Partition,
        #[arg(long)]
        top_k: Option<usize>,
    },
}

#[derive(Args, Debug, Default)]
pub struct ModelArgs {
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub top_n: Option<usize>,
    #[arg(long)]
    pub pos_enc: Option<bool>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum ModeArg {
    Acoustic,
    Textual,
    Full,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Partition {
    Train,
    Validation,
    Eval,
    All,
}

fn parse_ratios(s: &str) -> Result<a2i::scenarios::SplitRatios, String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [train, validation, eval] => Ok(a2i::scenarios::SplitRatios {
            train,
            validation,
            eval,
        }),
        _ => Err(format!("expected three comma-separated fractions, got {}", parts.len())),
    }
}

/// Command-line misuse, reported with exit code 1.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return 1;
        }
        if let Some(a2i::Error::NonFinite(_)) = cause.downcast_ref::<a2i::Error>() {
            return 3;
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let level = match cli.global.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratios_parse() {
        let r = parse_ratios("0.6, 0.2,0.2").unwrap();
        assert_eq!((r.train, r.validation, r.eval), (0.6, 0.2, 0.2));
        assert!(parse_ratios("0.5,0.5").is_err());
        assert!(parse_ratios("a,b,c").is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&anyhow::Error::new(Usage("x".into()))), 1);
        assert_eq!(exit_code(&anyhow::Error::new(a2i::Error::Data("x".into()))), 2);
        let nf = anyhow::Error::new(a2i::Error::NonFinite("loss".into())).context("training");
        assert_eq!(exit_code(&nf), 3);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
