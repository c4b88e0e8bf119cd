use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use trf_cli::commands::{self, GradcheckOptions};
use trf_cli::config::{ExperimentConfig, RescoreConfig};
use trf_cli::{CliError, Result};
use trf_core::corpus::TokenLevel;
use trf_core::trf::DEFAULT_ENUMERATION_BUDGET;
use trf_core::util::write_atomic;

#[derive(Parser)]
#[command(
    name = "trf",
    version,
    about = "Neural trans-dimensional random field language models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Level {
    Word,
    Char,
}

impl From<Level> for TokenLevel {
    fn from(l: Level) -> Self {
        match l {
            Level::Word => TokenLevel::Word,
            Level::Char => TokenLevel::Char,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the Kneser-Ney n-gram of an experiment config.
    TrainNgram {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the LSTM LM of an experiment config.
    TrainLstm {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train a TRF with noise-contrastive estimation.
    TrainTrf {
        #[arg(long)]
        config: PathBuf,
    },
    /// Mean negative log-likelihood of a text file under a saved TRF.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long, value_enum, default_value = "word")]
        level: Level,
        /// Normalize by enumeration instead of the stored zeta.
        #[arg(long)]
        exact_z: bool,
        #[arg(long, default_value_t = DEFAULT_ENUMERATION_BUDGET as u64)]
        budget: u64,
    },
    /// N-best rescoring and WER report.
    Rescore {
        #[arg(long)]
        config: PathBuf,
    },
    /// Finite-difference checks of the potential and NCE gradients.
    Gradcheck {
        /// Take the potential architecture from this experiment config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, env = "TRF_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 1e-5)]
        theta_threshold: f64,
        #[arg(long, default_value_t = 1e-6)]
        zeta_threshold: f64,
        /// Scale the analytic gradients by `1 + FAULT` (checks the checker).
        #[arg(long)]
        inject_fault: Option<f64>,
    },
    /// Exact log-normalizers of a saved TRF, next to its stored zeta.
    EnumerateZ {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = DEFAULT_ENUMERATION_BUDGET as u64)]
        budget: u64,
        /// Also write the table as CSV.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Build a short-word corpus (words.txt, train.txt, valid.txt) from a word list.
    ExtractWords {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output_dir: PathBuf,
        #[arg(long, default_value_t = 3)]
        max_chars: usize,
        #[arg(long, default_value_t = 16)]
        every: usize,
    },
}

fn print_map(m: &std::collections::BTreeMap<&str, f64>) {
    for (k, v) in m {
        println!("{k} = {v}");
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainNgram { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let run = commands::train_ngram_cmd(&cfg)?;
            println!("train_nll = {}", run.train_nll);
            if let Some(v) = run.valid_nll {
                println!("valid_nll = {v}");
            }
            println!("wrote {}", cfg.output_dir.display());
        }
        Command::TrainLstm { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let run = commands::train_lstm_cmd(&cfg)?;
            if let Some(e) = run.epochs.last() {
                println!("train_nll = {}", e.train_nll);
                if let Some(v) = e.valid_nll {
                    println!("valid_nll = {v}");
                }
            }
            println!("wrote {}", cfg.output_dir.display());
        }
        Command::TrainTrf { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let run = commands::train_trf_cmd(&cfg)?;
            print_map(&commands::summary(&run.log));
            println!("wrote {}", cfg.output_dir.display());
        }
        Command::Eval {
            model,
            data,
            vocab,
            level,
            exact_z,
            budget,
        } => {
            let budget = exact_z.then_some(budget as u128);
            let report = commands::eval_cmd(&model, &data, &vocab, level.into(), budget)?;
            print!("{}", report.to_csv());
        }
        Command::Rescore { config } => {
            let cfg = RescoreConfig::load(&config)?;
            let report = commands::rescore_cmd(&cfg)?;
            print!("{}", trf_core::evalkit::wer_report_csv(&report.rows));
            println!("wrote {}", cfg.output_dir.display());
        }
        Command::Gradcheck {
            config,
            seed,
            instances,
            theta_threshold,
            zeta_threshold,
            inject_fault,
        } => {
            let cfg = config.as_deref().map(ExperimentConfig::load).transpose()?;
            let opts = GradcheckOptions {
                seed,
                instances,
                theta_threshold,
                zeta_threshold,
                fault: inject_fault,
            };
            let outcome = commands::gradcheck_cmd(cfg.as_ref(), &opts)?;
            print!("{}", outcome.report);
            if let Some((check, worst)) = outcome.report.worst() {
                println!(
                    "worst: {check} {} [{}] rel err {:.3e}",
                    worst.block, worst.index, worst.rel_error
                );
            }
            outcome.into_result()?;
            println!("PASS");
        }
        Command::EnumerateZ {
            model,
            budget,
            output,
        } => {
            let rows = commands::enumerate_z_cmd(&model, budget as u128)?;
            let csv = commands::z_rows_csv(&rows);
            print!("{csv}");
            if let Some(p) = output {
                write_atomic(&p, csv.as_bytes()).map_err(CliError::from)?;
            }
        }
        Command::ExtractWords {
            input,
            output_dir,
            max_chars,
            every,
        } => {
            let split = commands::extract_words_cmd(&input, &output_dir, max_chars, every)?;
            println!(
                "{} words: {} train, {} valid",
                split.words.len(),
                split.train.len(),
                split.valid.len()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
