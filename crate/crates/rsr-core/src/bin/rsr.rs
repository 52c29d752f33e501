//! Command-line front end: train the desk-scale model, generate text with
//! or without perturbation, run experiment grids, and profile text.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/model error. Diagnostics
//! go to stderr; data goes to stdout or the output files. `RSR_LOG`
//! (error|info|debug) controls verbosity.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Deserialize;

use rsr_core::harness::{run_experiment, ExperimentConfig};
use rsr_core::metrics::{lexical_profile, LexicalConfig};
use rsr_core::model::checkpoint::{load_checkpoint, save_checkpoint};
use rsr_core::model::train::{train, TrainHyper};
use rsr_core::model::{generate, ModelConfig, Sampler};
use rsr_core::regeneration::{generate_perturbed, PerturbationConfig};

#[derive(Parser)]
#[command(name = "rsr", version, about = "Recursive symbolic regeneration lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a checkpoint on a plain-text corpus.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON with optional "model" (architecture) and "hyper"
        /// (optimizer) overrides.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate text from a prompt, optionally through the perturbation.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        steps: usize,
        /// Perturbation config as inline JSON or a path to a JSON file.
        #[arg(long)]
        perturb: Option<String>,
        /// Temperature; omit for greedy decoding.
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run a full experiment grid from a JSON config.
    Experiment {
        #[arg(long)]
        config: PathBuf,
    },
    /// Lexical profile of a text file, as CSV on stdout.
    Metrics {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        text: PathBuf,
    },
}

#[derive(Debug, Default, Deserialize)]
struct TrainFileConfig {
    #[serde(default)]
    model: Option<ModelConfig>,
    #[serde(default)]
    hyper: Option<TrainHyperOverrides>,
}

#[derive(Debug, Default, Deserialize)]
struct TrainHyperOverrides {
    lr: Option<f64>,
    steps: Option<usize>,
    batch: Option<usize>,
    seq_len: Option<usize>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("RSR_LOG", "error"))
        .format_timestamp(None)
        .init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e);
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train {
            corpus,
            out,
            config,
            seed,
        } => {
            let corpus_text = std::fs::read_to_string(&corpus)?;
            let file_cfg: TrainFileConfig = match config {
                Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
                None => TrainFileConfig::default(),
            };
            let model_cfg = file_cfg.model.unwrap_or_default();
            let mut hyper = TrainHyper {
                seed,
                ..TrainHyper::default()
            };
            if let Some(h) = file_cfg.hyper {
                if let Some(v) = h.lr {
                    hyper.lr = v;
                }
                if let Some(v) = h.steps {
                    hyper.steps = v;
                }
                if let Some(v) = h.batch {
                    hyper.batch = v;
                }
                if let Some(v) = h.seq_len {
                    hyper.seq_len = v;
                }
            }
            let outcome = train(&corpus_text, &model_cfg, &hyper)?;
            save_checkpoint(&outcome.checkpoint, &out)?;
            let final_loss = rsr_core::model::train::smoothed(&outcome.losses, 100);
            eprintln!(
                "trained {} steps, final smoothed loss {:.4}, saved to {}",
                outcome.losses.len(),
                final_loss,
                out.display()
            );
            Ok(())
        }
        Command::Generate {
            ckpt,
            prompt,
            steps,
            perturb,
            temperature,
            seed,
        } => {
            let ckpt = load_checkpoint(&ckpt)?;
            let sampler = match temperature {
                None => Sampler::Greedy,
                Some(tau) => Sampler::Temperature { tau, seed },
            };
            let seq = ckpt.vocab.encode(&prompt);
            let out = match perturb {
                None => generate(&ckpt, &seq, steps, sampler)?,
                Some(arg) => {
                    let json = if arg.trim_start().starts_with('{') {
                        arg
                    } else {
                        std::fs::read_to_string(&arg)?
                    };
                    let pcfg: PerturbationConfig = serde_json::from_str(&json)?;
                    generate_perturbed(&ckpt, &seq, steps, sampler, &pcfg)?.0
                }
            };
            println!("{}", ckpt.vocab.decode(&out)?);
            Ok(())
        }
        Command::Experiment { config } => {
            let cfg: ExperimentConfig =
                serde_json::from_str(&std::fs::read_to_string(&config)?)?;
            let report = run_experiment(&cfg)?;
            eprintln!(
                "experiment complete: {} cells written to {}",
                report.cells.len(),
                cfg.output_dir.display()
            );
            Ok(())
        }
        Command::Metrics { ckpt, text } => {
            let ckpt = load_checkpoint(&ckpt)?;
            let body = std::fs::read_to_string(&text)?;
            let p = lexical_profile(&body, &ckpt.vocab, &LexicalConfig::default())?;
            println!(
                "ttr,mean_sentence_len,lexical_density,repetition_rate,rare_word_rate,token_count,type_count"
            );
            println!(
                "{},{},{},{},{},{},{}",
                p.ttr,
                p.mean_sentence_len,
                p.lexical_density,
                p.repetition_rate,
                p.rare_word_rate,
                p.token_count,
                p.type_count
            );
            Ok(())
        }
    }
}
