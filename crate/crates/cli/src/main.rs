use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use durnn::oracle::{InstanceSizes, VerifyConfig};
use durnn::{ParamKind, Variant};
use durnn_cli::ablate::run_ablation;
use durnn_cli::checkpoint::Checkpoint;
use durnn_cli::config::{ExperimentConfig, PRESETS};
use durnn_cli::trace::{export_default_traces, export_traces, trace_stats, write_traces};
use durnn_cli::train::{run_training, DataSource, TrainOptions};
use durnn_cli::verify::{run_verify, VerifyRequest};

#[derive(Parser)]
#[command(name = "durnn", version, about = "Train and verify dual recurrent networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigSource {
    /// Config file (`key = value` lines).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in config: adding100, adding500, adding1000, adding5000, mnist, pmnist.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_iters: Option<u64>,
}

impl ConfigSource {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(p), _) => ExperimentConfig::load(p)?,
            (None, Some(name)) => ExperimentConfig::preset(name)?,
            (None, None) => bail!("pass --config <file> or --preset <name>"),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(m) = self.max_iters {
            cfg.max_iters = m;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model, logging CSV curves and writing a checkpoint.
    Train {
        #[command(flatten)]
        source: ConfigSource,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
        #[arg(long)]
        quiet: bool,
    },
    /// Check the backward pass against the closed-form and finite-difference oracles.
    Verify {
        /// Maximum sizes as N,M,L,B for the closed-form suite.
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
        /// Closed-form instances per variant.
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 25)]
        fd_instances: usize,
        /// Sequence lengths for the norm-bound checks.
        #[arg(long, value_delimiter = ',', default_values_t = [50usize, 200])]
        bound_lengths: Vec<usize>,
        #[arg(long, default_value_t = 10)]
        bound_instances: usize,
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSON-lines report destination.
        #[arg(long, default_value = "verify_report.jsonl")]
        json: PathBuf,
        /// Print every comparison instead of the per-parameter summary.
        #[arg(long)]
        all: bool,
        /// Test hook: corrupt the analytic gradient of this parameter.
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Train several variants under one config.
    Ablate {
        #[command(flatten)]
        source: ConfigSource,
        #[arg(long, value_delimiter = ',', required = true)]
        variants: Vec<String>,
        #[arg(long, default_value = "runs/ablate")]
        out: PathBuf,
        #[arg(long)]
        quiet: bool,
    },
    /// Export per-neuron activations of a checkpoint for one input sequence.
    Trace {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Adding problem: seed of the generated sequence; MNIST: test index.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print a built-in config.
    ShowConfig {
        #[arg(long)]
        preset: String,
    },
}

/// Errors in the user's request, reported with exit status 2.
#[derive(Debug)]
struct Usage(anyhow::Error);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for Usage {}

fn usage<T>(r: Result<T>) -> Result<T> {
    r.map_err(|e| Usage(e).into())
}

fn parse_variants(names: &[String]) -> Result<Vec<Variant>> {
    names
        .iter()
        .map(|n| n.parse::<Variant>().map_err(|e| anyhow::anyhow!("{e}")))
        .collect()
}

/// Returns whether the run met its criteria.
fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train {
            source,
            resume,
            out,
            quiet,
        } => {
            let cfg = usage(source.load())?;
            let opts = TrainOptions { out_dir: out, resume, quiet };
            let s = run_training(&cfg, &opts)?;
            println!("iterations {}", s.iterations);
            if let Some(e) = s.initial_eval {
                println!("initial eval loss {:.6}", e.loss);
            }
            println!("final eval loss {:.6}", s.final_eval.loss);
            if let Some(err) = s.final_eval.error {
                println!("final eval error {:.4}", err);
            }
            println!("checkpoint {}", s.checkpoint.display());
            for v in &s.constraint_violations {
                println!("violation: {v}");
            }
            Ok(s.constraint_violations.is_empty() && (cfg.target_loss.is_none() || s.reached_target))
        }
        Command::Verify {
            sizes,
            instances,
            fd_instances,
            bound_lengths,
            bound_instances,
            variants,
            seed,
            json,
            all,
            corrupt,
        } => {
            let mut suite = VerifyConfig {
                seed,
                oracle_instances: instances,
                fd_instances,
                ..VerifyConfig::default()
            };
            if let Some(s) = sizes {
                if s.len() != 4 || s.contains(&0) {
                    return Err(Usage(anyhow::anyhow!("--sizes takes four positive values N,M,L,B")).into());
                }
                suite.oracle_sizes = InstanceSizes {
                    neurons: s[0],
                    inputs: s[1],
                    steps: s[2],
                    batch: s[3],
                    ..suite.oracle_sizes
                };
            }
            if let Some(v) = variants {
                suite.variants = usage(parse_variants(&v))?;
            }
            if let Some(name) = corrupt {
                suite.corrupt = Some(usage(
                    ParamKind::from_name(&name).ok_or_else(|| anyhow::anyhow!("unknown parameter `{name}`")),
                )?);
            }
            let req = VerifyRequest {
                suite,
                bound_lengths,
                bound_instances,
                ..VerifyRequest::default()
            };
            let report = usage(run_verify(&req))?;
            let shown = if all { report.clone() } else { report.summary() };
            print!("{}", shown.to_text());
            std::fs::write(&json, report.to_json_lines()).with_context(|| format!("writing {}", json.display()))?;
            let failed = report.failures().count();
            println!(
                "{} comparisons, {} failed; JSON lines in {}",
                report.entries.len(),
                failed,
                json.display()
            );
            Ok(failed == 0)
        }
        Command::Ablate {
            source,
            variants,
            out,
            quiet,
        } => {
            let cfg = usage(source.load())?;
            let variants = usage(parse_variants(&variants))?;
            let results = run_ablation(&cfg, &variants, &out, quiet)?;
            println!("variant,iterations,final_eval_loss,best_eval_loss,final_eval_error");
            for (v, s) in &results {
                let err = s.final_eval.error.map_or(String::new(), |e| e.to_string());
                println!("{v},{},{},{},{err}", s.iterations, s.final_eval.loss, s.best_eval.1.loss);
            }
            Ok(results.iter().all(|(_, s)| s.constraint_violations.is_empty()))
        }
        Command::Trace { ckpt, out, seed } => {
            let ck = usage(Checkpoint::load(&ckpt))?;
            let rows = match seed {
                None => export_default_traces(&ck)?,
                Some(s) => {
                    let cfg = ck.config()?;
                    let data = DataSource::load(&cfg)?;
                    export_traces(&ck, &data.trace_sequence(s)?)?
                }
            };
            write_traces(&out, &rows)?;
            for s in trace_stats(&rows) {
                println!(
                    "layer {} {:<5} always-active {:>3}/{} mean |step change| {:.5}",
                    s.layer, s.sublayer, s.always_active, s.neurons, s.mean_abs_change
                );
            }
            println!("{} rows written to {}", rows.len(), out.display());
            Ok(true)
        }
        Command::ShowConfig { preset } => {
            let cfg = usage(ExperimentConfig::preset(&preset).with_context(|| format!("presets: {}", PRESETS.join(", "))))?;
            print!("{}", cfg.to_text());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
