//! Trains several variants under one config and collects their curves.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use durnn::Variant;

use crate::config::ExperimentConfig;
use crate::train::{run_training, TrainOptions, TrainSummary, EVAL_LOG, TRAIN_LOG};

pub const ABLATION_FILE: &str = "ablation.csv";

/// `cfg` with every layer switched to `variant`.
pub fn with_variant(cfg: &ExperimentConfig, variant: Variant) -> ExperimentConfig {
    let mut c = cfg.clone();
    for l in &mut c.layers {
        l.variant = variant;
    }
    c
}

/// Runs each variant from the same seed (so all see the same batches) in
/// `out_dir/<variant>/`, then writes `out_dir/ablation.csv` with columns
/// `variant,kind,iter,loss` where `kind` is `train` or `eval`.
pub fn run_ablation(cfg: &ExperimentConfig, variants: &[Variant], out_dir: &Path, quiet: bool) -> Result<Vec<(Variant, TrainSummary)>> {
    if variants.is_empty() {
        bail!("no variants requested");
    }
    fs::create_dir_all(out_dir)?;
    let mut csv = String::from("variant,kind,iter,loss\n");
    let mut results = Vec::new();
    for &v in variants {
        let dir = out_dir.join(v.name());
        let opts = TrainOptions {
            out_dir: dir.clone(),
            resume: None,
            quiet,
        };
        if !quiet {
            eprintln!("== {v}");
        }
        let summary = run_training(&with_variant(cfg, v), &opts).with_context(|| format!("variant {v}"))?;
        for (kind, file) in [("train", TRAIN_LOG), ("eval", EVAL_LOG)] {
            let text = fs::read_to_string(dir.join(file))?;
            for line in text.lines().skip(1) {
                let mut f = line.split(',');
                if let (Some(it), Some(loss)) = (f.next(), f.next()) {
                    let _ = writeln!(csv, "{},{kind},{it},{loss}", v.name());
                }
            }
        }
        results.push((v, summary));
    }
    fs::write(out_dir.join(ABLATION_FILE), csv)?;
    Ok(results)
}
