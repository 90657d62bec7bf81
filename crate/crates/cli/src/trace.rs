//! Per-neuron activation traces of a trained model.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, ensure, Context, Result};
use durnn::optim::AdamState;
use durnn::tasks::TaskBatch;
use durnn::{Network, SeededRng};

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::train::DataSource;

pub const TRACE_HEADER: &str = "layer,sublayer,t,neuron,activation";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sublayer {
    Short,
    Long,
}

impl fmt::Display for Sublayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sublayer::Short => "short",
            Sublayer::Long => "long",
        })
    }
}

impl FromStr for Sublayer {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "short" => Ok(Sublayer::Short),
            "long" => Ok(Sublayer::Long),
            _ => bail!("unknown sublayer `{s}`"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    /// 1-based.
    pub layer: usize,
    pub sublayer: Sublayer,
    pub t: usize,
    pub neuron: usize,
    pub activation: f64,
}

/// Rebuilds the network stored in a checkpoint.
pub fn network_from_checkpoint(ckpt: &Checkpoint) -> Result<(ExperimentConfig, Network)> {
    let cfg = ckpt.config()?;
    let head = if cfg.task == crate::config::Task::Adding {
        durnn::Head::Regression
    } else {
        durnn::Head::Classification {
            classes: durnn::tasks::MNIST_CLASSES,
        }
    };
    let mut net = Network::init(cfg.task.inputs(), &cfg.layer_specs()?, head, 0.0, &mut SeededRng::new(0))?;
    let mut adam = AdamState::for_network(&net);
    ckpt.restore(&cfg, &mut net, &mut adam)?;
    Ok((cfg, net))
}

/// Activations of every present sublayer for one sequence (batch of 1).
/// Variants without a short (or long) sublayer contribute no rows for it.
pub fn export_traces(ckpt: &Checkpoint, sequence: &TaskBatch) -> Result<Vec<TraceRow>> {
    let (cfg, net) = network_from_checkpoint(ckpt)?;
    ensure!(sequence.batch_size() == 1, "trace input must be a single sequence");
    ensure!(
        sequence.steps() == cfg.seq_len,
        "sequence has {} steps but the model was configured for {}",
        sequence.steps(),
        cfg.seq_len
    );
    ensure!(
        sequence.features() == cfg.task.inputs(),
        "sequence has {} features, model expects {}",
        sequence.features(),
        cfg.task.inputs()
    );
    let caches = net.forward(&sequence.inputs)?;
    let mut rows = Vec::new();
    for (l, (layer, cache)) in net.layers.iter().zip(&caches).enumerate() {
        let parts = [
            (Sublayer::Short, layer.variant.has_short()),
            (Sublayer::Long, layer.variant.has_long()),
        ];
        for (sub, present) in parts {
            if !present {
                continue;
            }
            for (t, st) in cache.steps.iter().enumerate() {
                let m = if sub == Sublayer::Short { &st.h_short } else { &st.h_long };
                for (j, &a) in m.row(0).iter().enumerate() {
                    rows.push(TraceRow {
                        layer: l + 1,
                        sublayer: sub,
                        t,
                        neuron: j,
                        activation: a,
                    });
                }
            }
        }
    }
    Ok(rows)
}

/// Traces for the config's trace sequence.
pub fn export_default_traces(ckpt: &Checkpoint) -> Result<Vec<TraceRow>> {
    let cfg = ckpt.config()?;
    let data = DataSource::load(&cfg)?;
    export_traces(ckpt, &data.trace_sequence(cfg.trace_seed)?)
}

pub fn write_traces(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
    writeln!(w, "{TRACE_HEADER}")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{:?}", r.layer, r.sublayer, r.t, r.neuron, r.activation)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_traces(path: &Path) -> Result<Vec<TraceRow>> {
    let f = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut lines = std::io::BufReader::new(f).lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    ensure!(header == TRACE_HEADER, "unexpected trace header `{header}`");
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let f: Vec<&str> = line.split(',').collect();
        ensure!(f.len() == 5, "line {}: expected 5 fields", i + 2);
        let bad = |e: &dyn fmt::Display| anyhow!("line {}: {e}", i + 2);
        rows.push(TraceRow {
            layer: f[0].parse().map_err(|e| bad(&e))?,
            sublayer: f[1].parse()?,
            t: f[2].parse().map_err(|e| bad(&e))?,
            neuron: f[3].parse().map_err(|e| bad(&e))?,
            activation: f[4].parse().map_err(|e| bad(&e))?,
        });
    }
    Ok(rows)
}

/// Summary of one sublayer's traces.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SublayerStats {
    pub layer: usize,
    pub sublayer: Sublayer,
    pub neurons: usize,
    pub steps: usize,
    /// Neurons with positive output at every step.
    pub always_active: usize,
    /// Mean of `|a_t - a_{t-1}|` over neurons and steps.
    pub mean_abs_change: f64,
}

pub fn trace_stats(rows: &[TraceRow]) -> Vec<SublayerStats> {
    let mut keys: Vec<(usize, Sublayer)> = Vec::new();
    for r in rows {
        if !keys.contains(&(r.layer, r.sublayer)) {
            keys.push((r.layer, r.sublayer));
        }
    }
    keys.into_iter()
        .map(|(layer, sublayer)| {
            let sel: Vec<&TraceRow> = rows.iter().filter(|r| r.layer == layer && r.sublayer == sublayer).collect();
            let neurons = sel.iter().map(|r| r.neuron + 1).max().unwrap_or(0);
            let steps = sel.iter().map(|r| r.t + 1).max().unwrap_or(0);
            let mut grid = vec![vec![0.0; neurons]; steps];
            for r in &sel {
                grid[r.t][r.neuron] = r.activation;
            }
            let always_active = (0..neurons).filter(|&j| (0..steps).all(|t| grid[t][j] > 0.0)).count();
            let mut change = 0.0;
            for t in 1..steps {
                for j in 0..neurons {
                    change += (grid[t][j] - grid[t - 1][j]).abs();
                }
            }
            let pairs = (steps.saturating_sub(1) * neurons).max(1);
            SublayerStats {
                layer,
                sublayer,
                neurons,
                steps,
                always_active,
                mean_abs_change: change / pairs as f64,
            }
        })
        .collect()
}
