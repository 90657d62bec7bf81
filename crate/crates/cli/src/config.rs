//! Experiment configuration as flat `key = value` text.
//!
//! Layers are numbered from 1 and described by dotted keys such as
//! `layer.1.neurons`. Lines starting with `#` and blank lines are ignored.
//! [`ExperimentConfig::to_text`] writes every key, so parsing its output
//! reproduces the config exactly.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use durnn::cell::{ConstraintSpec, LayerSpec, DEFAULT_EPSILON, DEFAULT_GAMMA};
use durnn::Variant;
use sha2::{Digest, Sha256};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Adding,
    Mnist,
    Pmnist,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Adding => "adding",
            Task::Mnist => "mnist",
            Task::Pmnist => "pmnist",
        }
    }

    pub fn inputs(self) -> usize {
        match self {
            Task::Adding => 2,
            Task::Mnist | Task::Pmnist => 1,
        }
    }
}

impl FromStr for Task {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adding" => Ok(Task::Adding),
            "mnist" => Ok(Task::Mnist),
            "pmnist" => Ok(Task::Pmnist),
            _ => bail!("unknown task `{s}` (expected adding, mnist or pmnist)"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrModeConfig {
    Fixed,
    Plateau,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerConfig {
    pub neurons: usize,
    pub variant: Variant,
    pub epsilon: f64,
    pub gamma: f64,
    pub delta: f64,
    /// Sequence length the `U` interval is derived for.
    pub horizon: usize,
}

impl LayerConfig {
    /// Standard constraints for a sequence of `steps`: `delta = 0.5^(1/L)` and
    /// `epsilon` eased to 0 below the top layer.
    pub fn standard(neurons: usize, variant: Variant, steps: usize, top: bool) -> Self {
        LayerConfig {
            neurons,
            variant,
            epsilon: if top { DEFAULT_EPSILON } else { 0.0 },
            gamma: DEFAULT_GAMMA,
            delta: 0.5f64.powf(1.0 / steps as f64),
            horizon: steps,
        }
    }

    pub fn spec(&self) -> Result<LayerSpec> {
        let constraint = ConstraintSpec::from_horizon(self.epsilon, self.gamma, self.delta, self.horizon)?;
        Ok(LayerSpec {
            neurons: self.neurons,
            variant: self.variant,
            constraint,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub task: Task,
    pub seq_len: usize,
    pub seed: u64,
    pub layers: Vec<LayerConfig>,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_mode: LrModeConfig,
    pub lr_decay_every: u64,
    pub lr_patience: u32,
    pub max_iters: u64,
    pub log_interval: u64,
    pub eval_interval: u64,
    pub eval_samples: usize,
    pub checkpoint_interval: u64,
    pub constraint_check_interval: u64,
    /// Stop once the evaluation loss drops below this value.
    pub target_loss: Option<f64>,
    pub selection_bias: bool,
    /// Overrides the data directory environment variable.
    pub data_dir: Option<PathBuf>,
    /// Use only the first this many training (test) images; 0 keeps all.
    pub train_limit: usize,
    pub test_limit: usize,
    pub permutation_seed: u64,
    pub trace_seed: u64,
}

/// Environment variable naming the directory that holds the MNIST IDX files.
pub const DATA_DIR_ENV: &str = "DURNN_DATA_DIR";

pub const PRESETS: [&str; 6] = ["adding100", "adding500", "adding1000", "adding5000", "mnist", "pmnist"];

impl ExperimentConfig {
    /// Adding problem with one 128-neuron layer, batch 50, lr 2e-4 decayed by
    /// 10 every 20000 iterations.
    pub fn adding(steps: usize) -> Self {
        ExperimentConfig {
            task: Task::Adding,
            seq_len: steps,
            seed: 1,
            layers: vec![LayerConfig::standard(128, Variant::Durnn, steps, true)],
            batch_size: 50,
            lr: 2e-4,
            lr_decay: 0.1,
            lr_mode: LrModeConfig::Fixed,
            lr_decay_every: 20000,
            lr_patience: 5,
            max_iters: 60000,
            log_interval: 100,
            eval_interval: 500,
            eval_samples: 1000,
            checkpoint_interval: 5000,
            constraint_check_interval: 500,
            target_loss: None,
            selection_bias: true,
            data_dir: None,
            train_limit: 0,
            test_limit: 0,
            permutation_seed: 0,
            trace_seed: 12345,
        }
    }

    /// Sequential MNIST with three 128-neuron layers and batch 32.
    pub fn mnist(permuted: bool) -> Self {
        let steps = 784;
        ExperimentConfig {
            task: if permuted { Task::Pmnist } else { Task::Mnist },
            seq_len: steps,
            layers: (0..3)
                .map(|l| LayerConfig::standard(128, Variant::Durnn, steps, l == 2))
                .collect(),
            batch_size: 32,
            max_iters: 100000,
            eval_interval: 1000,
            eval_samples: 10000,
            train_limit: 0,
            test_limit: 0,
            permutation_seed: if permuted { 7 } else { 0 },
            ..ExperimentConfig::adding(steps)
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        Ok(match name {
            "adding100" => Self::adding(100),
            "adding500" => Self::adding(500),
            "adding1000" => Self::adding(1000),
            "adding5000" => Self::adding(5000),
            "mnist" => Self::mnist(false),
            "pmnist" => Self::mnist(true),
            _ => bail!("unknown preset `{name}` (expected one of {})", PRESETS.join(", ")),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected `key = value`, got `{line}`", lineno + 1))?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if kv.insert(k.clone(), v).is_some() {
                bail!("line {}: duplicate key `{k}`", lineno + 1);
            }
        }
        let mut r = Reader { kv };
        let task: Task = r.req("task")?;
        let seq_len: usize = r.req("seq_len")?;
        let mut cfg = match task {
            Task::Adding => Self::adding(seq_len),
            Task::Mnist => Self::mnist(false),
            Task::Pmnist => Self::mnist(true),
        };
        cfg.task = task;
        cfg.seq_len = seq_len;
        r.opt("seed", &mut cfg.seed)?;
        r.opt("batch_size", &mut cfg.batch_size)?;
        r.opt("lr", &mut cfg.lr)?;
        r.opt("lr_decay", &mut cfg.lr_decay)?;
        if let Some(mode) = r.take("lr_mode") {
            cfg.lr_mode = match mode.as_str() {
                "fixed" => LrModeConfig::Fixed,
                "plateau" => LrModeConfig::Plateau,
                _ => bail!("lr_mode must be fixed or plateau, got `{mode}`"),
            };
        }
        r.opt("lr_decay_every", &mut cfg.lr_decay_every)?;
        r.opt("lr_patience", &mut cfg.lr_patience)?;
        r.opt("max_iters", &mut cfg.max_iters)?;
        r.opt("log_interval", &mut cfg.log_interval)?;
        r.opt("eval_interval", &mut cfg.eval_interval)?;
        r.opt("eval_samples", &mut cfg.eval_samples)?;
        r.opt("checkpoint_interval", &mut cfg.checkpoint_interval)?;
        r.opt("constraint_check_interval", &mut cfg.constraint_check_interval)?;
        if let Some(v) = r.take("target_loss") {
            cfg.target_loss = match v.as_str() {
                "none" => None,
                _ => Some(v.parse().map_err(|e| anyhow!("target_loss: {e}"))?),
            };
        }
        r.opt("selection_bias", &mut cfg.selection_bias)?;
        if let Some(v) = r.take("data_dir") {
            cfg.data_dir = if v == "none" { None } else { Some(PathBuf::from(v)) };
        }
        r.opt("data.train_limit", &mut cfg.train_limit)?;
        r.opt("data.test_limit", &mut cfg.test_limit)?;
        r.opt("data.permutation_seed", &mut cfg.permutation_seed)?;
        r.opt("trace.seed", &mut cfg.trace_seed)?;

        // layers: defaults depend on position, so count them first
        let mut count = 0;
        while r.kv.keys().any(|k| k.starts_with(&format!("layer.{}.", count + 1))) {
            count += 1;
        }
        if count > 0 {
            let mut layers = Vec::with_capacity(count);
            for l in 1..=count {
                let neurons: usize = r.req(&format!("layer.{l}.neurons"))?;
                let variant: Variant = r
                    .take(&format!("layer.{l}.variant"))
                    .map(|v| v.parse().map_err(|e| anyhow!("layer.{l}.variant: {e}")))
                    .transpose()?
                    .unwrap_or(Variant::Durnn);
                let mut layer = LayerConfig::standard(neurons, variant, seq_len, l == count);
                r.opt(&format!("layer.{l}.epsilon"), &mut layer.epsilon)?;
                r.opt(&format!("layer.{l}.gamma"), &mut layer.gamma)?;
                r.opt(&format!("layer.{l}.delta"), &mut layer.delta)?;
                r.opt(&format!("layer.{l}.horizon"), &mut layer.horizon)?;
                layers.push(layer);
            }
            cfg.layers = layers;
        } else {
            // preset layers, re-derived for this sequence length
            let n = cfg.layers.len();
            cfg.layers = cfg
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| LayerConfig::standard(l.neurons, l.variant, seq_len, i + 1 == n))
                .collect();
        }
        if let Some(k) = r.kv.keys().next() {
            bail!("unknown key `{k}`");
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("seq_len", self.seq_len as u64),
            ("batch_size", self.batch_size as u64),
            ("max_iters", self.max_iters),
            ("log_interval", self.log_interval),
            ("eval_interval", self.eval_interval),
            ("eval_samples", self.eval_samples as u64),
            ("checkpoint_interval", self.checkpoint_interval),
            ("constraint_check_interval", self.constraint_check_interval),
            ("lr_decay_every", self.lr_decay_every),
            ("lr_patience", self.lr_patience as u64),
        ];
        for (k, v) in positive {
            if v == 0 {
                bail!("{k} must be positive");
            }
        }
        if self.layers.is_empty() {
            bail!("at least one layer is required");
        }
        if self.task == Task::Adding && self.seq_len < 2 {
            bail!("adding problem needs seq_len >= 2");
        }
        if self.task != Task::Adding && self.seq_len != 784 {
            bail!("MNIST sequences have 784 steps, got seq_len = {}", self.seq_len);
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.neurons == 0 {
                bail!("layer.{}.neurons must be positive", i + 1);
            }
            l.spec().with_context(|| format!("layer.{}", i + 1))?;
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            bail!("lr must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay < 1.0) {
            bail!("lr_decay must lie in (0, 1)");
        }
        Ok(())
    }

    pub fn layer_specs(&self) -> Result<Vec<LayerSpec>> {
        self.layers.iter().map(LayerConfig::spec).collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: &dyn fmt::Display| out.push_str(&format!("{k} = {v}\n"));
        put("task", &self.task.name());
        put("seq_len", &self.seq_len);
        put("seed", &self.seed);
        put("batch_size", &self.batch_size);
        put("lr", &F(self.lr));
        put("lr_decay", &F(self.lr_decay));
        put(
            "lr_mode",
            &match self.lr_mode {
                LrModeConfig::Fixed => "fixed",
                LrModeConfig::Plateau => "plateau",
            },
        );
        put("lr_decay_every", &self.lr_decay_every);
        put("lr_patience", &self.lr_patience);
        put("max_iters", &self.max_iters);
        put("log_interval", &self.log_interval);
        put("eval_interval", &self.eval_interval);
        put("eval_samples", &self.eval_samples);
        put("checkpoint_interval", &self.checkpoint_interval);
        put("constraint_check_interval", &self.constraint_check_interval);
        match self.target_loss {
            Some(t) => put("target_loss", &F(t)),
            None => put("target_loss", &"none"),
        }
        put("selection_bias", &self.selection_bias);
        match &self.data_dir {
            Some(d) => put("data_dir", &d.display()),
            None => put("data_dir", &"none"),
        }
        put("data.train_limit", &self.train_limit);
        put("data.test_limit", &self.test_limit);
        put("data.permutation_seed", &self.permutation_seed);
        put("trace.seed", &self.trace_seed);
        for (i, l) in self.layers.iter().enumerate() {
            let p = format!("layer.{}", i + 1);
            put(&format!("{p}.neurons"), &l.neurons);
            put(&format!("{p}.variant"), &l.variant.name());
            put(&format!("{p}.epsilon"), &F(l.epsilon));
            put(&format!("{p}.gamma"), &F(l.gamma));
            put(&format!("{p}.delta"), &F(l.delta));
            put(&format!("{p}.horizon"), &l.horizon);
        }
        out
    }

    /// Hash of everything that fixes the parameter shapes and their
    /// constraints; checkpoints refuse to resume under a different one.
    pub fn architecture_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("task={};seq_len={};", self.task.name(), self.seq_len));
        for l in &self.layers {
            h.update(format!(
                "{}:{}:{:?}:{:?}:{:?}:{};",
                l.neurons,
                l.variant.name(),
                l.epsilon,
                l.gamma,
                l.delta,
                l.horizon
            ));
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// MNIST directory from the config or the environment.
    pub fn resolve_data_dir(&self) -> Result<PathBuf> {
        if let Some(d) = &self.data_dir {
            return Ok(d.clone());
        }
        std::env::var_os(DATA_DIR_ENV)
            .map(PathBuf::from)
            .ok_or_else(|| anyhow!("no MNIST directory: set data_dir in the config or {DATA_DIR_ENV}"))
    }
}

/// Shortest round-tripping float formatting.
struct F(f64);

impl fmt::Display for F {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

struct Reader {
    kv: BTreeMap<String, String>,
}

impl Reader {
    fn take(&mut self, key: &str) -> Option<String> {
        self.kv.remove(key)
    }

    fn req<T: FromStr>(&mut self, key: &str) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        let v = self.take(key).ok_or_else(|| anyhow!("missing key `{key}`"))?;
        v.parse().map_err(|e| anyhow!("{key} = {v}: {e}"))
    }

    fn opt<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: fmt::Display,
    {
        if let Some(v) = self.take(key) {
            *slot = v.parse().map_err(|e| anyhow!("{key} = {v}: {e}"))?;
        }
        Ok(())
    }
}
