//! Training loop, evaluation and logging.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use durnn::cell::{ReadoutOutput, Targets};
use durnn::grad::{network_gradients, GradOptions};
use durnn::linalg::spectral_norm;
use durnn::optim::{project_layer, AdamState, LrMode, LrSchedule};
use durnn::tasks::{gen_adding, load_mnist, MnistDataset, PixelPermutation, TaskBatch, ADDING_TARGET_MEAN, MNIST_CLASSES};
use durnn::{Head, Network, SeededRng};

use crate::checkpoint::Checkpoint;
use crate::config::{ExperimentConfig, LrModeConfig, Task};

/// RNG streams under the config seed.
const INIT_STREAM: u64 = 0;
const DATA_STREAM: u64 = 1;
const EVAL_STREAM: u64 = 2;

pub const TRAIN_LOG: &str = "train_log.csv";
pub const EVAL_LOG: &str = "eval_log.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";

/// Where batches come from.
pub enum DataSource {
    Adding { steps: usize },
    Mnist { train: MnistDataset, test: MnistDataset },
}

fn find_idx(dir: &Path, stem: &str) -> Result<PathBuf> {
    for name in [stem.to_string(), format!("{stem}.gz")] {
        let p = dir.join(name);
        if p.exists() {
            return Ok(p);
        }
    }
    bail!("{stem}[.gz] not found in {}", dir.display())
}

impl DataSource {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        if cfg.task == Task::Adding {
            return Ok(DataSource::Adding { steps: cfg.seq_len });
        }
        let dir = cfg.resolve_data_dir()?;
        let load = |prefix: &str, limit: usize| -> Result<MnistDataset> {
            let images = find_idx(&dir, &format!("{prefix}-images-idx3-ubyte"))?;
            let labels = find_idx(&dir, &format!("{prefix}-labels-idx1-ubyte"))?;
            let ds = load_mnist(&images, &labels)?;
            Ok(if limit > 0 { ds.slice(0..limit) } else { ds })
        };
        let mut train = load("train", cfg.train_limit)?;
        let mut test = load("t10k", cfg.test_limit)?;
        if train.seq_len() != cfg.seq_len {
            bail!("images have {} pixels but seq_len = {}", train.seq_len(), cfg.seq_len);
        }
        if cfg.task == Task::Pmnist {
            let perm = PixelPermutation::from_seed(cfg.permutation_seed, cfg.seq_len);
            train = train.apply_permutation(&perm)?;
            test = test.apply_permutation(&perm)?;
        }
        Ok(DataSource::Mnist { train, test })
    }

    pub fn head(&self) -> Head {
        match self {
            DataSource::Adding { .. } => Head::Regression,
            DataSource::Mnist { .. } => Head::Classification { classes: MNIST_CLASSES },
        }
    }

    /// Readout bias at initialisation: the mean target for regression.
    pub fn readout_bias(&self) -> f64 {
        match self {
            DataSource::Adding { .. } => ADDING_TARGET_MEAN,
            DataSource::Mnist { .. } => 0.0,
        }
    }

    pub fn train_batch(&self, batch: usize, rng: &mut SeededRng) -> Result<TaskBatch> {
        match self {
            DataSource::Adding { steps } => Ok(gen_adding(*steps, batch, rng)?),
            DataSource::Mnist { train, .. } => {
                let idx: Vec<usize> = (0..batch).map(|_| rng.below(train.len())).collect();
                Ok(train.batch(&idx))
            }
        }
    }

    /// Fixed evaluation set: fresh adding sequences from a dedicated stream,
    /// or the first test images.
    pub fn eval_batches(&self, cfg: &ExperimentConfig) -> Result<Vec<TaskBatch>> {
        let chunk = cfg.batch_size.max(100);
        match self {
            DataSource::Adding { steps } => {
                let mut rng = SeededRng::with_stream(cfg.seed, EVAL_STREAM);
                let mut out = Vec::new();
                let mut left = cfg.eval_samples;
                while left > 0 {
                    let b = left.min(chunk);
                    out.push(gen_adding(*steps, b, &mut rng)?);
                    left -= b;
                }
                Ok(out)
            }
            DataSource::Mnist { test, .. } => {
                let n = cfg.eval_samples.min(test.len());
                let idx: Vec<usize> = (0..n).collect();
                Ok(idx.chunks(chunk).map(|c| test.batch(c)).collect())
            }
        }
    }

    /// One input sequence for activation traces.
    pub fn trace_sequence(&self, seed: u64) -> Result<TaskBatch> {
        match self {
            DataSource::Adding { steps } => Ok(gen_adding(*steps, 1, &mut SeededRng::new(seed))?),
            DataSource::Mnist { test, .. } => {
                if test.is_empty() {
                    bail!("empty test set");
                }
                Ok(test.batch(&[seed as usize % test.len()]))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalMetrics {
    pub loss: f64,
    /// Misclassification rate, for classification tasks.
    pub error: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub lr: f64,
}

/// Evaluates `net` on fixed batches; the loss is the sample-weighted mean.
pub fn evaluate(net: &Network, batches: &[TaskBatch]) -> Result<EvalMetrics> {
    let (mut loss, mut wrong, mut count) = (0.0, 0usize, 0usize);
    let mut classes = false;
    for b in batches {
        let out: ReadoutOutput = net.evaluate(&b.inputs, &b.targets)?;
        let n = b.batch_size();
        loss += out.loss * n as f64;
        count += n;
        if let Targets::Classes(y) = &b.targets {
            classes = true;
            for (i, &label) in y.iter().enumerate() {
                let row = out.predictions.row(i);
                let best = (0..row.len()).fold(0, |m, k| if row[k] > row[m] { k } else { m });
                wrong += usize::from(best != label);
            }
        }
    }
    if count == 0 {
        bail!("empty evaluation set");
    }
    Ok(EvalMetrics {
        loss: loss / count as f64,
        error: classes.then(|| wrong as f64 / count as f64),
    })
}

/// Violated constraints of `net`, as messages.
pub fn constraint_violations(net: &Network) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for (l, layer) in net.layers.iter().enumerate() {
        let spec = layer.constraint;
        let p = &layer.params;
        if layer.variant.has_short() {
            if layer.variant.diagonal_short() {
                for (j, &d) in p.w_rec.diagonal().iter().enumerate() {
                    if d < spec.u_low || d > spec.u_high {
                        out.push(format!("layer {}: w_rec[{j},{j}] = {d} outside [{}, {}]", l + 1, spec.u_low, spec.u_high));
                    }
                }
            } else {
                let s = spectral_norm(&p.w_rec)?;
                if s > spec.delta + 1e-10 {
                    out.push(format!("layer {}: sigma_max(w_rec) = {s} > delta = {}", l + 1, spec.delta));
                }
            }
        }
        if layer.variant.has_long() {
            for (j, &u) in p.u.iter().enumerate() {
                if u < spec.u_low || u > spec.u_high {
                    out.push(format!("layer {}: u[{j}] = {u} outside [{}, {}]", l + 1, spec.u_low, spec.u_high));
                }
            }
        }
        if !(spec.thre_low..=spec.thre_high).contains(&p.b_thre) {
            out.push(format!("layer {}: b_thre = {} outside [0, 1]", l + 1, p.b_thre));
        }
    }
    Ok(out)
}

/// Model, optimiser and data position for one run.
pub struct Trainer {
    pub cfg: ExperimentConfig,
    pub net: Network,
    pub adam: AdamState,
    pub schedule: LrSchedule,
    pub data_rng: SeededRng,
    pub iteration: u64,
    data: DataSource,
    eval_set: Vec<TaskBatch>,
}

impl Trainer {
    pub fn new(cfg: ExperimentConfig, data: DataSource) -> Result<Self> {
        cfg.validate()?;
        let mut init_rng = SeededRng::with_stream(cfg.seed, INIT_STREAM);
        let net = Network::init(cfg.task.inputs(), &cfg.layer_specs()?, data.head(), data.readout_bias(), &mut init_rng)?;
        let adam = AdamState::for_network(&net);
        let mode = match cfg.lr_mode {
            LrModeConfig::Fixed => LrMode::Fixed { every: cfg.lr_decay_every },
            LrModeConfig::Plateau => LrMode::Plateau { patience: cfg.lr_patience },
        };
        let schedule = LrSchedule::new(cfg.lr, cfg.lr_decay, mode)?;
        let eval_set = data.eval_batches(&cfg)?;
        Ok(Trainer {
            data_rng: SeededRng::with_stream(cfg.seed, DATA_STREAM),
            cfg,
            net,
            adam,
            schedule,
            iteration: 0,
            data,
            eval_set,
        })
    }

    /// Continues from `ckpt`; `cfg` may change run settings such as
    /// `max_iters` but not the architecture.
    pub fn resume(cfg: ExperimentConfig, data: DataSource, ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Trainer::new(cfg, data)?;
        ckpt.restore(&t.cfg, &mut t.net, &mut t.adam)?;
        let (best, stale, decays) = ckpt.plateau;
        t.schedule.restore_plateau_state(best, stale, decays);
        t.data_rng = SeededRng::from_state(&ckpt.rng);
        t.iteration = ckpt.iteration;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(
            &self.cfg,
            &self.net,
            &self.adam,
            self.schedule.plateau_state(),
            self.data_rng.state(),
            self.iteration,
        )
    }

    /// One update: batch, forward, backward, Adam, projection.
    pub fn step(&mut self) -> Result<StepStats> {
        let batch = self.data.train_batch(self.cfg.batch_size, &mut self.data_rng)?;
        let opts = GradOptions {
            selection_bias: self.cfg.selection_bias,
        };
        let (out, grads) = network_gradients(&self.net, &batch.inputs, &batch.targets, opts)
            .with_context(|| format!("iteration {}", self.iteration + 1))?;
        let lr = self.schedule.lr(self.iteration, None);
        self.adam
            .step_network(lr, &mut self.net, &grads)
            .with_context(|| format!("iteration {}", self.iteration + 1))?;
        for layer in &mut self.net.layers {
            project_layer(layer)?;
        }
        self.iteration += 1;
        Ok(StepStats { loss: out.loss, lr })
    }

    pub fn evaluate(&self) -> Result<EvalMetrics> {
        evaluate(&self.net, &self.eval_set)
    }

    pub fn data(&self) -> &DataSource {
        &self.data
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub out_dir: PathBuf,
    pub resume: Option<PathBuf>,
    pub quiet: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub iterations: u64,
    pub initial_eval: Option<EvalMetrics>,
    pub final_eval: EvalMetrics,
    /// Best evaluation seen, with its iteration.
    pub best_eval: (u64, EvalMetrics),
    pub last_train_loss: f64,
    pub reached_target: bool,
    pub constraint_checks: u64,
    pub constraint_violations: Vec<String>,
    pub checkpoint: PathBuf,
}

fn open_log(path: &Path, header: &str, append: bool) -> Result<BufWriter<File>> {
    let existed = append && path.exists();
    let f = if append {
        OpenOptions::new().create(true).append(true).open(path)
    } else {
        File::create(path)
    }
    .with_context(|| format!("opening {}", path.display()))?;
    let mut w = BufWriter::new(f);
    if !existed {
        writeln!(w, "{header}")?;
    }
    Ok(w)
}

/// Trains per `cfg`, writing `train_log.csv`, `eval_log.csv`, `config.txt` and
/// `checkpoint.ckpt` under `opts.out_dir`.
pub fn run_training(cfg: &ExperimentConfig, opts: &TrainOptions) -> Result<TrainSummary> {
    let data = DataSource::load(cfg)?;
    let mut trainer = match &opts.resume {
        Some(p) => Trainer::resume(cfg.clone(), data, &Checkpoint::load(p)?)?,
        None => Trainer::new(cfg.clone(), data)?,
    };
    train_loop(&mut trainer, opts)
}

pub fn train_loop(trainer: &mut Trainer, opts: &TrainOptions) -> Result<TrainSummary> {
    let cfg = trainer.cfg.clone();
    fs::create_dir_all(&opts.out_dir).with_context(|| format!("creating {}", opts.out_dir.display()))?;
    fs::write(opts.out_dir.join("config.txt"), cfg.to_text())?;
    let resumed = trainer.iteration > 0;
    let mut train_log = open_log(&opts.out_dir.join(TRAIN_LOG), "iter,loss,lr,wall_ms", resumed)?;
    let mut eval_log = open_log(&opts.out_dir.join(EVAL_LOG), "iter,eval_loss,eval_error", resumed)?;
    let ckpt_path = opts.out_dir.join(CHECKPOINT_FILE);
    let start = Instant::now();
    let say = |msg: String| {
        if !opts.quiet {
            eprintln!("{msg}");
        }
    };
    let fmt_eval = |e: &EvalMetrics| match e.error {
        Some(err) => format!("loss {:.6} error {:.2}%", e.loss, 100.0 * err),
        None => format!("loss {:.6}", e.loss),
    };
    let log_eval = |w: &mut BufWriter<File>, it: u64, e: &EvalMetrics| -> Result<()> {
        let err = e.error.map_or(String::new(), |x| format!("{x:?}"));
        writeln!(w, "{it},{:?},{err}", e.loss)?;
        w.flush()?;
        Ok(())
    };

    let mut initial_eval = None;
    let mut last_eval = trainer.evaluate()?;
    if !resumed {
        log_eval(&mut eval_log, 0, &last_eval)?;
        say(format!("iter 0: eval {}", fmt_eval(&last_eval)));
        initial_eval = Some(last_eval);
    }
    let mut best = (trainer.iteration, last_eval);
    let mut last_loss = f64::NAN;
    let mut reached = cfg.target_loss.is_some_and(|t| last_eval.loss < t);
    let mut checks = 0;
    let mut violations = Vec::new();

    while trainer.iteration < cfg.max_iters && !reached {
        let stats = match trainer.step() {
            Ok(s) => s,
            Err(e) => {
                train_log.flush()?;
                return Err(e.context(format!(
                    "training aborted; last good checkpoint (if any) is {}",
                    ckpt_path.display()
                )));
            }
        };
        let it = trainer.iteration;
        last_loss = stats.loss;
        if it.is_multiple_of(cfg.log_interval) {
            writeln!(train_log, "{it},{:?},{:?},{}", stats.loss, stats.lr, start.elapsed().as_millis())?;
        }
        if it.is_multiple_of(cfg.constraint_check_interval) {
            checks += 1;
            for v in constraint_violations(&trainer.net)? {
                say(format!("iter {it}: constraint violated: {v}"));
                violations.push(format!("iter {it}: {v}"));
            }
        }
        if it.is_multiple_of(cfg.eval_interval) || it == cfg.max_iters {
            last_eval = trainer.evaluate()?;
            trainer.schedule.lr(it, Some(last_eval.loss));
            log_eval(&mut eval_log, it, &last_eval)?;
            train_log.flush()?;
            say(format!(
                "iter {it}: train {:.6} eval {} lr {:.1e} ({:.0}s)",
                stats.loss,
                fmt_eval(&last_eval),
                stats.lr,
                start.elapsed().as_secs_f64()
            ));
            if last_eval.loss < best.1.loss {
                best = (it, last_eval);
            }
            reached = cfg.target_loss.is_some_and(|t| last_eval.loss < t);
        }
        if it.is_multiple_of(cfg.checkpoint_interval) {
            trainer.checkpoint().save(&ckpt_path)?;
        }
    }
    train_log.flush()?;
    trainer.checkpoint().save(&ckpt_path)?;
    Ok(TrainSummary {
        iterations: trainer.iteration,
        initial_eval,
        final_eval: last_eval,
        best_eval: best,
        last_train_loss: last_loss,
        reached_target: reached,
        constraint_checks: checks,
        constraint_violations: violations,
        checkpoint: ckpt_path,
    })
}
