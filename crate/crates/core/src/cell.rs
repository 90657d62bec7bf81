//! Forward pass of the dual recurrent layer.
//!
//! One layer keeps two states per sequence: a short-term state produced by a
//! fully recurrent relu sublayer whose recurrent matrix has all singular values
//! at most `delta`, and a long-term state produced by an independently recurrent
//! relu sublayer. A channel selection vector decides how much of the short-term
//! state enters the long-term sublayer at each step:
//!
//! ```text
//! hs_t  = relu(W_in x_t + W_rec hs_{t-1} + b_short)
//! S_t   = relu(mm(W_ss hs_t + W_ls h_{t-1} + b_s) - b_thre)
//! h_t   = relu(W_s (S_t * hs_t) + U * h_{t-1} + b_long)
//! ```
//!
//! where `mm` rescales a vector linearly onto `[0, 1]` by its own min and max.
//! All states are batched: a [`Mat`] with one row per sequence.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::linalg::{clip_singular_values, gemm_into, Mat, Op, SeededRng};

/// Gap below which min-max normalisation is considered degenerate.
pub const MM_DEGENERATE_GAP: f64 = 1e-12;

/// Long-path gain bounds over the horizon for the top layer.
pub const DEFAULT_EPSILON: f64 = 0.5;
pub const DEFAULT_GAMMA: f64 = 2.0;
/// Initial value of the selection threshold.
pub const INITIAL_THRESHOLD: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Both sublayers joined by the selection mechanism.
    Durnn,
    /// Both sublayers, selection replaced by all-ones.
    NoSelection,
    /// First sublayer uses an independent (diagonal) recurrence.
    IndPlusSelection,
    /// Only the fully recurrent relu sublayer.
    RnnRelu,
    /// Only the independently recurrent sublayer, fed by `W_in`.
    IndRnn,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Durnn,
        Variant::NoSelection,
        Variant::IndPlusSelection,
        Variant::RnnRelu,
        Variant::IndRnn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Durnn => "durnn",
            Variant::NoSelection => "no_selection",
            Variant::IndPlusSelection => "ind_plus_selection",
            Variant::RnnRelu => "rnn_relu",
            Variant::IndRnn => "indrnn",
        }
    }

    pub fn has_short(self) -> bool {
        !matches!(self, Variant::IndRnn)
    }

    pub fn has_long(self) -> bool {
        !matches!(self, Variant::RnnRelu)
    }

    pub fn has_selection(self) -> bool {
        matches!(self, Variant::Durnn | Variant::IndPlusSelection)
    }

    /// The short sublayer recurrence is the diagonal of `w_rec` only.
    pub fn diagonal_short(self) -> bool {
        matches!(self, Variant::IndPlusSelection)
    }

    /// Parameters that take part in the computation.
    pub fn params(self) -> &'static [ParamKind] {
        use ParamKind::*;
        match self {
            Variant::Durnn | Variant::IndPlusSelection => &ParamKind::ALL,
            Variant::NoSelection => &[WIn, WRec, BShort, WS, U, BLong],
            Variant::RnnRelu => &[WIn, WRec, BShort],
            Variant::IndRnn => &[WIn, U, BLong],
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s.trim())
            .ok_or_else(|| Error::invalid(format!("unknown variant '{s}'")))
    }
}

/// Feasible set every layer is projected back onto after an update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConstraintSpec {
    /// Bound on every singular value of `w_rec`.
    pub delta: f64,
    pub u_low: f64,
    pub u_high: f64,
    pub thre_low: f64,
    pub thre_high: f64,
}

impl ConstraintSpec {
    /// Bounds for a horizon of `horizon` steps: `U` in `[eps^(1/h), gamma^(1/h)]`.
    pub fn from_horizon(epsilon: f64, gamma: f64, delta: f64, horizon: usize) -> Result<Self> {
        let h = horizon.max(1) as f64;
        let spec = ConstraintSpec {
            delta,
            u_low: if epsilon > 0.0 {
                epsilon.powf(1.0 / h)
            } else {
                0.0
            },
            u_high: gamma.powf(1.0 / h),
            thre_low: 0.0,
            thre_high: 1.0,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// `epsilon = 0.5`, `gamma = 2`, `delta = 0.5^(1/horizon)`; `epsilon` is
    /// eased to 0 below the top layer.
    pub fn standard(horizon: usize, top_layer: bool) -> Self {
        let h = horizon.max(1) as f64;
        let eps = if top_layer { DEFAULT_EPSILON } else { 0.0 };
        ConstraintSpec::from_horizon(eps, DEFAULT_GAMMA, 0.5f64.powf(1.0 / h), horizon)
            .expect("standard constraints are valid")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::invalid(format!(
                "delta must lie in (0, 1), got {}",
                self.delta
            )));
        }
        if !(self.u_low >= 0.0 && self.u_low < self.u_high) {
            return Err(Error::invalid(format!(
                "U interval must satisfy 0 <= low < high, got [{}, {}]",
                self.u_low, self.u_high
            )));
        }
        if !(self.thre_low <= self.thre_high) {
            return Err(Error::invalid("threshold interval is empty"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamKind {
    WIn,
    WRec,
    BShort,
    WSs,
    WLs,
    BS,
    BThre,
    WS,
    U,
    BLong,
}

impl ParamKind {
    pub const ALL: [ParamKind; 10] = [
        ParamKind::WIn,
        ParamKind::WRec,
        ParamKind::BShort,
        ParamKind::WSs,
        ParamKind::WLs,
        ParamKind::BS,
        ParamKind::BThre,
        ParamKind::WS,
        ParamKind::U,
        ParamKind::BLong,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamKind::WIn => "w_in",
            ParamKind::WRec => "w_rec",
            ParamKind::BShort => "b_short",
            ParamKind::WSs => "w_ss",
            ParamKind::WLs => "w_ls",
            ParamKind::BS => "b_s",
            ParamKind::BThre => "b_thre",
            ParamKind::WS => "w_s",
            ParamKind::U => "u",
            ParamKind::BLong => "b_long",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        ParamKind::ALL.into_iter().find(|k| k.name() == s)
    }
}

/// Trainable tensors of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub w_in: Mat,
    pub w_rec: Mat,
    pub b_short: Vec<f64>,
    pub w_ss: Mat,
    pub w_ls: Mat,
    pub b_s: Vec<f64>,
    pub b_thre: f64,
    pub w_s: Mat,
    pub u: Vec<f64>,
    pub b_long: Vec<f64>,
}

impl LayerParams {
    pub fn zeros(inputs: usize, neurons: usize) -> Self {
        let n = neurons;
        LayerParams {
            w_in: Mat::zeros(n, inputs),
            w_rec: Mat::zeros(n, n),
            b_short: vec![0.0; n],
            w_ss: Mat::zeros(n, n),
            w_ls: Mat::zeros(n, n),
            b_s: vec![0.0; n],
            b_thre: 0.0,
            w_s: Mat::zeros(n, n),
            u: vec![0.0; n],
            b_long: vec![0.0; n],
        }
    }

    /// Random initial parameters, already inside the feasible set.
    ///
    /// Dense weights are uniform in `+-sqrt(1/fan_in)`, `U` (and the diagonal
    /// short recurrence of [`Variant::IndPlusSelection`]) is uniform over
    /// `[max(u_low, 0.9), min(u_high, 1)]`, biases start at 0 and the
    /// threshold at [`INITIAL_THRESHOLD`].
    pub fn init(
        inputs: usize,
        neurons: usize,
        variant: Variant,
        spec: &ConstraintSpec,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        spec.validate()?;
        let n = neurons;
        let mut p = LayerParams::zeros(inputs, n);
        let dense = |m: &mut Mat, fan_in: usize, rng: &mut SeededRng| {
            let a = (1.0 / fan_in.max(1) as f64).sqrt();
            m.as_mut_slice()
                .iter_mut()
                .for_each(|x| *x = rng.uniform_range(-a, a));
        };
        dense(&mut p.w_in, inputs, rng);
        dense(&mut p.w_rec, n, rng);
        dense(&mut p.w_ss, n, rng);
        dense(&mut p.w_ls, n, rng);
        dense(&mut p.w_s, n, rng);
        let lo = spec.u_low.max(0.9);
        let hi = spec.u_high.min(1.0).max(lo);
        for x in p.u.iter_mut() {
            *x = rng.uniform_range(lo, hi);
        }
        if variant.diagonal_short() {
            let diag: Vec<f64> = (0..n).map(|_| rng.uniform_range(lo, hi)).collect();
            p.w_rec = Mat::diag(&diag);
        } else {
            p.w_rec = clip_singular_values(&p.w_rec, spec.delta)?;
        }
        p.b_thre = INITIAL_THRESHOLD.clamp(spec.thre_low, spec.thre_high);
        Ok(p)
    }

    pub fn inputs(&self) -> usize {
        self.w_in.cols()
    }

    pub fn neurons(&self) -> usize {
        self.w_in.rows()
    }

    pub fn shape_of(&self, kind: ParamKind) -> (usize, usize) {
        let n = self.neurons();
        match kind {
            ParamKind::WIn => (n, self.inputs()),
            ParamKind::WRec | ParamKind::WSs | ParamKind::WLs | ParamKind::WS => (n, n),
            ParamKind::BThre => (1, 1),
            ParamKind::BShort | ParamKind::BS | ParamKind::U | ParamKind::BLong => (n, 1),
        }
    }

    pub fn get(&self, kind: ParamKind) -> &[f64] {
        match kind {
            ParamKind::WIn => self.w_in.as_slice(),
            ParamKind::WRec => self.w_rec.as_slice(),
            ParamKind::BShort => &self.b_short,
            ParamKind::WSs => self.w_ss.as_slice(),
            ParamKind::WLs => self.w_ls.as_slice(),
            ParamKind::BS => &self.b_s,
            ParamKind::BThre => std::slice::from_ref(&self.b_thre),
            ParamKind::WS => self.w_s.as_slice(),
            ParamKind::U => &self.u,
            ParamKind::BLong => &self.b_long,
        }
    }

    pub fn get_mut(&mut self, kind: ParamKind) -> &mut [f64] {
        match kind {
            ParamKind::WIn => self.w_in.as_mut_slice(),
            ParamKind::WRec => self.w_rec.as_mut_slice(),
            ParamKind::BShort => &mut self.b_short,
            ParamKind::WSs => self.w_ss.as_mut_slice(),
            ParamKind::WLs => self.w_ls.as_mut_slice(),
            ParamKind::BS => &mut self.b_s,
            ParamKind::BThre => std::slice::from_mut(&mut self.b_thre),
            ParamKind::WS => self.w_s.as_mut_slice(),
            ParamKind::U => &mut self.u,
            ParamKind::BLong => &mut self.b_long,
        }
    }

    pub fn is_finite(&self) -> bool {
        ParamKind::ALL
            .iter()
            .all(|&k| self.get(k).iter().all(|x| x.is_finite()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub variant: Variant,
    pub constraint: ConstraintSpec,
    pub params: LayerParams,
}

/// Output head on the final top-layer state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    /// One scalar per sequence, mean squared error.
    Regression,
    /// Softmax over `classes` logits, mean cross-entropy.
    Classification { classes: usize },
}

impl Head {
    pub fn outputs(self) -> usize {
        match self {
            Head::Regression => 1,
            Head::Classification { classes } => classes,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReadoutParams {
    /// `K x N`.
    pub w_out: Mat,
    pub b_out: Vec<f64>,
}

impl ReadoutParams {
    /// Zero weights; the bias starts at `bias` (the target mean for regression).
    pub fn init(outputs: usize, neurons: usize, bias: f64) -> Self {
        ReadoutParams {
            w_out: Mat::zeros(outputs, neurons),
            b_out: vec![bias; outputs],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Regression(Vec<f64>),
    Classes(Vec<usize>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Regression(v) => v.len(),
            Targets::Classes(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug)]
pub struct ReadoutOutput {
    /// `B x K` predictions (regression values or logits).
    pub predictions: Mat,
    pub loss: f64,
    /// Number of misclassified sequences; 0 for regression.
    pub errors: usize,
    /// `dLoss/dh_L`, `B x N`.
    pub grad_h: Mat,
    pub grad_w_out: Mat,
    pub grad_b_out: Vec<f64>,
}

/// Linear head on `h_last` plus its loss and gradients.
pub fn readout(
    head: Head,
    params: &ReadoutParams,
    h_last: &Mat,
    targets: &Targets,
) -> Result<ReadoutOutput> {
    let b = h_last.rows();
    let k = head.outputs();
    if params.w_out.shape() != (k, h_last.cols()) || params.b_out.len() != k {
        return Err(Error::shape(
            "readout",
            format!("w_out {}x{}", k, h_last.cols()),
            format!("{:?}", params.w_out.shape()),
        ));
    }
    if targets.len() != b || b == 0 {
        return Err(Error::shape(
            "readout",
            format!("{b} targets"),
            targets.len(),
        ));
    }
    let mut pred = Mat::zeros(b, k);
    gemm_into(1.0, h_last, Op::N, &params.w_out, Op::T, 0.0, &mut pred)?;
    for r in 0..b {
        for (p, bias) in pred.row_mut(r).iter_mut().zip(&params.b_out) {
            *p += bias;
        }
    }
    let inv_b = 1.0 / b as f64;
    let mut grad_pred = Mat::zeros(b, k);
    let mut loss = 0.0;
    let mut errors = 0;
    match (head, targets) {
        (Head::Regression, Targets::Regression(y)) => {
            for r in 0..b {
                let d = pred[(r, 0)] - y[r];
                loss += d * d;
                grad_pred[(r, 0)] = 2.0 * d * inv_b;
            }
        }
        (Head::Classification { classes }, Targets::Classes(labels)) => {
            for r in 0..b {
                let label = labels[r];
                if label >= classes {
                    return Err(Error::invalid(format!(
                        "label {label} out of range for {classes} classes"
                    )));
                }
                let logits = pred.row(r);
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = logits.iter().map(|z| (z - max).exp()).sum();
                let log_z = max + sum.ln();
                loss += log_z - logits[label];
                let argmax = logits
                    .iter()
                    .enumerate()
                    .fold(
                        (0, f64::NEG_INFINITY),
                        |acc, (i, &z)| if z > acc.1 { (i, z) } else { acc },
                    )
                    .0;
                if argmax != label {
                    errors += 1;
                }
                let probs: Vec<f64> = logits.iter().map(|z| (z - log_z).exp()).collect();
                for (c, p) in probs.into_iter().enumerate() {
                    let indicator = if c == label { 1.0 } else { 0.0 };
                    grad_pred[(r, c)] = (p - indicator) * inv_b;
                }
            }
        }
        _ => return Err(Error::invalid("targets do not match the readout head")),
    }
    loss *= inv_b;
    let mut grad_h = Mat::zeros(b, h_last.cols());
    gemm_into(
        1.0,
        &grad_pred,
        Op::N,
        &params.w_out,
        Op::N,
        0.0,
        &mut grad_h,
    )?;
    let mut grad_w_out = Mat::zeros(k, h_last.cols());
    gemm_into(1.0, &grad_pred, Op::T, h_last, Op::N, 0.0, &mut grad_w_out)?;
    let grad_b_out = (0..k)
        .map(|c| (0..b).map(|r| grad_pred[(r, c)]).sum())
        .collect();
    Ok(ReadoutOutput {
        predictions: pred,
        loss,
        errors,
        grad_h,
        grad_w_out,
        grad_b_out,
    })
}

/// `(v - min) / (max - min)`, or all zeros when the spread is below
/// [`MM_DEGENERATE_GAP`]. Also returns the min and max used.
pub fn min_max_normalize(v: &[f64]) -> (Vec<f64>, f64, f64) {
    let mut out = vec![0.0; v.len()];
    let (min, max) = min_max_into(v, &mut out);
    (out, min, max)
}

fn min_max_into(v: &[f64], out: &mut [f64]) -> (f64, f64) {
    let min = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let gap = max - min;
    if !(gap >= MM_DEGENERATE_GAP) {
        out.iter_mut().for_each(|o| *o = 0.0);
    } else {
        for (o, &x) in out.iter_mut().zip(v) {
            *o = (x - min) / gap;
        }
    }
    (min, max)
}

/// Derivative of the min-max map with its bounds held fixed.
#[inline]
pub fn mm_slope(min: f64, max: f64) -> f64 {
    let gap = max - min;
    if gap >= MM_DEGENERATE_GAP {
        1.0 / gap
    } else {
        0.0
    }
}

#[inline]
pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Subgradient choice: 0 at the kink.
#[inline]
pub fn relu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub s: Vec<f64>,
    /// `W_ss hs + W_ls h_prev + b_s`.
    pub pre: Vec<f64>,
    pub mm_min: f64,
    pub mm_max: f64,
}

/// Selection vector for a single sequence.
pub fn selection_weights(
    params: &LayerParams,
    h_short: &[f64],
    h_long_prev: &[f64],
) -> Result<Selection> {
    let mut pre = params.w_ss.matvec(h_short)?;
    let from_long = params.w_ls.matvec(h_long_prev)?;
    for ((p, l), b) in pre.iter_mut().zip(&from_long).zip(&params.b_s) {
        *p += l + b;
    }
    let (mut s, mm_min, mm_max) = min_max_normalize(&pre);
    s.iter_mut().for_each(|x| *x = relu(*x - params.b_thre));
    Ok(Selection {
        s,
        pre,
        mm_min,
        mm_max,
    })
}

/// Everything the backward pass needs from one step of one layer.
///
/// Fields of a sublayer the variant does not run are `0 x 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct StepCache {
    pub x: Mat,
    pub pre_short: Mat,
    pub h_short: Mat,
    pub sel_pre: Mat,
    pub mm_min: Vec<f64>,
    pub mm_max: Vec<f64>,
    pub s: Mat,
    pub i: Mat,
    pub pre_long: Mat,
    pub h_long: Mat,
}

impl StepCache {
    /// State handed to the next layer.
    pub fn output(&self, variant: Variant) -> &Mat {
        if variant.has_long() {
            &self.h_long
        } else {
            &self.h_short
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardCache {
    pub variant: Variant,
    pub steps: Vec<StepCache>,
}

impl ForwardCache {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn output(&self, t: usize) -> &Mat {
        self.steps[t].output(self.variant)
    }
}

fn add_bias_rows(m: &mut Mat, bias: &[f64]) {
    for r in 0..m.rows() {
        for (x, b) in m.row_mut(r).iter_mut().zip(bias) {
            *x += b;
        }
    }
}

fn add_hadamard_rows(m: &mut Mat, weights: &[f64], state: &Mat) {
    for r in 0..m.rows() {
        let s = state.row(r);
        for ((x, w), h) in m.row_mut(r).iter_mut().zip(weights).zip(s) {
            *x += w * h;
        }
    }
}

fn check_shape(op: &'static str, m: &Mat, rows: usize, cols: usize) -> Result<()> {
    if m.shape() != (rows, cols) {
        return Err(Error::shape(
            op,
            format!("{rows}x{cols}"),
            format!("{}x{}", m.rows(), m.cols()),
        ));
    }
    Ok(())
}

/// One time step for a batch: `x` is `B x M`, previous states are `B x N`.
///
/// `step` only labels errors. Unused previous states may be `0 x 0`.
pub fn forward_step(
    params: &LayerParams,
    variant: Variant,
    x: &Mat,
    h_short_prev: &Mat,
    h_long_prev: &Mat,
    step: usize,
) -> Result<StepCache> {
    let b = x.rows();
    let n = params.neurons();
    check_shape("forward_step input", x, b, params.inputs())?;
    if variant.has_short() {
        check_shape("forward_step short state", h_short_prev, b, n)?;
    }
    if variant.has_long() {
        check_shape("forward_step long state", h_long_prev, b, n)?;
    }

    let empty = || Mat::zeros(0, 0);
    let mut cache = StepCache {
        x: x.clone(),
        pre_short: empty(),
        h_short: empty(),
        sel_pre: empty(),
        mm_min: Vec::new(),
        mm_max: Vec::new(),
        s: empty(),
        i: empty(),
        pre_long: empty(),
        h_long: empty(),
    };

    if variant.has_short() {
        let mut pre = Mat::zeros(b, n);
        gemm_into(1.0, x, Op::N, &params.w_in, Op::T, 0.0, &mut pre)?;
        if variant.diagonal_short() {
            add_hadamard_rows(&mut pre, &params.w_rec.diagonal(), h_short_prev);
        } else {
            gemm_into(
                1.0,
                h_short_prev,
                Op::N,
                &params.w_rec,
                Op::T,
                1.0,
                &mut pre,
            )?;
        }
        add_bias_rows(&mut pre, &params.b_short);
        cache.h_short = pre.map(relu);
        cache.pre_short = pre;
    }

    if variant.has_long() {
        let mut pre_long = Mat::zeros(b, n);
        if variant.has_short() {
            let s = if variant.has_selection() {
                let mut sel = Mat::zeros(b, n);
                gemm_into(
                    1.0,
                    &cache.h_short,
                    Op::N,
                    &params.w_ss,
                    Op::T,
                    0.0,
                    &mut sel,
                )?;
                gemm_into(1.0, h_long_prev, Op::N, &params.w_ls, Op::T, 1.0, &mut sel)?;
                add_bias_rows(&mut sel, &params.b_s);
                let mut s = Mat::zeros(b, n);
                for r in 0..b {
                    let (lo, hi) = min_max_into(sel.row(r), s.row_mut(r));
                    s.row_mut(r)
                        .iter_mut()
                        .for_each(|v| *v = relu(*v - params.b_thre));
                    cache.mm_min.push(lo);
                    cache.mm_max.push(hi);
                }
                cache.sel_pre = sel;
                s
            } else {
                Mat::filled(b, n, 1.0)
            };
            let mut i = s.clone();
            for (iv, h) in i.as_mut_slice().iter_mut().zip(cache.h_short.as_slice()) {
                *iv *= h;
            }
            gemm_into(1.0, &i, Op::N, &params.w_s, Op::T, 0.0, &mut pre_long)?;
            cache.s = s;
            cache.i = i;
        } else {
            gemm_into(1.0, x, Op::N, &params.w_in, Op::T, 0.0, &mut pre_long)?;
        }
        add_hadamard_rows(&mut pre_long, &params.u, h_long_prev);
        add_bias_rows(&mut pre_long, &params.b_long);
        cache.h_long = pre_long.map(relu);
        cache.pre_long = pre_long;
    }

    let out = cache.output(variant);
    if !out.is_finite() || !cache.h_short.is_finite() {
        return Err(Error::NonFinite {
            what: "layer state".into(),
            layer: 0,
            step,
        });
    }
    Ok(cache)
}

/// Runs `layers` bottom-up over `inputs` (one `B x M` matrix per step) from
/// zero initial states.
pub fn forward_sequence(layers: &[Layer], inputs: &[Mat]) -> Result<Vec<ForwardCache>> {
    if layers.is_empty() {
        return Err(Error::invalid("network has no layers"));
    }
    let mut caches: Vec<ForwardCache> = Vec::with_capacity(layers.len());
    for (li, layer) in layers.iter().enumerate() {
        let p = &layer.params;
        let n = p.neurons();
        let variant = layer.variant;
        let mut steps: Vec<StepCache> = Vec::with_capacity(inputs.len());
        for t in 0..inputs.len() {
            let x = match caches.last() {
                None => &inputs[t],
                Some(below) => below.output(t),
            };
            let b = x.rows();
            let zero = Mat::zeros(b, n);
            let (hs_prev, hl_prev) = match steps.last() {
                Some(prev) => (&prev.h_short, &prev.h_long),
                None => (&zero, &zero),
            };
            let step = forward_step(p, variant, x, hs_prev, hl_prev, t).map_err(|e| match e {
                Error::NonFinite { what, step, .. } => Error::NonFinite {
                    what,
                    layer: li,
                    step,
                },
                Error::Shape { op, expected, got } => Error::Shape {
                    op,
                    expected,
                    got: format!("{got} (layer {li}, step {t})"),
                },
                other => other,
            })?;
            steps.push(step);
        }
        caches.push(ForwardCache { variant, steps });
    }
    Ok(caches)
}

/// Stacked layers plus an output head.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub layers: Vec<Layer>,
    pub head: Head,
    pub readout: ReadoutParams,
}

/// Architecture of one layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerSpec {
    pub neurons: usize,
    pub variant: Variant,
    pub constraint: ConstraintSpec,
}

impl Network {
    pub fn init(
        inputs: usize,
        specs: &[LayerSpec],
        head: Head,
        readout_bias: f64,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::invalid("network needs at least one layer"));
        }
        let mut layers = Vec::with_capacity(specs.len());
        let mut fan_in = inputs;
        for spec in specs {
            if spec.neurons == 0 {
                return Err(Error::invalid("layer with zero neurons"));
            }
            let params =
                LayerParams::init(fan_in, spec.neurons, spec.variant, &spec.constraint, rng)?;
            layers.push(Layer {
                variant: spec.variant,
                constraint: spec.constraint,
                params,
            });
            fan_in = spec.neurons;
        }
        let readout = ReadoutParams::init(head.outputs(), fan_in, readout_bias);
        Ok(Network {
            layers,
            head,
            readout,
        })
    }

    pub fn forward(&self, inputs: &[Mat]) -> Result<Vec<ForwardCache>> {
        forward_sequence(&self.layers, inputs)
    }

    /// Loss of the readout applied to the final top-layer state.
    pub fn evaluate(&self, inputs: &[Mat], targets: &Targets) -> Result<ReadoutOutput> {
        let caches = self.forward(inputs)?;
        let last = caches.last().expect("non-empty");
        let h = last.output(
            inputs
                .len()
                .checked_sub(1)
                .ok_or_else(|| Error::invalid("empty sequence"))?,
        );
        readout(self.head, &self.readout, h, targets)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_params() -> LayerParams {
        // N = 2, M = 1, hand-evaluated example.
        let mut p = LayerParams::zeros(1, 2);
        p.w_in = Mat::from_rows(&[&[1.0], &[0.0]]).unwrap();
        p.w_ss = Mat::identity(2);
        p.b_thre = 0.5;
        p.w_s = Mat::identity(2);
        p.u = vec![1.0, 1.0];
        p
    }

    #[test]
    fn min_max_examples() {
        let (v, lo, hi) = min_max_normalize(&[1.0, 2.0, 3.0]);
        assert_eq!(v, vec![0.0, 0.5, 1.0]);
        assert_eq!((lo, hi), (1.0, 3.0));
        let (v, _, _) = min_max_normalize(&[0.7; 3]);
        assert_eq!(v, vec![0.0; 3]);
        let (v, _, _) = min_max_normalize(&[4.2]);
        assert_eq!(v, vec![0.0]);
    }

    #[test]
    fn min_max_random_hits_both_ends() {
        let mut rng = SeededRng::new(11);
        let v: Vec<f64> = (0..16).map(|_| rng.gaussian()).collect();
        let (out, lo, hi) = min_max_normalize(&v);
        assert!(out.iter().all(|&x| (0.0..=1.0).contains(&x)));
        assert_eq!(out.iter().filter(|&&x| x == 0.0).count(), 1);
        assert_eq!(out.iter().filter(|&&x| x == 1.0).count(), 1);
        for (o, x) in out.iter().zip(&v) {
            assert!((o - (x - lo) / (hi - lo)).abs() < 1e-15);
        }
    }

    #[test]
    fn selection_threshold_arithmetic() {
        let mut p = LayerParams::zeros(1, 3);
        p.b_thre = 0.5;
        // Zero pre-activation is degenerate: nothing is selected.
        let sel = selection_weights(&p, &[0.0; 3], &[0.0; 3]).unwrap();
        assert_eq!(sel.s, vec![0.0; 3]);

        // pre = [1, 0.2, 0] already normalised.
        p.w_ss = Mat::identity(3);
        let sel = selection_weights(&p, &[1.0, 0.2, 0.0], &[0.0; 3]).unwrap();
        assert_eq!(sel.s, vec![0.5, 0.0, 0.0]);
    }

    #[test]
    fn hand_evaluated_step() {
        let p = tiny_params();
        let x = Mat::row_vector(&[1.0]);
        let z = Mat::zeros(1, 2);
        let c = forward_step(&p, Variant::Durnn, &x, &z, &z, 0).unwrap();
        assert_eq!(c.h_short.as_slice(), &[1.0, 0.0]);
        assert_eq!(c.s.as_slice(), &[0.5, 0.0]);
        assert_eq!(c.h_long.as_slice(), &[0.5, 0.0]);
        assert_eq!((c.mm_min[0], c.mm_max[0]), (0.0, 1.0));
    }

    #[test]
    fn zero_chain() {
        let p = LayerParams::zeros(2, 3);
        let x = Mat::zeros(1, 2);
        let z = Mat::zeros(1, 3);
        for v in Variant::ALL {
            let c = forward_step(&p, v, &x, &z, &z, 0).unwrap();
            assert!(c.output(v).as_slice().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn step_rejects_shape_mismatch() {
        let p = LayerParams::zeros(2, 3);
        let x = Mat::zeros(1, 4);
        let z = Mat::zeros(1, 3);
        assert!(matches!(
            forward_step(&p, Variant::Durnn, &x, &z, &z, 0),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn non_finite_names_step() {
        let mut p = LayerParams::zeros(1, 2);
        p.w_in[(0, 0)] = f64::MAX;
        let layers = vec![Layer {
            variant: Variant::RnnRelu,
            constraint: ConstraintSpec::standard(4, true),
            params: p,
        }];
        let inputs: Vec<Mat> = (0..4).map(|_| Mat::filled(1, 1, 10.0)).collect();
        match forward_sequence(&layers, &inputs) {
            Err(Error::NonFinite {
                layer: 0, step: 0, ..
            }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn readout_examples() {
        let h = Mat::filled(3, 4, 0.25);
        let params = ReadoutParams::init(1, 4, 1.3);
        let out = readout(
            Head::Regression,
            &params,
            &h,
            &Targets::Regression(vec![1.3; 3]),
        )
        .unwrap();
        assert_eq!(out.loss, 0.0);

        let params = ReadoutParams::init(10, 4, 0.0);
        let out = readout(
            Head::Classification { classes: 10 },
            &params,
            &h,
            &Targets::Classes(vec![3, 1, 9]),
        )
        .unwrap();
        assert!((out.loss - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn readout_is_stable_for_large_logits() {
        let h = Mat::filled(1, 1, 1.0);
        let params = ReadoutParams {
            w_out: Mat::from_rows(&[&[1000.0], &[-1000.0]]).unwrap(),
            b_out: vec![0.0, 0.0],
        };
        let out = readout(
            Head::Classification { classes: 2 },
            &params,
            &h,
            &Targets::Classes(vec![1]),
        )
        .unwrap();
        assert!((out.loss - 2000.0).abs() < 1e-9);
        assert_eq!(out.errors, 1);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("lstm".parse::<Variant>().is_err());
    }

    #[test]
    fn init_is_feasible() {
        let spec = ConstraintSpec::standard(100, true);
        let mut rng = SeededRng::new(5);
        let p = LayerParams::init(2, 16, Variant::Durnn, &spec, &mut rng).unwrap();
        assert!(crate::linalg::spectral_norm(&p.w_rec).unwrap() <= spec.delta + 1e-10);
        assert!(p.u.iter().all(|&u| u >= spec.u_low && u <= spec.u_high));
        assert_eq!(p.b_thre, INITIAL_THRESHOLD);

        let p = LayerParams::init(2, 4, Variant::IndPlusSelection, &spec, &mut rng).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                if r != c {
                    assert_eq!(p.w_rec[(r, c)], 0.0);
                }
            }
        }
    }
}
