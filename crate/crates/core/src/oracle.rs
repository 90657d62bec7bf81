//! Independent checks of the backward pass.
//!
//! * [`appendix_grads`] sums the closed-form gradient expressions term by
//!   term, forming every Jacobian product afresh. It shares no code with
//!   [`crate::grad`] and costs `O(L^4 N^3)`, so it is capped at tiny sizes.
//! * [`finite_diff_frozen`] differentiates a loss whose selection vectors are
//!   pinned to a recorded run, which is exactly the function the truncated
//!   gradients describe. It has its own scalar forward pass.
//! * [`bound_check`] multiplies the one-step Jacobians along a trajectory and
//!   tests the norm bounds implied by the constraints.

use std::fmt::Write as _;

use serde_json::json;

use crate::cell::{
    relu, relu_grad, ConstraintSpec, ForwardCache, Head, Layer, LayerParams, LayerSpec, Network,
    ParamKind, Targets, Variant, DEFAULT_EPSILON, DEFAULT_GAMMA, MM_DEGENERATE_GAP,
};
use crate::error::{Error, Result};
use crate::grad::{backward_sequence, grad_norm_probe, network_gradients, GradOptions, LayerGrads};
use crate::linalg::{Mat, SeededRng};
use crate::tasks::TaskBatch;

/// Largest layer width accepted by [`appendix_grads`].
pub const ORACLE_MAX_NEURONS: usize = 8;
/// Longest sequence accepted by [`appendix_grads`].
pub const ORACLE_MAX_STEPS: usize = 10;
/// Tolerance for closed-form vs iterative gradients.
pub const ORACLE_TOLERANCE: f64 = 1e-9;
/// Tolerance for finite differences.
pub const FD_TOLERANCE: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;
/// Entries smaller than this fraction of the tensor's largest entry are
/// compared against that fraction instead of their own size.
pub const REL_FLOOR_FRACTION: f64 = 1e-3;
/// Minimum distance of every relu argument from its kink (and of every
/// min-max spread from zero) in a finite-difference instance.
pub const KINK_MARGIN: f64 = 1e-3;
pub const KINK_MAX_RESAMPLES: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct ReportEntry {
    pub check: String,
    pub param: String,
    pub layer: Option<usize>,
    pub max_rel: f64,
    pub max_abs: f64,
    /// Flat index of the worst entry.
    pub location: usize,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OracleReport {
    pub entries: Vec<ReportEntry>,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.pass)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ReportEntry> {
        self.entries.iter().filter(|e| !e.pass)
    }

    pub fn extend(&mut self, other: OracleReport) {
        self.entries.extend(other.entries);
    }

    /// Worst entry per `(check, layer, param)`.
    pub fn summary(&self) -> OracleReport {
        let mut out: Vec<ReportEntry> = Vec::new();
        for e in &self.entries {
            match out
                .iter_mut()
                .find(|o| o.check == e.check && o.param == e.param && o.layer == e.layer)
            {
                Some(o) => {
                    if e.max_rel > o.max_rel || (!e.pass && o.pass) {
                        let pass = o.pass && e.pass;
                        *o = e.clone();
                        o.pass = pass;
                    } else {
                        o.pass &= e.pass;
                        o.max_abs = o.max_abs.max(e.max_abs);
                    }
                }
                None => out.push(e.clone()),
            }
        }
        OracleReport { entries: out }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let layer = e.layer.map_or("-".to_string(), |l| (l + 1).to_string());
            let _ = writeln!(
                s,
                "{:<5} {:<22} layer {:<2} {:<8} max_rel {:.3e} max_abs {:.3e} at [{}] (tol {:.0e})",
                if e.pass { "PASS" } else { "FAIL" },
                e.check,
                layer,
                e.param,
                e.max_rel,
                e.max_abs,
                e.location,
                e.tolerance
            );
        }
        s
    }

    pub fn to_json_lines(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let v = json!({
                "check": e.check,
                "param": e.param,
                "layer": e.layer.map(|l| l + 1),
                "max_rel": e.max_rel,
                "max_abs": e.max_abs,
                "location": e.location,
                "tolerance": e.tolerance,
                "pass": e.pass,
            });
            s.push_str(&v.to_string());
            s.push('\n');
        }
        s
    }
}

/// Entry-wise relative error `|a - b| / max(|a|, |b|, floor)` with the floor
/// at [`REL_FLOOR_FRACTION`] of the larger tensor's max magnitude.
pub fn compare_tensors(
    check: &str,
    param: &str,
    layer: Option<usize>,
    analytic: &[f64],
    reference: &[f64],
    tolerance: f64,
) -> ReportEntry {
    let scale = analytic
        .iter()
        .chain(reference)
        .fold(0.0f64, |m, x| m.max(x.abs()));
    let floor = (REL_FLOOR_FRACTION * scale).max(f64::MIN_POSITIVE);
    let mut max_rel = 0.0f64;
    let mut max_abs = 0.0f64;
    let mut location = 0;
    let mut finite = analytic.len() == reference.len();
    for (i, (a, b)) in analytic.iter().zip(reference).enumerate() {
        if !a.is_finite() || !b.is_finite() {
            finite = false;
            location = i;
            break;
        }
        let abs = (a - b).abs();
        let rel = abs / a.abs().max(b.abs()).max(floor);
        max_abs = max_abs.max(abs);
        if rel > max_rel {
            max_rel = rel;
            location = i;
        }
    }
    if !finite {
        max_rel = f64::INFINITY;
    }
    ReportEntry {
        check: check.to_string(),
        param: param.to_string(),
        layer,
        max_rel,
        max_abs,
        location,
        tolerance,
        pass: finite && max_rel <= tolerance,
    }
}

// ---------------------------------------------------------------------------
// Closed-form sums

/// Naive dense product; kept separate from the optimised kernels on purpose.
fn mul(a: &Mat, b: &Mat) -> Mat {
    Mat::from_fn(a.rows(), b.cols(), |i, j| {
        let mut s = 0.0;
        for k in 0..a.cols() {
            s += a[(i, k)] * b[(k, j)];
        }
        s
    })
}

fn apply(a: &Mat, v: &[f64]) -> Vec<f64> {
    (0..a.rows())
        .map(|i| (0..a.cols()).map(|k| a[(i, k)] * v[k]).sum())
        .collect()
}

fn outer_add(acc: &mut Mat, left: &[f64], right: &[f64]) {
    for (i, l) in left.iter().enumerate() {
        for (j, r) in right.iter().enumerate() {
            acc[(i, j)] += l * r;
        }
    }
}

fn add(acc: &mut [f64], v: &[f64]) {
    for (a, x) in acc.iter_mut().zip(v) {
        *a += x;
    }
}

fn hadamard(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

/// One sequence of one layer, unpacked from a cache.
struct Trajectory {
    steps: usize,
    x: Vec<Vec<f64>>,
    hs: Vec<Vec<f64>>,
    h: Vec<Vec<f64>>,
    s: Vec<Vec<f64>>,
    d_short: Vec<Vec<f64>>,
    d_long: Vec<Vec<f64>>,
    /// relu' of the selection threshold stage.
    gate: Vec<Vec<f64>>,
    slope: Vec<f64>,
}

impl Trajectory {
    fn new(layer: &Layer, cache: &ForwardCache, b: usize) -> Self {
        let v = layer.variant;
        let n = layer.params.neurons();
        let row = |m: &Mat| {
            if m.is_empty() {
                vec![0.0; n]
            } else {
                m.row(b).to_vec()
            }
        };
        let mut t = Trajectory {
            steps: cache.len(),
            x: Vec::new(),
            hs: Vec::new(),
            h: Vec::new(),
            s: Vec::new(),
            d_short: Vec::new(),
            d_long: Vec::new(),
            gate: Vec::new(),
            slope: Vec::new(),
        };
        for st in &cache.steps {
            t.x.push(st.x.row(b).to_vec());
            t.hs.push(row(&st.h_short));
            t.h.push(row(&st.h_long));
            t.s.push(row(&st.s));
            t.d_short
                .push(row(&st.pre_short).into_iter().map(relu_grad).collect());
            t.d_long
                .push(row(&st.pre_long).into_iter().map(relu_grad).collect());
            if v.has_selection() {
                let (lo, hi) = (st.mm_min[b], st.mm_max[b]);
                let gap = hi - lo;
                let slope = if gap >= MM_DEGENERATE_GAP {
                    1.0 / gap
                } else {
                    0.0
                };
                let gate = st
                    .sel_pre
                    .row(b)
                    .iter()
                    .map(|&a| relu_grad((a - lo) * slope - layer.params.b_thre))
                    .collect();
                t.gate.push(gate);
                t.slope.push(slope);
            } else {
                t.gate.push(vec![0.0; n]);
                t.slope.push(0.0);
            }
        }
        t
    }

    fn prev_h(&self, k: usize) -> Vec<f64> {
        if k == 0 {
            vec![0.0; self.h[0].len()]
        } else {
            self.h[k - 1].clone()
        }
    }

    fn prev_hs(&self, k: usize) -> Vec<f64> {
        if k == 0 {
            vec![0.0; self.hs[0].len()]
        } else {
            self.hs[k - 1].clone()
        }
    }
}

/// `dh_t/dh_k` (as applied to a gradient): `prod_{i=k+1}^{t} diag(U * relu'_{s,i})`.
fn long_jacobian(p: &LayerParams, tr: &Trajectory, t: usize, k: usize) -> Mat {
    let n = p.neurons();
    let mut j = Mat::identity(n);
    for i in (k + 1)..=t {
        let d = Mat::diag(&hadamard(&p.u, &tr.d_long[i]));
        j = mul(&j, &d);
    }
    j
}

/// Gradient operator of `hs_m` with respect to `hs_k`:
/// `prod_{i=k+1}^{m} W_rec^T diag(relu'_{f,i})`, leftmost factor `i = k + 1`.
fn short_jacobian(p: &LayerParams, variant: Variant, tr: &Trajectory, m: usize, k: usize) -> Mat {
    let n = p.neurons();
    let rec_t = if variant.diagonal_short() {
        Mat::diag(&p.w_rec.diagonal())
    } else {
        p.w_rec.transpose()
    };
    let mut j = Mat::identity(n);
    for i in (k + 1)..=m {
        j = mul(&j, &mul(&rec_t, &Mat::diag(&tr.d_short[i])));
    }
    j
}

/// `dS_m = diag(S_m) W_s^T diag(relu'_{s,m})`.
fn ds_operator(p: &LayerParams, tr: &Trajectory, m: usize) -> Mat {
    mul(
        &mul(&Mat::diag(&tr.s[m]), &p.w_s.transpose()),
        &Mat::diag(&tr.d_long[m]),
    )
}

/// Gradient operator of `h_k` with respect to `S_k`: `diag(hs_k) W_s^T diag(relu'_{s,k})`.
fn selection_operator(p: &LayerParams, tr: &Trajectory, k: usize) -> Mat {
    mul(
        &mul(&Mat::diag(&tr.hs[k]), &p.w_s.transpose()),
        &Mat::diag(&tr.d_long[k]),
    )
}

/// Short-sublayer parameter terms for one gradient `z` arriving at `hs_k`.
fn short_terms(
    g: &mut LayerParams,
    gx: &mut [f64],
    p: &LayerParams,
    variant: Variant,
    tr: &Trajectory,
    k: usize,
    z: &[f64],
) {
    let dz = hadamard(&tr.d_short[k], z);
    let hprev = tr.prev_hs(k);
    if variant.diagonal_short() {
        for (i, (d, h)) in dz.iter().zip(&hprev).enumerate() {
            g.w_rec[(i, i)] += d * h;
        }
    } else {
        outer_add(&mut g.w_rec, &dz, &hprev);
    }
    outer_add(&mut g.w_in, &dz, &tr.x[k]);
    add(&mut g.b_short, &dz);
    add(gx, &apply(&p.w_in.transpose(), &dz));
}

/// Closed-form gradients for one layer, given the loss gradient injected at
/// the layer output for each step (`None` means zero).
///
/// Same truncation as the iterative pass. `selection_bias` mirrors
/// [`crate::grad::GradOptions::selection_bias`].
pub fn appendix_grads(
    layer: &Layer,
    cache: &ForwardCache,
    local: &[Option<Mat>],
    selection_bias: bool,
) -> Result<LayerGrads> {
    let p = &layer.params;
    let variant = layer.variant;
    let n = p.neurons();
    let steps = cache.len();
    if n > ORACLE_MAX_NEURONS || steps > ORACLE_MAX_STEPS {
        return Err(Error::invalid(format!(
            "closed-form oracle is limited to N <= {ORACLE_MAX_NEURONS}, L <= {ORACLE_MAX_STEPS} (got N = {n}, L = {steps})"
        )));
    }
    if local.len() != steps {
        return Err(Error::shape("appendix_grads", steps, local.len()));
    }
    let batch = cache.output(0).rows();
    let mut g = LayerParams::zeros(p.inputs(), n);
    let mut g_x: Vec<Mat> = (0..steps).map(|_| Mat::zeros(batch, p.inputs())).collect();

    for b in 0..batch {
        let tr = Trajectory::new(layer, cache, b);
        let mut gx: Vec<Vec<f64>> = vec![vec![0.0; p.inputs()]; steps];
        for t in 0..tr.steps {
            let Some(loss_t) = local[t].as_ref() else {
                continue;
            };
            let g_t = loss_t.row(b).to_vec();

            if !variant.has_long() {
                // plain relu RNN: the loss sits on hs_t
                for k in 0..=t {
                    let z = apply(&short_jacobian(p, variant, &tr, t, k), &g_t);
                    short_terms(&mut g, &mut gx[k], p, variant, &tr, k, &z);
                }
                continue;
            }

            for k in 0..=t {
                let v = apply(&long_jacobian(p, &tr, t, k), &g_t);
                let dv = hadamard(&tr.d_long[k], &v);
                add(&mut g.u, &hadamard(&dv, &tr.prev_h(k)));
                add(&mut g.b_long, &dv);
                if !variant.has_short() {
                    outer_add(&mut g.w_in, &dv, &tr.x[k]);
                    add(&mut gx[k], &apply(&p.w_in.transpose(), &dv));
                    continue;
                }
                outer_add(&mut g.w_s, &dv, &hadamard(&tr.s[k], &tr.hs[k]));
                if variant.has_selection() {
                    let d_sel = apply(&selection_operator(p, &tr, k), &v);
                    let gated = hadamard(&d_sel, &tr.gate[k]);
                    let kernel: Vec<f64> = gated.iter().map(|x| x * tr.slope[k]).collect();
                    outer_add(&mut g.w_ss, &kernel, &tr.hs[k]);
                    outer_add(&mut g.w_ls, &kernel, &tr.prev_h(k));
                    if selection_bias {
                        add(&mut g.b_s, &kernel);
                    }
                    g.b_thre -= gated.iter().sum::<f64>();
                }
            }

            if variant.has_short() {
                for k in 0..=t {
                    for m in k..=t {
                        let through_long = apply(&long_jacobian(p, &tr, t, m), &g_t);
                        let into_short = apply(&ds_operator(p, &tr, m), &through_long);
                        let z = apply(&short_jacobian(p, variant, &tr, m, k), &into_short);
                        short_terms(&mut g, &mut gx[k], p, variant, &tr, k, &z);
                    }
                }
            }
        }
        for (t, v) in gx.into_iter().enumerate() {
            g_x[t].row_mut(b).copy_from_slice(&v);
        }
    }
    Ok(LayerGrads { params: g, g_x })
}

/// Closed-form gradients through a stack: each layer's input gradient is
/// injected at the output of the layer below.
pub fn appendix_grads_network(
    layers: &[Layer],
    caches: &[ForwardCache],
    top: Vec<Option<Mat>>,
    selection_bias: bool,
) -> Result<Vec<LayerGrads>> {
    let mut out = Vec::with_capacity(layers.len());
    let mut local = top;
    for (layer, cache) in layers.iter().zip(caches).rev() {
        let g = appendix_grads(layer, cache, &local, selection_bias)?;
        local = g.g_x.iter().cloned().map(Some).collect();
        out.push(g);
    }
    out.reverse();
    Ok(out)
}

// ---------------------------------------------------------------------------
// Frozen-selection finite differences

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrozenMode {
    /// Every `S_t` is the recorded vector.
    Selection,
    /// `S_t` is recomputed from the current selection parameters, but from the
    /// recorded states and with the recorded min-max bounds.
    DirectSelection,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRef {
    Layer(usize, ParamKind),
    ReadoutWeight,
    ReadoutBias,
}

impl ParamRef {
    pub fn name(self) -> String {
        match self {
            ParamRef::Layer(_, k) => k.name().to_string(),
            ParamRef::ReadoutWeight => "w_out".into(),
            ParamRef::ReadoutBias => "b_out".into(),
        }
    }

    pub fn layer(self) -> Option<usize> {
        match self {
            ParamRef::Layer(l, _) => Some(l),
            _ => None,
        }
    }

    pub fn get(self, net: &Network) -> &[f64] {
        match self {
            ParamRef::Layer(l, k) => net.layers[l].params.get(k),
            ParamRef::ReadoutWeight => net.readout.w_out.as_slice(),
            ParamRef::ReadoutBias => &net.readout.b_out,
        }
    }

    pub fn get_mut(self, net: &mut Network) -> &mut [f64] {
        match self {
            ParamRef::Layer(l, k) => net.layers[l].params.get_mut(k),
            ParamRef::ReadoutWeight => net.readout.w_out.as_mut_slice(),
            ParamRef::ReadoutBias => &mut net.readout.b_out,
        }
    }
}

fn matvec(m: &Mat, v: &[f64]) -> Vec<f64> {
    apply(m, v)
}

/// Loss of `net` on `batch` with selection pinned to `record` (a forward
/// cache of the same network at the base point).
pub fn frozen_loss(
    net: &Network,
    batch: &TaskBatch,
    record: &[ForwardCache],
    mode: FrozenMode,
) -> Result<f64> {
    if record.len() != net.layers.len() {
        return Err(Error::shape("frozen_loss", net.layers.len(), record.len()));
    }
    let steps = batch.steps();
    let bsz = batch.batch_size();
    let mut total = 0.0;
    for b in 0..bsz {
        let mut seq: Vec<Vec<f64>> = (0..steps)
            .map(|t| batch.inputs[t].row(b).to_vec())
            .collect();
        for (layer, rec) in net.layers.iter().zip(record) {
            let p = &layer.params;
            let v = layer.variant;
            let n = p.neurons();
            let mut hs = vec![0.0; n];
            let mut h = vec![0.0; n];
            let mut out = Vec::with_capacity(steps);
            for (t, x) in seq.iter().enumerate() {
                let st = &rec.steps[t];
                let win_x = matvec(&p.w_in, x);
                if v.has_short() {
                    let rec_term = if v.diagonal_short() {
                        hadamard(&p.w_rec.diagonal(), &hs)
                    } else {
                        matvec(&p.w_rec, &hs)
                    };
                    hs = (0..n)
                        .map(|j| relu(win_x[j] + rec_term[j] + p.b_short[j]))
                        .collect();
                }
                if v.has_long() {
                    let drive = if v.has_short() {
                        let s: Vec<f64> = if !v.has_selection() {
                            vec![1.0; n]
                        } else {
                            match mode {
                                FrozenMode::Selection => st.s.row(b).to_vec(),
                                FrozenMode::DirectSelection => {
                                    let hs_rec = st.h_short.row(b);
                                    let h_prev_rec = if t == 0 {
                                        vec![0.0; n]
                                    } else {
                                        rec.steps[t - 1].h_long.row(b).to_vec()
                                    };
                                    let a1 = matvec(&p.w_ss, hs_rec);
                                    let a2 = matvec(&p.w_ls, &h_prev_rec);
                                    let (lo, hi) = (st.mm_min[b], st.mm_max[b]);
                                    let gap = hi - lo;
                                    (0..n)
                                        .map(|j| {
                                            let a = a1[j] + a2[j] + p.b_s[j];
                                            let mm = if gap >= MM_DEGENERATE_GAP {
                                                (a - lo) / gap
                                            } else {
                                                0.0
                                            };
                                            relu(mm - p.b_thre)
                                        })
                                        .collect()
                                }
                            }
                        };
                        matvec(&p.w_s, &hadamard(&s, &hs))
                    } else {
                        win_x
                    };
                    h = (0..n)
                        .map(|j| relu(drive[j] + p.u[j] * h[j] + p.b_long[j]))
                        .collect();
                    out.push(h.clone());
                } else {
                    out.push(hs.clone());
                }
            }
            seq = out;
        }
        let last = &seq[steps - 1];
        let pred: Vec<f64> = (0..net.readout.w_out.rows())
            .map(|k| crate::linalg::dot(net.readout.w_out.row(k), last) + net.readout.b_out[k])
            .collect();
        total += match (net.head, &batch.targets) {
            (Head::Regression, Targets::Regression(y)) => (pred[0] - y[b]).powi(2),
            (Head::Classification { .. }, Targets::Classes(y)) => {
                let max = pred.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + pred.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
                lse - pred[y[b]]
            }
            _ => return Err(Error::invalid("targets do not match the readout head")),
        };
    }
    Ok(total / bsz as f64)
}

/// Central differences of [`frozen_loss`] for every entry of one tensor.
pub fn finite_diff_frozen(
    net: &Network,
    batch: &TaskBatch,
    record: &[ForwardCache],
    param: ParamRef,
    step: f64,
    mode: FrozenMode,
) -> Result<Vec<f64>> {
    if !(1e-7..=1e-3).contains(&step) {
        return Err(Error::invalid(format!(
            "finite-difference step {step} outside [1e-7, 1e-3]"
        )));
    }
    let mut work = net.clone();
    let len = param.get(net).len();
    let mut out = Vec::with_capacity(len);
    for i in 0..len {
        let base = param.get(net)[i];
        param.get_mut(&mut work)[i] = base + step;
        let plus = frozen_loss(&work, batch, record, mode)?;
        param.get_mut(&mut work)[i] = base - step;
        let minus = frozen_loss(&work, batch, record, mode)?;
        param.get_mut(&mut work)[i] = base;
        out.push((plus - minus) / (2.0 * step));
    }
    Ok(out)
}

/// Smallest distance of any relu argument from zero, or of any min-max spread
/// from zero, over the recorded run.
pub fn kink_margin(net: &Network, record: &[ForwardCache]) -> f64 {
    let mut margin = f64::INFINITY;
    let mut see = |m: &Mat| {
        for x in m.as_slice() {
            margin = margin.min(x.abs());
        }
    };
    for rec in record {
        for st in &rec.steps {
            see(&st.pre_short);
            see(&st.pre_long);
        }
    }
    for (layer, rec) in net.layers.iter().zip(record) {
        if !layer.variant.has_selection() {
            continue;
        }
        for st in &rec.steps {
            for b in 0..st.sel_pre.rows() {
                let (lo, hi) = (st.mm_min[b], st.mm_max[b]);
                margin = margin.min(hi - lo);
                for &a in st.sel_pre.row(b) {
                    let mm = (a - lo) / (hi - lo);
                    margin = margin.min((mm - layer.params.b_thre).abs());
                }
            }
        }
    }
    margin
}

/// Draws instances from `make` until [`kink_margin`] exceeds [`KINK_MARGIN`].
pub fn kink_guarded<F>(
    rng: &mut SeededRng,
    mut make: F,
) -> Result<(Network, TaskBatch, Vec<ForwardCache>)>
where
    F: FnMut(&mut SeededRng) -> Result<(Network, TaskBatch)>,
{
    for _ in 0..KINK_MAX_RESAMPLES {
        let (net, batch) = make(rng)?;
        let record = net.forward(&batch.inputs)?;
        if kink_margin(&net, &record) > KINK_MARGIN {
            return Ok((net, batch, record));
        }
    }
    Err(Error::invalid(format!(
        "no instance with relu margin above {KINK_MARGIN} in {KINK_MAX_RESAMPLES} draws"
    )))
}

// ---------------------------------------------------------------------------
// Norm bounds

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundParams {
    pub epsilon: f64,
    pub gamma: f64,
    pub delta: f64,
    /// Horizon the `U` interval was derived for: `U` in `[eps^(1/h), gamma^(1/h)]`.
    pub horizon: usize,
}

/// Checks, along the trajectory of sequence `sample` ending at its last step,
///
/// * `||dh_t/dhs_{t-k}|| <= max_j ||dS_j|| * gamma / (1 - delta)` for `k <= span`;
/// * `||dh_t/dh_{t-k}|| >= epsilon` whenever some long neuron stays active over
///   the last `k` steps.
pub fn bound_check(
    layer: &Layer,
    cache: &ForwardCache,
    sample: usize,
    span: usize,
    bounds: BoundParams,
) -> Result<OracleReport> {
    if span > bounds.horizon {
        return Err(Error::invalid(format!(
            "span {span} exceeds the constraint horizon {}",
            bounds.horizon
        )));
    }
    let t = cache.len() - 1;
    let probe = grad_norm_probe(layer, cache, sample, t, span)?;
    let mut report = OracleReport::default();

    if !probe.cross.is_empty() {
        let limit = probe.max_ds() * bounds.gamma / (1.0 - bounds.delta);
        let (mut worst, mut at, mut over) = (0.0f64, 0, 0.0f64);
        for (k, &norm) in probe.cross.iter().enumerate() {
            let ratio = if limit > 0.0 {
                norm / limit
            } else if norm > 0.0 {
                f64::INFINITY
            } else {
                0.0
            };
            if ratio > worst {
                worst = ratio;
                at = k + 1;
            }
            over = over.max(norm - limit);
        }
        report.entries.push(ReportEntry {
            check: "upper_bound".into(),
            param: "dh/dhs".into(),
            layer: None,
            max_rel: worst,
            max_abs: over.max(0.0),
            location: at,
            tolerance: 1.0,
            pass: worst <= 1.0,
        });
    }

    // neurons active over the last k steps
    let n = layer.params.neurons();
    let mut alive = vec![true; n];
    let (mut worst, mut at, mut short) = (0.0f64, 0, 0.0f64);
    for (k, &norm) in probe.long.iter().enumerate() {
        let i = t - k;
        let pre = cache.steps[i].pre_long.row(sample);
        for (a, &x) in alive.iter_mut().zip(pre) {
            *a &= x > 0.0;
        }
        if alive.iter().any(|&a| a) {
            let ratio = if norm > 0.0 {
                bounds.epsilon / norm
            } else {
                f64::INFINITY
            };
            if ratio > worst {
                worst = ratio;
                at = k + 1;
            }
            short = short.max(bounds.epsilon - norm);
        }
    }
    report.entries.push(ReportEntry {
        check: "lower_bound".into(),
        param: "dh/dh".into(),
        layer: None,
        max_rel: worst,
        max_abs: short.max(0.0),
        location: at,
        tolerance: 1.0 + 1e-12,
        pass: worst <= 1.0 + 1e-12,
    });
    Ok(report)
}

// ---------------------------------------------------------------------------
// Randomised suites

/// Upper limits for randomly drawn verification instances; each draw picks
/// sizes uniformly in `1..=limit` (`2..=limit` for `steps`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InstanceSizes {
    pub neurons: usize,
    pub inputs: usize,
    pub steps: usize,
    pub batch: usize,
    pub layers: usize,
}

impl Default for InstanceSizes {
    fn default() -> Self {
        InstanceSizes {
            neurons: 4,
            inputs: 3,
            steps: 7,
            batch: 2,
            layers: 2,
        }
    }
}

fn pick(rng: &mut SeededRng, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi.max(lo) - lo + 1)
}

/// A random network of one variant with every parameter moved away from its
/// initial value (nonzero biases, spread `U`, random threshold and readout),
/// and a random batch with matching targets.
pub fn random_instance(
    rng: &mut SeededRng,
    variant: Variant,
    sizes: InstanceSizes,
) -> Result<(Network, TaskBatch)> {
    let n = pick(rng, 1, sizes.neurons);
    let m = pick(rng, 1, sizes.inputs);
    let steps = pick(rng, 2, sizes.steps);
    let batch = pick(rng, 1, sizes.batch);
    let depth = pick(rng, 1, sizes.layers);
    let specs: Vec<LayerSpec> = (0..depth)
        .map(|l| LayerSpec {
            neurons: n,
            variant,
            constraint: ConstraintSpec::standard(steps, l + 1 == depth),
        })
        .collect();
    let head = if rng.uniform() < 0.5 {
        Head::Regression
    } else {
        Head::Classification { classes: 3 }
    };
    let mut net = Network::init(m, &specs, head, 0.0, rng)?;
    for layer in &mut net.layers {
        let spec = layer.constraint;
        let p = &mut layer.params;
        for x in p
            .b_short
            .iter_mut()
            .chain(p.b_long.iter_mut())
            .chain(p.b_s.iter_mut())
        {
            *x = rng.uniform_range(-0.3, 0.5);
        }
        for x in p.u.iter_mut() {
            *x = rng.uniform_range(spec.u_low, spec.u_high);
        }
        p.b_thre = rng.uniform_range(0.05, 0.6);
    }
    net.readout.w_out = Mat::from_fn(head.outputs(), n, |_, _| rng.gaussian());
    for b in net.readout.b_out.iter_mut() {
        *b = rng.gaussian();
    }
    let inputs: Vec<Mat> = (0..steps)
        .map(|_| Mat::from_fn(batch, m, |_, _| rng.uniform()))
        .collect();
    let targets = match head {
        Head::Regression => {
            Targets::Regression((0..batch).map(|_| rng.uniform_range(0.0, 2.0)).collect())
        }
        Head::Classification { classes } => {
            Targets::Classes((0..batch).map(|_| rng.below(classes)).collect())
        }
    };
    Ok((net, TaskBatch { inputs, targets }))
}

/// Settings of [`verify_suite`].
#[derive(Clone, Debug, PartialEq)]
pub struct VerifyConfig {
    pub seed: u64,
    /// Closed-form comparisons per variant.
    pub oracle_instances: usize,
    pub oracle_sizes: InstanceSizes,
    /// Finite-difference instances, cycling through the variants.
    pub fd_instances: usize,
    pub fd_sizes: InstanceSizes,
    pub fd_step: f64,
    pub variants: Vec<Variant>,
    /// Test hook: perturbs the iterative gradient of this parameter before
    /// every comparison.
    pub corrupt: Option<ParamKind>,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            seed: 0,
            oracle_instances: 100,
            oracle_sizes: InstanceSizes::default(),
            fd_instances: 25,
            fd_sizes: InstanceSizes {
                neurons: 3,
                inputs: 2,
                steps: 5,
                batch: 2,
                layers: 2,
            },
            fd_step: FD_STEP,
            variants: Variant::ALL.to_vec(),
            corrupt: None,
        }
    }
}

fn corrupt(grads: &mut [LayerGrads], kind: Option<ParamKind>) {
    if let Some(kind) = kind {
        for g in grads {
            for x in g.params.get_mut(kind) {
                *x = *x * 1.01 + 1e-3;
            }
        }
    }
}

/// Parameters whose finite-difference check uses the plain frozen loss.
pub const FD_STATE_PARAMS: [ParamKind; 6] = [
    ParamKind::WIn,
    ParamKind::WRec,
    ParamKind::WS,
    ParamKind::U,
    ParamKind::BShort,
    ParamKind::BLong,
];
/// Parameters checked against the direct-selection frozen loss.
pub const FD_SELECTION_PARAMS: [ParamKind; 4] = [
    ParamKind::WSs,
    ParamKind::WLs,
    ParamKind::BS,
    ParamKind::BThre,
];

/// Closed-form comparison of one instance with random per-step loss
/// gradients injected at the top layer.
pub fn oracle_instance(
    net: &Network,
    batch: &TaskBatch,
    rng: &mut SeededRng,
    corrupt_kind: Option<ParamKind>,
) -> Result<OracleReport> {
    let caches = net.forward(&batch.inputs)?;
    let top_n = net.layers.last().expect("non-empty").params.neurons();
    let top: Vec<Option<Mat>> = (0..batch.steps())
        .map(|_| {
            if rng.uniform() < 0.25 {
                None
            } else {
                Some(Mat::from_fn(batch.batch_size(), top_n, |_, _| {
                    rng.gaussian()
                }))
            }
        })
        .collect();
    let mut iterative =
        backward_sequence(&net.layers, &caches, top.clone(), GradOptions::default())?;
    corrupt(&mut iterative, corrupt_kind);
    let closed = appendix_grads_network(&net.layers, &caches, top, true)?;
    let mut report = OracleReport::default();
    for (l, (a, b)) in iterative.iter().zip(&closed).enumerate() {
        for &k in net.layers[l].variant.params() {
            report.entries.push(compare_tensors(
                "appendix_oracle",
                k.name(),
                Some(l),
                a.params.get(k),
                b.params.get(k),
                ORACLE_TOLERANCE,
            ));
        }
        for (t, (ga, gb)) in a.g_x.iter().zip(&b.g_x).enumerate() {
            let e = compare_tensors(
                "appendix_oracle",
                "g_x",
                Some(l),
                ga.as_slice(),
                gb.as_slice(),
                ORACLE_TOLERANCE,
            );
            if !e.pass || t == 0 {
                report.entries.push(e);
            }
        }
    }
    Ok(report)
}

/// Finite-difference comparison of one kink-guarded instance.
pub fn fd_instance(
    net: &Network,
    batch: &TaskBatch,
    record: &[ForwardCache],
    step: f64,
    corrupt_kind: Option<ParamKind>,
) -> Result<OracleReport> {
    let (_, mut grads) =
        network_gradients(net, &batch.inputs, &batch.targets, GradOptions::default())?;
    corrupt(&mut grads.layers, corrupt_kind);
    let mut report = OracleReport::default();
    for (l, layer) in net.layers.iter().enumerate() {
        let used = layer.variant.params();
        let checks = FD_STATE_PARAMS
            .iter()
            .map(|&k| (k, FrozenMode::Selection))
            .chain(
                FD_SELECTION_PARAMS
                    .iter()
                    .map(|&k| (k, FrozenMode::DirectSelection)),
            );
        for (k, mode) in checks {
            if !used.contains(&k) {
                continue;
            }
            let numeric =
                finite_diff_frozen(net, batch, record, ParamRef::Layer(l, k), step, mode)?;
            let check = match mode {
                FrozenMode::Selection => "finite_diff",
                FrozenMode::DirectSelection => "finite_diff_selection",
            };
            report.entries.push(compare_tensors(
                check,
                k.name(),
                Some(l),
                grads.layers[l].params.get(k),
                &numeric,
                FD_TOLERANCE,
            ));
        }
    }
    for (r, analytic) in [
        (ParamRef::ReadoutWeight, grads.w_out.as_slice()),
        (ParamRef::ReadoutBias, grads.b_out.as_slice()),
    ] {
        let numeric = finite_diff_frozen(net, batch, record, r, step, FrozenMode::Selection)?;
        report.entries.push(compare_tensors(
            "finite_diff",
            &r.name(),
            None,
            analytic,
            &numeric,
            FD_TOLERANCE,
        ));
    }
    Ok(report)
}

/// Runs the closed-form and finite-difference suites.
pub fn verify_suite(cfg: &VerifyConfig) -> Result<OracleReport> {
    if cfg.variants.is_empty() {
        return Err(Error::invalid("no variants selected"));
    }
    let mut rng = SeededRng::new(cfg.seed);
    let mut report = OracleReport::default();
    for &v in &cfg.variants {
        for _ in 0..cfg.oracle_instances {
            let (net, batch) = random_instance(&mut rng, v, cfg.oracle_sizes)?;
            report.extend(oracle_instance(&net, &batch, &mut rng, cfg.corrupt)?);
        }
    }
    for i in 0..cfg.fd_instances {
        let v = cfg.variants[i % cfg.variants.len()];
        let sizes = cfg.fd_sizes;
        let (net, batch, record) = kink_guarded(&mut rng, |r| random_instance(r, v, sizes))?;
        report.extend(fd_instance(
            &net,
            &batch,
            &record,
            cfg.fd_step,
            cfg.corrupt,
        )?);
    }
    Ok(report)
}

/// With every `U` entry at its lower bound `epsilon^(1/horizon)`, the long
/// path over `horizon` steps of a neuron that stays active has norm exactly
/// `epsilon`. Returns `None` when no neuron of `sample` is active over the
/// whole window ending at the last step.
pub fn long_path_at_lower_bound(
    layer: &Layer,
    cache: &ForwardCache,
    sample: usize,
    bounds: BoundParams,
) -> Result<Option<ReportEntry>> {
    let t = cache.len() - 1;
    if bounds.horizon > cache.len() {
        return Err(Error::invalid(format!(
            "horizon {} exceeds the {}-step trajectory",
            bounds.horizon,
            cache.len()
        )));
    }
    let active = (0..layer.params.neurons())
        .any(|j| (t + 1 - bounds.horizon..=t).all(|i| cache.steps[i].pre_long[(sample, j)] > 0.0));
    if !active {
        return Ok(None);
    }
    let probe = grad_norm_probe(layer, cache, sample, t, bounds.horizon)?;
    let measured = probe.long[bounds.horizon - 1];
    let err = (measured - bounds.epsilon).abs();
    Ok(Some(ReportEntry {
        check: "lower_bound_exact".into(),
        param: "dh/dh".into(),
        layer: None,
        max_rel: err / bounds.epsilon,
        max_abs: err,
        location: bounds.horizon,
        tolerance: 1e-10 / bounds.epsilon,
        pass: err <= 1e-10,
    }))
}

/// Outcome of [`bound_suite`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BoundSuiteReport {
    pub report: OracleReport,
    /// Instances per length that had an active stretch for the exact check.
    pub exact_checked: Vec<(usize, usize)>,
}

/// [`bound_check`] over freshly initialised single-layer networks driven by
/// adding-problem inputs, for each sequence length, followed by the exact
/// lower-bound check with `U` moved to its lower bound.
pub fn bound_suite(
    lengths: &[usize],
    instances: usize,
    neurons: usize,
    seed: u64,
) -> Result<BoundSuiteReport> {
    let mut rng = SeededRng::new(seed);
    let mut out = BoundSuiteReport::default();
    for &steps in lengths {
        let spec = ConstraintSpec::standard(steps, true);
        let bounds = BoundParams {
            epsilon: DEFAULT_EPSILON,
            gamma: DEFAULT_GAMMA,
            delta: spec.delta,
            horizon: steps,
        };
        let mut exact = 0;
        for _ in 0..instances {
            let params = LayerParams::init(2, neurons, Variant::Durnn, &spec, &mut rng)?;
            let mut layer = Layer {
                variant: Variant::Durnn,
                constraint: spec,
                params,
            };
            let batch = crate::tasks::gen_adding(steps, 1, &mut rng)?;
            let cache = crate::cell::forward_sequence(std::slice::from_ref(&layer), &batch.inputs)?
                .remove(0);
            out.report
                .extend(bound_check(&layer, &cache, 0, steps, bounds)?);

            layer.params.u.iter_mut().for_each(|u| *u = spec.u_low);
            let cache = crate::cell::forward_sequence(std::slice::from_ref(&layer), &batch.inputs)?
                .remove(0);
            out.report
                .extend(bound_check(&layer, &cache, 0, steps, bounds)?);
            if let Some(e) = long_path_at_lower_bound(&layer, &cache, 0, bounds)? {
                out.report.entries.push(e);
                exact += 1;
            }
        }
        out.exact_checked.push((steps, exact));
    }
    Ok(out)
}
