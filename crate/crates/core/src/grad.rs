//! Truncated backpropagation through time for stacked dual recurrent layers.
//!
//! The selection vector is treated as a constant inside the state recursions:
//! neither `dS_t/dh_{t-1}` nor `dS_t/dhs_t` is propagated. The state gradients
//! then obey
//!
//! ```text
//! dL/dh_t  = dL_t/dh_t  + diag(U * relu'(pre_long_{t+1})) dL/dh_{t+1}
//! dL/dhs_t = diag(S_t) W_s^T diag(relu'(pre_long_t)) dL/dh_t
//!          + W_rec^T diag(relu'(pre_short_{t+1})) dL/dhs_{t+1}
//! ```
//!
//! and the selection parameters only receive the direct per-step term through
//! `S_t`, with the min-max bounds held fixed.

use crate::cell::{
    mm_slope, readout, relu_grad, ForwardCache, Layer, LayerParams, Network, ReadoutOutput,
    Targets, Variant,
};
use crate::error::{Error, Result};
use crate::linalg::{gemm_into, spectral_norm, Mat, Op};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GradOptions {
    /// Train `b_s` with the same kernel as `w_ss`. Off reproduces the printed
    /// gradient set exactly, which leaves `b_s` untrained.
    pub selection_bias: bool,
}

impl Default for GradOptions {
    fn default() -> Self {
        GradOptions {
            selection_bias: true,
        }
    }
}

/// Gradients for one layer, shaped like its parameters, plus the gradient
/// flowing into the layer's input at every step.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads {
    pub params: LayerParams,
    pub g_x: Vec<Mat>,
}

impl LayerGrads {
    pub fn is_finite(&self) -> bool {
        self.params.is_finite() && self.g_x.iter().all(Mat::is_finite)
    }
}

/// `dL/dh_t` and `dL/dhs_t` for every step of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct StateGrads {
    pub long: Vec<Mat>,
    pub short: Vec<Mat>,
}

fn masked(g: &Mat, pre: &Mat) -> Mat {
    let mut out = g.clone();
    for (o, &p) in out.as_mut_slice().iter_mut().zip(pre.as_slice()) {
        *o *= relu_grad(p);
    }
    out
}

/// `dL/dh_t` from `dL/dh_{t+1}`; `pre_long_next` supplies the relu mask at `t + 1`.
pub fn backward_state_long(
    g_next: &Mat,
    local: Option<&Mat>,
    u: &[f64],
    pre_long_next: &Mat,
) -> Result<Mat> {
    if g_next.shape() != pre_long_next.shape() || g_next.cols() != u.len() {
        return Err(Error::shape(
            "backward_state_long",
            format!("{:?}", pre_long_next.shape()),
            format!("{:?}", g_next.shape()),
        ));
    }
    let mut out = match local {
        Some(l) => l.clone(),
        None => Mat::zeros(g_next.rows(), g_next.cols()),
    };
    for r in 0..out.rows() {
        let gn = g_next.row(r);
        let pre = pre_long_next.row(r);
        for (j, o) in out.row_mut(r).iter_mut().enumerate() {
            *o += u[j] * relu_grad(pre[j]) * gn[j];
        }
    }
    Ok(out)
}

/// Short-state recursion input: recurrent transpose applied to the masked
/// next-step gradient.
fn short_recurrent_term(
    params: &LayerParams,
    variant: Variant,
    delta_short_next: &Mat,
    out: &mut Mat,
) -> Result<()> {
    if variant.diagonal_short() {
        let d = params.w_rec.diagonal();
        for r in 0..out.rows() {
            let dn = delta_short_next.row(r);
            for (j, o) in out.row_mut(r).iter_mut().enumerate() {
                *o += d[j] * dn[j];
            }
        }
        Ok(())
    } else {
        // row-batched W_rec^T v
        gemm_into(1.0, delta_short_next, Op::N, &params.w_rec, Op::N, 1.0, out)
    }
}

/// `dL/dhs_t` from `dL/dh_t` and `dL/dhs_{t+1}`.
///
/// `g_long_t` may be `None` when the layer has no long sublayer, `g_short_next`
/// is `None` at the final step.
#[allow(clippy::too_many_arguments)]
pub fn backward_state_short(
    params: &LayerParams,
    variant: Variant,
    g_long_t: Option<&Mat>,
    s_t: &Mat,
    pre_long_t: &Mat,
    g_short_next: Option<&Mat>,
    pre_short_next: &Mat,
    local: Option<&Mat>,
) -> Result<Mat> {
    let (b, n) = match (g_long_t, g_short_next, local) {
        (Some(g), _, _) | (_, Some(g), _) | (_, _, Some(g)) => g.shape(),
        _ => {
            return Err(Error::invalid(
                "backward_state_short needs at least one incoming gradient",
            ))
        }
    };
    let mut out = match local {
        Some(l) => l.clone(),
        None => Mat::zeros(b, n),
    };
    if let Some(g_long) = g_long_t {
        let delta_long = masked(g_long, pre_long_t);
        let mut back = Mat::zeros(b, n);
        gemm_into(1.0, &delta_long, Op::N, &params.w_s, Op::N, 0.0, &mut back)?;
        for ((o, bk), s) in out
            .as_mut_slice()
            .iter_mut()
            .zip(back.as_slice())
            .zip(s_t.as_slice())
        {
            *o += s * bk;
        }
    }
    if let Some(g_next) = g_short_next {
        let delta_next = masked(g_next, pre_short_next);
        short_recurrent_term(params, variant, &delta_next, &mut out)?;
    }
    Ok(out)
}

/// State gradients for one layer given the loss gradient injected at the
/// layer output for each step (`None` means zero).
pub fn backward_states(
    layer: &Layer,
    cache: &ForwardCache,
    local: &[Option<Mat>],
) -> Result<StateGrads> {
    let steps = cache.len();
    if local.len() != steps {
        return Err(Error::shape("backward_states", steps, local.len()));
    }
    if cache.variant != layer.variant {
        return Err(Error::invalid("cache was produced by a different variant"));
    }
    let variant = layer.variant;
    let p = &layer.params;
    let mut long: Vec<Mat> = Vec::with_capacity(steps);
    let mut short: Vec<Mat> = Vec::with_capacity(steps);
    let out_is_long = variant.has_long();
    let zeros = |t: usize| {
        let (b, _) = cache.output(t).shape();
        Mat::zeros(b, p.neurons())
    };

    for t in (0..steps).rev() {
        let st = &cache.steps[t];
        let next = cache.steps.get(t + 1);
        let g_long = if variant.has_long() {
            let loc = local[t].as_ref();
            let g = match (long.last(), next) {
                (Some(g_next), Some(nx)) => backward_state_long(g_next, loc, &p.u, &nx.pre_long)?,
                _ => loc.cloned().unwrap_or_else(|| zeros(t)),
            };
            Some(g)
        } else {
            None
        };
        if variant.has_short() {
            let loc = if out_is_long { None } else { local[t].as_ref() };
            let (g_next, pre_next) = match (short.last(), next) {
                (Some(g), Some(nx)) => (Some(g), &nx.pre_short),
                _ => (None, &st.pre_short),
            };
            let g = match (g_long.as_ref(), g_next, loc) {
                (None, None, None) => zeros(t),
                (gl, gn, l) => {
                    backward_state_short(p, variant, gl, &st.s, &st.pre_long, gn, pre_next, l)?
                }
            };
            short.push(g);
        }
        if let Some(g) = g_long {
            long.push(g);
        }
    }
    long.reverse();
    short.reverse();
    Ok(StateGrads { long, short })
}

fn sum_rows_into(acc: &mut [f64], m: &Mat) {
    for r in 0..m.rows() {
        for (a, x) in acc.iter_mut().zip(m.row(r)) {
            *a += x;
        }
    }
}

/// Parameter gradients (and input gradients) from the state gradients.
///
/// Accumulation runs over steps in descending order.
pub fn accumulate_param_grads(
    layer: &Layer,
    cache: &ForwardCache,
    states: &StateGrads,
    opts: GradOptions,
) -> Result<LayerGrads> {
    let variant = layer.variant;
    let p = &layer.params;
    let n = p.neurons();
    let steps = cache.len();
    if (variant.has_long() && states.long.len() != steps)
        || (variant.has_short() && states.short.len() != steps)
    {
        return Err(Error::shape(
            "accumulate_param_grads",
            steps,
            states.long.len().max(states.short.len()),
        ));
    }
    let mut g = LayerParams::zeros(p.inputs(), n);
    let mut g_x: Vec<Mat> = Vec::with_capacity(steps);
    let mut diag_rec = vec![0.0; n];

    for t in (0..steps).rev() {
        let st = &cache.steps[t];
        let prev = t.checked_sub(1).map(|k| &cache.steps[k]);
        let b = st.x.rows();
        let mut gx = Mat::zeros(b, p.inputs());

        if variant.has_long() {
            let delta_long = masked(&states.long[t], &st.pre_long);
            sum_rows_into(&mut g.b_long, &delta_long);
            if let Some(pv) = prev {
                for r in 0..b {
                    let h_prev = pv.h_long.row(r);
                    for ((gu, d), h) in g.u.iter_mut().zip(delta_long.row(r)).zip(h_prev) {
                        *gu += d * h;
                    }
                }
            }
            if variant.has_short() {
                gemm_into(1.0, &delta_long, Op::T, &st.i, Op::N, 1.0, &mut g.w_s)?;
                if variant.has_selection() {
                    let mut back = Mat::zeros(b, n);
                    gemm_into(1.0, &delta_long, Op::N, &p.w_s, Op::N, 0.0, &mut back)?;
                    let mut kernel = Mat::zeros(b, n);
                    for r in 0..b {
                        let slope = mm_slope(st.mm_min[r], st.mm_max[r]);
                        let lo = st.mm_min[r];
                        let hs = st.h_short.row(r);
                        let sel = st.sel_pre.row(r);
                        let bk = back.row(r);
                        for (j, k) in kernel.row_mut(r).iter_mut().enumerate() {
                            let mm = (sel[j] - lo) * slope;
                            let gate = relu_grad(mm - p.b_thre);
                            let a = bk[j] * hs[j] * gate;
                            g.b_thre -= a;
                            *k = a * slope;
                        }
                    }
                    gemm_into(1.0, &kernel, Op::T, &st.h_short, Op::N, 1.0, &mut g.w_ss)?;
                    if let Some(pv) = prev {
                        gemm_into(1.0, &kernel, Op::T, &pv.h_long, Op::N, 1.0, &mut g.w_ls)?;
                    }
                    if opts.selection_bias {
                        sum_rows_into(&mut g.b_s, &kernel);
                    }
                }
            } else {
                gemm_into(1.0, &delta_long, Op::T, &st.x, Op::N, 1.0, &mut g.w_in)?;
                gemm_into(1.0, &delta_long, Op::N, &p.w_in, Op::N, 0.0, &mut gx)?;
            }
        }

        if variant.has_short() {
            let delta_short = masked(&states.short[t], &st.pre_short);
            sum_rows_into(&mut g.b_short, &delta_short);
            if let Some(pv) = prev {
                if variant.diagonal_short() {
                    for r in 0..b {
                        for ((a, d), h) in diag_rec
                            .iter_mut()
                            .zip(delta_short.row(r))
                            .zip(pv.h_short.row(r))
                        {
                            *a += d * h;
                        }
                    }
                } else {
                    gemm_into(
                        1.0,
                        &delta_short,
                        Op::T,
                        &pv.h_short,
                        Op::N,
                        1.0,
                        &mut g.w_rec,
                    )?;
                }
            }
            gemm_into(1.0, &delta_short, Op::T, &st.x, Op::N, 1.0, &mut g.w_in)?;
            gemm_into(1.0, &delta_short, Op::N, &p.w_in, Op::N, 0.0, &mut gx)?;
        }
        g_x.push(gx);
    }
    if variant.diagonal_short() {
        g.w_rec = Mat::diag(&diag_rec);
    }
    g_x.reverse();

    let grads = LayerGrads { params: g, g_x };
    if !grads.params.is_finite() {
        let kind = crate::cell::ParamKind::ALL
            .into_iter()
            .find(|&k| grads.params.get(k).iter().any(|x| !x.is_finite()))
            .expect("some parameter is non-finite");
        return Err(Error::NonFinite {
            what: format!("gradient of {}", kind.name()),
            layer: 0,
            step: 0,
        });
    }
    Ok(grads)
}

/// Full backward pass over stacked layers.
///
/// `top` holds the loss gradient at the top layer's output for each step
/// (`None` for steps without a loss). Each layer's input gradient becomes
/// the injected output gradient of the layer below.
pub fn backward_sequence(
    layers: &[Layer],
    caches: &[ForwardCache],
    top: Vec<Option<Mat>>,
    opts: GradOptions,
) -> Result<Vec<LayerGrads>> {
    if layers.len() != caches.len() {
        return Err(Error::shape(
            "backward_sequence",
            layers.len(),
            caches.len(),
        ));
    }
    let mut out: Vec<LayerGrads> = Vec::with_capacity(layers.len());
    let mut local = top;
    for (li, (layer, cache)) in layers.iter().zip(caches).enumerate().rev() {
        let states = backward_states(layer, cache, &local)?;
        let grads = accumulate_param_grads(layer, cache, &states, opts).map_err(|e| match e {
            Error::NonFinite { what, step, .. } => Error::NonFinite {
                what,
                layer: li,
                step,
            },
            other => other,
        })?;
        local = grads.g_x.iter().cloned().map(Some).collect();
        out.push(grads);
    }
    out.reverse();
    Ok(out)
}

/// Gradients of the whole network, including the readout head.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkGrads {
    pub layers: Vec<LayerGrads>,
    pub w_out: Mat,
    pub b_out: Vec<f64>,
}

/// Forward, readout on the final step, and backward in one call.
pub fn network_gradients(
    net: &Network,
    inputs: &[Mat],
    targets: &Targets,
    opts: GradOptions,
) -> Result<(ReadoutOutput, NetworkGrads)> {
    let caches = net.forward(inputs)?;
    let steps = inputs.len();
    let top = caches.last().expect("at least one layer");
    let out = readout(net.head, &net.readout, top.output(steps - 1), targets)?;
    let mut inject: Vec<Option<Mat>> = vec![None; steps];
    inject[steps - 1] = Some(out.grad_h.clone());
    let layers = backward_sequence(&net.layers, &caches, inject, opts)?;
    let grads = NetworkGrads {
        layers,
        w_out: out.grad_w_out.clone(),
        b_out: out.grad_b_out.clone(),
    };
    Ok((out, grads))
}

/// Jacobian norms along one recorded trajectory, see [`grad_norm_probe`].
#[derive(Clone, Debug, PartialEq)]
pub struct NormProbe {
    /// `||dh_t / dh_{t-k}||_2` for `k = 1..=span`.
    pub long: Vec<f64>,
    /// `||dh_t / dhs_{t-k}||_2` for `k = 1..=span`; empty without both sublayers.
    pub cross: Vec<f64>,
    /// `||dS_j||_2` for the steps `j` inside the probed window, oldest first.
    pub ds: Vec<f64>,
}

impl NormProbe {
    pub fn max_ds(&self) -> f64 {
        self.ds.iter().cloned().fold(0.0, f64::max)
    }
}

/// `dS_j = diag(S_j) W_s^T diag(relu'(pre_long_j))` for sequence `sample`.
fn ds_matrix(p: &LayerParams, cache: &ForwardCache, j: usize, sample: usize) -> Mat {
    let st = &cache.steps[j];
    let n = p.neurons();
    let s = st.s.row(sample);
    let pre = st.pre_long.row(sample);
    Mat::from_fn(n, n, |r, c| s[r] * p.w_s[(c, r)] * relu_grad(pre[c]))
}

/// Multiplies the one-step truncated Jacobians back from the final step `t`
/// of sequence `sample` and reports their spectral norms.
///
/// Step `t - k` may reach `-1`, the zero initial state, so `span <= t + 1`.
pub fn grad_norm_probe(
    layer: &Layer,
    cache: &ForwardCache,
    sample: usize,
    t: usize,
    span: usize,
) -> Result<NormProbe> {
    let variant = layer.variant;
    let p = &layer.params;
    let n = p.neurons();
    if t >= cache.len() || span > t + 1 {
        return Err(Error::invalid(format!(
            "probe window of {span} steps ending at {t} exceeds the {}-step trajectory",
            cache.len()
        )));
    }
    if sample >= cache.output(t).rows() {
        return Err(Error::invalid(format!("sample {sample} out of range")));
    }
    let mut long = Vec::with_capacity(span);
    let mut cross = Vec::new();
    let mut ds = Vec::new();
    if !variant.has_long() {
        return Err(Error::invalid("norm probe needs a long sublayer"));
    }

    // diagonal of prod_{i=j+1}^{t} diag(U * relu'(pre_long_i)), for j = t - k
    let mut long_diag = vec![1.0; n];
    // per-step long products for the cross recursion, indexed by j
    let mut long_at: Vec<Vec<f64>> = vec![Vec::new(); t + 1];
    long_at[t] = long_diag.clone();
    for k in 1..=span {
        let i = t + 1 - k;
        let pre = cache.steps[i].pre_long.row(sample);
        for (d, (&u, &x)) in long_diag.iter_mut().zip(p.u.iter().zip(pre)) {
            *d *= u * relu_grad(x);
        }
        long.push(long_diag.iter().fold(0.0f64, |m, x| m.max(x.abs())));
        if i >= 1 {
            long_at[i - 1] = long_diag.clone();
        }
    }

    if variant.has_short() {
        // g = (dh_t / dhs_j)^T, built from j = t downwards; j = -1 is the
        // initial state, which has no selection term.
        let mut g = Mat::zeros(n, n);
        let mut j = t as isize;
        let lowest = t as isize - span as isize;
        while j >= lowest {
            let ju = j as usize;
            // recurrent term from j + 1
            if j < t as isize {
                let pre_next = cache.steps[(j + 1) as usize].pre_short.row(sample);
                let mut masked_g = g.clone();
                for r in 0..n {
                    let m = relu_grad(pre_next[r]);
                    masked_g.row_mut(r).iter_mut().for_each(|x| *x *= m);
                }
                let mut next = Mat::zeros(n, n);
                if variant.diagonal_short() {
                    let d = p.w_rec.diagonal();
                    for r in 0..n {
                        for c in 0..n {
                            next[(r, c)] = d[r] * masked_g[(r, c)];
                        }
                    }
                } else {
                    gemm_into(1.0, &p.w_rec, Op::T, &masked_g, Op::N, 0.0, &mut next)?;
                }
                g = next;
            }
            if j >= 0 {
                let d = ds_matrix(p, cache, ju, sample);
                ds.push(spectral_norm(&d)?);
                let lp = &long_at[ju];
                for r in 0..n {
                    for c in 0..n {
                        g[(r, c)] += d[(r, c)] * lp[c];
                    }
                }
            }
            if j < t as isize {
                cross.push(spectral_norm(&g)?);
            }
            j -= 1;
        }
        ds.reverse();
    }
    Ok(NormProbe { long, cross, ds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cell::{forward_sequence, ConstraintSpec, LayerParams};
    use crate::linalg::SeededRng;

    #[test]
    fn long_recursion_boundaries() {
        let g_next = Mat::zeros(1, 3);
        let local = Mat::row_vector(&[1.0, -2.0, 3.0]);
        let pre = Mat::filled(1, 3, 1.0);
        let g = backward_state_long(&g_next, Some(&local), &[0.5; 3], &pre).unwrap();
        assert_eq!(g, local);

        let g_next = Mat::row_vector(&[0.3, 0.1, -0.7]);
        let g = backward_state_long(&g_next, None, &[1.0; 3], &pre).unwrap();
        assert_eq!(g, g_next);

        let dead = Mat::filled(1, 3, -1.0);
        let g = backward_state_long(&g_next, None, &[1.0; 3], &dead).unwrap();
        assert!(g.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn short_recursion_identity_and_gated() {
        let mut p = LayerParams::zeros(1, 3);
        p.w_s = Mat::identity(3);
        let g_long = Mat::row_vector(&[0.2, -0.4, 0.9]);
        let ones = Mat::filled(1, 3, 1.0);
        let g = backward_state_short(
            &p,
            Variant::Durnn,
            Some(&g_long),
            &ones,
            &ones,
            None,
            &ones,
            None,
        )
        .unwrap();
        assert_eq!(g, g_long);

        let zeros = Mat::zeros(1, 3);
        let g = backward_state_short(
            &p,
            Variant::Durnn,
            Some(&g_long),
            &zeros,
            &ones,
            None,
            &ones,
            None,
        )
        .unwrap();
        assert!(g.as_slice().iter().all(|&x| x == 0.0));
    }

    fn random_layer(rng: &mut SeededRng, m: usize, n: usize, variant: Variant) -> Layer {
        let spec = ConstraintSpec::from_horizon(0.5, 2.0, 0.8, 4).unwrap();
        let mut p = LayerParams::init(m, n, variant, &spec, rng).unwrap();
        for x in p
            .b_short
            .iter_mut()
            .chain(p.b_long.iter_mut())
            .chain(p.b_s.iter_mut())
        {
            *x = rng.uniform_range(-0.3, 0.3);
        }
        Layer {
            variant,
            constraint: spec,
            params: p,
        }
    }

    #[test]
    fn zero_loss_gives_zero_grads() {
        let mut rng = SeededRng::new(3);
        for v in Variant::ALL {
            let layer = random_layer(&mut rng, 2, 3, v);
            let inputs: Vec<Mat> = (0..4)
                .map(|_| Mat::from_fn(2, 2, |_, _| rng.uniform()))
                .collect();
            let caches = forward_sequence(std::slice::from_ref(&layer), &inputs).unwrap();
            let g = backward_sequence(
                std::slice::from_ref(&layer),
                &caches,
                vec![None; 4],
                GradOptions::default(),
            )
            .unwrap();
            for k in crate::cell::ParamKind::ALL {
                assert!(g[0].params.get(k).iter().all(|&x| x == 0.0), "{v} {k:?}");
            }
        }
    }

    #[test]
    fn g_u_matches_unrolled_product() {
        // single layer, loss only at the final step: dL/dh_t = prod diag(U relu') g_L
        let mut rng = SeededRng::new(8);
        let layer = random_layer(&mut rng, 2, 3, Variant::Durnn);
        let steps = 5;
        let inputs: Vec<Mat> = (0..steps)
            .map(|_| Mat::from_fn(1, 2, |_, _| rng.uniform()))
            .collect();
        let caches = forward_sequence(std::slice::from_ref(&layer), &inputs).unwrap();
        let g_top = Mat::row_vector(&[0.4, -1.1, 0.6]);
        let mut top = vec![None; steps];
        top[steps - 1] = Some(g_top.clone());
        let g = backward_sequence(
            std::slice::from_ref(&layer),
            &caches,
            top,
            GradOptions::default(),
        )
        .unwrap();

        let c = &caches[0];
        let p = &layer.params;
        let mut expected = [0.0; 3];
        for t in 1..steps {
            for j in 0..3 {
                let mut d = g_top[(0, j)];
                for i in (t + 1)..steps {
                    d *= p.u[j] * relu_grad(c.steps[i].pre_long[(0, j)]);
                }
                expected[j] +=
                    relu_grad(c.steps[t].pre_long[(0, j)]) * d * c.steps[t - 1].h_long[(0, j)];
            }
        }
        for j in 0..3 {
            assert!((g[0].params.u[j] - expected[j]).abs() < 1e-14);
        }
    }

    #[test]
    fn scaling_is_linear() {
        let mut rng = SeededRng::new(21);
        let layers = vec![
            random_layer(&mut rng, 2, 3, Variant::Durnn),
            random_layer(&mut rng, 3, 3, Variant::Durnn),
        ];
        let inputs: Vec<Mat> = (0..4)
            .map(|_| Mat::from_fn(2, 2, |_, _| rng.uniform()))
            .collect();
        let caches = forward_sequence(&layers, &inputs).unwrap();
        let top: Vec<Option<Mat>> = (0..4)
            .map(|_| Some(Mat::from_fn(2, 3, |_, _| rng.gaussian())))
            .collect();
        let scaled: Vec<Option<Mat>> = top
            .iter()
            .map(|m| m.as_ref().map(|m| m.map(|x| x * 4.0)))
            .collect();
        let a = backward_sequence(&layers, &caches, top, GradOptions::default()).unwrap();
        let b = backward_sequence(&layers, &caches, scaled, GradOptions::default()).unwrap();
        for (la, lb) in a.iter().zip(&b) {
            for k in crate::cell::ParamKind::ALL {
                for (x, y) in la.params.get(k).iter().zip(lb.params.get(k)) {
                    assert_eq!(x * 4.0, *y);
                }
            }
        }
    }

    #[test]
    fn probe_unit_recurrence_has_unit_norm() {
        let mut p = LayerParams::zeros(1, 3);
        p.u = vec![1.0; 3];
        p.b_long = vec![1.0; 3];
        let layer = Layer {
            variant: Variant::Durnn,
            constraint: ConstraintSpec::standard(10, true),
            params: p,
        };
        let inputs: Vec<Mat> = (0..10).map(|_| Mat::zeros(1, 1)).collect();
        let caches = forward_sequence(std::slice::from_ref(&layer), &inputs).unwrap();
        let probe = grad_norm_probe(&layer, &caches[0], 0, 9, 10).unwrap();
        assert_eq!(probe.long.len(), 10);
        assert!(probe.long.iter().all(|&x| x == 1.0));
        assert_eq!(probe.cross.len(), 10);
    }
}
