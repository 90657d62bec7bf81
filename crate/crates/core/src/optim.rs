//! Adam with bias correction, the learning-rate schedule, and projection of
//! every layer back onto its feasible set after each update.

use crate::cell::{Layer, LayerParams, Network, ParamKind, Variant};
use crate::error::{Error, Result};
use crate::grad::NetworkGrads;
use crate::linalg::{clip_singular_values, Mat};
use crate::ConstraintSpec;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS_HAT: f64 = 1e-8;

/// Adam moments for a fixed list of tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_hat: f64,
}

impl AdamState {
    pub fn new(sizes: &[usize]) -> Self {
        AdamState {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step_count: 0,
            beta1: BETA1,
            beta2: BETA2,
            eps_hat: EPS_HAT,
        }
    }

    pub fn for_network(net: &Network) -> Self {
        AdamState::new(&network_tensor_sizes(net))
    }

    /// One Adam update of `params` with learning rate `lr`.
    pub fn step(&mut self, lr: f64, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(
                "adam_step",
                self.m.len(),
                params.len().min(grads.len()),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != self.m[i].len() {
                return Err(Error::shape("adam_step tensor", self.m[i].len(), p.len()));
            }
            if let Some(pos) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    what: format!("gradient tensor {i} entry {pos}"),
                    layer: 0,
                    step: self.step_count as usize,
                });
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..p.len() {
                let gj = g[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p[j] -= lr * m_hat / (v_hat.sqrt() + self.eps_hat);
            }
            if p.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    what: format!("parameter tensor {i} after update"),
                    layer: 0,
                    step: self.step_count as usize,
                });
            }
        }
        Ok(())
    }

    /// Updates every layer tensor and the readout, in [`network_tensor_names`] order.
    pub fn step_network(&mut self, lr: f64, net: &mut Network, grads: &NetworkGrads) -> Result<()> {
        if grads.layers.len() != net.layers.len() {
            return Err(Error::shape(
                "adam_step",
                net.layers.len(),
                grads.layers.len(),
            ));
        }
        let mut params: Vec<&mut [f64]> = Vec::new();
        let mut gs: Vec<&[f64]> = Vec::new();
        let Network {
            layers, readout, ..
        } = net;
        for (layer, g) in layers.iter_mut().zip(&grads.layers) {
            let LayerParams {
                w_in,
                w_rec,
                b_short,
                w_ss,
                w_ls,
                b_s,
                b_thre,
                w_s,
                u,
                b_long,
            } = &mut layer.params;
            params.extend([
                w_in.as_mut_slice(),
                w_rec.as_mut_slice(),
                b_short.as_mut_slice(),
                w_ss.as_mut_slice(),
                w_ls.as_mut_slice(),
                b_s.as_mut_slice(),
                std::slice::from_mut(b_thre),
                w_s.as_mut_slice(),
                u.as_mut_slice(),
                b_long.as_mut_slice(),
            ]);
            gs.extend(ParamKind::ALL.iter().map(|&k| g.params.get(k)));
        }
        params.push(readout.w_out.as_mut_slice());
        params.push(readout.b_out.as_mut_slice());
        gs.push(grads.w_out.as_slice());
        gs.push(&grads.b_out);
        self.step(lr, &mut params, &gs)
    }
}

/// Tensor sizes in the order used by [`AdamState::step_network`].
pub fn network_tensor_sizes(net: &Network) -> Vec<usize> {
    let mut sizes = Vec::new();
    for layer in &net.layers {
        sizes.extend(ParamKind::ALL.iter().map(|&k| layer.params.get(k).len()));
    }
    sizes.push(net.readout.w_out.as_slice().len());
    sizes.push(net.readout.b_out.len());
    sizes
}

/// Stable names matching [`network_tensor_sizes`], e.g. `layer.1.w_rec`.
pub fn network_tensor_names(net: &Network) -> Vec<String> {
    let mut names = Vec::new();
    for li in 0..net.layers.len() {
        names.extend(
            ParamKind::ALL
                .iter()
                .map(|k| format!("layer.{}.{}", li + 1, k.name())),
        );
    }
    names.push("readout.w_out".into());
    names.push("readout.b_out".into());
    names
}

/// Moves `params` onto the feasible set of `spec`: singular values of `w_rec`
/// clipped to `delta` (or, for the diagonal short recurrence, its diagonal
/// clamped like `U`), `U` clamped entrywise, and the threshold clamped.
pub fn project_constraints(
    params: &mut LayerParams,
    variant: Variant,
    spec: &ConstraintSpec,
) -> Result<()> {
    spec.validate()?;
    if variant.diagonal_short() {
        let d: Vec<f64> = params
            .w_rec
            .diagonal()
            .into_iter()
            .map(|x| x.clamp(spec.u_low, spec.u_high))
            .collect();
        params.w_rec = Mat::diag(&d);
    } else {
        params.w_rec = clip_singular_values(&params.w_rec, spec.delta)?;
    }
    for x in params.u.iter_mut() {
        *x = x.clamp(spec.u_low, spec.u_high);
    }
    params.b_thre = params.b_thre.clamp(spec.thre_low, spec.thre_high);
    Ok(())
}

pub fn project_layer(layer: &mut Layer) -> Result<()> {
    let spec = layer.constraint;
    project_constraints(&mut layer.params, layer.variant, &spec)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LrMode {
    /// Multiply by the decay factor every `every` iterations.
    Fixed { every: u64 },
    /// Multiply by the decay factor after `patience` evaluations without improvement.
    Plateau { patience: u32 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub initial_lr: f64,
    pub decay_factor: f64,
    pub mode: LrMode,
    best: f64,
    stale: u32,
    decays: u32,
}

impl LrSchedule {
    pub fn new(initial_lr: f64, decay_factor: f64, mode: LrMode) -> Result<Self> {
        if !(initial_lr > 0.0) {
            return Err(Error::invalid(format!(
                "initial learning rate must be positive, got {initial_lr}"
            )));
        }
        if !(decay_factor > 0.0 && decay_factor < 1.0) {
            return Err(Error::invalid(format!(
                "decay factor must lie in (0, 1), got {decay_factor}"
            )));
        }
        if let LrMode::Fixed { every: 0 } = mode {
            return Err(Error::invalid("decay interval must be positive"));
        }
        Ok(LrSchedule {
            initial_lr,
            decay_factor,
            mode,
            best: f64::INFINITY,
            stale: 0,
            decays: 0,
        })
    }

    /// Learning rate at `iteration`, feeding `metric` to the plateau detector
    /// when one is given.
    pub fn lr(&mut self, iteration: u64, metric: Option<f64>) -> f64 {
        match self.mode {
            LrMode::Fixed { every } => {
                let k = (iteration / every).min(i32::MAX as u64) as i32;
                self.initial_lr * self.decay_factor.powi(k)
            }
            LrMode::Plateau { patience } => {
                if let Some(m) = metric {
                    if m < self.best {
                        self.best = m;
                        self.stale = 0;
                    } else {
                        self.stale += 1;
                        if self.stale >= patience {
                            self.decays += 1;
                            self.stale = 0;
                        }
                    }
                }
                self.initial_lr * self.decay_factor.powi(self.decays as i32)
            }
        }
    }

    /// Plateau detector state `(best, stale, decays)` for checkpoints.
    pub fn plateau_state(&self) -> (f64, u32, u32) {
        (self.best, self.stale, self.decays)
    }

    pub fn restore_plateau_state(&mut self, best: f64, stale: u32, decays: u32) {
        self.best = best;
        self.stale = stale;
        self.decays = decays;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::spectral_norm;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut adam = AdamState::new(&[3]);
        let mut p = vec![0.5, -1.0, 2.0];
        let before = p.clone();
        adam.step(2e-4, &mut [&mut p], &[&[0.0; 3]]).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_size() {
        let mut adam = AdamState::new(&[1]);
        let mut p = vec![0.0];
        adam.step(2e-4, &mut [&mut p], &[&[1.0]]).unwrap();
        let expected = -2e-4 * (1.0 / (1.0 + 1e-8));
        assert!((p[0] - expected).abs() < 1e-18);
    }

    #[test]
    fn descends_a_parabola() {
        let mut adam = AdamState::new(&[1]);
        let mut theta = vec![1.0];
        for it in 0..1000 {
            let g = 2.0 * theta[0];
            let before = theta[0];
            adam.step(1e-2, &mut [&mut theta], &[&[g]]).unwrap();
            if it < 50 {
                // far from the optimum every step moves downhill by about lr
                let moved = before - theta[0];
                assert!(moved > 0.5e-2 && moved < 1.1e-2, "step {it}: {moved}");
            }
        }
        assert!(theta[0].abs() < 0.05);
    }

    #[test]
    fn rejects_non_finite_gradient() {
        let mut adam = AdamState::new(&[1]);
        let mut p = vec![0.0];
        assert!(adam.step(1e-3, &mut [&mut p], &[&[f64::NAN]]).is_err());
    }

    #[test]
    fn projection_examples() {
        let spec = ConstraintSpec::standard(100, true);
        let mut p = LayerParams::zeros(2, 3);
        p.u = vec![2.5, 0.0, 1.0];
        p.b_thre = -0.3;
        p.w_rec = Mat::identity(3);
        project_constraints(&mut p, Variant::Durnn, &spec).unwrap();
        assert!((p.u[0] - 2f64.powf(0.01)).abs() < 1e-15);
        assert!((p.u[0] - 1.00696).abs() < 1e-5);
        assert_eq!(p.u[1], spec.u_low);
        assert_eq!(p.u[2], 1.0);
        assert_eq!(p.b_thre, 0.0);
        assert!(spectral_norm(&p.w_rec).unwrap() <= spec.delta + 1e-10);

        let again = {
            let mut q = p.clone();
            project_constraints(&mut q, Variant::Durnn, &spec).unwrap();
            q
        };
        assert!(again.w_rec.sub(&p.w_rec).unwrap().frobenius() < 1e-10);
        assert_eq!(again.u, p.u);
    }

    #[test]
    fn standard_bounds_for_100_steps() {
        let spec = ConstraintSpec::standard(100, true);
        assert!((spec.u_low - 0.993093).abs() < 1e-6);
        assert!((spec.u_high - 1.006956).abs() < 1e-6);
        assert!((spec.delta - 0.993093).abs() < 1e-6);
        assert_eq!(ConstraintSpec::standard(100, false).u_low, 0.0);
    }

    #[test]
    fn fixed_schedule() {
        let mut s = LrSchedule::new(2e-4, 0.1, LrMode::Fixed { every: 20000 }).unwrap();
        assert_eq!(s.lr(0, None), 2e-4);
        assert!((s.lr(20000, None) - 2e-5).abs() < 1e-18);
        assert!((s.lr(39999, None) - 2e-5).abs() < 1e-18);
        assert!((s.lr(40000, None) - 2e-6).abs() < 1e-19);
    }

    #[test]
    fn plateau_schedule() {
        let mut s = LrSchedule::new(1.0, 0.5, LrMode::Plateau { patience: 2 }).unwrap();
        assert_eq!(s.lr(0, Some(1.0)), 1.0);
        assert_eq!(s.lr(1, Some(0.9)), 1.0);
        assert_eq!(s.lr(2, Some(0.95)), 1.0);
        assert_eq!(s.lr(3, Some(0.91)), 0.5);
        assert_eq!(s.lr(4, None), 0.5);
        assert!(LrSchedule::new(0.0, 0.5, LrMode::Plateau { patience: 1 }).is_err());
        assert!(LrSchedule::new(1.0, 1.5, LrMode::Plateau { patience: 1 }).is_err());
    }
}
