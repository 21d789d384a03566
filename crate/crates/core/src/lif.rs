//! Discrete-time leaky integrate-and-fire neurons with soft reset.
//!
//! Membrane update per step:
//!
//! ```text
//! u[t] = gamma * u[t-1] + I[t] - s[t-1] * v_th
//! s[t] = H(u[t] - v_th)          (spike when u[t] >= v_th)
//! ```
//!
//! The forward pass always uses the hard threshold. Backpropagation through
//! time replaces `ds/du` with the arctangent surrogate
//! `g(z) = (alpha / 2) / (1 + (pi * alpha * z / 2)^2)`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LifParams {
    /// Leak coefficient, in (0, 1).
    pub gamma: f64,
    /// Firing threshold.
    pub v_th: f64,
    /// Surrogate slope.
    pub alpha: f64,
    /// Stop the gradient through the `-s[t-1] * v_th` reset term.
    pub detach_reset: bool,
}

impl Default for LifParams {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            v_th: 1.0,
            alpha: 2.0,
            detach_reset: false,
        }
    }
}

impl LifParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::invalid("lif.gamma", format!("{} not in (0, 1)", self.gamma)));
        }
        if !(self.v_th > 0.0 && self.v_th.is_finite()) {
            return Err(Error::invalid("lif.v_th", format!("{} must be > 0", self.v_th)));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid("lif.alpha", format!("{} must be > 0", self.alpha)));
        }
        Ok(())
    }
}

/// How `s` is computed from `u - v_th` in the forward pass.
///
/// `Heaviside` is the model. `SmoothArctan` replaces the step with the
/// antiderivative of the surrogate, `1/2 + atan(pi * alpha * z / 2) / pi`, so
/// that the surrogate becomes the exact derivative; it exists so the BPTT
/// recurrence can be checked against finite differences.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Firing {
    #[default]
    Heaviside,
    SmoothArctan,
}

#[inline]
pub(crate) fn membrane<R: Real>(u_prev: R, current: R, s_prev: R, gamma: R, v_th: R) -> R {
    gamma * u_prev + current - s_prev * v_th
}

#[inline]
fn fire<R: Real>(u: R, v_th: R, alpha: R, firing: Firing) -> R {
    match firing {
        Firing::Heaviside => {
            if u >= v_th {
                R::one()
            } else {
                R::zero()
            }
        }
        Firing::SmoothArctan => {
            let pi = R::lit(PI);
            R::lit(0.5) + (pi * alpha * (u - v_th) / R::lit(2.0)).atan() / pi
        }
    }
}

/// Arctangent surrogate for `ds/du` evaluated at `z = u - v_th`.
#[inline]
pub fn surrogate<R: Real>(z: R, alpha: R) -> R {
    let k = R::lit(PI) * alpha * z / R::lit(2.0);
    alpha / R::lit(2.0) / (R::one() + k * k)
}

/// Elementwise surrogate over a tensor of `u - v_th` values.
pub fn surrogate_grad<R: Real>(u_minus_vth: &Tensor<R>, alpha: f64) -> Tensor<R> {
    let a = R::lit(alpha);
    u_minus_vth.map(|z| surrogate(z, a))
}

/// Membrane potentials and previous-step spikes, `[batch, neurons]` each.
#[derive(Clone, Debug, PartialEq)]
pub struct LifState<R> {
    pub u: Tensor<R>,
    pub s_prev: Tensor<R>,
}

impl<R: Real> LifState<R> {
    pub fn zeros(batch: usize, neurons: usize) -> Self {
        Self {
            u: Tensor::zeros(&[batch, neurons]),
            s_prev: Tensor::zeros(&[batch, neurons]),
        }
    }
}

/// One LIF time step. Returns the emitted spikes and the next state.
pub fn lif_step<R: Real>(
    state: &LifState<R>,
    current: &Tensor<R>,
    params: &LifParams,
) -> Result<(Tensor<R>, LifState<R>)> {
    params.validate()?;
    if current.shape() != state.u.shape() || state.s_prev.shape() != state.u.shape() {
        return Err(Error::shape(
            "lif_step",
            format!(
                "current {:?}, u {:?}, s_prev {:?}",
                current.shape(),
                state.u.shape(),
                state.s_prev.shape()
            ),
        ));
    }
    if !current.is_finite() {
        return Err(Error::NonFinite { op: "lif_step" });
    }
    let (gamma, v_th, alpha) = (R::lit(params.gamma), R::lit(params.v_th), R::lit(params.alpha));
    let mut u = state.u.clone();
    let mut s = state.s_prev.clone();
    for (((u, s), &i), &sp) in u
        .data_mut()
        .iter_mut()
        .zip(s.data_mut().iter_mut())
        .zip(current.data())
        .zip(state.s_prev.data())
    {
        *u = membrane(*u, i, sp, gamma, v_th);
        *s = fire(*u, v_th, alpha, Firing::Heaviside);
    }
    let next = LifState { u, s_prev: s.clone() };
    Ok((s, next))
}

/// Forward record of an unrolled LIF layer, kept for backpropagation.
#[derive(Clone, Debug)]
pub struct LifTrace<R> {
    pub steps: usize,
    pub width: usize,
    /// Membrane potentials, `[steps, width]` row-major.
    pub u: Vec<R>,
    /// Emitted spikes, `[steps, width]` row-major.
    pub spikes: Vec<R>,
    firing: Firing,
}

impl<R: Real> LifTrace<R> {
    pub fn firing(&self) -> Firing {
        self.firing
    }
}

/// Gradients from [`backward`].
#[derive(Clone, Debug)]
pub struct LifGrads<R> {
    /// `dL/dI[t]`, `[steps, width]`.
    pub currents: Vec<R>,
    /// `dL/du[-1]`.
    pub u0: Vec<R>,
    /// `dL/ds[-1]`.
    pub s0: Vec<R>,
}

/// Run `steps` LIF updates over time-major `currents` of length `steps * width`.
///
/// `init` defaults to zero membrane and no prior spikes.
pub fn unroll<R: Real>(
    currents: &[R],
    steps: usize,
    params: &LifParams,
    firing: Firing,
    init: Option<(&[R], &[R])>,
) -> Result<LifTrace<R>> {
    if steps == 0 || !currents.len().is_multiple_of(steps) {
        return Err(Error::shape(
            "lif",
            format!("{} currents not divisible into {steps} steps", currents.len()),
        ));
    }
    let width = currents.len() / steps;
    let (gamma, v_th, alpha) = (R::lit(params.gamma), R::lit(params.v_th), R::lit(params.alpha));
    let mut u = vec![R::zero(); currents.len()];
    let mut spikes = vec![R::zero(); currents.len()];
    let zero = vec![R::zero(); width];
    let (u0, s0) = match init {
        Some((u0, s0)) if u0.len() == width && s0.len() == width => (u0, s0),
        Some(_) => return Err(Error::shape("lif", "initial state width")),
        None => (&zero[..], &zero[..]),
    };
    for t in 0..steps {
        let (u_prev, s_prev): (&[R], &[R]) = if t == 0 {
            (u0, s0)
        } else {
            (&u[(t - 1) * width..t * width], &spikes[(t - 1) * width..t * width])
        };
        let mut u_t = Vec::with_capacity(width);
        let mut s_t = Vec::with_capacity(width);
        for i in 0..width {
            let v = membrane(u_prev[i], currents[t * width + i], s_prev[i], gamma, v_th);
            u_t.push(v);
            s_t.push(fire(v, v_th, alpha, firing));
        }
        u[t * width..(t + 1) * width].copy_from_slice(&u_t);
        spikes[t * width..(t + 1) * width].copy_from_slice(&s_t);
    }
    if u.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "lif" });
    }
    Ok(LifTrace {
        steps,
        width,
        u,
        spikes,
        firing,
    })
}

/// Backpropagation through time given `dL/ds[t]` for every step.
pub fn backward<R: Real>(trace: &LifTrace<R>, spike_grads: &[R], params: &LifParams) -> Result<LifGrads<R>> {
    if spike_grads.len() != trace.u.len() {
        return Err(Error::shape(
            "lif backward",
            format!("{} upstream grads for {} states", spike_grads.len(), trace.u.len()),
        ));
    }
    let (gamma, v_th, alpha) = (R::lit(params.gamma), R::lit(params.v_th), R::lit(params.alpha));
    let w = trace.width;
    let mut d_current = vec![R::zero(); trace.u.len()];
    // dL/du[t+1], carried backwards.
    let mut du_next = vec![R::zero(); w];
    for t in (0..trace.steps).rev() {
        for i in 0..w {
            let k = t * w + i;
            let mut ds = spike_grads[k];
            if !params.detach_reset {
                ds = ds - v_th * du_next[i];
            }
            let du = ds * surrogate(trace.u[k] - v_th, alpha) + gamma * du_next[i];
            d_current[k] = du;
        }
        du_next.copy_from_slice(&d_current[t * w..(t + 1) * w]);
    }
    let u0 = du_next.iter().map(|&d| gamma * d).collect();
    let s0 = if params.detach_reset {
        vec![R::zero(); w]
    } else {
        du_next.iter().map(|&d| R::zero() - v_th * d).collect()
    };
    Ok(LifGrads {
        currents: d_current,
        u0,
        s0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(gamma: f64, v_th: f64) -> LifParams {
        LifParams {
            gamma,
            v_th,
            ..LifParams::default()
        }
    }

    #[test]
    fn constant_current_worked_example() {
        let tr = unroll(&[0.6f64; 4], 4, &p(0.5, 1.0), Firing::Heaviside, None).unwrap();
        let expect_u = [0.6, 0.9, 1.05, 0.125];
        for (a, b) in tr.u.iter().zip(expect_u) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        assert_eq!(tr.spikes, vec![0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn zero_input_never_spikes() {
        let tr = unroll(&[0.0f32; 64], 16, &p(0.9, 0.5), Firing::Heaviside, None).unwrap();
        assert!(tr.spikes.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn threshold_is_inclusive() {
        for gamma in [0.1, 0.5, 0.99] {
            let st = LifState::<f64>::zeros(1, 1);
            let cur = Tensor::full(&[1, 1], 1.0);
            let (s, next) = lif_step(&st, &cur, &p(gamma, 1.0)).unwrap();
            assert_eq!(s.item(), 1.0);
            assert_eq!(next.u.item(), 1.0);
        }
    }

    #[test]
    fn surrogate_values() {
        assert_eq!(surrogate(0.0f64, 2.0), 1.0);
        assert_eq!(surrogate(0.3f64, 1.5), surrogate(-0.3f64, 1.5));
        let g = surrogate(1.0f64, 2.0);
        assert!((g - 1.0 / (1.0 + PI * PI)).abs() < 1e-15);
        assert!((g - 0.0920).abs() < 5e-5);
    }

    #[test]
    fn one_step_gradient_is_surrogate() {
        let params = p(0.5, 1.0);
        let tr = unroll(&[0.7f64], 1, &params, Firing::Heaviside, None).unwrap();
        let g = backward(&tr, &[1.0], &params).unwrap();
        assert_eq!(g.currents[0], surrogate(0.7 - 1.0, 2.0));
    }

    #[test]
    fn lif_step_rejects_bad_input() {
        let st = LifState::<f32>::zeros(2, 3);
        assert!(lif_step(&st, &Tensor::zeros(&[3, 2]), &LifParams::default()).is_err());
        let nan = Tensor::full(&[2, 3], f32::NAN);
        assert!(matches!(
            lif_step(&st, &nan, &LifParams::default()),
            Err(Error::NonFinite { .. })
        ));
        assert!(p(1.0, 1.0).validate().is_err());
        assert!(p(0.5, 0.0).validate().is_err());
    }

    #[test]
    fn lif_step_matches_unroll() {
        let params = p(0.7, 0.8);
        let cur: Vec<f64> = (0..12).map(|i| ((i * 37 % 11) as f64) * 0.17).collect();
        let tr = unroll(&cur, 4, &params, Firing::Heaviside, None).unwrap();
        let mut st = LifState::zeros(1, 3);
        for t in 0..4 {
            let c = Tensor::new(&[1, 3], cur[t * 3..t * 3 + 3].to_vec()).unwrap();
            let (s, next) = lif_step(&st, &c, &params).unwrap();
            assert_eq!(s.data(), &tr.spikes[t * 3..t * 3 + 3]);
            assert_eq!(next.u.data(), &tr.u[t * 3..t * 3 + 3]);
            st = next;
        }
    }
}
