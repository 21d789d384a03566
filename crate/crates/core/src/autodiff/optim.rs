use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::params::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for every parameter of one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct AdamState<R> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor<R>>,
    v: Vec<Tensor<R>>,
}

impl<R: Real> AdamState<R> {
    pub fn new(params: &ParamStore<R>, config: AdamConfig) -> Self {
        let zeros = |p: &crate::autodiff::Param<R>| p.value.zeros_like();
        Self {
            config,
            step: 0,
            m: params.iter().map(|(_, p)| zeros(p)).collect(),
            v: params.iter().map(|(_, p)| zeros(p)).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Clear moments and the step counter.
    pub fn reset(&mut self) {
        self.step = 0;
        for t in self.m.iter_mut().chain(self.v.iter_mut()) {
            t.data_mut().iter_mut().for_each(|x| *x = R::zero());
        }
    }

    /// One Adam update with learning rate `lr` using the accumulated gradients.
    pub fn step(&mut self, params: &mut ParamStore<R>, lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::invalid("learning rate", format!("{lr} must be > 0")));
        }
        if self.m.len() != params.len() {
            return Err(Error::shape(
                "adam",
                format!("state for {} params, store has {}", self.m.len(), params.len()),
            ));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = R::lit(1.0 - c.beta1.powi(t));
        let bc2 = R::lit(1.0 - c.beta2.powi(t));
        let (b1, b2) = (R::lit(c.beta1), R::lit(c.beta2));
        let (lr, eps) = (R::lit(lr), R::lit(c.eps));
        for (i, p) in params.params_mut().iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            if m.shape() != p.value.shape() {
                return Err(Error::shape("adam", p.name.clone()));
            }
            let grads = p.grad.data();
            for (((w, &g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(grads)
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *m = b1 * *m + (R::one() - b1) * g;
                *v = b2 * *v + (R::one() - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Half-cosine decay from `base_lr` at step 0 to `floor` at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub total_steps: usize,
    pub floor: f64,
}

impl CosineSchedule {
    pub fn new(base_lr: f64, total_steps: usize) -> Result<Self> {
        if !(base_lr > 0.0) || total_steps == 0 {
            return Err(Error::invalid(
                "cosine schedule",
                format!("base_lr {base_lr}, total_steps {total_steps}"),
            ));
        }
        Ok(Self {
            base_lr,
            total_steps,
            floor: 0.0,
        })
    }

    pub fn lr(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::invalid(
                "schedule step",
                format!("{step} > total {}", self.total_steps),
            ));
        }
        let frac = step as f64 / self.total_steps as f64;
        Ok(self.floor + (self.base_lr - self.floor) * 0.5 * (1.0 + (PI * frac).cos()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(p: f64, g: f64) -> (ParamStore<f64>, crate::autodiff::ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::full(&[1], p)).unwrap();
        s.params_mut()[0].grad = Tensor::full(&[1], g);
        (s, id)
    }

    #[test]
    fn zero_gradient_leaves_param() {
        let (mut s, id) = single(0.7, 0.0);
        let mut adam = AdamState::new(&s, AdamConfig::default());
        adam.step(&mut s, 0.1).unwrap();
        assert_eq!(s.value(id).item(), 0.7);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut s, id) = single(1.0, 1.0);
        let mut adam = AdamState::new(&s, AdamConfig::default());
        adam.step(&mut s, 0.1).unwrap();
        // m_hat = v_hat = 1, so the step is lr / (1 + eps).
        let expect = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((s.value(id).item() - expect).abs() < 1e-15);
        assert!((s.value(id).item() - 0.9).abs() < 1e-8);
    }

    #[test]
    fn repeated_gradient_decreases_monotonically() {
        let (mut s, id) = single(1.0, 0.5);
        let mut adam = AdamState::new(&s, AdamConfig::default());
        let mut last = s.value(id).item();
        for _ in 0..2 {
            adam.step(&mut s, 0.01).unwrap();
            assert!(s.value(id).item() < last);
            last = s.value(id).item();
        }
        assert!(adam.step(&mut s, 0.0).is_err());
    }

    #[test]
    fn cosine_endpoints() {
        let c = CosineSchedule::new(3e-3, 100).unwrap();
        assert_eq!(c.lr(0).unwrap(), 3e-3);
        assert!(c.lr(100).unwrap().abs() < 1e-18);
        assert!((c.lr(50).unwrap() - 1.5e-3).abs() < 1e-15);
        assert!(c.lr(101).is_err());
        let mut last = f64::INFINITY;
        for s in 0..=100 {
            let lr = c.lr(s).unwrap();
            assert!(lr <= last);
            last = lr;
        }
    }
}
