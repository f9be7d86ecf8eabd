use serde::{Deserialize, Serialize};

use crate::nets::ParamTree;
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    cfg: AdamConfig,
    m: Vec<T>,
    v: Vec<T>,
    t: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: AdamConfig, n: usize) -> Self {
        Self {
            cfg,
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> (&[T], &[T]) {
        (&self.m, &self.v)
    }

    pub fn step_slice(&mut self, params: &mut [T], grads: &[T], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        assert_eq!(grads.len(), self.m.len(), "gradient count mismatch");
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let step = T::lit(lr * bc2.sqrt() / bc1);
        let eps = T::lit(self.cfg.eps * bc2.sqrt());
        let (tb1, tb2) = (T::lit(b1), T::lit(b2));
        let (ob1, ob2) = (T::one() - tb1, T::one() - tb2);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = tb1 * *m + ob1 * g;
            *v = tb2 * *v + ob2 * g * g;
            *p -= step * *m / (v.sqrt() + eps);
        }
    }

    pub fn step<P: ParamTree<T>>(&mut self, params: &mut P, grads: &P, lr: f64) {
        let g = grads.flat_values();
        let mut p = params.flat_values();
        self.step_slice(&mut p, &g, lr);
        params.set_flat_values(&p);
    }
}
