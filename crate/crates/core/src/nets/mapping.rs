use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use super::{Dense, ParamTree};
use crate::error::{shape_err, Result};
use crate::latent::WCode;
use crate::ops::{lrelu, lrelu_grad};
use crate::real::Real;

/// Noise-to-W network: pixel norm followed by leaky-ReLU dense layers.
#[derive(Debug, Clone, PartialEq)]
pub struct MappingNetwork<T> {
    z_dim: usize,
    num_ws: usize,
    pub layers: Vec<Dense<T>>,
}

pub struct MapCache<T> {
    inputs: Vec<Array2<T>>,
    pre: Vec<Array2<T>>,
}

impl<T: Real> MappingNetwork<T> {
    pub fn new<R: Rng>(rng: &mut R, z_dim: usize, w_dim: usize, depth: usize, num_ws: usize) -> Self {
        let layers = (0..depth.max(1))
            .map(|i| Dense::new(rng, w_dim, if i == 0 { z_dim } else { w_dim }, 0.0))
            .collect();
        Self {
            z_dim,
            num_ws,
            layers,
        }
    }

    pub fn z_dim(&self) -> usize {
        self.z_dim
    }

    pub fn w_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.nrows())
    }

    /// Number of W+ rows produced per draw.
    pub fn num_ws(&self) -> usize {
        self.num_ws
    }

    /// `z` is `(z_dim, B)`; returns `(w_dim, B)`.
    pub fn forward_batch(&self, z: &Array2<T>) -> Result<(Array2<T>, MapCache<T>)> {
        if z.nrows() != self.z_dim {
            return Err(shape_err!("noise width {} != mapping input {}", z.nrows(), self.z_dim));
        }
        let mut x = z.clone();
        let n = T::lit(self.z_dim as f64);
        for mut col in x.axis_iter_mut(Axis(1)) {
            let ms = col.mapv(|v| v * v).sum() / n;
            let inv = (ms + T::lit(1e-8)).sqrt().recip();
            col.mapv_inplace(|v| v * inv);
        }
        let gain = T::lit(std::f64::consts::SQRT_2);
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let p = layer.forward(&x);
            inputs.push(x);
            x = p.mapv(|v| lrelu(v) * gain);
            pre.push(p);
        }
        Ok((x, MapCache { inputs, pre }))
    }

    /// Parameter gradients only; the noise input is never optimized.
    pub fn backward(&self, cache: &MapCache<T>, grad_w: &Array2<T>) -> Self {
        let mut grads = self.zeroed();
        let gain = T::lit(std::f64::consts::SQRT_2);
        let mut g = grad_w.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            g.zip_mut_with(&cache.pre[i], |gv, &p| *gv = *gv * gain * lrelu_grad(p));
            g = layer.backward(&cache.inputs[i], &g, Some(&mut grads.layers[i]));
        }
        grads
    }

    pub fn map_batch(&self, z: &Array2<T>) -> Result<Array2<T>> {
        Ok(self.forward_batch(z)?.0)
    }

    /// `P(z)` broadcast to every W+ row.
    pub fn map_noise(&self, z: &Array1<T>) -> Result<WCode<T>> {
        let zb = z.clone().insert_axis(Axis(1));
        let w = self.map_batch(&zb)?.column(0).to_owned();
        Ok(WCode::broadcast(w, self.num_ws))
    }
}

impl<T: Real> ParamTree<T> for MappingNetwork<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &[usize], &'a [T])) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("fc{i}"), f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [T])) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("fc{i}"), f);
        }
    }
}
