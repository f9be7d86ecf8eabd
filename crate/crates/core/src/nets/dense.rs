use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use crate::real::Real;
use crate::rng;

/// Fully connected layer with runtime weight scaling `1/sqrt(fan_in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Real> Dense<T> {
    pub fn new<R: Rng>(rng: &mut R, out: usize, inp: usize, bias_init: f64) -> Self {
        let weight = rng::gaussian::<T, _>(rng, out * inp)
            .into_shape_with_order((out, inp))
            .expect("sized");
        Self {
            weight,
            bias: Array1::from_elem(out, T::lit(bias_init)),
        }
    }

    pub fn scale(&self) -> T {
        T::lit(1.0 / (self.weight.ncols() as f64).sqrt())
    }

    /// `x` is `(in, B)`; returns `(out, B)`.
    pub fn forward(&self, x: &Array2<T>) -> Array2<T> {
        let mut y = self.weight.dot(x);
        let s = self.scale();
        for (mut row, &b) in y.axis_iter_mut(Axis(0)).zip(self.bias.iter()) {
            row.mapv_inplace(|v| v * s + b);
        }
        y
    }

    /// Accumulates parameter gradients into `grads` when given and returns
    /// the input gradient.
    pub fn backward(&self, x: &Array2<T>, g: &Array2<T>, grads: Option<&mut Dense<T>>) -> Array2<T> {
        let s = self.scale();
        if let Some(gr) = grads {
            gr.weight.scaled_add(s, &g.dot(&x.t()));
            gr.bias += &g.sum_axis(Axis(1));
        }
        let mut gx = self.weight.t().dot(g);
        gx.mapv_inplace(|v| v * s);
        gx
    }

    pub(crate) fn visit<'a>(&'a self, p: &str, f: &mut dyn FnMut(&str, &[usize], &'a [T])) {
        f(&format!("{p}.weight"), self.weight.shape(), self.weight.as_slice().expect("contiguous"));
        f(&format!("{p}.bias"), self.bias.shape(), self.bias.as_slice().expect("contiguous"));
    }

    pub(crate) fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(&str, &mut [T])) {
        f(&format!("{p}.weight"), self.weight.as_slice_mut().expect("contiguous"));
        f(&format!("{p}.bias"), self.bias.as_slice_mut().expect("contiguous"));
    }
}
