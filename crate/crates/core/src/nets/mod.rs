//! Toy differentiable style-based GAN: mapping network, style mapper,
//! modulated synthesis network and a discriminator with feature taps.
//!
//! Every network implements forward and reverse passes by hand; parameters
//! are exposed through [`ParamTree`] for optimizers, checkpoints and
//! gradient checks.

mod dense;
mod discriminator;
mod generator;
mod image;
mod mapping;
mod style;

pub use dense::Dense;
pub use discriminator::{DiscCache, DiscOutput, Discriminator, DiscriminatorConfig};
pub use generator::{codes_to_batch, GenCache, Generator, GeneratorConfig, ModConv};
pub use image::{batch_from_images, images_from_batch, Image};
pub use mapping::{MapCache, MappingNetwork};
pub use style::{StyleCache, StyleMapper};

use crate::real::Real;

/// Ordered, named view of a network's trainable arrays.
///
/// Visiting order is stable, which lets gradient containers of the same type
/// be zipped against the parameters they belong to.
pub trait ParamTree<T: Real>: Clone {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &[usize], &'a [T]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [T]));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, v| n += v.len());
        n
    }

    fn zeroed(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(&mut |_, v| v.fill(T::zero()));
        z
    }

    fn flat_values(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |_, _, v| out.extend_from_slice(v));
        out
    }

    fn set_flat_values(&mut self, flat: &[T]) {
        let mut off = 0;
        self.visit_mut(&mut |_, v| {
            v.copy_from_slice(&flat[off..off + v.len()]);
            off += v.len();
        });
        assert_eq!(off, flat.len(), "flat parameter length mismatch");
    }

    /// `self += other`; both trees must share a structure.
    fn accumulate(&mut self, other: &Self) {
        let mut src: Vec<&[T]> = Vec::new();
        other.visit(&mut |_, _, v| src.push(v));
        let mut it = src.into_iter();
        self.visit_mut(&mut |name, v| {
            let o = it.next().unwrap_or_else(|| panic!("missing `{name}` in accumulator"));
            for (a, &b) in v.iter_mut().zip(o) {
                *a += b;
            }
        });
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, _, v| ok &= v.iter().all(|x| x.is_finite()));
        ok
    }

    /// Copy with every parameter converted to another precision.
    fn cast_into<U: Real, D: ParamTree<U>>(&self, target: &mut D) {
        let vals: Vec<U> = self
            .flat_values()
            .into_iter()
            .map(|v| U::lit(v.as_f64()))
            .collect();
        target.set_flat_values(&vals);
    }
}
