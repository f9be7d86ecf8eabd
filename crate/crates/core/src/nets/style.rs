use ndarray::{Array2, Axis};
use rand::Rng;

use super::{Dense, ParamTree};
use crate::error::{shape_err, Result};
use crate::latent::{RowSchedule, SCode, WCode};
use crate::real::Real;

/// Per-row affine maps from W+ rows to style-space rows.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleMapper<T> {
    schedule: RowSchedule,
    pub affines: Vec<Dense<T>>,
}

pub struct StyleCache<T> {
    ws: Vec<Array2<T>>,
}

impl<T: Real> StyleMapper<T> {
    pub fn new<R: Rng>(rng: &mut R, schedule: &RowSchedule, w_dim: usize) -> Self {
        let affines = schedule
            .widths()
            .iter()
            .map(|&w| Dense::new(rng, w, w_dim, 1.0))
            .collect();
        Self {
            schedule: schedule.clone(),
            affines,
        }
    }

    /// Affines that copy the leading `width` entries of each W+ row.
    pub fn identity(schedule: &RowSchedule, w_dim: usize) -> Self {
        let affines = schedule
            .widths()
            .iter()
            .map(|&w| {
                let mut d = Dense {
                    weight: Array2::zeros((w, w_dim)),
                    bias: ndarray::Array1::zeros(w),
                };
                let inv = T::one() / d.scale();
                for i in 0..w.min(w_dim) {
                    d.weight[[i, i]] = inv;
                }
                d
            })
            .collect();
        Self {
            schedule: schedule.clone(),
            affines,
        }
    }

    pub fn schedule(&self) -> &RowSchedule {
        &self.schedule
    }

    pub fn w_dim(&self) -> usize {
        self.affines[0].weight.ncols()
    }

    /// Batched form: `ws[i]` is `(w_dim, B)` for row `i`.
    pub fn forward_batch(&self, ws: &[Array2<T>]) -> Result<(Vec<Array2<T>>, StyleCache<T>)> {
        if ws.len() != self.affines.len() {
            return Err(shape_err!(
                "W+ batch has {} rows, schedule has {}",
                ws.len(),
                self.affines.len()
            ));
        }
        let out = self
            .affines
            .iter()
            .zip(ws)
            .map(|(a, w)| {
                if w.nrows() != a.weight.ncols() {
                    return Err(shape_err!("W row width {} != {}", w.nrows(), a.weight.ncols()));
                }
                Ok(a.forward(w))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((out, StyleCache { ws: ws.to_vec() }))
    }

    /// Returns parameter gradients (when requested) and W+ gradients.
    pub fn backward(
        &self,
        cache: &StyleCache<T>,
        grad_s: &[Array2<T>],
        want_params: bool,
    ) -> (Option<Self>, Vec<Array2<T>>) {
        let mut grads = want_params.then(|| self.zeroed());
        let gw = self
            .affines
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let slot = grads.as_mut().map(|g| &mut g.affines[i]);
                a.backward(&cache.ws[i], &grad_s[i], slot)
            })
            .collect();
        (grads, gw)
    }

    pub fn to_style(&self, w: &WCode<T>) -> Result<SCode<T>> {
        if w.len() != self.schedule.len() {
            return Err(shape_err!(
                "W+ code has {} rows, schedule has {}",
                w.len(),
                self.schedule.len()
            ));
        }
        let ws: Vec<Array2<T>> = w
            .rows()
            .iter()
            .map(|r| r.clone().insert_axis(Axis(1)))
            .collect();
        let (s, _) = self.forward_batch(&ws)?;
        SCode::new(
            self.schedule.clone(),
            s.into_iter().map(|m| m.column(0).to_owned()).collect(),
        )
    }
}

impl<T: Real> ParamTree<T> for StyleMapper<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &[usize], &'a [T])) {
        for (i, a) in self.affines.iter().enumerate() {
            a.visit(&format!("affine{i}"), f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [T])) {
        for (i, a) in self.affines.iter_mut().enumerate() {
            a.visit_mut(&format!("affine{i}"), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_affine_truncates() {
        let sched = RowSchedule::toy();
        let s = StyleMapper::<f64>::identity(&sched, 64);
        let w: Array1<f64> = (0..64).map(|i| i as f64 * 0.25 - 3.0).collect();
        let code = s.to_style(&WCode::broadcast(w.clone(), sched.len())).unwrap();
        for (row, &width) in code.rows().iter().zip(sched.widths()) {
            assert_eq!(row.len(), width);
            assert_eq!(row.as_slice().unwrap(), &w.as_slice().unwrap()[..width]);
        }
    }

    #[test]
    fn row_count_mismatch_is_shape_error() {
        let sched = RowSchedule::new(vec![8, 4]).unwrap();
        let s = StyleMapper::<f64>::new(&mut ChaCha8Rng::seed_from_u64(0), &sched, 8);
        let w = WCode::broadcast(Array1::zeros(8), 3);
        assert!(matches!(s.to_style(&w), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn output_respects_schedule() {
        let sched = RowSchedule::new(vec![16, 8, 8, 4]).unwrap();
        let s = StyleMapper::<f64>::new(&mut ChaCha8Rng::seed_from_u64(3), &sched, 12);
        let w = crate::rng::gaussian::<f64, _>(&mut ChaCha8Rng::seed_from_u64(4), 12);
        let code = s.to_style(&WCode::broadcast(w.clone(), 4)).unwrap();
        assert_eq!(code.schedule(), &sched);
        assert_eq!(code, s.to_style(&WCode::broadcast(w, 4)).unwrap());
    }
}
