//! Style Transformation Networks.
//!
//! An STN holds one bias-free square matrix per distinct row width of the
//! style space. Row `i` of a code is multiplied by the matrix matching its
//! width; nothing else happens, so the map is exactly linear. Identity
//! initialization leaves the generator's behavior untouched.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Error, Result};
use crate::latent::{RowSchedule, SCode, WCode};
use crate::nets::ParamTree;
use crate::real::Real;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StnInit {
    #[default]
    Identity,
    /// Standard-normal entries from a seeded stream.
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stn<T> {
    schedule: RowSchedule,
    maps: BTreeMap<usize, Array2<T>>,
}

impl<T: Real> Stn<T> {
    pub fn new(schedule: &RowSchedule, init: StnInit, seed: u64) -> Self {
        let maps = schedule
            .unique_widths()
            .into_iter()
            .map(|w| {
                let m = match init {
                    StnInit::Identity => Array2::eye(w),
                    StnInit::Random => rng::gaussian::<T, _>(&mut rng::stream(seed, &[w as u64]), w * w)
                        .into_shape_with_order((w, w))
                        .expect("sized"),
                };
                (w, m)
            })
            .collect();
        Self {
            schedule: schedule.clone(),
            maps,
        }
    }

    pub fn identity(schedule: &RowSchedule) -> Self {
        Self::new(schedule, StnInit::Identity, 0)
    }

    /// Single-matrix STN acting on uniform-width W+ codes.
    pub fn for_wplus(w_dim: usize, rows: usize, init: StnInit, seed: u64) -> Result<Self> {
        let sched = RowSchedule::new(vec![w_dim; rows])?;
        Ok(Self::new(&sched, init, seed))
    }

    pub fn schedule(&self) -> &RowSchedule {
        &self.schedule
    }

    pub fn matrix(&self, width: usize) -> Option<&Array2<T>> {
        self.maps.get(&width)
    }

    pub fn matrix_mut(&mut self, width: usize) -> Option<&mut Array2<T>> {
        self.maps.get_mut(&width)
    }

    /// Widths in ascending order with their matrices.
    pub fn matrices(&self) -> impl Iterator<Item = (usize, &Array2<T>)> {
        self.maps.iter().map(|(&w, m)| (w, m))
    }

    pub fn apply(&self, s: &SCode<T>) -> Result<SCode<T>> {
        s.ensure_schedule(&self.schedule)?;
        let rows = s
            .rows()
            .iter()
            .map(|r| self.maps[&r.len()].dot(r))
            .collect();
        SCode::new(self.schedule.clone(), rows)
    }

    pub fn apply_wcode(&self, w: &WCode<T>) -> Result<WCode<T>> {
        if w.len() != self.schedule.len() || w.width() != self.schedule.widths()[0] {
            return Err(shape_err!("W+ code does not match STN layout"));
        }
        let m = &self.maps[&w.width()];
        WCode::new(w.rows().iter().map(|r| m.dot(r)).collect())
    }

    /// Batched rows, `rows[i]` is `(width_i, B)`.
    pub fn apply_batch(&self, rows: &[Array2<T>]) -> Vec<Array2<T>> {
        rows.iter().map(|r| self.maps[&r.nrows()].dot(r)).collect()
    }

    /// Accumulates `d/dW` into `grads` and returns the input-row gradients.
    pub fn backward_batch(
        &self,
        inputs: &[Array2<T>],
        grad_out: &[Array2<T>],
        grads: Option<&mut Stn<T>>,
    ) -> Vec<Array2<T>> {
        if let Some(gr) = grads {
            for (x, g) in inputs.iter().zip(grad_out) {
                let slot = gr.maps.get_mut(&x.nrows()).expect("width in schedule");
                *slot += &g.dot(&x.t());
            }
        }
        inputs
            .iter()
            .zip(grad_out)
            .map(|(x, g)| self.maps[&x.nrows()].t().dot(g))
            .collect()
    }

    pub fn is_identity(&self) -> bool {
        self.maps
            .iter()
            .all(|(&w, m)| m == Array2::<T>::eye(w))
    }

    pub fn cast<U: Real>(&self) -> Stn<U> {
        Stn {
            schedule: self.schedule.clone(),
            maps: self
                .maps
                .iter()
                .map(|(&w, m)| (w, m.mapv(|v| U::lit(v.as_f64()))))
                .collect(),
        }
    }
}

impl<T: Real> ParamTree<T> for Stn<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &[usize], &'a [T])) {
        for (w, m) in &self.maps {
            f(&format!("w{w}"), m.shape(), m.as_slice().expect("contiguous"));
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [T])) {
        for (w, m) in self.maps.iter_mut() {
            f(&format!("w{w}"), m.as_slice_mut().expect("contiguous"));
        }
    }
}

/// Total STN parameters for a schedule: the sum of `width^2` over distinct widths.
pub fn stn_param_count(schedule: &RowSchedule) -> usize {
    schedule.unique_widths().iter().map(|w| w * w).sum()
}

/// `N` independent STNs, one per named style.
#[derive(Debug, Clone, PartialEq)]
pub struct StnBank<T> {
    stns: Vec<Stn<T>>,
    names: Vec<String>,
}

impl<T: Real> StnBank<T> {
    pub fn new(names: Vec<String>, schedule: &RowSchedule, init: StnInit, seed: u64) -> Result<Self> {
        let stns = (0..names.len())
            .map(|k| Stn::new(schedule, init, rng::derive(seed, &[k as u64])))
            .collect();
        Self::from_parts(names, stns)
    }

    pub fn from_parts(names: Vec<String>, stns: Vec<Stn<T>>) -> Result<Self> {
        if names.is_empty() {
            return Err(arg_err!("STN bank needs at least one style"));
        }
        if names.len() != stns.len() {
            return Err(arg_err!("{} names for {} STNs", names.len(), stns.len()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for n in &names {
            if !seen.insert(n) {
                return Err(arg_err!("duplicate style name `{n}`"));
            }
        }
        let sched = stns[0].schedule();
        if stns.iter().any(|t| t.schedule() != sched) {
            return Err(shape_err!("STNs in a bank must share one schedule"));
        }
        Ok(Self { stns, names })
    }

    pub fn len(&self) -> usize {
        self.stns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stns.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn stns(&self) -> &[Stn<T>] {
        &self.stns
    }

    pub fn stns_mut(&mut self) -> &mut [Stn<T>] {
        &mut self.stns
    }

    pub fn schedule(&self) -> &RowSchedule {
        self.stns[0].schedule()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Lookup(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<&Stn<T>> {
        Ok(&self.stns[self.index_of(name)?])
    }

    /// `T_k(s)` for every style, in bank order.
    pub fn apply_bank(&self, s: &SCode<T>) -> Result<Vec<SCode<T>>> {
        self.stns.iter().map(|t| t.apply(s)).collect()
    }
}
