//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) [`Exec::Parallel`] dispatches to
//! rayon; without it every mode runs sequentially. Results are always
//! returned in input order so downstream reductions stay deterministic.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    /// Worker count used to size waves of concurrent work.
    pub fn workers(self) -> usize {
        match self {
            Exec::Sequential => 1,
            #[cfg(feature = "parallel")]
            Exec::Parallel => rayon::current_num_threads().max(1),
            #[cfg(not(feature = "parallel"))]
            Exec::Parallel => 1,
        }
    }

    pub fn map<I, R, F>(self, items: &[I], f: F) -> Vec<R>
    where
        I: Sync,
        R: Send,
        F: Fn(&I) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => {
                use rayon::prelude::*;
                items.par_iter().map(f).collect()
            }
            _ => items.iter().map(f).collect(),
        }
    }

    pub fn map_indexed<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => {
                use rayon::prelude::*;
                (0..n).into_par_iter().map(f).collect()
            }
            _ => (0..n).map(f).collect(),
        }
    }

    /// Fallible map; the first error in input order wins.
    pub fn try_map<I, R, E, F>(self, items: &[I], f: F) -> Result<Vec<R>, E>
    where
        I: Sync,
        R: Send,
        E: Send,
        F: Fn(&I) -> Result<R, E> + Sync + Send,
    {
        self.map(items, f).into_iter().collect()
    }
}
