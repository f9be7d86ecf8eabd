//! One generator, many one-shot styles.
//!
//! A pretrained style-based generator is fine-tuned jointly with a bank of
//! per-style linear Style Transformation Networks (STNs). Each STN moves
//! style-space codes into its own region of a shared "multistyle" space, so
//! a single set of synthesis weights renders every reference style.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod inference;
pub mod inversion;
pub mod latent;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nets;
pub mod ops;
pub mod optim;
pub mod par;
pub mod pretrain;
pub mod real;
pub mod rng;
pub mod stn;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
pub use latent::{RowSchedule, SCode, StyleMixMask, WCode};
pub use nets::{Discriminator, Generator, Image, MappingNetwork, ParamTree, StyleMapper};
pub use par::Exec;
pub use real::Real;
