//! Neural-collapse measurement and plasticity-loss experiments on small MLPs.
//!
//! The crate bundles a deterministic `f64` MLP engine ([`nn`], [`linalg`]),
//! the four neural-collapse metrics ([`collapse`]), dataset loaders and task
//! generators ([`data`]), shrink-and-perturb and the NC1 penalty
//! ([`interventions`]), the experiment protocols ([`experiments`]), and the
//! analysis/IO layer ([`analysis`], [`runlog`], [`plot`], [`cli`]).

pub mod analysis;
pub mod cli;
pub mod collapse;
pub mod data;
pub mod error;
pub mod experiments;
pub mod interventions;
pub mod linalg;
pub mod nn;
pub mod plot;
pub mod rng;
pub mod runlog;

pub use error::{Error, Result};
pub use linalg::Matrix;
pub use nn::{MlpModel, SgdConfig};
