//! Poisson flow generative modelling at desk scale.
//!
//! Data points in `R^N` are treated as unit charges sitting on the `z = 0`
//! hyperplane of an augmented space `R^(N+1)`. Their electric (Poisson) field
//! carries a uniform distribution on an enclosing hemisphere back onto the
//! data distribution, so sampling reduces to integrating an ODE along field
//! lines from an analytic prior on the `z = z_max` hyperplane.
//!
//! The crate is `no_std` and only needs an allocator. File formats, the
//! run-config file and the command line live in the companion `pfgm` crate.
//!
//! Modules, bottom-up:
//!
//! * [`geometry`] - sphere areas, Green's kernels, seeded samplers.
//! * [`dataset`] - toy generators, centering, moments.
//! * [`field`] / [`tree`] - exact and tree-accelerated empirical fields.
//! * [`perturb`] - training-point perturbation and hyperparameter rules.
//! * [`model`] - the MLP field approximator and its training loop.
//! * [`prior`] - the hyperplane prior, its sampler and density.
//! * [`ode`] - the anchored forward/backward ODE and field-line tracing.
//! * [`likelihood`] - log-density via the instantaneous change of variables.
//! * [`stats`] / [`verify`] - statistical tests backing the verification suite.
#![no_std]
#![cfg_attr(test, allow(unused_imports))]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod dataset;
pub mod error;
pub mod field;
pub mod geometry;
pub mod likelihood;
pub mod model;
pub mod ode;
pub mod perturb;
pub mod prior;
pub mod stats;
pub mod tree;
pub mod verify;

mod linalg;

/// Version of this crate, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub use dataset::{Dataset, DatasetStats, ToyName};
pub use error::{Error, Result};
pub use field::{AugmentedPoint, FieldEstimate};
pub use geometry::{Dim, RngState};
pub use model::{FieldModel, Mlp, VectorField};
pub use ode::{OdeConfig, OdeRun, Solver};
pub use perturb::{DerivedSchedule, PerturbConfig};
pub use prior::PriorSpec;
