//! Robust (semi-unbalanced) optimal transport barycenters of sampled
//! distributions, trained as a max-min game between congruent dual
//! potentials and transport maps, plus the discrete and Gaussian reference
//! solvers used to check them.

pub mod error;
pub mod cli;
pub mod cost;
pub mod datagen;
pub mod discrete_ot;
pub mod divergence;
pub mod gaussian_oracle;
pub mod model;
pub mod metrics;
pub mod numeric;
pub mod sampler;
pub mod trainer;

pub use error::{Error, Result};
