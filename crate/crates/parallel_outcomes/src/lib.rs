//! Causal effect estimation from multiple outcomes that are mutually
//! independent given an unobserved confounder and the exposure.
//!
//! The crate covers two data regimes:
//!
//! * categorical exposure and outcomes: nonparametric identification of
//!   the latent confounder law through an eigendecomposition of observed
//!   joint tables, with an optional least squares refinement
//!   ([`categorical`]);
//! * continuous outcomes under a linear structural model: factor loading
//!   estimation, sparse rotation search for negative control outcomes,
//!   and two-stage ridge estimation of per-outcome effects
//!   ([`linear_sem`]).
//!
//! Supporting modules provide simulation designs and a replication harness
//! ([`simgen`]), data preparation for applied tables ([`pipeline`]),
//! shared numeric kernels ([`numerics`]), and the command line layer
//! ([`cli`]).
//!
//! The `examples/` directory has one runnable walkthrough per capability;
//! start with `cargo run --example categorical_identification`.

pub mod categorical;
pub mod linear_sem;
pub mod pipeline;
pub mod simgen;
pub mod error;
pub mod numerics;

pub use error::{Error, Result};
