//! Regression Monte Carlo solver and verification harness for mean-field type
//! stochastic control problems.

pub mod cli;
pub mod dense;
pub mod ensemble;
pub mod error;
pub mod fbsde;
pub mod hamiltonian;
pub mod jacobian;
pub mod lfd;
pub mod model;
pub mod oracle;
pub mod pde;
pub mod regression;

pub use error::{Error, Result};

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod guide_introduction {}
#[doc = include_str!("../../../book/src/ensemble.md")]
pub mod guide_ensemble {}
#[doc = include_str!("../../../book/src/models.md")]
pub mod guide_models {}
#[doc = include_str!("../../../book/src/solver.md")]
pub mod guide_solver {}
#[doc = include_str!("../../../book/src/derivatives.md")]
pub mod guide_derivatives {}
#[doc = include_str!("../../../book/src/residuals.md")]
pub mod guide_residuals {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod guide_cli {}
