//! Monte Carlo competitions between Bayesian linear-regression agents.
//!
//! Each agent entertains a subset J of the available covariates with a
//! conjugate Normal-Inverse-Gamma prior, observes a shared dataset, and
//! reports her posterior expected squared prediction loss. The agent with
//! the lowest loss wins. The crate provides the closed-form posterior
//! machinery, slow brute-force oracles for validating it, the competition
//! and auction mechanics, large-sample diagnostics, and a replicated sweep
//! engine with a CSV/JSON-emitting CLI.

pub mod asymptotics;
pub mod competition;
pub mod dgp;
pub mod error;
pub mod experiment;
pub mod oracle;
pub mod posterior;

pub use error::{Error, Result};
