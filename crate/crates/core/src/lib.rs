//! Coupled hidden Markov models for longitudinal disease panels.
//!
//! Each disease in a panel study is a discrete-time hidden Markov chain
//! whose transition probabilities follow logistic regressions; the
//! covariates include the hidden states of the other chains at the same
//! time point, so the chains are coupled. Inference runs by an adaptive
//! Metropolis-within-Gibbs sampler: per disease, a random-walk Metropolis
//! update of the regression coefficients against the forward-recursion
//! likelihood, an exact backward-sampling redraw of that disease's hidden
//! paths, and a conjugate Dirichlet redraw of its initial distribution.
//!
//! The crate ships the state-space machinery (`hmm`), the disease
//! structures and design assembly (`disease`, `design`), priors (`priors`),
//! the sampler (`sampler`), a panel simulator (`simulate`), dataset
//! handling (`data`), convergence and fit diagnostics (`diagnostics`) and a
//! TOML-driven CLI (`config` plus the `chmm` binary).

pub mod config;
pub mod data;
pub mod design;
pub mod diagnostics;
pub mod disease;
pub mod error;
pub mod hmm;
pub mod priors;
pub mod sampler;
pub mod simulate;

pub use error::{Error, Result};
