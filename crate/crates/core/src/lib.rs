//! Linked hidden Markov models for regime-aware portfolio selection.
//!
//! Each sector of a stock universe is modelled by a two-state Gaussian HMM
//! (bull and bear). The sectors' latent state processes are coupled through
//! a Gaussian copula, calibrated so that synthetic state paths reproduce the
//! observed pairwise Spearman correlations between decoded sector regimes.
//! Monte-Carlo panels drawn from the fitted model feed mean-variance
//! portfolio optimizers, which are then evaluated on held-out weeks.

pub mod backtest;
pub mod error;
pub mod hmm;
pub mod ingest;
pub mod lhmm;
pub mod mmc;
pub mod portfolio;
pub mod seeding;
pub mod synthetic;
pub mod transforms;

pub use error::{Error, Result};
