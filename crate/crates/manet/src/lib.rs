//! Multinomial adversarial networks for multi-domain text classification.
//!
//! The model learns two feature spaces at once: a shared extractor whose
//! output a multinomial domain discriminator cannot tell apart across
//! domains, and per-domain extractors that keep whatever is domain
//! specific. A classifier reads both. Training alternates between fitting
//! the discriminator and updating the rest of the network against it, so
//! the shared features converge toward domain invariance while labeled
//! accuracy is preserved. Domains without any labels still shape the shared
//! space through the discriminator term and can be classified afterwards
//! with the shared features alone.
//!
//! The crate is organized around that loop:
//!
//! - [`tensor`]: reverse-mode autodiff over `f64`, layer primitives, Adam
//! - [`divergence`]: closed-form and brute-force oracles tying the
//!   discriminator objectives to f-divergences between domain distributions
//! - [`data`]: corpora, vocabulary, fold splitting, synthetic domains
//! - [`model`]: the four-component network and its losses
//! - [`trainer`]: the alternating optimization loop, evaluation, probes
//! - [`report`]: run artifacts and aggregate tables
//! - [`cli`]: the `manet` binary's subcommands
//!
//! Start from the `examples/` directory; each file is a runnable walk
//! through one capability.

use serde::{Deserialize, Serialize};

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod divergence;
pub mod error;
pub mod model;
pub mod report;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

/// Discriminator loss family. NLL is the log loss the classifier also uses;
/// L2 is the least-squares alternative that trades the log's gradient
/// signal for a bounded, smoother objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossVariant {
    Nll,
    L2,
}

impl std::fmt::Display for LossVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LossVariant::Nll => write!(f, "nll"),
            LossVariant::L2 => write!(f, "l2"),
        }
    }
}
