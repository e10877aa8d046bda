//! Neural hidden Markov models for self-supervised discrete speech
//! representation learning.
//!
//! The model places Markovian dependencies on a sequence of discrete codes
//! underlying a sequence of acoustic frames. A causal recurrent encoder and
//! two codebooks (`U` for state scores, `V` for Gaussian emission means)
//! parametrize the prior, transition and emission distributions. Inference
//! over the resulting linear-chain lattices is exact and entirely in log
//! space; the gradient of the log-likelihood with respect to the log
//! potentials equals the posterior marginals, so training needs no
//! automatic differentiation.
//!
//! Main pieces:
//!
//! - [`numerics`]: log-sum-exp, softmax, seeded reproducible randomness
//! - [`features`]: log Mel front end, LMF1 feature files, manifests, labels
//! - [`lattice`]: forward, backward, posteriors, Viterbi, brute-force oracles
//! - [`model`]: encoder, codebooks, hop chains, losses and exact gradients
//! - [`training`]: Adam loop, checkpoints, synthetic-dataset generation
//! - [`probing`]: Viterbi code decoding, NMI, boundary F1, linear probe
//! - [`cli`]: the `nhmm` command-line tool backing the above
//!
//! See the `examples/` directory for one runnable program per capability.

pub mod cli;
pub mod config;
pub mod features;
pub mod lattice;
pub mod model;
pub mod numerics;
pub mod probing;
pub mod training;

mod error;

pub use error::{Error, Result};
