//! Neural dynamic focused topic model.
//!
//! A dynamic topic model in which every document carries a Bernoulli mask
//! selecting its active topics, so how often a topic appears is modelled
//! separately from how much of a document it covers. Global activity and
//! proportion states evolve as two Gaussian chains; inference is amortized by
//! LSTM and feed-forward encoders and trained by maximizing the evidence lower
//! bound.
//!
//! Modules, bottom-up:
//! - [`diffcore`]: tensors, a reverse-mode tape, parameter store, Adam.
//! - [`corpus`]: ingestion, vocabulary, time slicing, splits, bundles.
//! - [`genmodel`]: the generative process and ancestral sampling.
//! - [`inference`]: the structured variational posterior.
//! - [`training`]: the evidence lower bound and the optimization loop.
//! - [`evaluation`]: perplexity, predictive likelihood, coherence, diversity,
//!   entropy and activity diagnostics.

pub mod corpus;
pub mod diffcore;
pub mod error;
pub mod evaluation;
pub mod genmodel;
pub mod nets;
pub mod inference;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
