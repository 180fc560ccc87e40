//! Coreset compression for softmax-attention KV caches.
//!
//! Given a cache of `n` key-value pairs, [`compress`](compress::compress)
//! selects a subset of the original pairs whose attention output stays within
//! a target error for *every* query of norm at most `rho`. Each round halves
//! the cache: the pairs are lifted into weighted tensor features of the
//! exponential kernel, a sign-balancing walk finds a low-discrepancy split of
//! the feature sums, and the smaller side replaces the cache. Errors are
//! tracked per round against a budget, both as measured maxima over an
//! adversarial query suite and as a degree-weighted series over tensor
//! spectral norms.
//!
//! The crate also ships:
//!
//! - [`verify`] — star-norm estimation, error-series bounds, and empirical
//!   error reports over query suites;
//! - [`lowerbound`] — executable bit-recovery experiments showing that caches
//!   built from near-orthogonal codewords cannot be compressed below a size
//!   floor without losing planted information;
//! - [`io`] / [`report`] — a binary cache format with exact round trips and a
//!   JSON report schema.
//!
//! With the default `parallel` feature, batch work (embedding, multi-seed
//! balancing, restarts, query evaluation, trials) runs on rayon; disabling it
//! yields a dependency-free sequential build with identical results.

pub mod attention;
pub mod balance;
pub mod compress;
mod error;
mod exec;
pub mod features;
pub mod io;
pub mod lowerbound;
pub mod report;
mod rng;
pub mod verify;
mod vecmath;

pub use error::{Error, Result};
