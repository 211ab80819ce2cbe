//! Two-layer switch caching: hash partitions, power-of-two-choices routing,
//! the matching oracle, cache coherence and a deterministic fabric simulator.

// Float checks are written `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod allocation;
pub mod cache_node;
pub mod coherence;
pub mod error;
pub mod hashing;
pub mod matching;
pub mod routing;
pub mod selftest;
pub mod sim;
pub mod suite;
pub mod theory;
pub mod workload;

pub use error::{Error, Result};
