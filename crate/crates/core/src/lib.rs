//! Masked-token generation over small token grids, with a learned token
//! critic that decides which positions to re-mask, and exact oracles for
//! enumerable synthetic worlds.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod error;
pub mod exec;
pub mod learn;
pub mod nets;
pub mod numerics;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod tokenspace;
pub mod worlds;

pub use error::{Error, Result};
