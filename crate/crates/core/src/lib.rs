//! Federated online adaptation of a block-partitioned learner.
//!
//! Active clients adapt a shared pre-trained model on their own data streams
//! and periodically upload weights (all blocks, one sampled block, or a
//! fixed subset) to a server that averages them and dispatches the result to
//! listening clients, which never optimize locally. Everything runs in
//! virtual time with byte-exact traffic accounting.

pub mod adaptation;
pub mod error;
pub mod experiments;
pub mod federation;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod simnet;
pub mod streams;

pub use error::{Error, Result};
