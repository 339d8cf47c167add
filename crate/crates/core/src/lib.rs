//! Simulator for federated fine-tuning with a mixture of masked low-rank
//! adapters and GMM-based client clustering.

pub mod adapter;
pub mod clustering;
pub mod data;
pub mod error;
pub mod federation;
pub mod model;
pub mod numerics;

#[cfg(test)]
#[path = "../tests/support/oracle.rs"]
#[allow(dead_code)]
pub(crate) mod oracle;

pub use adapter::{AdapterPair, ImportanceVector, MaskedUpdate};
pub use error::{Error, Result};
pub use model::{Batch, BackboneSpec, Head, ModelParams};
pub use numerics::{Matrix, RngStream};
