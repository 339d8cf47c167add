//! Dense linear algebra and randomness used by the protocol.
//!
//! Everything here is a pure function of its inputs. [`Matrix`] is a small
//! row-major `f64` container; heavy decompositions are delegated to
//! `nalgebra` behind [`svd_truncate`] and [`pca_fit`].

mod grad;
mod matrix;
mod pca;
mod rng;
mod svd;

pub use grad::finite_diff_grad;
pub use matrix::Matrix;
pub use pca::{pca_fit, pca_transform, PcaModel};
pub use rng::RngStream;
pub use svd::{singular_values, svd_truncate};
