//! Scalable deep k-subspace clustering.
//!
//! Alternates hard assignment of encoded points to k linear subspaces with
//! subspace re-estimation — either in closed form by truncated SVD with
//! outlier trimming, or by Riemannian gradient steps on the Grassmannian —
//! while a convolutional autoencoder embedding is trained jointly. No n×n
//! affinity matrix is ever formed, so memory stays linear in the dataset.

// Indexed loops are the clearer idiom in the dense numeric kernels here.
#![allow(clippy::needless_range_loop)]

pub mod baselines;
pub mod cae;
pub mod data;
pub mod error;
pub mod grassmann;
pub mod ksc;
pub mod linalg;
pub mod metrics;
pub mod trainer;

pub use error::{Error, Result};
