//! Context-aware similarity kernels for clustering.
//!
//! This crate learns a pairwise similarity function over the elements of an
//! input set. A permutation-equivariant attention encoder maps the set to
//! latent vectors, a symmetric kernel head turns latent pairs into
//! probabilities of co-membership, and an off-the-shelf spectral clusterer
//! (with eigengap cluster-count estimation) converts the resulting
//! similarity matrix into labels.

pub mod attention;
pub mod error;
pub mod graph;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{grad_check, Activation, Graph, NodeId};
pub use tensor::Tensor;
