//! Linear probes that recover tree distance and depth from activation
//! vectors, the subspace they span, and ablation of that subspace.
//!
//! Everything can be exercised without a language model through
//! [`oracle`], which plants a known hierarchical subspace in synthetic
//! activations.

pub mod ablation;
pub mod dataset;
pub mod error;
pub mod hpak;
pub mod linalg;
pub mod optim;
pub mod oracle;
pub mod par;
pub mod probes;
pub mod rng;
pub mod store;
pub mod tree;

pub use error::{Error, ErrorClass, Result};
pub use tree::{LabeledTree, Path, StepGraph};
