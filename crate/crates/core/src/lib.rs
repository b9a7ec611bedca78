//! Uncertainty-guided single-source domain generalization, desk scale.
//!
//! The crate trains a small classifier on one source domain while a pair of
//! auxiliary networks fabricates harder versions of that domain on the fly:
//! one perturbs hidden features with learned Gaussian noise pushed through a
//! softplus, the other mixes clean and perturbed features (and their labels)
//! with a sampled ratio. The trainer wraps this in a meta-learning loop so
//! the classifier is explicitly trained to recover from the fabricated
//! shifts, and the spread of the noise network doubles as a score for how
//! far an unlabeled target domain has drifted.

pub mod augment;
pub mod domains;
pub mod error;
pub mod grad;
pub mod meta;
pub mod model;
pub mod uncertainty;

pub use error::{Result, UdgError};
