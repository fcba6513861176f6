//! Closed-form, null-space-constrained editing of a small vision
//! transformer classifier.
//!
//! The pipeline: train a patch-based transformer on synthetic oriented-bar
//! images, harvest misclassified validation samples (the edit set) and
//! correctly classified training samples (the anchor set), localize the
//! layers responsible for each error with causal tracing, then rewrite the
//! MLP weight of the selected layers with a closed-form least-squares update
//! projected into the null space of the anchor key covariance. Gradient
//! baselines and an evaluation harness quantify edit success vs. forgetting.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod editor;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod tracing;
pub mod trainer;

pub use error::{Result, XeditError};
pub use numerics::{matmul, solve_spd, sym_eig, EigResult, Matrix};
