//! Multi-atlas graph attention ensemble for classifying subjects from ROI
//! time series.
//!
//! The pipeline runs, per cross-validation fold: site harmonization of the
//! raw series, SMOTE oversampling of the training and validation subjects,
//! Fisher-z connectivity graphs, one graph attention classifier per atlas,
//! and fusion of the per-atlas predictions.

pub mod augment;
pub mod autodiff;
pub mod dataset;
pub mod ensemble;
pub mod eval;
pub mod gat;
pub mod graphbuild;
pub mod harmonize;
pub mod seed;
pub mod synth;
