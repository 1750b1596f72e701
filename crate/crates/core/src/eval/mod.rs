//! Metrics, fold statistics and the cross-validated experiment driver.

pub mod experiment;
pub mod metrics;
pub mod stats;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use experiment::{
    run_experiment, run_fold, summarize, summary_table, ExperimentReport, FoldReport, PipelineConfig, Summary,
};
pub use metrics::{metrics, ConfusionMatrix, MetricValue, Metrics};
pub use stats::{two_sample_ttest, Stat, TTest, TTestKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Harmonize,
    Oversample,
    Graphs,
    Train,
    Predict,
    Fuse,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Stage::Harmonize => "harmonize",
            Stage::Oversample => "oversample",
            Stage::Graphs => "graphs",
            Stage::Train => "train",
            Stage::Predict => "predict",
            Stage::Fuse => "fuse",
        };
        f.write_str(s)
    }
}

fn atlas_suffix(atlas: &Option<String>) -> String {
    atlas.as_ref().map(|a| format!(", atlas {a}")).unwrap_or_default()
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("t-test needs at least two observations per series, got {a} and {b}")]
    TooFewObservations { a: usize, b: usize },
    #[error("t-test variance is zero")]
    DegenerateVariance,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{stage} failed (fold {fold}{}): {message}", atlas_suffix(atlas))]
    Stage {
        stage: Stage,
        fold: usize,
        atlas: Option<String>,
        /// A numerical failure rather than a data or contract violation.
        numerical: bool,
        message: String,
    },
}

impl EvalError {
    pub fn is_numerical(&self) -> bool {
        matches!(self, EvalError::Stage { numerical: true, .. } | EvalError::DegenerateVariance)
    }
}

pub type Result<T> = std::result::Result<T, EvalError>;
