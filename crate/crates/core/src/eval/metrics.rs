//! Confusion-matrix metrics with the positive class as "positive".

use serde::{Deserialize, Serialize};

use super::{EvalError, Result};
use crate::dataset::Label;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub fp: u64,
}

impl ConfusionMatrix {
    pub fn new(tp: u64, fn_: u64, tn: u64, fp: u64) -> Self {
        Self { tp, fn_, tn, fp }
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (Label, Label)>) -> Self {
        let mut cm = Self::default();
        for (truth, predicted) in pairs {
            cm.record(truth, predicted);
        }
        cm
    }

    pub fn record(&mut self, truth: Label, predicted: Label) {
        match (truth, predicted) {
            (Label::Positive, Label::Positive) => self.tp += 1,
            (Label::Positive, Label::Negative) => self.fn_ += 1,
            (Label::Negative, Label::Negative) => self.tn += 1,
            (Label::Negative, Label::Positive) => self.fp += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fn_ + self.tn + self.fp
    }

    pub fn positives(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> u64 {
        self.tn + self.fp
    }
}

/// A ratio, or the reason it has no value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MetricValue {
    Defined(f64),
    Undefined { undefined: String },
}

impl MetricValue {
    fn ratio(num: u64, den: u64, reason: &str) -> Self {
        if den == 0 {
            MetricValue::Undefined {
                undefined: reason.to_string(),
            }
        } else {
            MetricValue::Defined(num as f64 / den as f64)
        }
    }

    pub fn value(&self) -> Option<f64> {
        match self {
            MetricValue::Defined(v) => Some(*v),
            MetricValue::Undefined { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: MetricValue,
    pub sensitivity: MetricValue,
    pub specificity: MetricValue,
    pub precision: MetricValue,
    pub f1: MetricValue,
}

pub const METRIC_NAMES: [&str; 5] = ["accuracy", "sensitivity", "specificity", "precision", "f1"];

impl Metrics {
    pub fn values(&self) -> [&MetricValue; 5] {
        [&self.accuracy, &self.sensitivity, &self.specificity, &self.precision, &self.f1]
    }
}

pub fn metrics(cm: &ConfusionMatrix) -> Result<Metrics> {
    if cm.total() == 0 {
        return Err(EvalError::EmptyMatrix);
    }
    let f1 = if cm.tp == 0 {
        if cm.fp + cm.fn_ == 0 {
            MetricValue::Undefined {
                undefined: "no positive samples and no positive predictions".into(),
            }
        } else {
            MetricValue::Defined(0.0)
        }
    } else {
        MetricValue::Defined(2.0 * cm.tp as f64 / (2 * cm.tp + cm.fp + cm.fn_) as f64)
    };
    Ok(Metrics {
        accuracy: MetricValue::ratio(cm.tp + cm.tn, cm.total(), "empty matrix"),
        sensitivity: MetricValue::ratio(cm.tp, cm.positives(), "no positive samples"),
        specificity: MetricValue::ratio(cm.tn, cm.negatives(), "no negative samples"),
        precision: MetricValue::ratio(cm.tp, cm.tp + cm.fp, "no positive predictions"),
        f1,
    })
}
