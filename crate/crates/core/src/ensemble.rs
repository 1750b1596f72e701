//! Fusion of per-atlas predictions: majority vote, sum and weighted sum.
//!
//! Only validation accuracies enter the fusion rules; a member never sees
//! its own test performance.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Label;
use crate::gat::argmax;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnsembleError {
    #[error("ensemble needs at least one member")]
    NoMembers,
    #[error("{weights} weights for {members} members")]
    LengthMismatch { members: usize, weights: usize },
    #[error("member accuracy {0} is not positive")]
    NonPositiveAccuracy(f64),
}

pub type Result<T> = std::result::Result<T, EnsembleError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberPrediction {
    pub atlas: String,
    /// `[P(negative), P(positive)]`.
    pub probabilities: [f64; 2],
    pub label: Label,
    pub validation_accuracy: f64,
}

impl MemberPrediction {
    pub fn new(atlas: impl Into<String>, probabilities: [f64; 2], validation_accuracy: f64) -> Self {
        Self {
            atlas: atlas.into(),
            probabilities,
            label: argmax(probabilities),
            validation_accuracy,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FusionMethod {
    #[serde(rename = "vote")]
    MajorityVote,
    #[serde(rename = "sum")]
    Sum,
    #[serde(rename = "wsum")]
    WeightedSum,
}

impl FusionMethod {
    pub const ALL: [FusionMethod; 3] = [FusionMethod::MajorityVote, FusionMethod::Sum, FusionMethod::WeightedSum];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionMethod::MajorityVote => "vote",
            FusionMethod::Sum => "sum",
            FusionMethod::WeightedSum => "wsum",
        }
    }
}

impl std::fmt::Display for FusionMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for FusionMethod {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "vote" => Ok(FusionMethod::MajorityVote),
            "sum" => Ok(FusionMethod::Sum),
            "wsum" => Ok(FusionMethod::WeightedSum),
            other => Err(format!("unknown fusion method {other:?} (vote, sum, wsum)")),
        }
    }
}

/// Modal label; a tied vote takes the label of the most accurate member,
/// the earliest such member on equal accuracy.
pub fn majority_vote(members: &[MemberPrediction]) -> Result<Label> {
    let first = members.first().ok_or(EnsembleError::NoMembers)?;
    let positives = members.iter().filter(|m| m.label == Label::Positive).count();
    let negatives = members.len() - positives;
    if positives != negatives {
        return Ok(if positives > negatives { Label::Positive } else { Label::Negative });
    }
    let best = members.iter().fold(first, |best, m| {
        if m.validation_accuracy > best.validation_accuracy {
            m
        } else {
            best
        }
    });
    Ok(best.label)
}

/// `w_j = Acc_j / Σ Acc`.
pub fn member_weights(accuracies: &[f64]) -> Result<Vec<f64>> {
    if accuracies.is_empty() {
        return Err(EnsembleError::NoMembers);
    }
    if let Some(&bad) = accuracies.iter().find(|&&a| !(a > 0.0)) {
        return Err(EnsembleError::NonPositiveAccuracy(bad));
    }
    let total: f64 = accuracies.iter().sum();
    Ok(accuracies.iter().map(|a| a / total).collect())
}

/// Per-class sums `Σ_j w_j · p_ij`.
pub fn fused_scores(members: &[MemberPrediction], weights: &[f64]) -> Result<[f64; 2]> {
    if members.is_empty() {
        return Err(EnsembleError::NoMembers);
    }
    if members.len() != weights.len() {
        return Err(EnsembleError::LengthMismatch {
            members: members.len(),
            weights: weights.len(),
        });
    }
    let mut s = [0.0; 2];
    for (m, w) in members.iter().zip(weights) {
        s[0] += w * m.probabilities[0];
        s[1] += w * m.probabilities[1];
    }
    Ok(s)
}

/// Class with the largest weighted probability sum; exact ties go to the
/// negative class.
pub fn weighted_sum(members: &[MemberPrediction], weights: &[f64]) -> Result<Label> {
    let s = fused_scores(members, weights)?;
    if s[0] == s[1] {
        log::warn!("weighted sum tie at {}; choosing {}", s[0], Label::Negative);
    }
    Ok(argmax(s))
}

pub fn sum_fusion(members: &[MemberPrediction]) -> Result<Label> {
    if members.is_empty() {
        return Err(EnsembleError::NoMembers);
    }
    let w = 1.0 / members.len() as f64;
    weighted_sum(members, &vec![w; members.len()])
}

pub fn fuse(method: FusionMethod, members: &[MemberPrediction]) -> Result<Label> {
    match method {
        FusionMethod::MajorityVote => majority_vote(members),
        FusionMethod::Sum => sum_fusion(members),
        FusionMethod::WeightedSum => {
            let acc: Vec<f64> = members.iter().map(|m| m.validation_accuracy).collect();
            weighted_sum(members, &member_weights(&acc)?)
        }
    }
}
