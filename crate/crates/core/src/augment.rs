//! SMOTE oversampling of flattened time-series matrices.
//!
//! A synthetic sample is `z = x0 + (x - x0) * gap` for a real sample `x0`,
//! one of its `k` nearest same-class neighbours `x` (Euclidean distance,
//! ties to the lower index) and `gap ~ U[0, 1)`. Source samples are visited
//! in a seeded shuffled order, cycling, so doubling a class gives every real
//! sample exactly one synthetic child.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Label, TimeSeries};
use crate::seed;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AugmentError {
    #[error("SMOTE needs more than k = {k} samples, got {count}")]
    TooFewSamples { k: usize, count: usize },
    #[error("sample {index} has length {found}, expected {expected}")]
    DimensionMismatch {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("class {label} is absent from the {split} split")]
    MissingClass { label: Label, split: &'static str },
    #[error("invalid SMOTE configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, AugmentError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoteConfig {
    pub k_neighbors: usize,
    /// Final class size as a multiple of the real class size.
    pub multiplier: f64,
    pub seed: u64,
}

impl Default for SmoteConfig {
    fn default() -> Self {
        Self {
            k_neighbors: 3,
            multiplier: 2.0,
            seed: 0,
        }
    }
}

impl SmoteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_neighbors < 1 {
            return Err(AugmentError::Config("k_neighbors must be at least 1".into()));
        }
        if !(self.multiplier >= 1.0) || !self.multiplier.is_finite() {
            return Err(AugmentError::Config(format!(
                "multiplier must be >= 1, got {}",
                self.multiplier
            )));
        }
        Ok(())
    }

    /// Number of synthetic samples generated for `n` real ones.
    pub fn synthetic_count(&self, n: usize) -> usize {
        let target = (self.multiplier - 1.0) * n as f64;
        // guard against 2.0 * n landing a hair above an integer
        (target - 1e-9).ceil().max(0.0) as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticVector {
    pub values: Vec<f64>,
    pub source: usize,
    pub neighbor: usize,
    pub gap: f64,
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// The `k` nearest other samples of every sample.
pub fn nearest_neighbors<S: AsRef<[f64]> + Sync>(samples: &[S], k: usize) -> Vec<Vec<usize>> {
    let n = samples.len();
    let upper: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (i + 1..n)
                .map(|j| squared_distance(samples[i].as_ref(), samples[j].as_ref()))
                .collect()
        })
        .collect();
    let dist = |i: usize, j: usize| {
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        upper[a][b - a - 1]
    };
    (0..n)
        .map(|i| {
            let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            others.sort_by(|&a, &b| dist(i, a).total_cmp(&dist(i, b)).then(a.cmp(&b)));
            others.truncate(k);
            others
        })
        .collect()
}

/// Synthesizes `synthetic_count(samples.len())` new vectors for one class.
pub fn smote_class<S: AsRef<[f64]> + Sync>(
    samples: &[S],
    cfg: &SmoteConfig,
) -> Result<Vec<SyntheticVector>> {
    cfg.validate()?;
    let n = samples.len();
    if n <= cfg.k_neighbors {
        return Err(AugmentError::TooFewSamples {
            k: cfg.k_neighbors,
            count: n,
        });
    }
    let dim = samples[0].as_ref().len();
    for (index, s) in samples.iter().enumerate() {
        if s.as_ref().len() != dim {
            return Err(AugmentError::DimensionMismatch {
                index,
                expected: dim,
                found: s.as_ref().len(),
            });
        }
    }
    let count = cfg.synthetic_count(n);
    if count == 0 {
        return Ok(Vec::new());
    }
    let knn = nearest_neighbors(samples, cfg.k_neighbors);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);

    let mut out = Vec::with_capacity(count);
    for s in 0..count {
        let source = order[s % n];
        let neighbor = knn[source][rng.random_range(0..cfg.k_neighbors)];
        let gap: f64 = rng.random();
        let x0 = samples[source].as_ref();
        let x = samples[neighbor].as_ref();
        let values = x0.iter().zip(x).map(|(a, b)| a + (b - a) * gap).collect();
        out.push(SyntheticVector {
            values,
            source,
            neighbor,
            gap,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Train,
    Validation,
}

impl SplitKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Validation => "validation",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub neighbor: String,
    pub gap: f64,
}

/// A real or synthetic subject in an oversampled split.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSample {
    pub id: String,
    pub label: Label,
    pub synthetic: bool,
    pub provenance: Option<Provenance>,
    pub series: TimeSeries,
}

/// One real subject entering oversampling.
#[derive(Debug, Clone, Copy)]
pub struct SplitMember<'a> {
    pub id: &'a str,
    pub label: Label,
    pub series: &'a TimeSeries,
}

/// Oversamples each class of a train or validation split independently.
///
/// Real members come first, in input order, followed by the synthetic
/// samples of the positive class and then of the negative class.
pub fn oversample_split(
    split: SplitKind,
    members: &[SplitMember<'_>],
    cfg: &SmoteConfig,
) -> Result<Vec<AugmentedSample>> {
    cfg.validate()?;
    let mut out: Vec<AugmentedSample> = members
        .iter()
        .map(|m| AugmentedSample {
            id: m.id.to_string(),
            label: m.label,
            synthetic: false,
            provenance: None,
            series: m.series.clone(),
        })
        .collect();
    for label in Label::ALL {
        let class: Vec<&SplitMember<'_>> = members.iter().filter(|m| m.label == label).collect();
        if class.is_empty() {
            return Err(AugmentError::MissingClass {
                label,
                split: split.as_str(),
            });
        }
        let shape = class[0].series.values.dim();
        let flat: Vec<Vec<f64>> = class
            .iter()
            .map(|m| m.series.values.iter().copied().collect())
            .collect();
        let class_cfg = SmoteConfig {
            seed: seed::derive(cfg.seed, &[split as u64, label.index() as u64]),
            ..cfg.clone()
        };
        let synthetic = smote_class(&flat, &class_cfg)?;
        for (i, s) in synthetic.into_iter().enumerate() {
            let values = Array2::from_shape_vec(shape, s.values).expect("length checked");
            out.push(AugmentedSample {
                id: format!("syn-{}-{}-{i:05}", split.as_str(), label),
                label,
                synthetic: true,
                provenance: Some(Provenance {
                    source: class[s.source].id.to_string(),
                    neighbor: class[s.neighbor].id.to_string(),
                    gap: s.gap,
                }),
                series: TimeSeries {
                    atlas: class[0].series.atlas.clone(),
                    values,
                },
            });
        }
    }
    Ok(out)
}
