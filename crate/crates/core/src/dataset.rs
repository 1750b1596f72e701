//! Cohort manifests, time-series files and stratified fold plans.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest {path}: {source}")]
    Manifest {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("malformed time-series file {path}: {reason}")]
    Csv { path: PathBuf, reason: String },
    #[error("{path}: expected {expected_t}x{expected_n} matrix, found {found_t}x{found_n}")]
    ShapeMismatch {
        path: PathBuf,
        expected_t: usize,
        expected_n: usize,
        found_t: usize,
        found_n: usize,
    },
    #[error("{path}: non-finite value at row {row}, column {col}")]
    NonFinite { path: PathBuf, row: usize, col: usize },
    #[error("unknown label {0:?} (expected \"MDD\" or \"HC\")")]
    UnknownLabel(String),
    #[error("duplicate subject id {0:?}")]
    DuplicateId(String),
    #[error("subject {subject:?} has no series for atlas {atlas:?}")]
    MissingAtlas { subject: String, atlas: String },
    #[error("time series needs at least 2 time points and 2 ROIs, got {t}x{n}")]
    TooSmall { t: usize, n: usize },
    #[error("fold count must be at least 2, got {0}")]
    FoldCount(usize),
    #[error("class {label} has {count} subjects, fewer than the {folds} folds requested")]
    ClassTooSmall {
        label: Label,
        count: usize,
        folds: usize,
    },
}

pub type Result<T> = std::result::Result<T, DatasetError>;

/// Diagnostic class. Serialized as `"MDD"` / `"HC"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "HC")]
    Negative,
    #[serde(rename = "MDD")]
    Positive,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Positive, Label::Negative];

    /// Class index used by classifiers: positive = 1, negative = 0.
    pub fn index(self) -> usize {
        match self {
            Label::Negative => 0,
            Label::Positive => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 1 {
            Label::Positive
        } else {
            Label::Negative
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Negative => "HC",
            Label::Positive => "MDD",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "MDD" => Ok(Label::Positive),
            "HC" => Ok(Label::Negative),
            other => Err(DatasetError::UnknownLabel(other.to_string())),
        }
    }
}

/// A `T × N` matrix of ROI signals (rows are time points).
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    pub atlas: String,
    pub values: Array2<f64>,
}

impl TimeSeries {
    pub fn new(atlas: impl Into<String>, values: Array2<f64>) -> Result<Self> {
        let (t, n) = values.dim();
        if t < 2 || n < 2 {
            return Err(DatasetError::TooSmall { t, n });
        }
        Ok(Self {
            atlas: atlas.into(),
            values,
        })
    }

    pub fn time_points(&self) -> usize {
        self.values.nrows()
    }

    pub fn roi_count(&self) -> usize {
        self.values.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub id: String,
    pub site: u32,
    pub label: Label,
    pub age: f64,
    pub sex: u8,
    pub series: BTreeMap<String, TimeSeries>,
}

impl SubjectRecord {
    pub fn series(&self, atlas: &str) -> Option<&TimeSeries> {
        self.series.get(atlas)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AtlasSpec {
    pub name: String,
    pub n_rois: usize,
}

/// A loaded cohort: every subject has one series per declared atlas.
#[derive(Debug, Clone)]
pub struct Cohort {
    pub time_points: usize,
    pub atlases: Vec<AtlasSpec>,
    pub subjects: Vec<SubjectRecord>,
}

impl Cohort {
    pub fn atlas_names(&self) -> Vec<String> {
        self.atlases.iter().map(|a| a.name.clone()).collect()
    }

    pub fn atlas(&self, name: &str) -> Option<&AtlasSpec> {
        self.atlases.iter().find(|a| a.name == name)
    }

    pub fn subject(&self, id: &str) -> Option<&SubjectRecord> {
        self.subjects.iter().find(|s| s.id == id)
    }

    /// Lookup table from id to index in `subjects`.
    pub fn index(&self) -> BTreeMap<&str, usize> {
        self.subjects
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id.as_str(), i))
            .collect()
    }

    pub fn class_counts(&self) -> (usize, usize) {
        let pos = self
            .subjects
            .iter()
            .filter(|s| s.label == Label::Positive)
            .count();
        (pos, self.subjects.len() - pos)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestSubject {
    pub id: String,
    pub site: u32,
    pub label: String,
    pub age: f64,
    pub sex: u8,
    pub series: BTreeMap<String, String>,
}

/// On-disk cohort description; series paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub t: usize,
    pub atlases: Vec<AtlasSpec>,
    pub subjects: Vec<ManifestSubject>,
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Cohort> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|source| DatasetError::Manifest {
            path: path.to_path_buf(),
            source,
        })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));

    let mut seen = HashSet::new();
    for s in &manifest.subjects {
        if !seen.insert(s.id.as_str()) {
            return Err(DatasetError::DuplicateId(s.id.clone()));
        }
    }

    let subjects = manifest
        .subjects
        .par_iter()
        .map(|s| load_subject(s, &manifest, base))
        .collect::<Result<Vec<_>>>()?;

    Ok(Cohort {
        time_points: manifest.t,
        atlases: manifest.atlases,
        subjects,
    })
}

fn load_subject(s: &ManifestSubject, manifest: &Manifest, base: &Path) -> Result<SubjectRecord> {
    let label: Label = s.label.parse()?;
    let mut series = BTreeMap::new();
    for atlas in &manifest.atlases {
        let rel = s
            .series
            .get(&atlas.name)
            .ok_or_else(|| DatasetError::MissingAtlas {
                subject: s.id.clone(),
                atlas: atlas.name.clone(),
            })?;
        let file = base.join(rel);
        let values = read_series_csv(&file)?;
        let (t, n) = values.dim();
        if t != manifest.t || n != atlas.n_rois {
            return Err(DatasetError::ShapeMismatch {
                path: file,
                expected_t: manifest.t,
                expected_n: atlas.n_rois,
                found_t: t,
                found_n: n,
            });
        }
        series.insert(atlas.name.clone(), TimeSeries::new(&atlas.name, values)?);
    }
    Ok(SubjectRecord {
        id: s.id.clone(),
        site: s.site,
        label,
        age: s.age,
        sex: s.sex,
        series,
    })
}

/// Reads a header-less CSV of decimal values, one row per time point.
pub fn read_series_csv(path: &Path) -> Result<Array2<f64>> {
    let csv_err = |reason: String| DatasetError::Csv {
        path: path.to_path_buf(),
        reason,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(source) => DatasetError::Io {
                path: path.to_path_buf(),
                source,
            },
            other => csv_err(format!("{other:?}")),
        })?;
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for record in reader.records() {
        let record = record.map_err(|e| csv_err(e.to_string()))?;
        if *cols.get_or_insert(record.len()) != record.len() {
            return Err(csv_err(format!("row {rows} has {} columns", record.len())));
        }
        for (col, field) in record.iter().enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| csv_err(format!("row {rows}, column {col}: {field:?}")))?;
            if !v.is_finite() {
                return Err(DatasetError::NonFinite {
                    path: path.to_path_buf(),
                    row: rows,
                    col,
                });
            }
            data.push(v);
        }
        rows += 1;
    }
    let cols = cols.unwrap_or(0);
    Array2::from_shape_vec((rows, cols), data).map_err(|e| csv_err(e.to_string()))
}

pub fn write_series_csv(path: &Path, values: &Array2<f64>) -> std::io::Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for row in values.rows() {
        let mut first = true;
        for v in row {
            if !first {
                out.write_all(b",")?;
            }
            first = false;
            write!(out, "{v:.6}")?;
        }
        out.write_all(b"\n")?;
    }
    out.flush()
}

/// Train / validation / test membership for one cross-validation fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub index: usize,
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub fold_count: usize,
    pub seed: u64,
    /// Subject id to the fold in which it is a test subject.
    pub fold_assignments: BTreeMap<String, usize>,
    pub folds: Vec<Fold>,
}

/// Builds a stratified `fold_count`-fold plan.
///
/// Each class is shuffled with a generator seeded by `seed` and dealt
/// round-robin into folds; the dealing position carries over from the
/// positive to the negative class so fold sizes differ by at most one.
/// Inside every fold the non-test pool of each class is split 8:1 into
/// train and validation, with `round(pool / 9)` validation subjects
/// (at least one, and never the whole pool).
pub fn make_stratified_folds(cohort: &Cohort, fold_count: usize, seed: u64) -> Result<SplitPlan> {
    if fold_count < 2 {
        return Err(DatasetError::FoldCount(fold_count));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_class: Vec<(Label, Vec<String>)> = Vec::new();
    for label in Label::ALL {
        let mut ids: Vec<String> = cohort
            .subjects
            .iter()
            .filter(|s| s.label == label)
            .map(|s| s.id.clone())
            .collect();
        if ids.len() < fold_count {
            return Err(DatasetError::ClassTooSmall {
                label,
                count: ids.len(),
                folds: fold_count,
            });
        }
        ids.shuffle(&mut rng);
        per_class.push((label, ids));
    }

    let mut fold_assignments = BTreeMap::new();
    // class -> fold -> members, in shuffled order
    let mut dealt: Vec<Vec<Vec<String>>> = Vec::new();
    let mut cursor = 0;
    for (_, ids) in &per_class {
        let mut buckets = vec![Vec::new(); fold_count];
        for id in ids {
            buckets[cursor % fold_count].push(id.clone());
            fold_assignments.insert(id.clone(), cursor % fold_count);
            cursor += 1;
        }
        dealt.push(buckets);
    }

    let folds = (0..fold_count)
        .map(|f| {
            let mut fold = Fold {
                index: f,
                train: Vec::new(),
                validation: Vec::new(),
                test: Vec::new(),
            };
            for (class_idx, (_, ids)) in per_class.iter().enumerate() {
                fold.test.extend(dealt[class_idx][f].iter().cloned());
                let pool: Vec<&String> = ids
                    .iter()
                    .filter(|id| fold_assignments[*id] != f)
                    .collect();
                let n_val = validation_count(pool.len());
                fold.validation.extend(pool[..n_val].iter().map(|s| (*s).clone()));
                fold.train.extend(pool[n_val..].iter().map(|s| (*s).clone()));
            }
            fold
        })
        .collect();

    Ok(SplitPlan {
        fold_count,
        seed,
        fold_assignments,
        folds,
    })
}

fn validation_count(pool: usize) -> usize {
    if pool < 2 {
        return 0;
    }
    ((pool as f64 / 9.0).round() as usize).clamp(1, pool - 1)
}
