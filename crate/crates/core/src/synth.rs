//! Synthetic multi-site, multi-atlas cohorts with a planted class signal.
//!
//! ROIs of every atlas are placed on a shared coordinate `x ∈ [0, 1)`, so
//! that "the same brain region" exists in every parcellation. For subject
//! `s` and ROI `i` at coordinate `x_i`:
//!
//! ```text
//! y_i(t) = Σ_k L_k(x_i) f_k(t) + ε_i(t) + b_i(t)
//!        + site_shift · o_{site,i} + age_effect · age
//! ```
//!
//! where the factors `f_k` and noise `ε` are standard normal, `L_k` is a
//! smooth loading profile shared by all atlases, and `b_i` is nonzero only
//! inside the planted block. Positive subjects get `b_i = s·g(t)` with one
//! shared `g`, negatives get independent `b_i = s·η_i(t)`; both have the
//! same variance, so only the within-block correlation carries the class.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{write_series_csv, AtlasSpec, Cohort, Label, Manifest, ManifestSubject, SubjectRecord, TimeSeries};
use crate::seed;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
    #[error("writing {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, SynthError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    /// Subjects per site; sites are numbered from 1.
    pub site_sizes: Vec<usize>,
    pub time_points: usize,
    pub atlases: Vec<AtlasSpec>,
    pub signal_strength: f64,
    pub site_shift: f64,
    pub age_effect: f64,
    pub factor_count: usize,
    pub block_start: f64,
    pub block_width: f64,
    pub seed: u64,
}

/// Signal strength at which the default pipeline separates the classes easily.
pub const EASY_SIGNAL: f64 = 0.8;

pub fn default_atlases() -> Vec<AtlasSpec> {
    [("Dose", 160), ("AAL", 116), ("CK", 200), ("HO", 112)]
        .into_iter()
        .map(|(name, n_rois)| AtlasSpec {
            name: name.to_string(),
            n_rois,
        })
        .collect()
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            site_sizes: vec![80; 4],
            time_points: 140,
            atlases: default_atlases(),
            signal_strength: EASY_SIGNAL,
            site_shift: 1.0,
            age_effect: 0.0,
            factor_count: 4,
            block_start: 0.4,
            block_width: 0.15,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SynthError::Spec(m.to_string()));
        if self.site_sizes.is_empty() || self.site_sizes.iter().any(|&n| n == 0) {
            return bad("every site needs at least one subject");
        }
        if self.time_points < 2 {
            return bad("time_points must be at least 2");
        }
        if self.atlases.is_empty() || self.atlases.iter().any(|a| a.n_rois < 2) {
            return bad("need at least one atlas, each with at least 2 ROIs");
        }
        if !(self.signal_strength >= 0.0) || !self.site_shift.is_finite() || !self.age_effect.is_finite() {
            return bad("signal_strength must be >= 0 and all magnitudes finite");
        }
        if !(0.0..1.0).contains(&self.block_start) || !(self.block_width > 0.0) {
            return bad("block must start in [0, 1) and have positive width");
        }
        Ok(())
    }

    fn coordinate(i: usize, n: usize) -> f64 {
        (i as f64 + 0.5) / n as f64
    }

    fn in_block(&self, x: f64) -> bool {
        x >= self.block_start && x < self.block_start + self.block_width
    }

    /// ROI indices of the planted block in `atlas`.
    pub fn block_rois(&self, atlas: &AtlasSpec) -> Vec<usize> {
        (0..atlas.n_rois)
            .filter(|&i| self.in_block(Self::coordinate(i, atlas.n_rois)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub spec: SynthSpec,
    pub planted_rois: BTreeMap<String, Vec<usize>>,
    /// Per site and atlas, the unit offsets scaled by `site_shift`.
    pub site_offsets: BTreeMap<u32, BTreeMap<String, Vec<f64>>>,
}

fn loading(k: usize, x: f64, phase: f64) -> f64 {
    0.8 * (std::f64::consts::TAU * (k as f64 + 1.0) * x + phase).cos()
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

struct Demographics {
    id: String,
    site: u32,
    label: Label,
    age: f64,
    sex: u8,
    index: usize,
}

fn demographics(spec: &SynthSpec) -> Vec<Demographics> {
    let mut out = Vec::new();
    for (s, &n) in spec.site_sizes.iter().enumerate() {
        let site = s as u32 + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(spec.seed, &[0xDE30, site as u64]));
        // alternate labels over a shuffled order: balanced to within one
        let mut labels: Vec<Label> = (0..n)
            .map(|i| if i % 2 == 0 { Label::Positive } else { Label::Negative })
            .collect();
        labels.shuffle(&mut rng);
        for (j, label) in labels.into_iter().enumerate() {
            let index = out.len();
            out.push(Demographics {
                id: format!("site{site}-sub{j:03}"),
                site,
                label,
                age: rng.random_range(18.0..65.0f64).round(),
                sex: rng.random_range(0..2u8),
                index,
            });
        }
    }
    out
}

/// Generates the cohort in memory.
pub fn generate(spec: &SynthSpec) -> Result<(Cohort, GroundTruth)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(spec.seed, &[0x10AD]));
    let phases: Vec<f64> = (0..spec.factor_count)
        .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
        .collect();

    let mut site_offsets = BTreeMap::new();
    for s in 0..spec.site_sizes.len() {
        let site = s as u32 + 1;
        let mut per_atlas = BTreeMap::new();
        for (a, atlas) in spec.atlases.iter().enumerate() {
            let mut r = ChaCha8Rng::seed_from_u64(seed::derive(spec.seed, &[0x517E, site as u64, a as u64]));
            let o: Vec<f64> = (0..atlas.n_rois).map(|_| normal(&mut r)).collect();
            per_atlas.insert(atlas.name.clone(), o);
        }
        site_offsets.insert(site, per_atlas);
    }

    let t = spec.time_points;
    let subjects: Vec<SubjectRecord> = demographics(spec)
        .into_par_iter()
        .map(|d| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(spec.seed, &[0x5B, d.index as u64]));
            let factors: Vec<Vec<f64>> = (0..spec.factor_count)
                .map(|_| (0..t).map(|_| normal(&mut rng)).collect())
                .collect();
            let shared: Vec<f64> = (0..t).map(|_| normal(&mut rng)).collect();
            let mut series = BTreeMap::new();
            for atlas in &spec.atlases {
                let n = atlas.n_rois;
                let offsets = &site_offsets[&d.site][&atlas.name];
                let mut values = Array2::zeros((t, n));
                for i in 0..n {
                    let x = SynthSpec::coordinate(i, n);
                    let loads: Vec<f64> = phases.iter().enumerate().map(|(k, &p)| loading(k, x, p)).collect();
                    let constant = spec.site_shift * offsets[i] + spec.age_effect * d.age;
                    let block = spec.in_block(x);
                    for tt in 0..t {
                        let mut v = constant + normal(&mut rng);
                        for (k, l) in loads.iter().enumerate() {
                            v += l * factors[k][tt];
                        }
                        if block {
                            let b = match d.label {
                                Label::Positive => shared[tt],
                                Label::Negative => normal(&mut rng),
                            };
                            v += spec.signal_strength * b;
                        }
                        values[[tt, i]] = v;
                    }
                }
                let ts = TimeSeries::new(&atlas.name, values).expect("validated shape");
                series.insert(atlas.name.clone(), ts);
            }
            SubjectRecord {
                id: d.id,
                site: d.site,
                label: d.label,
                age: d.age,
                sex: d.sex,
                series,
            }
        })
        .collect();

    let planted_rois = spec
        .atlases
        .iter()
        .map(|a| (a.name.clone(), spec.block_rois(a)))
        .collect();
    let scaled_offsets = site_offsets
        .into_iter()
        .map(|(site, m)| {
            let m = m
                .into_iter()
                .map(|(a, v)| (a, v.into_iter().map(|o| o * spec.site_shift).collect()))
                .collect();
            (site, m)
        })
        .collect();
    Ok((
        Cohort {
            time_points: t,
            atlases: spec.atlases.clone(),
            subjects,
        },
        GroundTruth {
            spec: spec.clone(),
            planted_rois,
            site_offsets: scaled_offsets,
        },
    ))
}

/// Writes `manifest.json`, one CSV per subject and atlas under `series/`,
/// and `ground_truth.json`. Returns the manifest path.
pub fn write_cohort(cohort: &Cohort, truth: &GroundTruth, dir: &Path) -> Result<PathBuf> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| SynthError::Io { path, source }
    };
    let series_dir = dir.join("series");
    std::fs::create_dir_all(&series_dir).map_err(io(&series_dir))?;
    let subjects: Vec<ManifestSubject> = cohort
        .subjects
        .par_iter()
        .map(|s| {
            let mut files = BTreeMap::new();
            for (atlas, ts) in &s.series {
                let rel = format!("series/{}_{}.csv", s.id, atlas);
                let path = dir.join(&rel);
                write_series_csv(&path, &ts.values).map_err(io(&path))?;
                files.insert(atlas.clone(), rel);
            }
            Ok(ManifestSubject {
                id: s.id.clone(),
                site: s.site,
                label: s.label.to_string(),
                age: s.age,
                sex: s.sex,
                series: files,
            })
        })
        .collect::<Result<_>>()?;
    let manifest = Manifest {
        t: cohort.time_points,
        atlases: cohort.atlases.clone(),
        subjects,
    };
    let manifest_path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&manifest_path, text).map_err(io(&manifest_path))?;
    let truth_path = dir.join("ground_truth.json");
    let text = serde_json::to_string_pretty(truth).expect("ground truth serializes");
    std::fs::write(&truth_path, text).map_err(io(&truth_path))?;
    Ok(manifest_path)
}
