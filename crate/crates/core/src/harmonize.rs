//! Site-effect harmonization of time-series features (ComBat).
//!
//! Every `(time point, ROI)` entry of a subject's `T × N` matrix is treated
//! as one feature. For each feature the model is
//!
//! ```text
//! y = alpha + age·beta_age + sex·beta_sex + gamma_site + delta_site · eps
//! ```
//!
//! Fitting follows the usual ComBat recipe: pooled least squares for the
//! overall mean and covariate effects, per-site location/scale estimates on
//! the standardized residuals, and optionally empirical-Bayes shrinkage of
//! those estimates (normal prior on the location, inverse-gamma prior on the
//! variance, hyperparameters by the method of moments).

use std::collections::BTreeMap;

use log::warn;
use nalgebra::DMatrix;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::gemm;
use crate::dataset::{SubjectRecord, TimeSeries};

/// Lower bound applied to the multiplicative effect before dividing by it.
pub const DELTA_FLOOR: f64 = 1e-8;
const EB_TOLERANCE: f64 = 1e-4;
const EB_MAX_ITER: usize = 1000;
const COVARIATES: [&str; 2] = ["age", "sex"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HarmonizeError {
    #[error("no subjects to fit")]
    Empty,
    #[error("site {site} has {count} subject(s); at least 2 are needed")]
    SiteTooSmall { site: u32, count: usize },
    #[error("subject {subject:?} has no series for atlas {atlas:?}")]
    MissingAtlas { subject: String, atlas: String },
    #[error("subject {subject:?}: matrix is {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        subject: String,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("site {0} was not seen when the model was fitted")]
    UnknownSite(u32),
    #[error("design matrix is singular (covariates collinear with site)")]
    SingularDesign,
}

pub type Result<T> = std::result::Result<T, HarmonizeError>;

/// Fitted site effects for one atlas. All per-feature arrays have length
/// `feature_count = T·N` in row-major `(t, roi)` order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombatModel {
    pub atlas: String,
    pub time_points: usize,
    pub roi_count: usize,
    pub feature_count: usize,
    pub empirical_bayes: bool,
    pub alpha: Vec<f64>,
    /// Covariate name to per-feature coefficients.
    pub beta: BTreeMap<String, Vec<f64>>,
    /// Site row to per-feature additive effect, in data units.
    pub gamma: Vec<Vec<f64>>,
    /// Site row to per-feature multiplicative effect (a scale, > 0).
    pub delta: Vec<Vec<f64>>,
    pub site_index: BTreeMap<u32, usize>,
    /// Features with zero pooled variance; these pass through untouched.
    pub passthrough: Vec<usize>,
}

impl CombatModel {
    fn covariate_effect(&self, age: f64, sex: f64, f: usize) -> f64 {
        let b_age = self.beta.get("age").map_or(0.0, |b| b[f]);
        let b_sex = self.beta.get("sex").map_or(0.0, |b| b[f]);
        self.alpha[f] + age * b_age + sex * b_sex
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string(self)
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }
}

fn flat_series<'a>(record: &'a SubjectRecord, atlas: &str) -> Result<&'a TimeSeries> {
    record
        .series(atlas)
        .ok_or_else(|| HarmonizeError::MissingAtlas {
            subject: record.id.clone(),
            atlas: atlas.to_string(),
        })
}

pub fn fit_combat(
    subjects: &[&SubjectRecord],
    atlas: &str,
    use_empirical_bayes: bool,
) -> Result<CombatModel> {
    let first = subjects.first().ok_or(HarmonizeError::Empty)?;
    let (t, n_roi) = flat_series(first, atlas)?.values.dim();
    let features = t * n_roi;
    let n = subjects.len();

    let mut site_members: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (j, s) in subjects.iter().enumerate() {
        site_members.entry(s.site).or_default().push(j);
    }
    for (&site, members) in &site_members {
        if members.len() < 2 {
            return Err(HarmonizeError::SiteTooSmall {
                site,
                count: members.len(),
            });
        }
    }
    let site_index: BTreeMap<u32, usize> = site_members
        .keys()
        .enumerate()
        .map(|(i, &s)| (s, i))
        .collect();
    let n_sites = site_index.len();

    // subjects × features
    let mut y = Vec::with_capacity(n * features);
    for s in subjects {
        let ts = flat_series(s, atlas)?;
        if ts.values.dim() != (t, n_roi) {
            return Err(HarmonizeError::ShapeMismatch {
                subject: s.id.clone(),
                expected: (t, n_roi),
                found: ts.values.dim(),
            });
        }
        y.extend(ts.values.iter());
    }

    let covariate_values = |s: &SubjectRecord| [s.age, f64::from(s.sex)];
    let active: Vec<usize> = (0..COVARIATES.len())
        .filter(|&c| {
            let v0 = covariate_values(first)[c];
            subjects.iter().any(|s| covariate_values(s)[c] != v0)
        })
        .collect();
    let p = n_sites + active.len();
    let design = DMatrix::from_fn(n, p, |j, col| {
        if col < n_sites {
            f64::from(site_index[&subjects[j].site] == col)
        } else {
            covariate_values(subjects[j])[active[col - n_sites]]
        }
    });
    let gram = design.transpose() * &design;
    let inv = gram.try_inverse().ok_or(HarmonizeError::SingularDesign)?;
    let projector = inv * design.transpose(); // p × n
    let proj_rm: Vec<f64> = (0..p)
        .flat_map(|r| (0..n).map(move |c| (r, c)))
        .map(|(r, c)| projector[(r, c)])
        .collect();
    let design_rm: Vec<f64> = (0..n)
        .flat_map(|r| (0..p).map(move |c| (r, c)))
        .map(|(r, c)| design[(r, c)])
        .collect();

    let mut coef = vec![0.0; p * features];
    gemm(p, n, features, &proj_rm, false, &y, false, &mut coef, 0.0);
    let mut fitted = vec![0.0; n * features];
    gemm(n, p, features, &design_rm, false, &coef, false, &mut fitted, 0.0);

    let mut alpha = vec![0.0; features];
    for (&site, members) in &site_members {
        let w = members.len() as f64 / n as f64;
        let row = &coef[site_index[&site] * features..(site_index[&site] + 1) * features];
        for (a, c) in alpha.iter_mut().zip(row) {
            *a += w * c;
        }
    }
    let mut beta: BTreeMap<String, Vec<f64>> = COVARIATES
        .iter()
        .map(|name| (name.to_string(), vec![0.0; features]))
        .collect();
    for (k, &c) in active.iter().enumerate() {
        let row = &coef[(n_sites + k) * features..(n_sites + k + 1) * features];
        beta.insert(COVARIATES[c].to_string(), row.to_vec());
    }

    let mut var_pooled = vec![0.0; features];
    for (yr, fr) in y.chunks_exact(features).zip(fitted.chunks_exact(features)) {
        for ((v, a), b) in var_pooled.iter_mut().zip(yr).zip(fr) {
            *v += (a - b) * (a - b);
        }
    }
    var_pooled.iter_mut().for_each(|v| *v /= n as f64);

    let passthrough: Vec<usize> = (0..features)
        .filter(|&f| {
            let scale = 1.0 + alpha[f] * alpha[f];
            !(var_pooled[f] > 1e-24 * scale)
        })
        .collect();
    if !passthrough.is_empty() {
        warn!(
            "atlas {atlas}: {} zero-variance feature(s) left unharmonized (first index {})",
            passthrough.len(),
            passthrough[0]
        );
    }
    let mut active_feature = vec![true; features];
    for &f in &passthrough {
        active_feature[f] = false;
    }
    let sd: Vec<f64> = var_pooled.iter().map(|v| v.sqrt()).collect();

    // standardized residuals, subjects × features
    let mut stand = y;
    for (j, row) in stand.chunks_exact_mut(features).enumerate() {
        let [age, sex] = covariate_values(subjects[j]);
        for (f, v) in row.iter_mut().enumerate() {
            *v = if active_feature[f] {
                let b_age = beta["age"][f];
                let b_sex = beta["sex"][f];
                (*v - alpha[f] - age * b_age - sex * b_sex) / sd[f]
            } else {
                0.0
            };
        }
    }

    let mut gamma = vec![vec![0.0; features]; n_sites];
    let mut delta = vec![vec![1.0; features]; n_sites];
    for (&site, members) in &site_members {
        let b = site_index[&site];
        let nb = members.len() as f64;
        let mut g_hat = vec![0.0; features];
        for &j in members {
            for (g, v) in g_hat.iter_mut().zip(&stand[j * features..(j + 1) * features]) {
                *g += v;
            }
        }
        g_hat.iter_mut().for_each(|g| *g /= nb);
        let mut d_hat = vec![0.0; features];
        for &j in members {
            let row = &stand[j * features..(j + 1) * features];
            for ((d, v), g) in d_hat.iter_mut().zip(row).zip(&g_hat) {
                *d += (v - g) * (v - g);
            }
        }
        d_hat.iter_mut().for_each(|d| *d /= nb - 1.0);

        let (g_star, d_star) = if n_sites == 1 {
            // a lone site has no scale to disentangle from the pooled variance
            (g_hat, vec![1.0; features])
        } else if use_empirical_bayes {
            let site_rows: Vec<&[f64]> = members
                .iter()
                .map(|&j| &stand[j * features..(j + 1) * features])
                .collect();
            shrink(&g_hat, &d_hat, &site_rows, &active_feature)
        } else {
            (g_hat, d_hat)
        };

        for f in 0..features {
            if active_feature[f] {
                gamma[b][f] = g_star[f] * sd[f];
                delta[b][f] = d_star[f].sqrt().max(DELTA_FLOOR);
            }
        }
    }

    Ok(CombatModel {
        atlas: atlas.to_string(),
        time_points: t,
        roi_count: n_roi,
        feature_count: features,
        empirical_bayes: use_empirical_bayes,
        alpha,
        beta,
        gamma,
        delta,
        site_index,
        passthrough,
    })
}

fn mean_var(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let count = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / count;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (count - 1.0);
    (mean, var)
}

/// Empirical-Bayes posterior location and variance for one site.
fn shrink(
    g_hat: &[f64],
    d_hat: &[f64],
    site_rows: &[&[f64]],
    active: &[bool],
) -> (Vec<f64>, Vec<f64>) {
    let idx = || (0..g_hat.len()).filter(|&f| active[f]);
    if idx().count() < 2 {
        return (g_hat.to_vec(), d_hat.to_vec());
    }
    let (g_bar, t2) = mean_var(idx().map(|f| g_hat[f]));
    let (m, s2) = mean_var(idx().map(|f| d_hat[f]));
    // inverse-gamma hyperparameters; degenerate spread leaves delta unshrunk
    let prior = (s2 > 0.0).then(|| ((2.0 * s2 + m * m) / s2, (m * s2 + m * m * m) / s2));
    let nb = site_rows.len() as f64;

    let mut g_star = g_hat.to_vec();
    let mut d_star = d_hat.to_vec();
    for f in idx() {
        let mut g_old = g_hat[f];
        let mut d_old = d_hat[f];
        for _ in 0..EB_MAX_ITER {
            let g_new = (t2 * nb * g_hat[f] + d_old * g_bar) / (t2 * nb + d_old);
            let d_new = match prior {
                Some((a, b)) => {
                    let sum2: f64 = site_rows.iter().map(|r| (r[f] - g_new).powi(2)).sum();
                    (0.5 * sum2 + b) / (nb / 2.0 + a - 1.0)
                }
                None => d_hat[f],
            };
            let change = ((g_new - g_old).abs() / g_old.abs().max(1e-12))
                .max((d_new - d_old).abs() / d_old.abs().max(1e-12));
            g_old = g_new;
            d_old = d_new;
            if change < EB_TOLERANCE {
                break;
            }
        }
        g_star[f] = g_old;
        d_star[f] = d_old;
    }
    (g_star, d_star)
}

/// Removes the fitted site effects from one subject's matrix.
pub fn apply_combat(model: &CombatModel, record: &SubjectRecord) -> Result<TimeSeries> {
    let ts = flat_series(record, &model.atlas)?;
    let expected = (model.time_points, model.roi_count);
    if ts.values.dim() != expected {
        return Err(HarmonizeError::ShapeMismatch {
            subject: record.id.clone(),
            expected,
            found: ts.values.dim(),
        });
    }
    let b = *model
        .site_index
        .get(&record.site)
        .ok_or(HarmonizeError::UnknownSite(record.site))?;
    let mut skip = vec![false; model.feature_count];
    for &f in &model.passthrough {
        skip[f] = true;
    }
    let sex = f64::from(record.sex);
    let values: Vec<f64> = ts
        .values
        .iter()
        .enumerate()
        .map(|(f, &y)| {
            if skip[f] {
                return y;
            }
            let cov = model.covariate_effect(record.age, sex, f);
            let delta = model.delta[b][f].max(DELTA_FLOOR);
            let gamma = model.gamma[b][f];
            // algebraically (y - cov - gamma) / delta + cov, arranged so
            // identity effects reproduce the input bit for bit
            y - gamma - (y - cov - gamma) * (1.0 - 1.0 / delta)
        })
        .collect();
    let values = Array2::from_shape_vec(expected, values).expect("shape checked above");
    Ok(TimeSeries {
        atlas: model.atlas.clone(),
        values,
    })
}
