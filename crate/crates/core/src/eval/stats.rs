//! Summary statistics over folds and the independent two-sample t-test.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::{EvalError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TTestKind {
    /// Unequal variances, Welch–Satterthwaite degrees of freedom.
    #[default]
    Welch,
    /// Pooled variance, `na + nb - 2` degrees of freedom.
    Student,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    /// Two-sided.
    pub p: f64,
    pub significant: bool,
}

pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample variance with the `n - 1` denominator.
pub fn sample_variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() as f64 - 1.0)
}

pub fn two_sample_ttest(a: &[f64], b: &[f64], kind: TTestKind) -> Result<TTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(EvalError::TooFewObservations {
            a: a.len(),
            b: b.len(),
        });
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (va, vb) = (sample_variance(a), sample_variance(b));
    let (se2, df) = match kind {
        TTestKind::Welch => {
            let (ua, ub) = (va / na, vb / nb);
            let se2 = ua + ub;
            (se2, se2 * se2 / (ua * ua / (na - 1.0) + ub * ub / (nb - 1.0)))
        }
        TTestKind::Student => {
            let df = na + nb - 2.0;
            let pooled = ((na - 1.0) * va + (nb - 1.0) * vb) / df;
            (pooled * (1.0 / na + 1.0 / nb), df)
        }
    };
    if !(se2 > 0.0) || !df.is_finite() {
        return Err(EvalError::DegenerateVariance);
    }
    let t = (mean(a) - mean(b)) / se2.sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|_| EvalError::DegenerateVariance)?;
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(TTest {
        t,
        df,
        p,
        significant: p < SIGNIFICANCE_LEVEL,
    })
}

/// Mean and sample standard deviation of the folds where a metric is defined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: Option<f64>,
    pub sd: Option<f64>,
    pub defined_folds: usize,
}

impl Stat {
    pub fn from_values(values: &[f64]) -> Self {
        Self {
            mean: (!values.is_empty()).then(|| mean(values)),
            sd: (values.len() >= 2).then(|| sample_variance(values).sqrt()),
            defined_folds: values.len(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn welch_reference_case() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b = [3.0, 4.0, 5.0, 6.0, 7.0];
        let r = two_sample_ttest(&a, &b, TTestKind::Welch).unwrap();
        assert!((r.t + 2.0).abs() < 1e-12);
        assert!((r.df - 8.0).abs() < 1e-12);
        // scipy.stats.ttest_ind(a, b, equal_var=False).pvalue
        assert!((r.p - 0.080516).abs() < 1e-5, "{}", r.p);
        assert!(!r.significant);
        let s = two_sample_ttest(&a, &b, TTestKind::Student).unwrap();
        assert!((s.t - r.t).abs() < 1e-12 && (s.p - r.p).abs() < 1e-12);
    }

    #[test]
    fn identical_and_swapped() {
        let a = [0.7, 0.8, 0.75, 0.9];
        let r = two_sample_ttest(&a, &a, TTestKind::Welch).unwrap();
        assert_eq!((r.t, r.p), (0.0, 1.0));
        let b = [0.6, 0.65, 0.7, 0.62, 0.61];
        for kind in [TTestKind::Welch, TTestKind::Student] {
            let ab = two_sample_ttest(&a, &b, kind).unwrap();
            let ba = two_sample_ttest(&b, &a, kind).unwrap();
            assert!((ab.p - ba.p).abs() < 1e-12);
            assert_eq!(ab.t, -ba.t);
        }
    }

    #[test]
    fn degenerate_inputs() {
        assert_eq!(
            two_sample_ttest(&[1.0, 1.0], &[2.0, 2.0], TTestKind::Welch),
            Err(EvalError::DegenerateVariance)
        );
        assert!(matches!(
            two_sample_ttest(&[1.0], &[2.0, 3.0], TTestKind::Welch),
            Err(EvalError::TooFewObservations { .. })
        ));
    }

    #[test]
    fn stat_uses_sample_sd() {
        let s = Stat::from_values(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.mean, Some(2.5));
        assert!((s.sd.unwrap() - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(Stat::from_values(&[0.4]).sd, None);
    }
}
