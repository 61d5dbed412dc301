use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub n: usize,
    pub mean_diff: f64,
    /// `NaN` when the differences have zero variance.
    pub t: f64,
    pub p_value: f64,
    pub tier: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Alternative {
    /// `mean(a - b) > 0`.
    Greater,
    /// `mean(a - b) < 0`.
    Less,
}

pub fn significance_tier(p: f64) -> &'static str {
    match p {
        p if p <= 1e-4 => "****",
        p if p <= 1e-3 => "***",
        p if p <= 1e-2 => "**",
        p if p <= 0.05 => "*",
        _ => "n.s.",
    }
}

fn differences(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("paired samples of length {} and {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::validation("samples", "a paired t-test needs n >= 2"));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x - y).collect())
}

/// `(mean, t)` of the differences; `t` is `None` when their variance is zero.
fn t_statistic(d: &[f64]) -> (f64, Option<f64>) {
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        (mean, None)
    } else {
        (mean, Some(mean / (var / n).sqrt()))
    }
}

fn student(df: f64) -> StudentsT {
    StudentsT::new(0.0, 1.0, df).expect("df >= 1")
}

fn finish(n: usize, mean_diff: f64, t: Option<f64>, p: f64) -> TTest {
    TTest {
        n,
        mean_diff,
        t: t.unwrap_or(f64::NAN),
        p_value: p,
        tier: significance_tier(p).to_string(),
    }
}

/// Two-sided paired t-test. Zero-variance differences give `p = 1` when they
/// are all zero and `p = 0` otherwise.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<TTest> {
    let d = differences(a, b)?;
    let (mean, t) = t_statistic(&d);
    let p = match t {
        None if mean == 0.0 => 1.0,
        None => 0.0,
        Some(t) => (2.0 * student(d.len() as f64 - 1.0).sf(t.abs())).min(1.0),
    };
    Ok(finish(d.len(), mean, t, p))
}

/// One-sided paired t-test of the given alternative.
pub fn paired_ttest_one_sided(a: &[f64], b: &[f64], alternative: Alternative) -> Result<TTest> {
    let d = differences(a, b)?;
    let (mean, t) = t_statistic(&d);
    let sign = match alternative {
        Alternative::Greater => 1.0,
        Alternative::Less => -1.0,
    };
    let p = match t {
        None if sign * mean > 0.0 => 0.0,
        None => 1.0,
        Some(t) => student(d.len() as f64 - 1.0).sf(sign * t),
    };
    Ok(finish(d.len(), mean, t, p))
}

/// Mean with a two-sided 95% t interval; the bounds equal the mean for n < 2.
pub fn mean_ci95(values: &[f64]) -> (f64, f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, mean, mean);
    }
    let var = values.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    let half = student((n - 1) as f64).inverse_cdf(0.975) * (var / n as f64).sqrt();
    (mean, mean - half, mean + half)
}
