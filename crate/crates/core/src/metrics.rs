//! Evaluation statistics in dB: RMSE, MAE, Pearson r, R², and the empirical
//! CDF of absolute error with coverage at a threshold.
//!
//! Correlation and R² are `None` when a variance is zero; they are never
//! reported as 0 in that case.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 3 dB is a factor-of-two deviation in linear power.
pub const DEFAULT_COVERAGE_DB: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rmse: f64,
    pub mae: f64,
    pub pearson_r: Option<f64>,
    pub r_squared: Option<f64>,
    pub coverage: f64,
    pub threshold_db: f64,
    pub n: usize,
    #[serde(skip)]
    pub cdf: Vec<(f64, f64)>,
}

fn check_pair(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::shape(
            "metrics",
            format!("{} predictions vs {} labels", pred.len(), truth.len()),
        ));
    }
    if pred.is_empty() {
        return Err(Error::Data("metrics on an empty set".into()));
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    let mse = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / pred.len() as f64;
    Ok(mse.sqrt())
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

pub fn pearson_r(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    if a.len() < 2 {
        return Err(Error::Undefined("pearson_r needs at least two samples"));
    }
    let (ma, mb) = (mean(a), mean(b));
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::Undefined("pearson_r with zero variance"));
    }
    Ok((cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0))
}

/// `1 − SSE/SST`; negative when worse than predicting the mean.
pub fn r_squared(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    let m = mean(truth);
    let sst: f64 = truth.iter().map(|t| (t - m) * (t - m)).sum();
    if sst == 0.0 {
        return Err(Error::Undefined("r_squared with constant labels"));
    }
    let sse: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(1.0 - sse / sst)
}

/// Sorted `(abs_error, k/n)` pairs; the last fraction is exactly 1.
pub fn empirical_cdf(abs_errors: &[f64]) -> Result<Vec<(f64, f64)>> {
    if abs_errors.is_empty() {
        return Err(Error::Data("cdf of an empty set".into()));
    }
    let mut sorted = abs_errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    Ok(sorted
        .into_iter()
        .enumerate()
        .map(|(k, e)| (e, if k + 1 == n { 1.0 } else { (k + 1) as f64 / n as f64 }))
        .collect())
}

/// Fraction of absolute errors `≤ threshold`, plus the CDF table.
pub fn cdf_coverage(abs_errors: &[f64], threshold: f64) -> Result<(f64, Vec<(f64, f64)>)> {
    let cdf = empirical_cdf(abs_errors)?;
    let within = abs_errors.iter().filter(|&&e| e <= threshold).count();
    Ok((within as f64 / abs_errors.len() as f64, cdf))
}

pub fn report(pred: &[f64], truth: &[f64], threshold_db: f64) -> Result<MetricsReport> {
    check_pair(pred, truth)?;
    let errors: Vec<f64> = pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).collect();
    let (coverage, cdf) = cdf_coverage(&errors, threshold_db)?;
    Ok(MetricsReport {
        rmse: rmse(pred, truth)?,
        mae: mae(pred, truth)?,
        pearson_r: pearson_r(pred, truth).ok(),
        r_squared: r_squared(pred, truth).ok(),
        coverage,
        threshold_db,
        n: pred.len(),
        cdf,
    })
}

/// CSV with header `abs_error_db,cum_fraction`.
pub fn write_cdf_csv(path: &Path, cdf: &[(f64, f64)]) -> Result<()> {
    let mut out = String::from("abs_error_db,cum_fraction\n");
    for (e, f) in cdf {
        out.push_str(&format!("{e},{f}\n"));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}
