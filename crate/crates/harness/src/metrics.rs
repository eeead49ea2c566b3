//! Error metrics between estimate and truth series: mean squared position
//! error (squared Euclidean distance) and mean squared yaw error with the
//! angular difference wrapped into (-pi, pi].

use field_ekf_core::drone::wrap_angle;
use nalgebra::Vector3;

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Default)]
pub struct MetricsReport {
    /// Mean squared position error, m^2.
    pub e_rho: f64,
    /// Mean squared wrapped yaw error, rad^2.
    pub e_theta: f64,
    /// Per-step squared position errors.
    pub rho_series: Vec<f64>,
    /// Per-step squared wrapped yaw errors, each in [0, pi^2].
    pub theta_series: Vec<f64>,
    /// Step index at which the run was declared divergent, if any.
    pub diverged: Option<usize>,
    /// Wall time per correction step, milliseconds.
    pub step_ms: Vec<f64>,
}

impl MetricsReport {
    pub fn median_step_ms(&self) -> f64 {
        percentile(&self.step_ms, 0.5)
    }

    pub fn mean_step_ms(&self) -> f64 {
        if self.step_ms.is_empty() {
            return 0.0;
        }
        self.step_ms.iter().sum::<f64>() / self.step_ms.len() as f64
    }

    pub fn max_step_ms(&self) -> f64 {
        self.step_ms.iter().copied().fold(0.0, f64::max)
    }
}

fn percentile(series: &[f64], q: f64) -> f64 {
    if series.is_empty() {
        return 0.0;
    }
    let mut sorted = series.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    sorted[((sorted.len() - 1) as f64 * q).round() as usize]
}

fn check_lengths(n_est: usize, n_truth: usize) -> Result<()> {
    if n_est != n_truth {
        return Err(HarnessError::Config(format!(
            "estimate series has {n_est} entries, truth has {n_truth}"
        )));
    }
    Ok(())
}

/// Mean squared Euclidean distance between paired positions.
pub fn mse_position(est: &[Vector3<f64>], truth: &[Vector3<f64>]) -> Result<f64> {
    check_lengths(est.len(), truth.len())?;
    if est.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = est.iter().zip(truth).map(|(a, b)| (a - b).norm_squared()).sum();
    Ok(sum / est.len() as f64)
}

/// Mean squared yaw error with differences wrapped into (-pi, pi].
pub fn mse_yaw(est: &[f64], truth: &[f64]) -> Result<f64> {
    check_lengths(est.len(), truth.len())?;
    if est.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = est.iter().zip(truth).map(|(a, b)| wrap_angle(a - b).powi(2)).sum();
    Ok(sum / est.len() as f64)
}

/// Pairs each estimate timestamp with the nearest truth timestamp within
/// `tol`; unmatched estimates are an error. Both series must be sorted.
pub fn align(est_t: &[f64], truth_t: &[f64], tol: f64) -> Result<Vec<(usize, usize)>> {
    let mut pairs = Vec::with_capacity(est_t.len());
    for (i, &t) in est_t.iter().enumerate() {
        let j = truth_t.partition_point(|&u| u < t);
        let mut best: Option<usize> = None;
        for cand in [j.checked_sub(1), Some(j)].into_iter().flatten() {
            if cand < truth_t.len()
                && (truth_t[cand] - t).abs() <= tol
                && best.is_none_or(|b| (truth_t[cand] - t).abs() < (truth_t[b] - t).abs())
            {
                best = Some(cand);
            }
        }
        match best {
            Some(b) => pairs.push((i, b)),
            None => {
                return Err(HarnessError::Config(format!(
                    "estimate at t = {t} has no truth sample within {tol}"
                )))
            }
        }
    }
    Ok(pairs)
}
