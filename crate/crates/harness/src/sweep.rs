//! Accelerometer-density sweep: a doubling ladder of noise levels, each run
//! in isolation. Every point synthesizes a fresh inertial stream at its
//! density from the dataset's truth trajectory (the stored `imu.csv` is not
//! reused) and tunes the filter's process noise to the same value, so the
//! series shows how estimation error scales with inertial quality. Points
//! share nothing but the read-only map, truth, and frames, and run in
//! parallel.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use field_ekf_core::drone::NoiseDensities;
use field_ekf_core::sim::{synthesize_imu, Trajectory};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::dataset::subseed;
use crate::error::{HarnessError, Result};
use crate::runner::{run_filter, RunInput};

#[derive(Debug, Clone, PartialEq)]
pub struct SweepEntry {
    pub sigma_a: f64,
    pub e_rho: f64,
    pub e_theta: f64,
    pub diverged: Option<usize>,
    /// Diverged, non-finite, or above the configured error cap; excluded
    /// from plots.
    pub flagged: bool,
}

/// Densities `start * 2^j` for `j = 0..points`. Doubling a finite f64 only
/// steps the exponent, so every rung is exact.
pub fn density_ladder(start: f64, points: usize) -> Vec<f64> {
    (0..points).map(|j| start * 2f64.powi(j as i32)).collect()
}

const IMU_STREAM: u64 = 2;

pub fn run_sweep(input: &RunInput, cfg: &RunConfig) -> Result<Vec<SweepEntry>> {
    let ladder = density_ladder(cfg.sweep_start, cfg.sweep_points);
    let trajectory = Trajectory { states: input.truth.to_vec(), dt: cfg.dt() };

    ladder
        .par_iter()
        .map(|&sigma_a| {
            let densities = NoiseDensities {
                accel_density: sigma_a,
                gyro_density: cfg.g_a,
                ..NoiseDensities::default()
            };
            let imu =
                synthesize_imu(&trajectory, &densities, cfg.imu_rate, subseed(cfg.seed, IMU_STREAM))?;
            let mut point_cfg = cfg.clone();
            point_cfg.sigma_a = sigma_a;
            let point_input = RunInput { imu: &imu, ..*input };
            let outcome = run_filter(&point_input, &point_cfg)?;
            let (e_rho, e_theta) = (outcome.metrics.e_rho, outcome.metrics.e_theta);
            let diverged = outcome.metrics.diverged;
            Ok(SweepEntry {
                sigma_a,
                e_rho,
                e_theta,
                diverged,
                flagged: diverged.is_some() || !e_rho.is_finite() || e_rho > cfg.sweep_cap,
            })
        })
        .collect()
}

pub const SWEEP_HEADER: &str = "sigma_a,e_rho_m2,e_theta_rad2,diverged_step,flagged";

pub fn write_sweep_csv(path: &Path, entries: &[SweepEntry]) -> Result<()> {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for e in entries {
        let diverged = e.diverged.map(|k| k.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{diverged},{}", e.sigma_a, e.e_rho, e.e_theta, e.flagged);
    }
    fs::write(path, out)
        .map_err(|source| HarnessError::Output { path: path.display().to_string(), source })
}

pub fn read_sweep_csv(path: &Path) -> Result<Vec<SweepEntry>> {
    let text = fs::read_to_string(path)
        .map_err(|e| HarnessError::Dataset(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == SWEEP_HEADER => {}
        _ => {
            return Err(HarnessError::Dataset(format!(
                "{}: expected header {SWEEP_HEADER:?}",
                path.display()
            )))
        }
    }
    let mut entries = Vec::new();
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let bad = || {
            HarnessError::Dataset(format!("{}:{}: malformed sweep row", path.display(), lineno + 1))
        };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(bad());
        }
        entries.push(SweepEntry {
            sigma_a: fields[0].trim().parse().map_err(|_| bad())?,
            e_rho: fields[1].trim().parse().map_err(|_| bad())?,
            e_theta: fields[2].trim().parse().map_err(|_| bad())?,
            diverged: match fields[3].trim() {
                "" => None,
                s => Some(s.parse().map_err(|_| bad())?),
            },
            flagged: fields[4].trim().parse().map_err(|_| bad())?,
        });
    }
    Ok(entries)
}
