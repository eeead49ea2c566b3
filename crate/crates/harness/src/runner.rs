//! Drives the filter along a whole dataset: inertial windows between frames
//! build the process input, each frame feeds one correction step, and the
//! outcome carries the estimate series, error metrics, and step timings.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use field_ekf_core::camera::{CameraIntrinsics, CameraModel, MapModel};
use field_ekf_core::drone::{build_input, DroneProcess, DroneState, ImuSample, STATE_DIM, THETA};
use field_ekf_core::filter::{
    predict_covariance, predict_state, step, FilterState, MeasurementModel, NoisePlan,
    ProcessModel, ReductionMode,
};
use field_ekf_core::preprocess;
use field_ekf_core::{FilterError, ImageField};
use nalgebra::{DMatrix, DVector, Vector3};

use crate::config::RunConfig;
use crate::dataset::{Dataset, SimData};
use crate::error::{HarnessError, Result};
use crate::metrics::{mse_position, mse_yaw, MetricsReport};

/// Supplier of measurement frames by index; disk-backed or in-memory.
pub trait FrameSource: Sync {
    fn frame(&self, k: usize) -> Result<ImageField>;
    fn count(&self) -> usize;
}

impl FrameSource for Dataset {
    fn frame(&self, k: usize) -> Result<ImageField> {
        Dataset::frame(self, k)
    }

    fn count(&self) -> usize {
        self.frame_count
    }
}

impl FrameSource for SimData {
    fn frame(&self, k: usize) -> Result<ImageField> {
        SimData::frame(self, k)
    }

    fn count(&self) -> usize {
        self.trajectory.len()
    }
}

/// Pre-rendered frames held in memory, for runs that must not touch disk.
pub struct MemoryFrames(pub Vec<ImageField>);

impl FrameSource for MemoryFrames {
    fn frame(&self, k: usize) -> Result<ImageField> {
        Ok(self.0[k].clone())
    }

    fn count(&self) -> usize {
        self.0.len()
    }
}

/// Borrowed view of everything one run needs.
pub struct RunInput<'a> {
    pub map: &'a MapModel,
    pub intrinsics: CameraIntrinsics,
    pub truth: &'a [DroneState],
    pub times: &'a [f64],
    pub imu: &'a [ImuSample],
    pub frames: &'a (dyn FrameSource + 'a),
}

impl<'a> RunInput<'a> {
    pub fn from_dataset(ds: &'a Dataset) -> Self {
        Self {
            map: &ds.map,
            intrinsics: ds.intrinsics,
            truth: &ds.truth,
            times: &ds.times,
            imu: &ds.imu,
            frames: ds,
        }
    }
}

/// One row of the estimate series.
#[derive(Debug, Clone)]
pub struct EstimateRow {
    pub t: f64,
    pub x: DVector<f64>,
    pub tr_p: f64,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub estimates: Vec<EstimateRow>,
    pub metrics: MetricsReport,
}

impl RunOutcome {
    pub fn diverged(&self) -> bool {
        self.metrics.diverged.is_some()
    }
}

/// Truth-initialized start. Perturbed entries also carry their squared
/// offset as initial variance, so the filter's gain matches how far off the
/// start actually is; without offsets the covariance is exactly the scaled
/// process noise.
fn initial_state(cfg: &RunConfig, truth0: &DroneState, q: &DMatrix<f64>) -> Result<FilterState> {
    let mut x = truth0.to_vector();
    let mut p = q * cfg.p0_scale;
    for (i, off) in cfg.init_offset.iter().enumerate() {
        x[i] += off;
        p[(i, i)] += off * off;
    }
    Ok(FilterState::new(x, p)?)
}

fn largest_map_side(map: &MapModel) -> f64 {
    let g = map.grid();
    let [pr, pc] = g.pitch();
    ((g.rows() - 1) as f64 * pr).max((g.cols() - 1) as f64 * pc)
}

/// Runs the filter over every frame. The estimate series starts with the
/// initial state and gains one row per completed step; a divergence (position
/// error beyond the configured multiple of the map size, or a failed
/// covariance update) stops the run and is recorded in the metrics rather
/// than returned as an error.
pub fn run_filter(input: &RunInput, cfg: &RunConfig) -> Result<RunOutcome> {
    let n = input.frames.count();
    if n == 0 || input.truth.len() != n || input.times.len() != n {
        return Err(HarnessError::Config(format!(
            "{} frames, {} truth rows, {} timestamps; need equal and nonzero",
            n,
            input.truth.len(),
            input.times.len()
        )));
    }
    let dt = cfg.dt();
    let process = DroneProcess::new(dt, cfg.sigma_a, cfg.g_a)?;
    let prep = cfg.preprocess();
    let model = CameraModel::new(input.map.clone(), input.intrinsics, prep)?;
    let grid = input.intrinsics.grid();
    let plan = NoisePlan::new(&cfg.kernel()?, &grid)?;
    let mode = if cfg.deterministic {
        ReductionMode::Deterministic
    } else {
        ReductionMode::Parallel
    };
    let escape_radius = cfg.divergence_factor * largest_map_side(input.map);

    let mut state = initial_state(cfg, &input.truth[0], process.noise())?;
    let mut estimates = Vec::with_capacity(n);
    estimates.push(EstimateRow {
        t: input.times[0],
        x: state.x().clone(),
        tr_p: state.covariance().trace(),
    });

    let mut step_ms = Vec::with_capacity(n - 1);
    let mut diverged = None;

    for k in 1..n {
        let started = Instant::now();

        let lo = input.imu.partition_point(|s| s.t <= input.times[k - 1]);
        let hi = input.imu.partition_point(|s| s.t <= input.times[k]);
        let built = build_input(&input.imu[lo..hi], state.x()[THETA])?;

        // Ragged timestamp spacing gets a per-step process model.
        let dt_k = input.times[k] - input.times[k - 1];
        let local;
        let proc_k: &DroneProcess = if (dt_k - dt).abs() > 1e-9 * dt.max(1.0) {
            local = DroneProcess::new(dt_k, cfg.sigma_a, cfg.g_a)?;
            &local
        } else {
            &process
        };

        let stepped = if cfg.dead_reckoning {
            coast(&state, proc_k, &built.u, k as u64)
        } else {
            let mut frame = preprocess::apply(&input.frames.frame(k)?, &prep);
            if cfg.match_histogram {
                let x_prior = predict_state(proc_k, state.x(), &built.u, k as u64)?;
                let reference = model.predict(&x_prior, &grid)?;
                preprocess::match_histogram(&mut frame, &reference);
            }
            step(&state, proc_k, &built.u, &model, &frame, &plan, mode).map(|(s, _)| s)
        };

        state = match stepped {
            Ok(next) => next,
            Err(
                FilterError::Divergence { .. } | FilterError::CovarianceNotPositiveDefinite { .. },
            ) => {
                diverged = Some(k);
                break;
            }
            Err(e) => return Err(e.into()),
        };
        step_ms.push(started.elapsed().as_secs_f64() * 1e3);

        estimates.push(EstimateRow {
            t: input.times[k],
            x: state.x().clone(),
            tr_p: state.covariance().trace(),
        });
        let err = (state.x().fixed_rows::<3>(0) - input.truth[k].rho).norm();
        if err > escape_radius {
            diverged = Some(k);
            break;
        }
    }

    let metrics = score(&estimates, input.truth, cfg.warmup, diverged, step_ms)?;
    Ok(RunOutcome { estimates, metrics })
}

/// Prediction-only step sharing the exact covariance arithmetic of the full
/// step, so a zero-information frame and dead reckoning agree to the bit.
fn coast(
    state: &FilterState,
    process: &DroneProcess,
    u: &DVector<f64>,
    k: u64,
) -> std::result::Result<FilterState, FilterError> {
    let x = predict_state(process, state.x(), u, k)?;
    let p = predict_covariance(process, state.x(), state.covariance())?;
    FilterState::new(x, p)
}

fn score(
    estimates: &[EstimateRow],
    truth: &[DroneState],
    warmup: usize,
    diverged: Option<usize>,
    step_ms: Vec<f64>,
) -> Result<MetricsReport> {
    let start = warmup.min(estimates.len());
    let est_rho: Vec<Vector3<f64>> =
        estimates[start..].iter().map(|r| Vector3::new(r.x[0], r.x[1], r.x[2])).collect();
    let truth_rho: Vec<Vector3<f64>> =
        truth[start..estimates.len()].iter().map(|s| s.rho).collect();
    let est_yaw: Vec<f64> = estimates[start..].iter().map(|r| r.x[THETA]).collect();
    let truth_yaw: Vec<f64> = truth[start..estimates.len()].iter().map(|s| s.theta).collect();

    let rho_series: Vec<f64> =
        est_rho.iter().zip(&truth_rho).map(|(a, b)| (a - b).norm_squared()).collect();
    let theta_series: Vec<f64> = est_yaw
        .iter()
        .zip(&truth_yaw)
        .map(|(a, b)| field_ekf_core::drone::wrap_angle(a - b).powi(2))
        .collect();

    Ok(MetricsReport {
        e_rho: mse_position(&est_rho, &truth_rho)?,
        e_theta: mse_yaw(&est_yaw, &truth_yaw)?,
        rho_series,
        theta_series,
        diverged,
        step_ms,
    })
}

pub const ESTIMATES_HEADER: &str = "t,x,y,z,vx,vy,vz,ax,ay,az,yaw,r,trP";

pub fn write_estimates_csv(path: &Path, estimates: &[EstimateRow]) -> Result<()> {
    let mut out = String::from(ESTIMATES_HEADER);
    out.push('\n');
    for row in estimates {
        let _ = write!(out, "{}", row.t);
        for v in row.x.iter() {
            let _ = write!(out, ",{v}");
        }
        let _ = writeln!(out, ",{}", row.tr_p);
    }
    fs::write(path, out)
        .map_err(|source| HarnessError::Output { path: path.display().to_string(), source })
}

pub fn read_estimates_csv(path: &Path) -> Result<Vec<EstimateRow>> {
    let mut violations = Vec::new();
    let rows = crate::dataset::parse_csv(path, ESTIMATES_HEADER, &mut violations);
    if !violations.is_empty() {
        return Err(HarnessError::Dataset(violations.join("\n  - ")));
    }
    Ok(rows
        .into_iter()
        .map(|r| EstimateRow {
            t: r[0],
            x: DVector::from_iterator(STATE_DIM, r[1..1 + STATE_DIM].iter().copied()),
            tr_p: r[12],
        })
        .collect())
}

pub fn write_metrics_csv(path: &Path, m: &MetricsReport) -> Result<()> {
    let diverged = m.diverged.map(|k| k.to_string()).unwrap_or_default();
    let text = format!(
        "e_rho_m2,e_theta_rad2,steps,diverged_step,median_step_ms,mean_step_ms,max_step_ms\n\
         {},{},{},{diverged},{:.4},{:.4},{:.4}\n",
        m.e_rho,
        m.e_theta,
        m.step_ms.len(),
        m.median_step_ms(),
        m.mean_step_ms(),
        m.max_step_ms(),
    );
    fs::write(path, text)
        .map_err(|source| HarnessError::Output { path: path.display().to_string(), source })
}
