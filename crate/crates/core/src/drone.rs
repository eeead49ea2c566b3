//! Rigid-body model of a multirotor with a downward-facing camera: position,
//! velocity, and acceleration in east-north-up coordinates plus planar yaw
//! and yaw rate. Yaw 0 points true north and pi/2 points east.
//!
//! Acceleration and yaw rate are not propagated; each step they are replaced
//! by averaged inertial measurements entering through the input vector, and
//! the velocity and yaw rows integrate them with a one-step delay.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2, Vector3};
use std::f64::consts::{PI, TAU};

use crate::error::{FilterError, Result};
use crate::filter::ProcessModel;

pub const STATE_DIM: usize = 11;

/// Standard gravity, subtracted from the accelerometer's vertical specific
/// force to recover kinematic acceleration.
pub const GRAVITY: f64 = 9.80665;

/// State indices: position, velocity, acceleration, yaw, yaw rate.
pub const RHO: usize = 0;
pub const NU: usize = 3;
pub const ACC: usize = 6;
pub const THETA: usize = 9;
pub const RATE: usize = 10;

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let mut w = theta.rem_euclid(TAU);
    if w > PI {
        w -= TAU;
    }
    w
}

/// Rotation taking body-frame planar vectors into east-north coordinates.
///
/// Yaw is a compass angle, so the rotation is clockwise in the east-north
/// plane: the body forward axis `(0, 1)` maps to north at yaw 0 and to east
/// at yaw pi/2.
pub fn body_to_world(theta: f64) -> Matrix2<f64> {
    let (s, c) = theta.sin_cos();
    Matrix2::new(c, s, -s, c)
}

pub fn world_to_body(theta: f64) -> Matrix2<f64> {
    body_to_world(theta).transpose()
}

/// Full vehicle state in physical grouping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DroneState {
    pub rho: Vector3<f64>,
    pub nu: Vector3<f64>,
    pub acc: Vector3<f64>,
    pub theta: f64,
    pub rate: f64,
}

impl DroneState {
    pub fn to_vector(&self) -> DVector<f64> {
        let mut x = DVector::zeros(STATE_DIM);
        x.fixed_rows_mut::<3>(RHO).copy_from(&self.rho);
        x.fixed_rows_mut::<3>(NU).copy_from(&self.nu);
        x.fixed_rows_mut::<3>(ACC).copy_from(&self.acc);
        x[THETA] = self.theta;
        x[RATE] = self.rate;
        x
    }

    pub fn from_vector(x: &DVector<f64>) -> Result<Self> {
        if x.len() != STATE_DIM {
            return Err(FilterError::DimensionMismatch(format!(
                "state has {} entries, expected {STATE_DIM}",
                x.len()
            )));
        }
        Ok(Self {
            rho: Vector3::new(x[RHO], x[RHO + 1], x[RHO + 2]),
            nu: Vector3::new(x[NU], x[NU + 1], x[NU + 2]),
            acc: Vector3::new(x[ACC], x[ACC + 1], x[ACC + 2]),
            theta: x[THETA],
            rate: x[RATE],
        })
    }
}

/// Homogeneous part of the state update: position integrates velocity,
/// velocity integrates the held acceleration, yaw integrates the held yaw
/// rate; the held values themselves are zeroed and refilled from the input.
pub fn transition_matrix(dt: f64) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(STATE_DIM, STATE_DIM);
    for i in 0..3 {
        a[(RHO + i, RHO + i)] = 1.0;
        a[(RHO + i, NU + i)] = dt;
        a[(NU + i, NU + i)] = 1.0;
        a[(NU + i, ACC + i)] = dt;
    }
    a[(THETA, THETA)] = 1.0;
    a[(THETA, RATE)] = dt;
    a
}

/// Process noise: velocity entries pick up the accelerometer noise density
/// integrated over the step, yaw picks up the gyroscope's. The structural
/// zeros on the remaining diagonal are lifted by a floor of
/// `1e-12 * max(diag, dt)` so the covariance stays strictly positive
/// definite without changing its numerics.
pub fn build_q(accel_density: f64, gyro_density: f64, dt: f64) -> DMatrix<f64> {
    let mut q = DMatrix::zeros(STATE_DIM, STATE_DIM);
    for i in 0..3 {
        q[(NU + i, NU + i)] = accel_density * accel_density * dt;
    }
    q[(THETA, THETA)] = gyro_density * gyro_density * dt;
    let floor = 1e-12 * q.diagonal().max().max(dt);
    for i in 0..STATE_DIM {
        q[(i, i)] += floor;
    }
    q
}

/// Inertial sensor noise parameters (densities in per-root-hertz units).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseDensities {
    pub accel_density: f64,
    pub gyro_density: f64,
    pub accel_walk: f64,
    pub gyro_walk: f64,
}

impl Default for NoiseDensities {
    fn default() -> Self {
        Self {
            accel_density: 1.6e-2,
            gyro_density: 1.94e-3,
            accel_walk: 1.31e-4,
            gyro_walk: 3.96e-5,
        }
    }
}

/// One inertial sample: body-frame specific force (gravity included on the
/// vertical axis) and the yaw rate, positive turning from north toward east.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub t: f64,
    pub accel: Vector3<f64>,
    pub gyro: f64,
}

/// Input vector assembled from one inter-frame window of IMU samples.
#[derive(Debug, Clone)]
pub struct InputBuild {
    pub u: DVector<f64>,
    /// No samples fell in the window; the input is zero and the filter
    /// coasts on the process model.
    pub stale: bool,
    pub sample_count: usize,
}

/// Averages the window's samples (trapezoidal in time, so irregular
/// spacing is weighted correctly), rotates the planar acceleration into
/// east-north coordinates with the supplied yaw estimate, removes gravity
/// from the vertical axis, and places the results in the acceleration and
/// yaw-rate slots of the input vector.
pub fn build_input(samples: &[ImuSample], theta_hat: f64) -> Result<InputBuild> {
    let mut u = DVector::zeros(STATE_DIM);
    if samples.is_empty() {
        return Ok(InputBuild { u, stale: true, sample_count: 0 });
    }
    for pair in samples.windows(2) {
        if pair[1].t < pair[0].t {
            return Err(FilterError::ImuOutOfOrder { t: pair[1].t });
        }
    }

    let mean = |f: &dyn Fn(&ImuSample) -> f64| -> f64 {
        if samples.len() == 1 {
            return f(&samples[0]);
        }
        let span = samples[samples.len() - 1].t - samples[0].t;
        if span <= 0.0 {
            // Identical timestamps: fall back to the arithmetic mean.
            return samples.iter().map(|s| f(s)).sum::<f64>() / samples.len() as f64;
        }
        let mut integral = 0.0;
        for pair in samples.windows(2) {
            integral += 0.5 * (f(&pair[0]) + f(&pair[1])) * (pair[1].t - pair[0].t);
        }
        integral / span
    };

    let accel_body = Vector3::new(
        mean(&|s: &ImuSample| s.accel.x),
        mean(&|s: &ImuSample| s.accel.y),
        mean(&|s: &ImuSample| s.accel.z),
    );
    let gyro = mean(&|s: &ImuSample| s.gyro);

    let planar = body_to_world(theta_hat) * Vector2::new(accel_body.x, accel_body.y);
    u[ACC] = planar.x;
    u[ACC + 1] = planar.y;
    u[ACC + 2] = accel_body.z - GRAVITY;
    u[RATE] = gyro;
    Ok(InputBuild { u, stale: false, sample_count: samples.len() })
}

/// Process model wrapper with the step length and noise baked in.
#[derive(Debug, Clone)]
pub struct DroneProcess {
    a: DMatrix<f64>,
    q: DMatrix<f64>,
    dt: f64,
}

impl DroneProcess {
    pub fn new(dt: f64, accel_density: f64, gyro_density: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(FilterError::InvalidParameter(format!("step length must be positive, got {dt}")));
        }
        if accel_density <= 0.0 || gyro_density <= 0.0 {
            return Err(FilterError::InvalidParameter(
                "noise densities must be positive".into(),
            ));
        }
        Ok(Self {
            a: transition_matrix(dt),
            q: build_q(accel_density, gyro_density, dt),
            dt,
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }
}

impl ProcessModel for DroneProcess {
    fn state_dim(&self) -> usize {
        STATE_DIM
    }

    fn transition(&self, x: &DVector<f64>, input: &DVector<f64>) -> DVector<f64> {
        &self.a * x + input
    }

    fn jacobian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.a.clone()
    }

    fn noise(&self) -> &DMatrix<f64> {
        &self.q
    }
}
