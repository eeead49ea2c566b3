//! Pinhole model of a downward-facing camera over a known planar map.
//!
//! A pixel at metric sensor coordinate `i` sees the world point
//!
//! ```text
//! p = rho_xy + R(theta) i (rho_z - e(rho_xy)) / L_f
//! ```
//!
//! and the measurement Jacobian factors into the map gradient at `p` times
//! the Jacobian of `p` in the state, so only position and yaw columns are
//! ever nonzero. Elevation is evaluated once per frame at the camera
//! footprint; within-footprint terrain variation is neglected.

use nalgebra::{DVector, Matrix2, SMatrix, Vector2};

use crate::drone::{DroneState, RHO, STATE_DIM, THETA};
use crate::error::{FilterError, Result};
use crate::field::{ImageField, JacobianField};
use crate::filter::MeasurementModel;
use crate::grid::FieldGrid;
use crate::preprocess::{self, PreprocessConfig};

/// Image-plane rotation of the projection and its yaw derivative.
pub fn rotation_and_derivative(theta: f64) -> (Matrix2<f64>, Matrix2<f64>) {
    let (s, c) = theta.sin_cos();
    (Matrix2::new(c, -s, s, c), Matrix2::new(-s, -c, c, -s))
}

/// Lens and sensor geometry. Pixel indices are `(row, col)`; the metric
/// image coordinate of a pixel is its offset from the principal point times
/// the sensor pitch, with the column offset on the first axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub focal_length: f64,
    pub pixel_pitch: f64,
    pub rows: usize,
    pub cols: usize,
    pub principal_point: [f64; 2],
}

impl Default for CameraIntrinsics {
    /// A 6 mm lens over a 612-pixel-wide sensor spanning 6.1 mm, which puts
    /// the ground sample distance near 7 cm from 40 m up.
    fn default() -> Self {
        let (rows, cols) = (512, 612);
        Self {
            focal_length: 6.0e-3,
            pixel_pitch: 6.1e-3 / cols as f64,
            rows,
            cols,
            principal_point: [(rows as f64 - 1.0) / 2.0, (cols as f64 - 1.0) / 2.0],
        }
    }
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<()> {
        if !(self.focal_length > 0.0 && self.focal_length.is_finite()) {
            return Err(FilterError::InvalidParameter("focal length must be positive".into()));
        }
        if !(self.pixel_pitch > 0.0 && self.pixel_pitch.is_finite()) {
            return Err(FilterError::InvalidParameter("pixel pitch must be positive".into()));
        }
        if self.rows == 0 || self.cols == 0 {
            return Err(FilterError::InvalidParameter("image dimensions must be positive".into()));
        }
        let [pr, pc] = self.principal_point;
        if !(pr >= 0.0 && pr <= (self.rows - 1) as f64 && pc >= 0.0 && pc <= (self.cols - 1) as f64)
        {
            return Err(FilterError::InvalidParameter(format!(
                "principal point ({pr}, {pc}) outside a {}x{} image",
                self.rows, self.cols
            )));
        }
        Ok(())
    }

    /// Unit-pitch grid covering the sensor, the geometry every image field
    /// of this camera lives on.
    pub fn grid(&self) -> FieldGrid {
        FieldGrid::pixels(self.rows, self.cols)
    }

    /// Metric image coordinate of a (fractional) pixel index.
    pub fn metric_coord(&self, row: f64, col: f64) -> Vector2<f64> {
        Vector2::new(
            (col - self.principal_point[1]) * self.pixel_pitch,
            (row - self.principal_point[0]) * self.pixel_pitch,
        )
    }
}

/// Isotropic Gaussian intensity bump.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianBump {
    pub center: [f64; 2],
    pub width: f64,
    pub amplitude: f64,
}

/// Closed-form map built from Gaussian bumps, used wherever exact values
/// and gradients matter (Jacobian verification, noise-free fixed points).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AnalyticMap {
    pub bumps: Vec<GaussianBump>,
    pub offset: f64,
}

impl AnalyticMap {
    pub fn value(&self, p: [f64; 2]) -> f64 {
        let mut v = self.offset;
        for b in &self.bumps {
            let dx = p[0] - b.center[0];
            let dy = p[1] - b.center[1];
            v += b.amplitude * (-(dx * dx + dy * dy) / (2.0 * b.width * b.width)).exp();
        }
        v
    }

    pub fn gradient(&self, p: [f64; 2]) -> [f64; 2] {
        let mut g = [0.0, 0.0];
        for b in &self.bumps {
            let dx = p[0] - b.center[0];
            let dy = p[1] - b.center[1];
            let w2 = b.width * b.width;
            let e = b.amplitude * (-(dx * dx + dy * dy) / (2.0 * w2)).exp();
            g[0] -= e * dx / w2;
            g[1] -= e * dy / w2;
        }
        g
    }
}

/// One map lookup: intensity, world-coordinate gradient, and whether the
/// point lies inside the surveyed extent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapSample {
    pub value: f64,
    pub gradient: [f64; 2],
    pub in_map: bool,
}

const OUT_OF_MAP: MapSample = MapSample { value: 0.0, gradient: [0.0, 0.0], in_map: false };

/// Grayscale world map on an east-north grid (axis 0 east, axis 1 north),
/// with a precomputed central-difference gradient, optional terrain
/// elevation, and an optional exact analytic form that takes precedence in
/// queries.
#[derive(Debug, Clone)]
pub struct MapModel {
    grid: FieldGrid,
    intensity: Vec<f64>,
    grad_e: Vec<f64>,
    grad_n: Vec<f64>,
    elevation: Option<Vec<f64>>,
    analytic: Option<AnalyticMap>,
}

impl MapModel {
    pub fn from_samples(
        grid: FieldGrid,
        intensity: Vec<f64>,
        elevation: Option<Vec<f64>>,
    ) -> Result<Self> {
        if intensity.len() != grid.len() {
            return Err(FilterError::DimensionMismatch(format!(
                "map has {} samples for a grid of {}",
                intensity.len(),
                grid.len()
            )));
        }
        for v in &intensity {
            if !(*v >= -1e-9 && *v <= 1.0 + 1e-9) {
                return Err(FilterError::InvalidParameter(format!(
                    "map intensity {v} outside [0, 1]"
                )));
            }
        }
        if let Some(e) = &elevation {
            if e.len() != grid.len() {
                return Err(FilterError::DimensionMismatch(
                    "elevation grid does not match map grid".into(),
                ));
            }
        }
        let (grad_e, grad_n) = Self::difference_gradient(&grid, &intensity);
        Ok(Self { grid, intensity, grad_e, grad_n, elevation, analytic: None })
    }

    /// Rasterizes the analytic form on the grid and keeps it attached for
    /// exact queries.
    pub fn from_analytic(analytic: AnalyticMap, grid: FieldGrid) -> Result<Self> {
        let mut intensity = Vec::with_capacity(grid.len());
        for r in 0..grid.rows() {
            for c in 0..grid.cols() {
                intensity.push(analytic.value(grid.coord(r, c)).clamp(0.0, 1.0));
            }
        }
        let mut map = Self::from_samples(grid, intensity, None)?;
        map.analytic = Some(analytic);
        Ok(map)
    }

    pub fn with_elevation(mut self, elevation: Vec<f64>) -> Result<Self> {
        if elevation.len() != self.grid.len() {
            return Err(FilterError::DimensionMismatch(
                "elevation grid does not match map grid".into(),
            ));
        }
        self.elevation = Some(elevation);
        Ok(self)
    }

    pub fn with_analytic(mut self, analytic: AnalyticMap) -> Self {
        self.analytic = Some(analytic);
        self
    }

    /// Central differences inside, one-sided at the borders.
    fn difference_gradient(grid: &FieldGrid, intensity: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (rows, cols) = (grid.rows(), grid.cols());
        let [pe, pn] = grid.pitch();
        let at = |r: usize, c: usize| intensity[r * cols + c];
        let mut grad_e = vec![0.0; grid.len()];
        let mut grad_n = vec![0.0; grid.len()];
        for r in 0..rows {
            for c in 0..cols {
                let idx = r * cols + c;
                grad_e[idx] = if rows == 1 {
                    0.0
                } else if r == 0 {
                    (at(1, c) - at(0, c)) / pe
                } else if r == rows - 1 {
                    (at(r, c) - at(r - 1, c)) / pe
                } else {
                    (at(r + 1, c) - at(r - 1, c)) / (2.0 * pe)
                };
                grad_n[idx] = if cols == 1 {
                    0.0
                } else if c == 0 {
                    (at(r, 1) - at(r, 0)) / pn
                } else if c == cols - 1 {
                    (at(r, c) - at(r, c - 1)) / pn
                } else {
                    (at(r, c + 1) - at(r, c - 1)) / (2.0 * pn)
                };
            }
        }
        (grad_e, grad_n)
    }

    pub fn grid(&self) -> &FieldGrid {
        &self.grid
    }

    pub fn intensity(&self) -> &[f64] {
        &self.intensity
    }

    pub fn analytic(&self) -> Option<&AnalyticMap> {
        self.analytic.as_ref()
    }

    pub fn has_elevation(&self) -> bool {
        self.elevation.is_some()
    }

    pub fn elevation_samples(&self) -> Option<&[f64]> {
        self.elevation.as_deref()
    }

    /// Fractional grid position of a world point, if inside the extent.
    fn locate(&self, p: [f64; 2]) -> Option<(f64, f64)> {
        let [oe, on] = self.grid.origin();
        let [pe, pn] = self.grid.pitch();
        let u = (p[0] - oe) / pe;
        let v = (p[1] - on) / pn;
        let (max_u, max_v) = ((self.grid.rows() - 1) as f64, (self.grid.cols() - 1) as f64);
        if u >= 0.0 && u <= max_u && v >= 0.0 && v <= max_v {
            Some((u, v))
        } else {
            None
        }
    }

    fn bilinear(&self, data: &[f64], u: f64, v: f64) -> f64 {
        let cols = self.grid.cols();
        let r0 = (u.floor() as usize).min(self.grid.rows() - 1);
        let c0 = (v.floor() as usize).min(cols - 1);
        let r1 = (r0 + 1).min(self.grid.rows() - 1);
        let c1 = (c0 + 1).min(cols - 1);
        let fu = u - r0 as f64;
        let fv = v - c0 as f64;
        let a = data[r0 * cols + c0] * (1.0 - fv) + data[r0 * cols + c1] * fv;
        let b = data[r1 * cols + c0] * (1.0 - fv) + data[r1 * cols + c1] * fv;
        a * (1.0 - fu) + b * fu
    }

    /// Intensity and gradient at a world point, exact when an analytic form
    /// is attached, interpolated otherwise. Points outside the extent come
    /// back flagged with zeros.
    pub fn query(&self, p: [f64; 2]) -> MapSample {
        if self.locate(p).is_none() {
            return OUT_OF_MAP;
        }
        if let Some(analytic) = &self.analytic {
            return MapSample { value: analytic.value(p), gradient: analytic.gradient(p), in_map: true };
        }
        self.query_sampled(p)
    }

    /// Interpolating query that ignores any attached analytic form.
    pub fn query_sampled(&self, p: [f64; 2]) -> MapSample {
        match self.locate(p) {
            None => OUT_OF_MAP,
            Some((u, v)) => MapSample {
                value: self.bilinear(&self.intensity, u, v),
                gradient: [self.bilinear(&self.grad_e, u, v), self.bilinear(&self.grad_n, u, v)],
                in_map: true,
            },
        }
    }

    /// Terrain height at a world point; zero without elevation data or
    /// outside the extent.
    pub fn elevation_at(&self, p: [f64; 2]) -> f64 {
        match (&self.elevation, self.locate(p)) {
            (Some(e), Some((u, v))) => self.bilinear(e, u, v),
            _ => 0.0,
        }
    }
}

/// Height of the camera above the terrain under its footprint.
fn height_over_terrain(state: &DroneState, map: &MapModel) -> Result<f64> {
    let e = map.elevation_at([state.rho.x, state.rho.y]);
    let h = state.rho.z - e;
    if h <= 0.0 {
        return Err(FilterError::CameraBelowTerrain { camera_z: state.rho.z, terrain: e });
    }
    Ok(h)
}

/// World point seen by a (fractional) pixel, with the out-of-map flag of
/// the map extent.
pub fn world_from_image(
    state: &DroneState,
    pixel: [f64; 2],
    intrinsics: &CameraIntrinsics,
    map: &MapModel,
) -> Result<([f64; 2], bool)> {
    let h = height_over_terrain(state, map)?;
    let (rot, _) = rotation_and_derivative(state.theta);
    let i = intrinsics.metric_coord(pixel[0], pixel[1]);
    let p = rot * i * (h / intrinsics.focal_length);
    let world = [state.rho.x + p.x, state.rho.y + p.y];
    let in_map = map.locate(world).is_some();
    Ok((world, !in_map))
}

pub type CoordJacobian = SMatrix<f64, 2, { STATE_DIM }>;

/// Jacobian of the viewed world point in the state: identity in planar
/// position, the scaled rotated image coordinate in altitude, and the
/// rotation derivative term in yaw. Velocity, acceleration, and yaw rate
/// never move the projection.
pub fn coord_jacobian(
    state: &DroneState,
    pixel: [f64; 2],
    intrinsics: &CameraIntrinsics,
    map: &MapModel,
) -> Result<CoordJacobian> {
    let h = height_over_terrain(state, map)?;
    let (rot, drot) = rotation_and_derivative(state.theta);
    let i = intrinsics.metric_coord(pixel[0], pixel[1]);
    let mut j = CoordJacobian::zeros();
    j[(0, RHO)] = 1.0;
    j[(1, RHO + 1)] = 1.0;
    let dz = rot * i / intrinsics.focal_length;
    j[(0, RHO + 2)] = dz.x;
    j[(1, RHO + 2)] = dz.y;
    let dtheta = drot * i * (h / intrinsics.focal_length);
    j[(0, THETA)] = dtheta.x;
    j[(1, THETA)] = dtheta.y;
    Ok(j)
}

/// Expected image: the map as seen from the state. Out-of-map pixels are
/// flagged invalid. No preprocessing is applied here.
pub fn render_expected(
    state: &DroneState,
    grid: &FieldGrid,
    intrinsics: &CameraIntrinsics,
    map: &MapModel,
) -> Result<ImageField> {
    Ok(render_pass(state, grid, intrinsics, map, false)?.0)
}

/// Per-pixel product of the map gradient and the coordinate Jacobian.
/// Rows are zero exactly where the pixel leaves the map or the gradient
/// vanishes.
pub fn measurement_jacobian(
    state: &DroneState,
    grid: &FieldGrid,
    intrinsics: &CameraIntrinsics,
    map: &MapModel,
) -> Result<JacobianField> {
    Ok(render_pass(state, grid, intrinsics, map, true)?.1)
}

/// Shared projection loop. The Jacobian reuses the same map lookup as the
/// rendering, so requesting both costs one pass.
fn render_pass(
    state: &DroneState,
    grid: &FieldGrid,
    intrinsics: &CameraIntrinsics,
    map: &MapModel,
    with_jacobian: bool,
) -> Result<(ImageField, JacobianField)> {
    if grid.rows() != intrinsics.rows || grid.cols() != intrinsics.cols {
        return Err(FilterError::DimensionMismatch(format!(
            "render grid is {}x{}, camera is {}x{}",
            grid.rows(),
            grid.cols(),
            intrinsics.rows,
            intrinsics.cols
        )));
    }
    let h = height_over_terrain(state, map)?;
    let (rot, drot) = rotation_and_derivative(state.theta);
    let scale = h / intrinsics.focal_length;
    let inv_f = 1.0 / intrinsics.focal_length;

    let mut image = ImageField::zeros(grid.clone(), 1);
    let mut jac = if with_jacobian {
        JacobianField::zeros(grid.clone(), 1, STATE_DIM)
    } else {
        JacobianField::zeros(FieldGrid::pixels(1, 1), 1, STATE_DIM)
    };

    for r in 0..grid.rows() {
        for c in 0..grid.cols() {
            let idx = grid.index(r, c);
            let i = intrinsics.metric_coord(r as f64, c as f64);
            let offset = rot * i;
            let world = [state.rho.x + offset.x * scale, state.rho.y + offset.y * scale];
            let sample = map.query(world);
            if !sample.in_map {
                image.mark_invalid(idx);
                continue;
            }
            image.set_scalar(idx, sample.value);
            if with_jacobian {
                let [ge, gn] = sample.gradient;
                let block = jac.block_mut(idx);
                block[RHO] = ge;
                block[RHO + 1] = gn;
                block[RHO + 2] = (ge * offset.x + gn * offset.y) * inv_f;
                let dtheta = drot * i;
                block[THETA] = (ge * dtheta.x + gn * dtheta.y) * scale;
            }
        }
    }
    Ok((image, jac))
}

/// Camera measurement model: renders the expected image from the map and
/// differentiates it in one pass.
///
/// The configured preprocessing is applied to the prediction (the runner
/// applies the matching stages to measured frames); the Jacobian always
/// comes from the raw map gradient, so intensity-remapping stages are a
/// small-model approximation when enabled.
#[derive(Debug, Clone)]
pub struct CameraModel {
    map: MapModel,
    intrinsics: CameraIntrinsics,
    preprocess: PreprocessConfig,
}

impl CameraModel {
    pub fn new(
        map: MapModel,
        intrinsics: CameraIntrinsics,
        preprocess: PreprocessConfig,
    ) -> Result<Self> {
        intrinsics.validate()?;
        Ok(Self { map, intrinsics, preprocess })
    }

    pub fn map(&self) -> &MapModel {
        &self.map
    }

    pub fn intrinsics(&self) -> &CameraIntrinsics {
        &self.intrinsics
    }

    pub fn preprocess_config(&self) -> &PreprocessConfig {
        &self.preprocess
    }

    fn state_of(&self, x: &DVector<f64>) -> Result<DroneState> {
        DroneState::from_vector(x)
    }
}

impl MeasurementModel for CameraModel {
    fn channels(&self) -> usize {
        1
    }

    fn state_dim(&self) -> usize {
        STATE_DIM
    }

    fn predict(&self, x: &DVector<f64>, grid: &FieldGrid) -> Result<ImageField> {
        let state = self.state_of(x)?;
        let raw = render_expected(&state, grid, &self.intrinsics, &self.map)?;
        Ok(preprocess::apply(&raw, &self.preprocess))
    }

    fn jacobian(&self, x: &DVector<f64>, grid: &FieldGrid) -> Result<JacobianField> {
        let state = self.state_of(x)?;
        measurement_jacobian(&state, grid, &self.intrinsics, &self.map)
    }

    fn predict_with_jacobian(
        &self,
        x: &DVector<f64>,
        grid: &FieldGrid,
    ) -> Result<(ImageField, JacobianField)> {
        let state = self.state_of(x)?;
        let (raw, jac) = render_pass(&state, grid, &self.intrinsics, &self.map, true)?;
        Ok((preprocess::apply(&raw, &self.preprocess), jac))
    }
}
