//! Synthetic ground truth: analytic maps, smooth constant-speed flight
//! paths, inertial streams, and noisy rendered frames.
//!
//! The discrete truth is built to satisfy the vehicle recursion exactly:
//! velocities are forward differences of the sampled positions and the held
//! accelerations are forward differences of those velocities, so
//! `x_{k+1} = A x_k + u_k` holds to rounding error with the emitted true
//! inputs. The inertial stream is piecewise constant over each inter-frame
//! window, which makes the filter's windowed average invert the synthesis
//! exactly when its yaw estimate is right.

use nalgebra::{DVector, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::camera::{
    render_expected, AnalyticMap, CameraIntrinsics, GaussianBump, MapModel,
};
use crate::drone::{
    wrap_angle, world_to_body, DroneState, ImuSample, NoiseDensities, ACC, GRAVITY, RATE,
    STATE_DIM,
};
use crate::error::{FilterError, Result};
use crate::field::ImageField;
use crate::grid::FieldGrid;
use crate::noise::{sample_noise_field, StationaryKernel};

/// Random sum-of-bumps map on a square grid centered at the origin, with
/// intensities affinely normalized into [0.1, 0.9] and the exact analytic
/// form kept attached. Zero bumps gives the flat 0.5 map, the degenerate
/// fixture with no position information.
pub fn generate_map(bumps: usize, extent: f64, pitch: f64, seed: u64) -> Result<MapModel> {
    if !(extent > 0.0 && pitch > 0.0 && pitch.is_finite() && extent.is_finite()) {
        return Err(FilterError::InvalidParameter(
            "map extent and pitch must be positive".into(),
        ));
    }
    let n = (extent / pitch).round() as usize + 1;
    let grid = FieldGrid::new(n, n, [pitch, pitch], [-extent / 2.0, -extent / 2.0])?;
    if bumps == 0 {
        return MapModel::from_analytic(AnalyticMap { bumps: vec![], offset: 0.5 }, grid);
    }

    // Width floor keeps bilinear resampling of the raster within 1e-3 of
    // the closed form.
    let min_width = (10.0 * pitch).max(extent / 16.0);
    let max_width = extent / 8.0;
    if min_width >= max_width {
        return Err(FilterError::InvalidParameter(format!(
            "pitch {pitch} too coarse for extent {extent}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let margin = extent / 8.0;
    let half = extent / 2.0 - margin;
    let mut raw = AnalyticMap { bumps: Vec::with_capacity(bumps), offset: 0.0 };
    for _ in 0..bumps {
        let center = [rng.gen_range(-half..half), rng.gen_range(-half..half)];
        let width = rng.gen_range(min_width..max_width);
        let magnitude = rng.gen_range(0.3..1.0);
        let amplitude = if rng.gen::<bool>() { magnitude } else { -magnitude };
        raw.bumps.push(GaussianBump { center, width, amplitude });
    }

    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for r in 0..grid.rows() {
        for c in 0..grid.cols() {
            let v = raw.value(grid.coord(r, c));
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    let span = hi - lo;
    let scale = if span > 1e-12 { 0.8 / span } else { 0.0 };
    let normalized = AnalyticMap {
        offset: 0.1 + (raw.offset - lo) * scale,
        bumps: raw
            .bumps
            .iter()
            .map(|b| GaussianBump { amplitude: b.amplitude * scale, ..*b })
            .collect(),
    };
    MapModel::from_analytic(normalized, grid)
}

/// Axis-aligned rectangle the path may occupy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Region {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Region {
    /// Map extent inset by half the camera footprint at the given altitude,
    /// so every pixel of every frame stays over the map.
    pub fn over_map(map: &MapModel, intrinsics: &CameraIntrinsics, altitude: f64) -> Result<Self> {
        let grid = map.grid();
        let [oe, on] = grid.origin();
        let [pe, pn] = grid.pitch();
        let span_r = intrinsics.rows as f64 * intrinsics.pixel_pitch;
        let span_c = intrinsics.cols as f64 * intrinsics.pixel_pitch;
        // Footprint half-diagonal covers every yaw.
        let margin = 0.5 * span_r.hypot(span_c) * altitude / intrinsics.focal_length;
        let min = [oe + margin, on + margin];
        let max = [
            oe + (grid.rows() - 1) as f64 * pe - margin,
            on + (grid.cols() - 1) as f64 * pn - margin,
        ];
        if min[0] >= max[0] || min[1] >= max[1] {
            return Err(FilterError::TrajectoryOutOfMap(format!(
                "camera footprint margin {margin:.1} m leaves no room over the map"
            )));
        }
        Ok(Self { min, max })
    }

    fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= self.min[0] - 1e-9
            && p[0] <= self.max[0] + 1e-9
            && p[1] >= self.min[1] - 1e-9
            && p[1] <= self.max[1] + 1e-9
    }

    fn center(&self) -> [f64; 2] {
        [(self.min[0] + self.max[0]) / 2.0, (self.min[1] + self.max[1]) / 2.0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Pattern {
    /// Parallel east-west rows connected by U-turns, stepping north.
    Lawnmower,
    /// Rounded-rectangle loop around the region, repeated as needed.
    Circuit,
    /// User polyline, corners rounded.
    Waypoints(Vec<[f64; 2]>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySpec {
    pub pattern: Pattern,
    pub altitude: f64,
    pub speed: f64,
    pub duration: f64,
    pub dt: f64,
}

/// One frame-rate state per image, recursion-consistent with the vehicle
/// model (see module docs).
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<DroneState>,
    pub dt: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    /// True input consumed by step `k`: the next state's held acceleration
    /// and yaw rate. Defined for `k < len - 1`.
    pub fn true_input(&self, k: usize) -> DVector<f64> {
        let next = &self.states[k + 1];
        let mut u = DVector::zeros(STATE_DIM);
        u[ACC] = next.acc.x;
        u[ACC + 1] = next.acc.y;
        u[ACC + 2] = next.acc.z;
        u[RATE] = next.rate;
        u
    }
}

/// Line/arc piece of a constant-speed planar path, parametrized by arc
/// length.
enum Piece {
    Line { start: Vector2<f64>, dir: Vector2<f64>, len: f64 },
    Arc { center: Vector2<f64>, radius: f64, angle0: f64, sweep: f64 },
}

impl Piece {
    fn len(&self) -> f64 {
        match self {
            Piece::Line { len, .. } => *len,
            Piece::Arc { radius, sweep, .. } => radius * sweep.abs(),
        }
    }

    fn at(&self, s: f64) -> (Vector2<f64>, Vector2<f64>) {
        match self {
            Piece::Line { start, dir, .. } => (start + dir * s, *dir),
            Piece::Arc { center, radius, angle0, sweep } => {
                let a = angle0 + sweep.signum() * s / radius;
                let radial = Vector2::new(a.cos(), a.sin());
                let tangent = Vector2::new(-a.sin(), a.cos()) * sweep.signum();
                (center + radial * *radius, tangent)
            }
        }
    }
}

/// Polyline with circular fillets at interior corners. The fillet radius is
/// shrunk where legs are too short to take the tangent offsets.
fn fillet_path(waypoints: &[[f64; 2]], radius: f64) -> Result<Vec<Piece>> {
    let pts: Vec<Vector2<f64>> =
        waypoints.iter().map(|w| Vector2::new(w[0], w[1])).collect();
    if pts.len() < 2 {
        return Err(FilterError::InvalidParameter("a path needs at least two waypoints".into()));
    }
    let mut pieces = Vec::new();
    let mut cursor = pts[0];
    for i in 1..pts.len() - 1 {
        let d0 = pts[i] - pts[i - 1];
        let d1 = pts[i + 1] - pts[i];
        let (l0, l1) = (d0.norm(), d1.norm());
        if l0 < 1e-12 || l1 < 1e-12 {
            continue;
        }
        let (u0, u1) = (d0 / l0, d1 / l1);
        let turn = (u0.dot(&u1)).clamp(-1.0, 1.0).acos();
        if turn < 1e-9 {
            continue;
        }
        if (std::f64::consts::PI - turn).abs() < 1e-9 {
            return Err(FilterError::InvalidParameter(
                "straight-back corner cannot be rounded; add an intermediate waypoint".into(),
            ));
        }
        // Fit the fillet to the available leg length.
        let offset_cap = 0.5 * l0.min(l1);
        let mut offset = radius * (turn / 2.0).tan();
        let mut r = radius;
        if offset > offset_cap {
            offset = offset_cap;
            r = offset / (turn / 2.0).tan();
        }
        let entry = pts[i] - u0 * offset;
        let exit = pts[i] + u1 * offset;
        let side = (u0.x * u1.y - u0.y * u1.x).signum();
        let normal = Vector2::new(-u0.y, u0.x) * side;
        let center = entry + normal * r;
        let angle0 = f64::atan2(entry.y - center.y, entry.x - center.x);
        let line_len = (entry - cursor).norm();
        if line_len > 1e-12 {
            pieces.push(Piece::Line { start: cursor, dir: u0, len: line_len });
        }
        pieces.push(Piece::Arc { center, radius: r, angle0, sweep: side * turn });
        cursor = exit;
    }
    let last = pts[pts.len() - 1];
    let tail = last - cursor;
    let tail_len = tail.norm();
    if tail_len > 1e-12 {
        pieces.push(Piece::Line { start: cursor, dir: tail / tail_len, len: tail_len });
    }
    if pieces.is_empty() {
        return Err(FilterError::InvalidParameter("path has zero length".into()));
    }
    Ok(pieces)
}

struct Path {
    pieces: Vec<Piece>,
    cumulative: Vec<f64>,
}

impl Path {
    fn new(pieces: Vec<Piece>) -> Self {
        let mut cumulative = Vec::with_capacity(pieces.len() + 1);
        let mut total = 0.0;
        cumulative.push(0.0);
        for p in &pieces {
            total += p.len();
            cumulative.push(total);
        }
        Self { pieces, cumulative }
    }

    fn total_len(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    /// Position and unit tangent at arc length `s` (clamped to the ends).
    fn at(&self, s: f64) -> (Vector2<f64>, Vector2<f64>) {
        let s = s.clamp(0.0, self.total_len());
        let i = match self.cumulative.binary_search_by(|c| c.partial_cmp(&s).unwrap()) {
            Ok(i) => i.min(self.pieces.len() - 1),
            Err(i) => i - 1,
        };
        self.pieces[i].at(s - self.cumulative[i])
    }
}

fn lawnmower_waypoints(region: &Region, needed_len: f64, turn_radius: f64) -> Result<Vec<[f64; 2]>> {
    let leg = region.max[0] - region.min[0];
    let step = 2.0 * turn_radius;
    let mut pts = Vec::new();
    let mut y = region.min[1];
    let mut eastbound = true;
    let mut length = 0.0;
    while length < needed_len + leg {
        if y > region.max[1] + 1e-9 {
            return Err(FilterError::TrajectoryOutOfMap(format!(
                "lawnmower needs {needed_len:.0} m of path but the region is exhausted at {length:.0} m"
            )));
        }
        let (xa, xb) = if eastbound {
            (region.min[0], region.max[0])
        } else {
            (region.max[0], region.min[0])
        };
        pts.push([xa, y]);
        pts.push([xb, y]);
        length += leg + std::f64::consts::PI * turn_radius;
        y += step;
        eastbound = !eastbound;
    }
    Ok(pts)
}

fn circuit_waypoints(region: &Region, needed_len: f64) -> Vec<[f64; 2]> {
    let corners = [
        [region.min[0], region.min[1]],
        [region.max[0], region.min[1]],
        [region.max[0], region.max[1]],
        [region.min[0], region.max[1]],
    ];
    let perimeter = 2.0 * (region.max[0] - region.min[0] + region.max[1] - region.min[1]);
    let loops = (needed_len / perimeter).ceil().max(1.0) as usize + 1;
    // Start mid-edge so the first and last corners are real waypoints.
    let mut pts = vec![[(region.min[0] + region.max[0]) / 2.0, region.min[1]]];
    for _ in 0..loops {
        pts.extend_from_slice(&corners[1..]);
        pts.push(corners[0]);
    }
    pts.push([(region.min[0] + region.max[0]) / 2.0, region.min[1]]);
    pts
}

/// Constant-speed flight over `region`. See the module docs for how the
/// discrete states are made recursion-exact.
pub fn generate_trajectory(spec: &TrajectorySpec, region: &Region) -> Result<Trajectory> {
    if !(spec.altitude > 0.0 && spec.duration > 0.0 && spec.dt > 0.0) {
        return Err(FilterError::InvalidParameter(
            "altitude, duration, and frame interval must be positive".into(),
        ));
    }
    if spec.speed < 0.0 {
        return Err(FilterError::InvalidParameter("speed cannot be negative".into()));
    }
    let frames = (spec.duration / spec.dt).floor() as usize;
    if frames < 2 {
        return Err(FilterError::InvalidParameter(
            "duration shorter than two frame intervals".into(),
        ));
    }

    // Hover: constant state, zero derivatives.
    if spec.speed == 0.0 {
        let c = region.center();
        let state = DroneState {
            rho: Vector3::new(c[0], c[1], spec.altitude),
            nu: Vector3::zeros(),
            acc: Vector3::zeros(),
            theta: 0.0,
            rate: 0.0,
        };
        return Ok(Trajectory { states: vec![state; frames], dt: spec.dt });
    }

    // Positions are needed one step past the inputs: k = 0..frames+1.
    let needed_len = spec.speed * (frames + 1) as f64 * spec.dt;
    let turn_radius = (4.0 * spec.speed * spec.dt).max(2.0);
    let waypoints = match &spec.pattern {
        Pattern::Lawnmower => lawnmower_waypoints(region, needed_len, turn_radius)?,
        Pattern::Circuit => circuit_waypoints(region, needed_len),
        Pattern::Waypoints(pts) => pts.clone(),
    };
    for w in &waypoints {
        if !region.contains(*w) {
            return Err(FilterError::TrajectoryOutOfMap(format!(
                "waypoint ({}, {}) outside the usable region",
                w[0], w[1]
            )));
        }
    }
    let path = Path::new(fillet_path(&waypoints, turn_radius)?);
    if path.total_len() + 1e-9 < needed_len {
        return Err(FilterError::TrajectoryOutOfMap(format!(
            "path length {:.0} m cannot cover {:.0} m of flight",
            path.total_len(),
            needed_len
        )));
    }

    let samples = frames + 2;
    let mut rho = Vec::with_capacity(samples);
    let mut heading = Vec::with_capacity(samples);
    let mut unwrapped = 0.0;
    for k in 0..samples {
        let (p, tangent) = path.at(spec.speed * k as f64 * spec.dt);
        if !region.contains([p.x, p.y]) {
            return Err(FilterError::TrajectoryOutOfMap(format!(
                "path sample {k} at ({:.1}, {:.1}) leaves the usable region",
                p.x, p.y
            )));
        }
        rho.push(p);
        // Compass course of the tangent, unwrapped across frames.
        let psi = f64::atan2(tangent.x, tangent.y);
        unwrapped = if k == 0 { psi } else { unwrapped + wrap_angle(psi - unwrapped) };
        heading.push(unwrapped);
    }

    let nu: Vec<Vector2<f64>> =
        (0..samples - 1).map(|k| (rho[k + 1] - rho[k]) / spec.dt).collect();
    let mut states = Vec::with_capacity(frames);
    for k in 0..frames {
        let acc = (nu[k + 1] - nu[k]) / spec.dt;
        states.push(DroneState {
            rho: Vector3::new(rho[k].x, rho[k].y, spec.altitude),
            nu: Vector3::new(nu[k].x, nu[k].y, 0.0),
            acc: Vector3::new(acc.x, acc.y, 0.0),
            theta: heading[k],
            rate: (heading[k + 1] - heading[k]) / spec.dt,
        });
    }
    Ok(Trajectory { states, dt: spec.dt })
}

/// Inertial stream at `imu_rate`: within each inter-frame window the true
/// specific force and yaw rate are constant (the values the next state
/// holds), rotated into the body frame with the window-start yaw, plus
/// white noise of standard deviation `density * sqrt(imu_rate)` per sample.
pub fn synthesize_imu(
    trajectory: &Trajectory,
    densities: &NoiseDensities,
    imu_rate: f64,
    seed: u64,
) -> Result<Vec<ImuSample>> {
    if !(imu_rate > 0.0 && imu_rate.is_finite()) {
        return Err(FilterError::InvalidParameter("inertial rate must be positive".into()));
    }
    if imu_rate * trajectory.dt < 1.0 {
        return Err(FilterError::InvalidParameter(
            "inertial rate below the frame rate leaves windows without samples".into(),
        ));
    }
    let n = trajectory.states.len();
    if n < 2 {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma_a = densities.accel_density * imu_rate.sqrt();
    let sigma_g = densities.gyro_density * imu_rate.sqrt();
    let accel_noise = Normal::new(0.0, sigma_a.max(f64::MIN_POSITIVE)).unwrap();
    let gyro_noise = Normal::new(0.0, sigma_g.max(f64::MIN_POSITIVE)).unwrap();
    let draw = |sigma: f64, dist: &Normal<f64>, rng: &mut ChaCha8Rng| {
        if sigma > 0.0 {
            dist.sample(rng)
        } else {
            0.0
        }
    };

    let total = (trajectory.time(n - 1) * imu_rate).ceil() as usize;
    let mut samples = Vec::with_capacity(total + 1);
    // Window k covers sample times in (t_k, t_{k+1}]; the comparisons below
    // are the ones replay uses, so boundary samples bin identically there.
    let mut window = 0usize;
    for j in 0..=total {
        let t = j as f64 / imu_rate;
        while window + 2 < n && t > trajectory.time(window + 1) {
            window += 1;
        }
        let state = &trajectory.states[window];
        let held = &trajectory.states[window + 1];
        let body = world_to_body(state.theta) * Vector2::new(held.acc.x, held.acc.y);
        samples.push(ImuSample {
            t,
            accel: Vector3::new(
                body.x + draw(sigma_a, &accel_noise, &mut rng),
                body.y + draw(sigma_a, &accel_noise, &mut rng),
                held.acc.z + GRAVITY + draw(sigma_a, &accel_noise, &mut rng),
            ),
            gyro: held.rate + draw(sigma_g, &gyro_noise, &mut rng),
        });
    }
    Ok(samples)
}

/// Noisy frame: the map rendered from the true state plus a stationary
/// noise field on the valid pixels.
pub fn render_measurement(
    state: &DroneState,
    map: &MapModel,
    intrinsics: &CameraIntrinsics,
    noise: &StationaryKernel,
    seed: u64,
) -> Result<ImageField> {
    let grid = intrinsics.grid();
    let mut frame = render_expected(state, &grid, intrinsics, map)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let field = sample_noise_field(noise, &grid, &mut rng)?;
    for idx in 0..grid.len() {
        if frame.is_valid(idx) {
            let v = frame.scalar(idx) + field.scalar(idx);
            frame.set_scalar(idx, v);
        }
    }
    Ok(frame)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drone::transition_matrix;
    use nalgebra::DMatrix;

    fn small_region() -> Region {
        Region { min: [-60.0, -60.0], max: [60.0, 60.0] }
    }

    fn lawnmower_spec() -> TrajectorySpec {
        TrajectorySpec {
            pattern: Pattern::Lawnmower,
            altitude: 40.0,
            speed: 2.0,
            duration: 20.0,
            dt: 1.0 / 15.0,
        }
    }

    #[test]
    fn map_is_normalized_with_analytic_attached() {
        let map = generate_map(6, 200.0, 0.5, 7).unwrap();
        let (lo, hi) = map
            .intensity()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(*v), h.max(*v)));
        assert!((lo - 0.1).abs() < 1e-9 && (hi - 0.9).abs() < 1e-9, "range [{lo}, {hi}]");
        assert_eq!(map.analytic().unwrap().bumps.len(), 6);
    }

    #[test]
    fn flat_map_for_zero_bumps() {
        let map = generate_map(0, 50.0, 0.5, 1).unwrap();
        assert!(map.intensity().iter().all(|v| (*v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn single_bump_has_zero_gradient_at_its_center() {
        let map = generate_map(1, 120.0, 0.5, 3).unwrap();
        let center = map.analytic().unwrap().bumps[0].center;
        let g = map.query(center).gradient;
        assert!(g[0].abs() < 1e-12 && g[1].abs() < 1e-12);
    }

    #[test]
    fn raster_tracks_the_analytic_form() {
        let map = generate_map(5, 160.0, 0.5, 11).unwrap();
        let analytic = map.analytic().unwrap().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let p = [rng.gen_range(-70.0..70.0), rng.gen_range(-70.0..70.0)];
            let sampled = map.query_sampled(p);
            assert!(sampled.in_map);
            assert!((sampled.value - analytic.value(p)).abs() <= 1e-3, "{p:?}");
        }
    }

    #[test]
    fn hover_spec_yields_constant_states() {
        let spec = TrajectorySpec { speed: 0.0, ..lawnmower_spec() };
        let traj = generate_trajectory(&spec, &small_region()).unwrap();
        assert_eq!(traj.len(), 300);
        for s in &traj.states {
            assert_eq!(s.nu, Vector3::zeros());
            assert_eq!(s.acc, Vector3::zeros());
            assert_eq!(s.rate, 0.0);
            assert_eq!(s.rho, traj.states[0].rho);
        }
    }

    #[test]
    fn truth_satisfies_the_recursion_exactly() {
        for pattern in [Pattern::Lawnmower, Pattern::Circuit] {
            let spec = TrajectorySpec { pattern, ..lawnmower_spec() };
            let traj = generate_trajectory(&spec, &small_region()).unwrap();
            let a = transition_matrix(spec.dt);
            let mut worst = 0.0f64;
            for k in 0..traj.len() - 1 {
                let predicted = &a * traj.states[k].to_vector() + traj.true_input(k);
                let residual = (traj.states[k + 1].to_vector() - predicted).abs().max();
                worst = worst.max(residual);
            }
            assert!(worst < 1e-12, "recursion residual {worst}");
        }
    }

    #[test]
    fn lawnmower_path_length_matches_speed_times_duration() {
        let spec = TrajectorySpec { duration: 60.0, ..lawnmower_spec() };
        let traj = generate_trajectory(&spec, &small_region()).unwrap();
        let mut length = 0.0;
        for k in 0..traj.len() - 1 {
            length += (traj.states[k + 1].rho - traj.states[k].rho).norm();
        }
        // Chord lengths slightly undercut arcs; 1% covers it.
        let expect = 2.0 * (spec.duration - spec.dt);
        assert!((length - expect).abs() < 0.01 * expect, "length {length} vs {expect}");
    }

    #[test]
    fn heading_follows_the_course_and_turns_are_bounded() {
        let traj = generate_trajectory(&lawnmower_spec(), &small_region()).unwrap();
        for (k, s) in traj.states.iter().enumerate() {
            let speed = s.nu.xy().norm();
            if speed > 0.5 {
                let course = f64::atan2(s.nu.x, s.nu.y);
                let err = wrap_angle(course - s.theta).abs();
                assert!(err < 0.2, "frame {k}: course {course} vs yaw {}", s.theta);
            }
            // Centripetal acceleration at the fillet radius bound.
            let a_max = 2.0 * 2.0 / 2.0 + 1.0;
            assert!(s.acc.norm() < a_max, "frame {k}: acc {}", s.acc.norm());
        }
    }

    #[test]
    fn path_that_cannot_fit_is_rejected() {
        let region = Region { min: [-10.0, -10.0], max: [10.0, 10.0] };
        let spec = TrajectorySpec { duration: 600.0, ..lawnmower_spec() };
        assert!(matches!(
            generate_trajectory(&spec, &region),
            Err(FilterError::TrajectoryOutOfMap(_))
        ));
    }

    #[test]
    fn zero_densities_reproduce_truth_exactly() {
        let traj = generate_trajectory(&lawnmower_spec(), &small_region()).unwrap();
        let dens = NoiseDensities {
            accel_density: 0.0,
            gyro_density: 0.0,
            accel_walk: 0.0,
            gyro_walk: 0.0,
        };
        let samples = synthesize_imu(&traj, &dens, 100.0, 1).unwrap();
        // First sample of window 0 reproduces the held values.
        let s = &samples[1];
        let state = &traj.states[0];
        let held = &traj.states[1];
        let body = world_to_body(state.theta) * Vector2::new(held.acc.x, held.acc.y);
        assert!((s.accel.x - body.x).abs() < 1e-15);
        assert!((s.accel.y - body.y).abs() < 1e-15);
        assert!((s.accel.z - (held.acc.z + GRAVITY)).abs() < 1e-15);
        assert!((s.gyro - held.rate).abs() < 1e-15);
    }

    #[test]
    fn sample_noise_scales_with_the_rate() {
        let spec = TrajectorySpec { speed: 0.0, duration: 70.0, ..lawnmower_spec() };
        let traj = generate_trajectory(&spec, &small_region()).unwrap();
        let dens = NoiseDensities {
            accel_density: 1e-3,
            gyro_density: 0.0,
            accel_walk: 0.0,
            gyro_walk: 0.0,
        };
        // Hover truth is zero acceleration, so the samples are pure noise.
        let var_at = |rate: f64, seed: u64| {
            let samples = synthesize_imu(&traj, &dens, rate, seed).unwrap();
            let n = samples.len() as f64;
            let mean = samples.iter().map(|s| s.accel.x).sum::<f64>() / n;
            samples.iter().map(|s| (s.accel.x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        };
        let v100 = var_at(100.0, 5);
        assert!(((v100.sqrt() - 0.01) / 0.01).abs() < 0.02, "sigma {}", v100.sqrt());
        let v200 = var_at(200.0, 6);
        assert!((v200 / v100 - 2.0).abs() < 0.1, "ratio {}", v200 / v100);
    }

    #[test]
    fn imu_stream_brackets_every_frame() {
        let traj = generate_trajectory(&lawnmower_spec(), &small_region()).unwrap();
        let samples = synthesize_imu(&traj, &NoiseDensities::default(), 100.0, 2).unwrap();
        for k in 0..traj.len() {
            let t = traj.time(k);
            assert!(samples.iter().any(|s| s.t <= t));
            assert!(samples.iter().any(|s| s.t >= t));
        }
        // And every window holds roughly rate * dt samples.
        for k in 0..traj.len() - 1 {
            let (t0, t1) = (traj.time(k), traj.time(k + 1));
            let count = samples.iter().filter(|s| s.t > t0 && s.t <= t1).count();
            assert!((6..=7).contains(&count), "window {k} has {count} samples");
        }
    }

    #[test]
    fn rendered_measurement_noise_has_the_requested_variance() {
        let map = generate_map(4, 200.0, 0.5, 9).unwrap();
        let intr = CameraIntrinsics {
            rows: 64,
            cols: 64,
            principal_point: [31.5, 31.5],
            ..CameraIntrinsics::default()
        };
        let state = DroneState {
            rho: Vector3::new(0.0, 0.0, 40.0),
            nu: Vector3::zeros(),
            acc: Vector3::zeros(),
            theta: 0.3,
            rate: 0.0,
        };
        let clean = render_expected(&state, &intr.grid(), &intr, &map).unwrap();
        let noise = StationaryKernel::white_scalar(1e-2).unwrap();
        // Average the per-frame variance estimate over several frames.
        let mut total = 0.0;
        let frames = 20;
        for seed in 0..frames {
            let noisy = render_measurement(&state, &map, &intr, &noise, seed).unwrap();
            let mut sum2 = 0.0;
            for idx in 0..clean.grid().len() {
                sum2 += (noisy.scalar(idx) - clean.scalar(idx)).powi(2);
            }
            total += sum2 / clean.grid().len() as f64;
        }
        let var = total / frames as f64;
        assert!(((var - 1e-2) / 1e-2).abs() < 0.03, "variance {var}");
    }

    #[test]
    fn zero_noise_renders_exactly() {
        let map = generate_map(3, 150.0, 0.5, 4).unwrap();
        let intr = CameraIntrinsics {
            rows: 32,
            cols: 32,
            principal_point: [15.5, 15.5],
            ..CameraIntrinsics::default()
        };
        let state = DroneState {
            rho: Vector3::new(5.0, -3.0, 35.0),
            nu: Vector3::zeros(),
            acc: Vector3::zeros(),
            theta: 1.0,
            rate: 0.0,
        };
        let clean = render_expected(&state, &intr.grid(), &intr, &map).unwrap();
        let noise = StationaryKernel::white_scalar(0.0);
        // A zero-variance kernel is rejected; render with a tiny variance
        // and check the bound instead.
        assert!(noise.is_err());
        let tiny = StationaryKernel::white_scalar(1e-30).unwrap();
        let rendered = render_measurement(&state, &map, &intr, &tiny, 8).unwrap();
        for idx in 0..clean.grid().len() {
            assert!((rendered.scalar(idx) - clean.scalar(idx)).abs() < 1e-12);
        }
    }

    #[test]
    fn datasets_are_deterministic_per_seed() {
        let traj = generate_trajectory(&lawnmower_spec(), &small_region()).unwrap();
        let a = synthesize_imu(&traj, &NoiseDensities::default(), 100.0, 42).unwrap();
        let b = synthesize_imu(&traj, &NoiseDensities::default(), 100.0, 42).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.t, y.t);
            assert_eq!(x.accel, y.accel);
            assert_eq!(x.gyro, y.gyro);
        }
        let map = generate_map(4, 120.0, 0.5, 3).unwrap();
        let intr = CameraIntrinsics {
            rows: 16,
            cols: 16,
            principal_point: [7.5, 7.5],
            ..CameraIntrinsics::default()
        };
        let noise = StationaryKernel::white_scalar(1e-2).unwrap();
        let f1 = render_measurement(&traj.states[0], &map, &intr, &noise, 7).unwrap();
        let f2 = render_measurement(&traj.states[0], &map, &intr, &noise, 7).unwrap();
        assert_eq!(f1.data(), f2.data());
    }

    #[test]
    fn noise_free_truth_replay_is_a_filter_fixed_point() {
        use crate::drone::DroneProcess;
        use crate::filter::{FilterState, NoisePlan, ProcessModel, ReductionMode};

        let map = generate_map(5, 200.0, 0.5, 21).unwrap();
        let intr = CameraIntrinsics {
            rows: 24,
            cols: 24,
            principal_point: [11.5, 11.5],
            ..CameraIntrinsics::default()
        };
        let spec = TrajectorySpec { duration: 8.0, ..lawnmower_spec() };
        let region = Region::over_map(&map, &intr, spec.altitude).unwrap();
        let traj = generate_trajectory(&spec, &region).unwrap();
        let process = DroneProcess::new(spec.dt, 1.6e-2, 1.94e-3).unwrap();
        let model = crate::camera::CameraModel::new(
            map.clone(),
            intr,
            crate::preprocess::PreprocessConfig::none(),
        )
        .unwrap();
        let plan = NoisePlan::White { sigma: DMatrix::from_element(1, 1, 1e-2) };
        let grid = model.intrinsics().grid();

        let mut fs =
            FilterState::new(traj.states[0].to_vector(), process.noise().clone()).unwrap();
        let steps = traj.len().min(101) - 1;
        for k in 0..steps {
            let truth = &traj.states[k + 1];
            let frame = render_expected(truth, &grid, model.intrinsics(), &map).unwrap();
            fs = crate::filter::step(
                &fs,
                &process,
                &traj.true_input(k),
                &model,
                &frame,
                &plan,
                ReductionMode::Deterministic,
            )
            .unwrap()
            .0;
            let err = (fs.x() - truth.to_vector()).abs().max();
            assert!(err < 1e-6, "step {k}: drift {err}");
        }
    }
}
