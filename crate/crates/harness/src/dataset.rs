//! The on-disk dataset layout and its two producers: the simulator
//! (`simulate` + `write_dataset`) and ingestion of existing directories.
//!
//! A dataset directory holds:
//!   - `map.pgm`      16-bit map raster, values spanning [0, 1]
//!   - `map.meta`     grid geometry, value span, optional analytic bumps
//!                    and an optional elevation raster reference
//!   - `images/%06d.pgm`  one 16-bit frame per truth row
//!   - `imu.csv`      `t,ax,ay,az,gz`
//!   - `truth.csv`    `t,x,y,z,vx,vy,vz,ax,ay,az,yaw,r`
//!   - `config`       the generating configuration, `key = value`
//!
//! CSV floats are written with the shortest round-trip formatting, so
//! re-reading reproduces them bit-exactly; images are quantized to the
//! 16-bit span recorded in the config.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use field_ekf_core::camera::{AnalyticMap, CameraIntrinsics, GaussianBump, MapModel};
use field_ekf_core::drone::{DroneState, ImuSample, NoiseDensities};
use field_ekf_core::noise::StationaryKernel;
use field_ekf_core::sim::{
    generate_map, generate_trajectory, render_measurement, synthesize_imu, Pattern, Region,
    Trajectory, TrajectorySpec,
};
use field_ekf_core::{FieldGrid, ImageField};
use nalgebra::Vector3;

use crate::config::RunConfig;
use crate::error::{HarnessError, Result};
use crate::pgm::{self, read_pgm, write_pgm16};

/// Independent seed stream derived from the dataset seed (splitmix64).
pub fn subseed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const MAP_STREAM: u64 = 1;
const IMU_STREAM: u64 = 2;
const FRAME_STREAM: u64 = 3;

/// Everything the simulator produced, frames rendered on demand.
pub struct SimData {
    pub cfg: RunConfig,
    pub map: MapModel,
    pub intrinsics: CameraIntrinsics,
    pub trajectory: Trajectory,
    pub imu: Vec<ImuSample>,
    pub kernel: StationaryKernel,
}

impl SimData {
    /// Noisy frame for truth row `k`, deterministic per dataset seed.
    pub fn frame(&self, k: usize) -> Result<ImageField> {
        Ok(render_measurement(
            &self.trajectory.states[k],
            &self.map,
            &self.intrinsics,
            &self.kernel,
            subseed(self.cfg.seed, FRAME_STREAM + k as u64),
        )?)
    }
}

/// Builds map, trajectory, and inertial stream from the configuration.
pub fn simulate(cfg: &RunConfig) -> Result<SimData> {
    let intrinsics = cfg.intrinsics()?;
    let map = generate_map(cfg.map_bumps, cfg.map_extent, cfg.map_pitch, subseed(cfg.seed, MAP_STREAM))?;
    let region = Region::over_map(&map, &intrinsics, cfg.altitude)?;
    let (pattern, speed) = match cfg.pattern.as_str() {
        "hover" => (Pattern::Lawnmower, 0.0),
        "circuit" => (Pattern::Circuit, cfg.speed),
        _ => (Pattern::Lawnmower, cfg.speed),
    };
    let spec = TrajectorySpec {
        pattern,
        altitude: cfg.altitude,
        speed,
        duration: cfg.duration,
        dt: cfg.dt(),
    };
    let trajectory = generate_trajectory(&spec, &region)?;
    let densities = NoiseDensities {
        accel_density: cfg.sigma_a,
        gyro_density: cfg.g_a,
        ..NoiseDensities::default()
    };
    let imu = synthesize_imu(&trajectory, &densities, cfg.imu_rate, subseed(cfg.seed, IMU_STREAM))?;
    let kernel = cfg.kernel()?;
    Ok(SimData { cfg: cfg.clone(), map, intrinsics, trajectory, imu, kernel })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|source| HarnessError::Output {
        path: path.display().to_string(),
        source,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| HarnessError::Output {
        path: path.display().to_string(),
        source,
    })
}

/// Writes the dataset directory; returns human-readable warnings (clamped
/// samples, quantization too coarse for the noise floor).
pub fn write_dataset(sim: &SimData, dir: &Path) -> Result<Vec<String>> {
    let cfg = &sim.cfg;
    create_dir(dir)?;
    create_dir(&dir.join("images"))?;
    let mut warnings = Vec::new();

    let grid = sim.map.grid();
    let (samples, clamped) = pgm::quantize(sim.map.intensity(), 0.0, 1.0);
    if clamped > 0 {
        warnings.push(format!("map: {clamped} intensity samples clamped to [0, 1]"));
    }
    write_pgm16(&dir.join("map.pgm"), grid.rows(), grid.cols(), &samples)?;

    let mut meta = String::new();
    let [pr, pc] = grid.pitch();
    let [o0, o1] = grid.origin();
    let _ = writeln!(meta, "pitch_r = {pr}\npitch_c = {pc}\norigin_0 = {o0}\norigin_1 = {o1}");
    let _ = writeln!(meta, "lo = 0\nhi = 1");
    if let Some(analytic) = sim.map.analytic() {
        let _ = writeln!(meta, "offset = {}", analytic.offset);
        for b in &analytic.bumps {
            let _ = writeln!(meta, "bump = {} {} {} {}", b.center[0], b.center[1], b.width, b.amplitude);
        }
    }
    write_text(&dir.join("map.meta"), &meta)?;

    let mut truth = String::from("t,x,y,z,vx,vy,vz,ax,ay,az,yaw,r\n");
    for (k, s) in sim.trajectory.states.iter().enumerate() {
        let _ = writeln!(
            truth,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            sim.trajectory.time(k),
            s.rho.x, s.rho.y, s.rho.z,
            s.nu.x, s.nu.y, s.nu.z,
            s.acc.x, s.acc.y, s.acc.z,
            s.theta, s.rate,
        );
    }
    write_text(&dir.join("truth.csv"), &truth)?;

    let mut imu = String::from("t,ax,ay,az,gz\n");
    for s in &sim.imu {
        let _ = writeln!(imu, "{},{},{},{},{}", s.t, s.accel.x, s.accel.y, s.accel.z, s.gyro);
    }
    write_text(&dir.join("imu.csv"), &imu)?;

    // The per-pixel noise variance must dominate the quantization error by
    // an order of magnitude or the stored frames are no longer faithful.
    let half_step = (cfg.image_hi - cfg.image_lo) / 65535.0 / 2.0;
    if cfg.sigma < 10.0 * half_step {
        warnings.push(format!(
            "image quantization error {half_step:.2e} is not an order of magnitude \
             below the noise floor {:.2e}; widen sigma or narrow the image span",
            cfg.sigma
        ));
    }

    let mut frame_clamped = 0usize;
    for k in 0..sim.trajectory.len() {
        let frame = sim.frame(k)?;
        if frame.invalid_count() > 0 {
            return Err(HarnessError::Dataset(format!(
                "frame {k} looks past the map edge; shrink the flight region or grow the map"
            )));
        }
        let (samples, clamped) = pgm::quantize(frame.data(), cfg.image_lo, cfg.image_hi);
        frame_clamped += clamped;
        write_pgm16(
            &dir.join("images").join(format!("{k:06}.pgm")),
            cfg.rows,
            cfg.cols,
            &samples,
        )?;
    }
    if frame_clamped > 0 {
        warnings.push(format!(
            "{frame_clamped} frame samples fell outside [{}, {}] and were clamped",
            cfg.image_lo, cfg.image_hi
        ));
    }

    write_text(&dir.join("config"), &cfg.render())?;
    Ok(warnings)
}

/// Validated dataset handle; frames stay on disk until asked for.
#[derive(Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub cfg: RunConfig,
    pub map: MapModel,
    pub intrinsics: CameraIntrinsics,
    pub truth: Vec<DroneState>,
    pub times: Vec<f64>,
    pub imu: Vec<ImuSample>,
    pub frame_count: usize,
}

impl Dataset {
    pub fn frame(&self, k: usize) -> Result<ImageField> {
        let path = self.dir.join("images").join(format!("{k:06}.pgm"));
        let pgm = read_pgm(&path)?;
        if pgm.rows != self.cfg.rows || pgm.cols != self.cfg.cols {
            return Err(HarnessError::Dataset(format!(
                "{}: {}x{} does not match the configured {}x{}",
                path.display(),
                pgm.rows,
                pgm.cols,
                self.cfg.rows,
                self.cfg.cols
            )));
        }
        let values = pgm.to_values(self.cfg.image_lo, self.cfg.image_hi);
        Ok(ImageField::from_vec(FieldGrid::pixels(pgm.rows, pgm.cols), 1, values)?)
    }

    /// Largest side of the map, the scale divergence is judged against.
    pub fn extent(&self) -> f64 {
        let g = self.map.grid();
        let [pr, pc] = g.pitch();
        ((g.rows() - 1) as f64 * pr).max((g.cols() - 1) as f64 * pc)
    }
}

fn parse_meta(path: &Path, violations: &mut Vec<String>) -> MetaFile {
    let mut meta = MetaFile::default();
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            violations.push(format!("{}: {e}", path.display()));
            return meta;
        }
    };
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |what: &str| format!("{}:{}: {what}", path.display(), lineno + 1);
        let Some((key, value)) = line.split_once('=') else {
            violations.push(bad(&format!("expected key = value, got {raw:?}")));
            continue;
        };
        let (key, value) = (key.trim(), value.trim());
        let float_slot = match key {
            "pitch_r" => Some(&mut meta.pitch_r),
            "pitch_c" => Some(&mut meta.pitch_c),
            "origin_0" => Some(&mut meta.origin_0),
            "origin_1" => Some(&mut meta.origin_1),
            "lo" => Some(&mut meta.lo),
            "hi" => Some(&mut meta.hi),
            "offset" => Some(&mut meta.offset),
            "elevation_lo" => Some(&mut meta.elevation_lo),
            "elevation_hi" => Some(&mut meta.elevation_hi),
            _ => None,
        };
        if let Some(slot) = float_slot {
            match value.parse::<f64>() {
                Ok(v) => *slot = Some(v),
                Err(_) => violations.push(bad(&format!("{key}: {value:?} is not a number"))),
            }
            continue;
        }
        match key {
            "elevation" => meta.elevation = Some(value.to_string()),
            "bump" => {
                let parts: Vec<f64> =
                    value.split_whitespace().filter_map(|p| p.parse().ok()).collect();
                if parts.len() == 4 {
                    meta.bumps.push(GaussianBump {
                        center: [parts[0], parts[1]],
                        width: parts[2],
                        amplitude: parts[3],
                    });
                } else {
                    violations.push(bad("bump needs four numbers: center_e center_n width amplitude"));
                }
            }
            other => violations.push(bad(&format!("unknown map key {other:?}"))),
        }
    }
    meta
}

#[derive(Default)]
struct MetaFile {
    pitch_r: Option<f64>,
    pitch_c: Option<f64>,
    origin_0: Option<f64>,
    origin_1: Option<f64>,
    lo: Option<f64>,
    hi: Option<f64>,
    offset: Option<f64>,
    bumps: Vec<GaussianBump>,
    elevation: Option<String>,
    elevation_lo: Option<f64>,
    elevation_hi: Option<f64>,
}

/// Parses a CSV with the exact expected header and all-float rows;
/// violations name the file and line.
pub(crate) fn parse_csv(path: &Path, header: &str, violations: &mut Vec<String>) -> Vec<Vec<f64>> {
    let ncols = header.split(',').count();
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            violations.push(format!("{}: {e}", path.display()));
            return Vec::new();
        }
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, first)) if first.trim() == header => {}
        Some((_, first)) => {
            violations.push(format!(
                "{}:1: header {first:?} should be {header:?}",
                path.display()
            ));
            return Vec::new();
        }
        None => {
            violations.push(format!("{}: empty file", path.display()));
            return Vec::new();
        }
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != ncols {
            violations.push(format!(
                "{}:{}: {} fields, expected {ncols}",
                path.display(),
                lineno + 1,
                fields.len()
            ));
            continue;
        }
        let mut row = Vec::with_capacity(ncols);
        let mut ok = true;
        for f in fields {
            match f.trim().parse::<f64>() {
                Ok(v) if v.is_finite() => row.push(v),
                _ => {
                    violations.push(format!(
                        "{}:{}: {f:?} is not a finite number",
                        path.display(),
                        lineno + 1
                    ));
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            rows.push(row);
        }
    }
    rows
}

fn check_monotonic(path: &str, times: &[f64], violations: &mut Vec<String>) {
    for (i, pair) in times.windows(2).enumerate() {
        if pair[1] <= pair[0] {
            violations.push(format!(
                "{path}: timestamps not increasing at row {} ({} then {})",
                i + 2,
                pair[0],
                pair[1]
            ));
            return;
        }
    }
}

pub const TRUTH_HEADER: &str = "t,x,y,z,vx,vy,vz,ax,ay,az,yaw,r";

fn truth_from_rows(rows: &[Vec<f64>]) -> Vec<DroneState> {
    rows.iter()
        .map(|r| DroneState {
            rho: Vector3::new(r[1], r[2], r[3]),
            nu: Vector3::new(r[4], r[5], r[6]),
            acc: Vector3::new(r[7], r[8], r[9]),
            theta: r[10],
            rate: r[11],
        })
        .collect()
}

/// Loads `truth.csv` alone, for consumers that need the reference flight
/// without the rest of the dataset.
pub fn load_truth_csv(path: &Path) -> Result<(Vec<f64>, Vec<DroneState>)> {
    let mut violations = Vec::new();
    let rows = parse_csv(path, TRUTH_HEADER, &mut violations);
    if !violations.is_empty() {
        return Err(HarnessError::Dataset(violations.join("\n  - ")));
    }
    Ok((rows.iter().map(|r| r[0]).collect(), truth_from_rows(&rows)))
}

/// Opens and validates a dataset directory. Schema violations are gathered
/// and reported together; soft issues come back as warnings.
pub fn ingest(
    dir: &Path,
    user_config: Option<&Path>,
    overrides: &[String],
) -> Result<(Dataset, Vec<String>)> {
    if !dir.is_dir() {
        return Err(HarnessError::Dataset(format!("{} is not a directory", dir.display())));
    }
    let mut violations = Vec::new();
    let mut warnings = Vec::new();

    let config_path = dir.join("config");
    let mut cfg = RunConfig::default();
    if config_path.is_file() {
        if let Err(e) = cfg.apply_file(&config_path) {
            violations.push(e.to_string());
        }
    } else {
        violations.push(format!("{}: missing", config_path.display()));
    }
    // User-side config problems are config errors, not dataset ones.
    if let Some(p) = user_config {
        cfg.apply_file(p)?;
    }
    cfg.apply_overrides(overrides)?;
    cfg.validate()?;

    let map = load_map(dir, &mut violations);

    let truth_rows = parse_csv(&dir.join("truth.csv"), TRUTH_HEADER, &mut violations);
    let times: Vec<f64> = truth_rows.iter().map(|r| r[0]).collect();
    check_monotonic("truth.csv", &times, &mut violations);
    let truth = truth_from_rows(&truth_rows);

    let imu_rows = parse_csv(&dir.join("imu.csv"), "t,ax,ay,az,gz", &mut violations);
    check_monotonic("imu.csv", &imu_rows.iter().map(|r| r[0]).collect::<Vec<_>>(), &mut violations);
    let imu: Vec<ImuSample> = imu_rows
        .iter()
        .map(|r| ImuSample { t: r[0], accel: Vector3::new(r[1], r[2], r[3]), gyro: r[4] })
        .collect();

    let frame_count = count_frames(dir, &mut violations);
    if !truth.is_empty() && frame_count != truth.len() {
        violations.push(format!(
            "{frame_count} images for {} truth rows",
            truth.len()
        ));
    }
    let expected = (cfg.duration * cfg.camera_rate + 1e-9).floor() as usize;
    if frame_count > 0 && frame_count != expected {
        warnings.push(format!(
            "config duration {} at {} Hz promises {expected} frames, found {frame_count}",
            cfg.duration, cfg.camera_rate
        ));
    }

    if let (Some(first), Some(last)) = (imu.first(), imu.last()) {
        if let (Some(t0), Some(tn)) = (times.first(), times.last()) {
            if first.t > *t0 || last.t < *tn {
                violations.push(format!(
                    "inertial stream [{}, {}] does not bracket the frames [{t0}, {tn}]",
                    first.t, last.t
                ));
            }
        }
    } else if !times.is_empty() {
        violations.push("imu.csv holds no samples".into());
    }

    // Frames whose window holds no samples force the filter to coast.
    let mut stale = Vec::new();
    for k in 1..times.len() {
        let lo = imu.partition_point(|s| s.t <= times[k - 1]);
        let hi = imu.partition_point(|s| s.t <= times[k]);
        if lo == hi {
            stale.push(k);
        }
    }
    if !stale.is_empty() {
        warnings.push(format!(
            "inertial gaps leave {} frame(s) without samples: {:?}",
            stale.len(),
            stale
        ));
    }

    if let Ok(probe) = read_first_frame(dir) {
        if probe != (cfg.rows, cfg.cols) {
            violations.push(format!(
                "images are {}x{} but the config says {}x{}",
                probe.0, probe.1, cfg.rows, cfg.cols
            ));
        }
    }

    if !violations.is_empty() {
        return Err(HarnessError::Dataset(format!(
            "{} problem(s) in {}:\n  - {}",
            violations.len(),
            dir.display(),
            violations.join("\n  - ")
        )));
    }

    let intrinsics = cfg.intrinsics()?;
    Ok((
        Dataset {
            dir: dir.to_path_buf(),
            cfg,
            map: map.expect("map violations were reported"),
            intrinsics,
            truth,
            times,
            imu,
            frame_count,
        },
        warnings,
    ))
}

fn load_map(dir: &Path, violations: &mut Vec<String>) -> Option<MapModel> {
    let pgm_path = dir.join("map.pgm");
    let pgm = match read_pgm(&pgm_path) {
        Ok(p) => Some(p),
        Err(e) => {
            violations.push(e.to_string());
            None
        }
    };
    let meta = parse_meta(&dir.join("map.meta"), violations);
    let mut missing = Vec::new();
    for (name, v) in [
        ("pitch_r", meta.pitch_r),
        ("pitch_c", meta.pitch_c),
        ("origin_0", meta.origin_0),
        ("origin_1", meta.origin_1),
        ("lo", meta.lo),
        ("hi", meta.hi),
    ] {
        if v.is_none() {
            missing.push(name);
        }
    }
    if !missing.is_empty() {
        violations.push(format!("map.meta: missing keys {missing:?}"));
        return None;
    }
    let pgm = pgm?;

    let grid = match FieldGrid::new(
        pgm.rows,
        pgm.cols,
        [meta.pitch_r.unwrap(), meta.pitch_c.unwrap()],
        [meta.origin_0.unwrap(), meta.origin_1.unwrap()],
    ) {
        Ok(g) => g,
        Err(e) => {
            violations.push(format!("map.meta: {e}"));
            return None;
        }
    };

    let elevation = match &meta.elevation {
        Some(name) => {
            let (lo, hi) = (meta.elevation_lo.unwrap_or(0.0), meta.elevation_hi.unwrap_or(1.0));
            match read_pgm(&dir.join(name)) {
                Ok(e) if (e.rows, e.cols) == (pgm.rows, pgm.cols) => Some(e.to_values(lo, hi)),
                Ok(e) => {
                    violations.push(format!(
                        "{name}: elevation is {}x{}, map is {}x{}",
                        e.rows, e.cols, pgm.rows, pgm.cols
                    ));
                    None
                }
                Err(e) => {
                    violations.push(e.to_string());
                    None
                }
            }
        }
        None => None,
    };

    let values = pgm.to_values(meta.lo.unwrap(), meta.hi.unwrap());
    match MapModel::from_samples(grid, values, elevation) {
        Ok(map) => {
            if meta.offset.is_some() || !meta.bumps.is_empty() {
                Some(map.with_analytic(AnalyticMap {
                    bumps: meta.bumps,
                    offset: meta.offset.unwrap_or(0.0),
                }))
            } else {
                Some(map)
            }
        }
        Err(e) => {
            violations.push(format!("map.pgm: {e}"));
            None
        }
    }
}

fn count_frames(dir: &Path, violations: &mut Vec<String>) -> usize {
    let images = dir.join("images");
    let entries = match fs::read_dir(&images) {
        Ok(e) => e,
        Err(e) => {
            violations.push(format!("{}: {e}", images.display()));
            return 0;
        }
    };
    let mut names: Vec<String> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".pgm"))
        .collect();
    names.sort();
    for (k, name) in names.iter().enumerate() {
        let expected = format!("{k:06}.pgm");
        if *name != expected {
            violations.push(format!(
                "images/: expected {expected} at position {k}, found {name}"
            ));
            return names.len();
        }
    }
    names.len()
}

fn read_first_frame(dir: &Path) -> Result<(usize, usize)> {
    let pgm = read_pgm(&dir.join("images").join("000000.pgm"))?;
    Ok((pgm.rows, pgm.cols))
}
