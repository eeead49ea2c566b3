//! Run configuration: a flat key-value namespace with defaults for every
//! key, loadable from plain-text files and overridable by `key=value`
//! command-line arguments. Datasets carry a config file of the same format
//! recording how they were generated, which later layers can override.

use std::fmt::Write as _;
use std::path::Path;

use field_ekf_core::camera::CameraIntrinsics;
use field_ekf_core::noise::{SampledKernel, StationaryKernel};
use field_ekf_core::preprocess::PreprocessConfig;

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // Measurement noise.
    /// White-noise intensity variance per unit pixel area.
    pub sigma: f64,
    /// `white` or `gaussian` (correlated kernel with `corr_len`).
    pub noise: String,
    /// Correlation length of the gaussian kernel, in pixels.
    pub corr_len: f64,
    /// Half support of the sampled kernel, in lags.
    pub noise_lags: usize,

    // Process noise and rates.
    pub sigma_a: f64,
    pub g_a: f64,
    pub imu_rate: f64,
    pub camera_rate: f64,

    // Frame preprocessing (applied to the map once and to every frame).
    pub blur: f64,
    pub normalize: bool,
    pub equalize: bool,
    /// Match each frame's histogram to the predicted frame before the
    /// update.
    pub match_histogram: bool,

    // Initialization and run policy.
    /// Initial covariance is this multiple of Q.
    pub p0_scale: f64,
    /// Perturbation added to the truth-derived initial state, one entry per
    /// state component; shorter lists are zero-padded. Each perturbed entry
    /// also adds its square to the initial covariance diagonal.
    pub init_offset: Vec<f64>,
    /// Leading frames excluded from the metrics.
    pub warmup: usize,
    pub deterministic: bool,
    pub seed: u64,
    /// A position error beyond this multiple of the map extent is recorded
    /// as divergence and stops the run.
    pub divergence_factor: f64,
    /// Skip measurement updates entirely (prediction-only baseline).
    pub dead_reckoning: bool,

    // Density sweep.
    pub sweep_start: f64,
    pub sweep_points: usize,
    /// Squared-error cap above which sweep entries are flagged.
    pub sweep_cap: f64,

    // Simulation geometry.
    pub pattern: String,
    pub altitude: f64,
    pub speed: f64,
    pub duration: f64,
    pub map_extent: f64,
    pub map_pitch: f64,
    pub map_bumps: usize,
    pub rows: usize,
    pub cols: usize,
    pub focal_length: f64,
    /// Physical sensor width; pixel pitch is this over `cols`.
    pub sensor_width: f64,

    // Dataset image encoding span.
    pub image_lo: f64,
    pub image_hi: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            sigma: 1e-2,
            noise: "white".into(),
            corr_len: 3.0,
            noise_lags: 8,
            sigma_a: 1.6e-2,
            g_a: 1.94e-3,
            imu_rate: 100.0,
            camera_rate: 15.0,
            blur: 0.5,
            normalize: false,
            equalize: false,
            match_histogram: false,
            p0_scale: 1.0,
            init_offset: Vec::new(),
            warmup: 0,
            deterministic: true,
            seed: 0,
            divergence_factor: 10.0,
            dead_reckoning: false,
            sweep_start: 1e-3,
            sweep_points: 14,
            sweep_cap: 100.0,
            pattern: "lawnmower".into(),
            altitude: 40.0,
            speed: 2.0,
            duration: 60.0,
            map_extent: 260.0,
            map_pitch: 0.5,
            map_bumps: 40,
            rows: 512,
            cols: 612,
            focal_length: 6.0e-3,
            sensor_width: 6.1e-3,
            image_lo: -1.0,
            image_hi: 2.0,
        }
    }
}

fn parse_f64(key: &str, value: &str) -> Result<f64> {
    value
        .parse()
        .map_err(|_| HarnessError::Config(format!("key {key}: {value:?} is not a number")))
}

fn parse_usize(key: &str, value: &str) -> Result<usize> {
    value
        .parse()
        .map_err(|_| HarnessError::Config(format!("key {key}: {value:?} is not a whole number")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(HarnessError::Config(format!("key {key}: {value:?} is not a boolean"))),
    }
}

impl RunConfig {
    /// Frame interval.
    pub fn dt(&self) -> f64 {
        1.0 / self.camera_rate
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "sigma" => self.sigma = parse_f64(key, value)?,
            "noise" => {
                if value != "white" && value != "gaussian" {
                    return Err(HarnessError::Config(format!(
                        "key noise: {value:?} is neither \"white\" nor \"gaussian\""
                    )));
                }
                self.noise = value.into();
            }
            "corr_len" => self.corr_len = parse_f64(key, value)?,
            "noise_lags" => self.noise_lags = parse_usize(key, value)?,
            "sigma_a" => self.sigma_a = parse_f64(key, value)?,
            "g_a" => self.g_a = parse_f64(key, value)?,
            "imu_rate" => self.imu_rate = parse_f64(key, value)?,
            "camera_rate" => self.camera_rate = parse_f64(key, value)?,
            "blur" => self.blur = parse_f64(key, value)?,
            "normalize" => self.normalize = parse_bool(key, value)?,
            "equalize" => self.equalize = parse_bool(key, value)?,
            "match" => self.match_histogram = parse_bool(key, value)?,
            "p0_scale" => self.p0_scale = parse_f64(key, value)?,
            "init_offset" => {
                let mut entries = Vec::new();
                for part in value.split(',').filter(|p| !p.trim().is_empty()) {
                    entries.push(parse_f64(key, part.trim())?);
                }
                self.init_offset = entries;
            }
            "warmup" => self.warmup = parse_usize(key, value)?,
            "deterministic" => self.deterministic = parse_bool(key, value)?,
            "seed" => {
                self.seed = value.parse().map_err(|_| {
                    HarnessError::Config(format!("key seed: {value:?} is not an integer"))
                })?
            }
            "divergence_factor" => self.divergence_factor = parse_f64(key, value)?,
            "dead_reckoning" => self.dead_reckoning = parse_bool(key, value)?,
            "sweep_start" => self.sweep_start = parse_f64(key, value)?,
            "sweep_points" => self.sweep_points = parse_usize(key, value)?,
            "sweep_cap" => self.sweep_cap = parse_f64(key, value)?,
            "pattern" => {
                if !["lawnmower", "circuit", "hover"].contains(&value) {
                    return Err(HarnessError::Config(format!(
                        "key pattern: {value:?} is not lawnmower, circuit, or hover"
                    )));
                }
                self.pattern = value.into();
            }
            "altitude" => self.altitude = parse_f64(key, value)?,
            "speed" => self.speed = parse_f64(key, value)?,
            "duration" => self.duration = parse_f64(key, value)?,
            "map_extent" => self.map_extent = parse_f64(key, value)?,
            "map_pitch" => self.map_pitch = parse_f64(key, value)?,
            "map_bumps" => self.map_bumps = parse_usize(key, value)?,
            "rows" => self.rows = parse_usize(key, value)?,
            "cols" => self.cols = parse_usize(key, value)?,
            "focal_length" => self.focal_length = parse_f64(key, value)?,
            "sensor_width" => self.sensor_width = parse_f64(key, value)?,
            "image_lo" => self.image_lo = parse_f64(key, value)?,
            "image_hi" => self.image_hi = parse_f64(key, value)?,
            _ => return Err(HarnessError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies a config file (`key = value` lines, `#` comments).
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                HarnessError::Config(format!(
                    "{}:{}: expected key = value, got {raw:?}",
                    path.display(),
                    lineno + 1
                ))
            })?;
            self.set(key.trim(), value.trim()).map_err(|e| {
                HarnessError::Config(format!("{}:{}: {e}", path.display(), lineno + 1))
            })?;
        }
        Ok(())
    }

    /// Applies command-line overrides of the form `key=value` (a leading
    /// `--` is accepted and ignored).
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for raw in overrides {
            let stripped = raw.strip_prefix("--").unwrap_or(raw);
            let (key, value) = stripped.split_once('=').ok_or_else(|| {
                HarnessError::Config(format!("override {raw:?} is not key=value"))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Defaults, then the dataset's recorded config, then the user's file,
    /// then `key=value` overrides.
    pub fn layered(
        dataset_config: Option<&Path>,
        file: Option<&Path>,
        overrides: &[String],
    ) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(p) = dataset_config {
            cfg.apply_file(p)?;
        }
        if let Some(p) = file {
            cfg.apply_file(p)?;
        }
        cfg.apply_overrides(overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive: [(&str, f64); 14] = [
            ("sigma", self.sigma),
            ("corr_len", self.corr_len),
            ("sigma_a", self.sigma_a),
            ("g_a", self.g_a),
            ("imu_rate", self.imu_rate),
            ("camera_rate", self.camera_rate),
            ("p0_scale", self.p0_scale),
            ("divergence_factor", self.divergence_factor),
            ("sweep_start", self.sweep_start),
            ("altitude", self.altitude),
            ("duration", self.duration),
            ("map_pitch", self.map_pitch),
            ("focal_length", self.focal_length),
            ("sensor_width", self.sensor_width),
        ];
        for (key, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(HarnessError::Config(format!("{key} must be positive, got {v}")));
            }
        }
        if !(self.blur >= 0.0 && self.blur.is_finite()) {
            return Err(HarnessError::Config(format!("blur must be >= 0, got {}", self.blur)));
        }
        if self.speed < 0.0 {
            return Err(HarnessError::Config("speed cannot be negative".into()));
        }
        if self.map_extent <= 0.0 {
            return Err(HarnessError::Config("map_extent must be positive".into()));
        }
        if self.rows == 0 || self.cols == 0 {
            return Err(HarnessError::Config("rows and cols must be positive".into()));
        }
        if self.sweep_points == 0 {
            return Err(HarnessError::Config("sweep_points must be at least 1".into()));
        }
        if self.image_hi <= self.image_lo {
            return Err(HarnessError::Config("image_hi must exceed image_lo".into()));
        }
        if self.imu_rate < self.camera_rate {
            return Err(HarnessError::Config(
                "imu_rate below camera_rate leaves frames without inertial samples".into(),
            ));
        }
        if self.init_offset.len() > field_ekf_core::drone::STATE_DIM {
            return Err(HarnessError::Config(format!(
                "init_offset has {} entries, the state has {}",
                self.init_offset.len(),
                field_ekf_core::drone::STATE_DIM
            )));
        }
        Ok(())
    }

    /// All keys in a fixed order, suitable for writing back to disk.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let offsets =
            self.init_offset.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
        let _ = write!(
            s,
            "sigma = {}\nnoise = {}\ncorr_len = {}\nnoise_lags = {}\n\
             sigma_a = {}\ng_a = {}\nimu_rate = {}\ncamera_rate = {}\n\
             blur = {}\nnormalize = {}\nequalize = {}\nmatch = {}\n\
             p0_scale = {}\ninit_offset = {}\nwarmup = {}\ndeterministic = {}\n\
             seed = {}\ndivergence_factor = {}\ndead_reckoning = {}\n\
             sweep_start = {}\nsweep_points = {}\nsweep_cap = {}\n\
             pattern = {}\naltitude = {}\nspeed = {}\nduration = {}\n\
             map_extent = {}\nmap_pitch = {}\nmap_bumps = {}\n\
             rows = {}\ncols = {}\nfocal_length = {}\nsensor_width = {}\n\
             image_lo = {}\nimage_hi = {}\n",
            self.sigma,
            self.noise,
            self.corr_len,
            self.noise_lags,
            self.sigma_a,
            self.g_a,
            self.imu_rate,
            self.camera_rate,
            self.blur,
            self.normalize,
            self.equalize,
            self.match_histogram,
            self.p0_scale,
            offsets,
            self.warmup,
            self.deterministic,
            self.seed,
            self.divergence_factor,
            self.dead_reckoning,
            self.sweep_start,
            self.sweep_points,
            self.sweep_cap,
            self.pattern,
            self.altitude,
            self.speed,
            self.duration,
            self.map_extent,
            self.map_pitch,
            self.map_bumps,
            self.rows,
            self.cols,
            self.focal_length,
            self.sensor_width,
            self.image_lo,
            self.image_hi,
        );
        s
    }

    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        let intr = CameraIntrinsics {
            focal_length: self.focal_length,
            pixel_pitch: self.sensor_width / self.cols as f64,
            rows: self.rows,
            cols: self.cols,
            principal_point: [(self.rows as f64 - 1.0) / 2.0, (self.cols as f64 - 1.0) / 2.0],
        };
        intr.validate()?;
        Ok(intr)
    }

    /// Measurement-noise kernel the filter assumes (and the simulator
    /// samples from).
    pub fn kernel(&self) -> Result<StationaryKernel> {
        match self.noise.as_str() {
            "white" => Ok(StationaryKernel::white_scalar(self.sigma)?),
            "gaussian" => {
                let lags = self.noise_lags;
                Ok(StationaryKernel::Sampled(SampledKernel::gaussian(
                    self.sigma,
                    self.corr_len,
                    (lags, lags),
                    [1.0, 1.0],
                )?))
            }
            other => Err(HarnessError::Config(format!("unknown noise model {other:?}"))),
        }
    }

    pub fn preprocess(&self) -> PreprocessConfig {
        PreprocessConfig {
            blur_sigma: (self.blur > 0.0).then_some(self.blur),
            normalize: self.normalize,
            equalize: self.equalize,
        }
    }
}
