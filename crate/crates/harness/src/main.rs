use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use field_ekf_core::assumptions::validate_assumptions;
use field_ekf_core::camera::measurement_jacobian;
use field_ekf_core::drone::THETA;
use field_ekf_harness::runner::{
    read_estimates_csv, write_estimates_csv, write_metrics_csv, RunInput,
};
use field_ekf_harness::sweep::{read_sweep_csv, run_sweep, write_sweep_csv};
use field_ekf_harness::{dataset, plot, HarnessError, MetricsReport, Result, RunConfig};
use nalgebra::Vector3;

#[derive(Parser)]
#[command(
    name = "field-ekf",
    version,
    about = "Batch harness for the image-field Kalman filter",
    after_help = "Trailing KEY=VALUE arguments override configuration values \
                  (an optional leading -- is accepted). They apply on top of \
                  the dataset's recorded config and any --config file."
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize a dataset directory: map, frames, inertial stream, truth.
    Simulate {
        /// Output dataset directory, created if missing.
        #[arg(long)]
        out: PathBuf,
        /// Config file of `key = value` lines.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Run the filter over a dataset; writes estimates.csv, metrics.csv,
    /// report.svg. Exits 2 if the run diverges.
    Run {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Run the accelerometer-density ladder; writes sweep.csv and report.svg.
    Sweep {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Score a saved estimates.csv against a dataset's truth by timestamp.
    Eval {
        #[arg(long)]
        estimates: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Directory for metrics.csv; metrics print to stdout either way.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Re-render report.svg from saved outputs.
    Plot {
        #[arg(long)]
        out: PathBuf,
        /// Estimates file for a run report.
        #[arg(long)]
        estimates: Option<PathBuf>,
        /// Dataset directory supplying the truth overlay.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Sweep file for a sweep report.
        #[arg(long)]
        sweep: Option<PathBuf>,
    },
    /// Check the measurement-model assumptions for a dataset configuration
    /// and write assumptions.txt. Always exits 0 once the report is written.
    Validate {
        #[arg(long)]
        dataset: PathBuf,
        /// Report directory; defaults to the dataset directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 3,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path)
        .map_err(|source| HarnessError::Output { path: path.display().to_string(), source })
}

fn ingest_verbose(
    dir: &Path,
    config: Option<&Path>,
    overrides: &[String],
) -> Result<dataset::Dataset> {
    let (ds, warnings) = dataset::ingest(dir, config, overrides)?;
    for w in warnings {
        eprintln!("warning: {w}");
    }
    Ok(ds)
}

fn dispatch(cli: Cli) -> Result<u8> {
    match cli.cmd {
        Cmd::Simulate { out, config, overrides } => {
            let cfg = RunConfig::layered(None, config.as_deref(), &overrides)?;
            let sim = dataset::simulate(&cfg)?;
            let warnings = dataset::write_dataset(&sim, &out)?;
            for w in warnings {
                eprintln!("warning: {w}");
            }
            println!("wrote {} frames to {}", sim.trajectory.len(), out.display());
            Ok(0)
        }
        Cmd::Run { dataset: dir, out, config, overrides } => {
            let ds = ingest_verbose(&dir, config.as_deref(), &overrides)?;
            ensure_dir(&out)?;
            let outcome =
                field_ekf_harness::run_filter(&RunInput::from_dataset(&ds), &ds.cfg)?;
            write_estimates_csv(&out.join("estimates.csv"), &outcome.estimates)?;
            write_metrics_csv(&out.join("metrics.csv"), &outcome.metrics)?;
            plot::write_run_report(&out, &outcome.estimates, Some(&ds.truth))?;
            print_metrics(&outcome.metrics);
            if let Some(k) = outcome.metrics.diverged {
                eprintln!("run diverged at step {k}");
                return Ok(2);
            }
            Ok(0)
        }
        Cmd::Sweep { dataset: dir, out, config, overrides } => {
            let ds = ingest_verbose(&dir, config.as_deref(), &overrides)?;
            ensure_dir(&out)?;
            let entries = run_sweep(&RunInput::from_dataset(&ds), &ds.cfg)?;
            write_sweep_csv(&out.join("sweep.csv"), &entries)?;
            plot::write_sweep_report(&out, &entries)?;
            let flagged = entries.iter().filter(|e| e.flagged).count();
            println!("{} sweep points ({flagged} flagged) -> {}", entries.len(), out.display());
            Ok(0)
        }
        Cmd::Eval { estimates, dataset: dir, out, config, overrides } => {
            let ds = ingest_verbose(&dir, config.as_deref(), &overrides)?;
            let rows = read_estimates_csv(&estimates)?;
            let trimmed = &rows[ds.cfg.warmup.min(rows.len())..];
            let est_t: Vec<f64> = trimmed.iter().map(|r| r.t).collect();
            let pairs =
                field_ekf_harness::metrics::align(&est_t, &ds.times, ds.cfg.dt() / 2.0)?;
            let est_rho: Vec<Vector3<f64>> =
                trimmed.iter().map(|r| Vector3::new(r.x[0], r.x[1], r.x[2])).collect();
            let truth_rho: Vec<Vector3<f64>> =
                pairs.iter().map(|&(_, j)| ds.truth[j].rho).collect();
            let est_yaw: Vec<f64> = trimmed.iter().map(|r| r.x[THETA]).collect();
            let truth_yaw: Vec<f64> = pairs.iter().map(|&(_, j)| ds.truth[j].theta).collect();
            let metrics = MetricsReport {
                e_rho: field_ekf_harness::metrics::mse_position(&est_rho, &truth_rho)?,
                e_theta: field_ekf_harness::metrics::mse_yaw(&est_yaw, &truth_yaw)?,
                ..MetricsReport::default()
            };
            print_metrics(&metrics);
            if let Some(out) = out {
                ensure_dir(&out)?;
                write_metrics_csv(&out.join("metrics.csv"), &metrics)?;
            }
            Ok(0)
        }
        Cmd::Plot { out, estimates, dataset: dir, sweep } => {
            ensure_dir(&out)?;
            match (estimates, sweep) {
                (Some(_), Some(_)) => Err(HarnessError::Config(
                    "pass either --estimates or --sweep, not both".into(),
                )),
                (None, None) => Err(HarnessError::Config(
                    "nothing to plot: pass --estimates or --sweep".into(),
                )),
                (Some(est), None) => {
                    let rows = read_estimates_csv(&est)?;
                    let truth = match &dir {
                        Some(d) => Some(dataset::load_truth_csv(&d.join("truth.csv"))?.1),
                        None => None,
                    };
                    plot::write_run_report(&out, &rows, truth.as_deref())?;
                    println!("report.svg and run.dat -> {}", out.display());
                    Ok(0)
                }
                (None, Some(sw)) => {
                    let entries = read_sweep_csv(&sw)?;
                    plot::write_sweep_report(&out, &entries)?;
                    println!("report.svg and sweep.dat -> {}", out.display());
                    Ok(0)
                }
            }
        }
        Cmd::Validate { dataset: dir, out, config, overrides } => {
            let ds = ingest_verbose(&dir, config.as_deref(), &overrides)?;
            if ds.truth.is_empty() {
                return Err(HarnessError::Dataset(
                    "dataset holds no truth rows to linearize around".into(),
                ));
            }
            let grid = ds.intrinsics.grid();
            let jac = measurement_jacobian(&ds.truth[0], &grid, &ds.intrinsics, &ds.map)?;
            let report = validate_assumptions(&jac, &ds.cfg.kernel()?);
            let verdict = if report.has_failures() {
                "fail"
            } else if report.warnings() > 0 {
                "warn"
            } else {
                "pass"
            };
            let text = format!("{}result: {verdict}\n", report.render());
            print!("{text}");
            let out_dir = out.unwrap_or(dir);
            ensure_dir(&out_dir)?;
            let path = out_dir.join("assumptions.txt");
            fs::write(&path, &text).map_err(|source| HarnessError::Output {
                path: path.display().to_string(),
                source,
            })?;
            Ok(0)
        }
    }
}

fn print_metrics(m: &MetricsReport) {
    print!("E_rho = {:.6e} m^2, E_theta = {:.6e} rad^2", m.e_rho, m.e_theta);
    if m.step_ms.is_empty() {
        println!();
    } else {
        println!(
            " over {} steps; step time median {:.2} ms, max {:.2} ms",
            m.step_ms.len(),
            m.median_step_ms(),
            m.max_step_ms()
        );
    }
}
