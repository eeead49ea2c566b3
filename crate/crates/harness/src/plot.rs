//! Self-contained SVG reports, rendered with fixed formatting so the same
//! inputs always produce byte-identical files. Each report is written next
//! to a plain-text `.dat` companion carrying the plotted numbers.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use field_ekf_core::drone::{DroneState, THETA};

use crate::error::{HarnessError, Result};
use crate::runner::EstimateRow;
use crate::sweep::SweepEntry;

const WIDTH: f64 = 800.0;

struct Frame {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
    lo: [f64; 2],
    hi: [f64; 2],
}

impl Frame {
    /// Plot frame mapping data range `lo..hi` onto the pixel box, y up.
    fn new(x0: f64, y0: f64, x1: f64, y1: f64, lo: [f64; 2], hi: [f64; 2]) -> Self {
        let pad = |lo: f64, hi: f64| {
            if hi > lo {
                (lo, hi)
            } else {
                (lo - 0.5, lo + 0.5)
            }
        };
        let (lx, hx) = pad(lo[0], hi[0]);
        let (ly, hy) = pad(lo[1], hi[1]);
        Self { x0, y0, x1, y1, lo: [lx, ly], hi: [hx, hy] }
    }

    fn px(&self, x: f64) -> f64 {
        self.x0 + (x - self.lo[0]) / (self.hi[0] - self.lo[0]) * (self.x1 - self.x0)
    }

    fn py(&self, y: f64) -> f64 {
        self.y1 - (y - self.lo[1]) / (self.hi[1] - self.lo[1]) * (self.y1 - self.y0)
    }

    fn polyline(&self, pts: impl Iterator<Item = (f64, f64)>, class: &str, color: &str) -> String {
        let mut coords = String::new();
        for (x, y) in pts {
            let _ = write!(coords, "{:.2},{:.2} ", self.px(x), self.py(y));
        }
        format!(
            "<polyline class=\"{class}\" fill=\"none\" stroke=\"{color}\" \
             stroke-width=\"1.5\" points=\"{}\"/>\n",
            coords.trim_end()
        )
    }

    fn axes(&self, title: &str, unit_x: &str, unit_y: &str) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" \
             fill=\"none\" stroke=\"#999\"/>\n",
            self.x0,
            self.y0,
            self.x1 - self.x0,
            self.y1 - self.y0
        );
        let _ = write!(
            s,
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"13\" fill=\"#333\">{title}</text>\n",
            self.x0,
            self.y0 - 8.0
        );
        let _ = write!(
            s,
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"10\" fill=\"#666\">{} .. {} {unit_x}</text>\n",
            self.x0,
            self.y1 + 14.0,
            fmt_value(self.lo[0]),
            fmt_value(self.hi[0])
        );
        let _ = write!(
            s,
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"10\" fill=\"#666\" \
             transform=\"rotate(-90 {:.2} {:.2})\">{} .. {} {unit_y}</text>\n",
            self.x0 - 8.0,
            self.y1,
            self.x0 - 8.0,
            self.y1,
            fmt_value(self.lo[1]),
            fmt_value(self.hi[1])
        );
        s
    }
}

fn fmt_value(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 0.01 && v.abs() < 10000.0 {
        format!("{v:.2}")
    } else {
        format!("{v:.3e}")
    }
}

fn svg_document(height: f64, body: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {WIDTH:.0} {height:.0}\" \
         font-family=\"sans-serif\">\n<rect width=\"{WIDTH:.0}\" height=\"{height:.0}\" \
         fill=\"#fff\"/>\n{body}</svg>\n"
    )
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo.is_finite() {
        (lo, hi)
    } else {
        (0.0, 1.0)
    }
}

/// Splits a wrapped angle series into continuous segments so jumps across
/// the +-pi seam do not draw as vertical lines.
fn unwrap_segments(t: &[f64], theta: &[f64]) -> Vec<Vec<(f64, f64)>> {
    let mut segments = Vec::new();
    let mut current: Vec<(f64, f64)> = Vec::new();
    for (i, (&ti, &th)) in t.iter().zip(theta).enumerate() {
        if i > 0 && (th - theta[i - 1]).abs() > std::f64::consts::PI {
            segments.push(std::mem::take(&mut current));
        }
        current.push((ti, th));
    }
    if !current.is_empty() {
        segments.push(current);
    }
    segments
}

/// Single-run report: east-north track (truth under estimate when truth is
/// available), altitude, and yaw over time.
pub fn run_report_svg(estimates: &[EstimateRow], truth: Option<&[DroneState]>) -> String {
    if estimates.is_empty() {
        return svg_document(
            120.0,
            "<text x=\"24\" y=\"60\" font-size=\"14\" fill=\"#333\">no estimates to plot</text>\n",
        );
    }
    let mut body = String::new();

    let truth_xy: Vec<(f64, f64)> =
        truth.map(|t| t.iter().map(|s| (s.rho.x, s.rho.y)).collect()).unwrap_or_default();
    let est_xy: Vec<(f64, f64)> = estimates.iter().map(|r| (r.x[0], r.x[1])).collect();
    let (ex_lo, ex_hi) = bounds(est_xy.iter().map(|p| p.0).chain(truth_xy.iter().map(|p| p.0)));
    let (ey_lo, ey_hi) = bounds(est_xy.iter().map(|p| p.1).chain(truth_xy.iter().map(|p| p.1)));
    let track = Frame::new(60.0, 40.0, 740.0, 340.0, [ex_lo, ey_lo], [ex_hi, ey_hi]);
    body.push_str(&track.axes("east-north track", "m east", "m north"));
    if !truth_xy.is_empty() {
        body.push_str(&track.polyline(truth_xy.iter().copied(), "traj", "#222222"));
    }
    body.push_str(&track.polyline(est_xy.iter().copied(), "traj", "#c1272d"));

    let t: Vec<f64> = estimates.iter().map(|r| r.t).collect();
    let alt: Vec<f64> = estimates.iter().map(|r| r.x[2]).collect();
    let (t_lo, t_hi) = bounds(t.iter().copied());
    let (a_lo, a_hi) = bounds(alt.iter().copied().chain(
        truth.into_iter().flatten().map(|s| s.rho.z),
    ));
    let alt_frame = Frame::new(60.0, 400.0, 740.0, 580.0, [t_lo, a_lo], [t_hi, a_hi]);
    body.push_str(&alt_frame.axes("altitude", "s", "m"));
    if let Some(states) = truth {
        let pts = t.iter().copied().zip(states.iter().map(|s| s.rho.z));
        body.push_str(&alt_frame.polyline(pts.take(estimates.len()), "alt", "#222222"));
    }
    body.push_str(&alt_frame.polyline(t.iter().copied().zip(alt.iter().copied()), "alt", "#c1272d"));

    let yaw: Vec<f64> = estimates.iter().map(|r| r.x[THETA]).collect();
    let (y_lo, y_hi) = bounds(yaw.iter().copied().chain(
        truth.into_iter().flatten().map(|s| s.theta),
    ));
    let yaw_frame = Frame::new(60.0, 640.0, 740.0, 820.0, [t_lo, y_lo], [t_hi, y_hi]);
    body.push_str(&yaw_frame.axes("yaw", "s", "rad"));
    if let Some(states) = truth {
        let truth_yaw: Vec<f64> = states.iter().take(estimates.len()).map(|s| s.theta).collect();
        for seg in unwrap_segments(&t, &truth_yaw) {
            body.push_str(&yaw_frame.polyline(seg.into_iter(), "yaw", "#222222"));
        }
    }
    for seg in unwrap_segments(&t, &yaw) {
        body.push_str(&yaw_frame.polyline(seg.into_iter(), "yaw", "#c1272d"));
    }

    svg_document(860.0, &body)
}

/// Sweep report: squared position error against the density ladder,
/// log10 on the y axis, one tick per rung. Flagged rungs are drawn as
/// markers at the top of the frame instead of joining the curve.
pub fn sweep_report_svg(entries: &[SweepEntry]) -> String {
    if entries.is_empty() {
        return svg_document(
            120.0,
            "<text x=\"24\" y=\"60\" font-size=\"14\" fill=\"#333\">no sweep points</text>\n",
        );
    }
    let mut body = String::new();
    let good: Vec<(usize, f64)> = entries
        .iter()
        .enumerate()
        .filter(|(_, e)| !e.flagged && e.e_rho > 0.0)
        .map(|(j, e)| (j, e.e_rho.log10()))
        .collect();
    let (lo, hi) = bounds(good.iter().map(|&(_, v)| v));
    let frame = Frame::new(
        80.0,
        40.0,
        740.0,
        340.0,
        [0.0, lo],
        [(entries.len() - 1).max(1) as f64, hi],
    );
    body.push_str(&frame.axes("position error vs accelerometer density", "rung", "log10 m^2"));

    for (j, e) in entries.iter().enumerate() {
        let x = frame.px(j as f64);
        let _ = write!(
            body,
            "<line class=\"xtick\" x1=\"{x:.2}\" y1=\"{:.2}\" x2=\"{x:.2}\" y2=\"{:.2}\" \
             stroke=\"#ccc\"/>\n",
            frame.y0, frame.y1
        );
        let _ = write!(
            body,
            "<text x=\"{x:.2}\" y=\"{:.2}\" font-size=\"9\" fill=\"#666\" \
             text-anchor=\"middle\">{}</text>\n",
            frame.y1 + 26.0,
            fmt_value(e.sigma_a)
        );
    }

    body.push_str(&frame.polyline(good.iter().map(|&(j, v)| (j as f64, v)), "sweep", "#c1272d"));
    for &(j, v) in &good {
        let _ = write!(
            body,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"#c1272d\"/>\n",
            frame.px(j as f64),
            frame.py(v)
        );
    }
    for (j, e) in entries.iter().enumerate() {
        if e.flagged {
            let _ = write!(
                body,
                "<circle class=\"flagged\" cx=\"{:.2}\" cy=\"{:.2}\" r=\"4\" fill=\"none\" \
                 stroke=\"#c1272d\"/>\n",
                frame.px(j as f64),
                frame.y0 + 8.0
            );
        }
    }

    svg_document(400.0, &body)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)
        .map_err(|source| HarnessError::Output { path: path.display().to_string(), source })
}

/// `report.svg` plus `run.dat` (t, estimate position and yaw, and truth
/// when available).
pub fn write_run_report(dir: &Path, estimates: &[EstimateRow], truth: Option<&[DroneState]>) -> Result<()> {
    let truth = truth.filter(|s| !s.is_empty());
    write_text(&dir.join("report.svg"), &run_report_svg(estimates, truth))?;
    let mut dat = String::from(match truth {
        Some(_) => "# t est_x est_y est_z est_yaw truth_x truth_y truth_z truth_yaw\n",
        None => "# t est_x est_y est_z est_yaw\n",
    });
    for (k, r) in estimates.iter().enumerate() {
        let _ = write!(dat, "{} {} {} {} {}", r.t, r.x[0], r.x[1], r.x[2], r.x[THETA]);
        if let Some(states) = truth {
            let s = &states[k.min(states.len() - 1)];
            let _ = write!(dat, " {} {} {} {}", s.rho.x, s.rho.y, s.rho.z, s.theta);
        }
        dat.push('\n');
    }
    write_text(&dir.join("run.dat"), &dat)
}

/// `report.svg` plus `sweep.dat` (density, errors, flag).
pub fn write_sweep_report(dir: &Path, entries: &[SweepEntry]) -> Result<()> {
    write_text(&dir.join("report.svg"), &sweep_report_svg(entries))?;
    let mut dat = String::from("# sigma_a e_rho_m2 e_theta_rad2 flagged\n");
    for e in entries {
        let _ = writeln!(dat, "{} {} {} {}", e.sigma_a, e.e_rho, e.e_theta, u8::from(e.flagged));
    }
    write_text(&dir.join("sweep.dat"), &dat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DVector, Vector3};

    fn rows(n: usize) -> Vec<EstimateRow> {
        (0..n)
            .map(|k| {
                let mut x = DVector::zeros(11);
                x[0] = k as f64;
                x[1] = (k as f64 * 0.7).sin() * 3.0;
                x[2] = 40.0;
                x[THETA] = field_ekf_core::drone::wrap_angle(k as f64 * 0.9);
                EstimateRow { t: k as f64 / 15.0, x, tr_p: 1.0 / (k + 1) as f64 }
            })
            .collect()
    }

    fn states(n: usize) -> Vec<DroneState> {
        (0..n)
            .map(|k| DroneState {
                rho: Vector3::new(k as f64, (k as f64 * 0.7).sin() * 3.0 + 0.1, 40.0),
                nu: Vector3::zeros(),
                acc: Vector3::zeros(),
                theta: field_ekf_core::drone::wrap_angle(k as f64 * 0.9),
                rate: 0.0,
            })
            .collect()
    }

    #[test]
    fn run_report_draws_truth_and_estimate_tracks() {
        let svg = run_report_svg(&rows(40), Some(&states(40)));
        assert_eq!(svg.matches("class=\"traj\"").count(), 2);
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        // Wrapped yaw must split into several segments, not one polyline.
        assert!(svg.matches("class=\"yaw\"").count() > 2);
    }

    #[test]
    fn run_report_without_truth_has_one_track() {
        let svg = run_report_svg(&rows(10), None);
        assert_eq!(svg.matches("class=\"traj\"").count(), 1);
    }

    #[test]
    fn reports_are_deterministic() {
        let (e, s) = (rows(25), states(25));
        assert_eq!(run_report_svg(&e, Some(&s)), run_report_svg(&e, Some(&s)));
    }

    #[test]
    fn sweep_report_ticks_every_rung_and_skips_flagged() {
        let entries: Vec<SweepEntry> = (0..14)
            .map(|j| SweepEntry {
                sigma_a: 1e-3 * 2f64.powi(j),
                e_rho: 0.01 * 1.5f64.powi(j),
                e_theta: 1e-4,
                diverged: (j == 13).then_some(42),
                flagged: j == 13,
            })
            .collect();
        let svg = sweep_report_svg(&entries);
        assert_eq!(svg.matches("class=\"xtick\"").count(), 14);
        assert_eq!(svg.matches("class=\"flagged\"").count(), 1);
    }

    #[test]
    fn empty_inputs_render_placeholders() {
        assert!(run_report_svg(&[], None).contains("no estimates"));
        assert!(sweep_report_svg(&[]).contains("no sweep points"));
    }

    #[test]
    fn report_files_and_companions_are_written() {
        let dir = tempfile::tempdir().unwrap();
        write_run_report(dir.path(), &rows(12), Some(&states(12))).unwrap();
        let dat = std::fs::read_to_string(dir.path().join("run.dat")).unwrap();
        assert_eq!(dat.lines().count(), 13);
        assert!(dir.path().join("report.svg").is_file());

        let entries = vec![SweepEntry {
            sigma_a: 1e-3,
            e_rho: 0.5,
            e_theta: 1e-3,
            diverged: None,
            flagged: false,
        }];
        write_sweep_report(dir.path(), &entries).unwrap();
        let dat = std::fs::read_to_string(dir.path().join("sweep.dat")).unwrap();
        assert!(dat.lines().nth(1).unwrap().starts_with("0.001 0.5"));
    }
}
