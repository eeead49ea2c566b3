//! Diagnostic checks of the integrability and invertibility conditions the
//! image-field update relies on, evaluated as discrete norms on the working
//! grid.
//!
//! The checks never fail the filter; they produce a report so a
//! configuration can be vetted before a long run. Finite grids make every
//! norm finite unless something is genuinely broken (NaN or infinite
//! entries), so the interesting outcomes are the warnings: a noise spectrum
//! that loses rank on part of the frequency grid is usable only through the
//! regularization floor, which the report quantifies.

use num_complex::Complex64;

use crate::fft::Fft2;
use crate::field::JacobianField;
use crate::filter::{gain_basis_spectral, gain_basis_white, ReductionMode};
use crate::noise::{invert_spectrum, spectrum_of, Spectrum, StationaryKernel};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckStatus {
    Pass,
    /// Usable, but only through regularization or with degraded accuracy.
    Warn,
    Fail,
}

impl CheckStatus {
    fn label(self) -> &'static str {
        match self {
            CheckStatus::Pass => "pass",
            CheckStatus::Warn => "warn",
            CheckStatus::Fail => "FAIL",
        }
    }
}

#[derive(Debug, Clone)]
pub struct AssumptionCheck {
    pub name: &'static str,
    pub status: CheckStatus,
    /// Computed norms or eigenvalues backing the verdict.
    pub value: String,
}

#[derive(Debug, Clone)]
pub struct AssumptionReport {
    pub checks: Vec<AssumptionCheck>,
}

impl AssumptionReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.status == CheckStatus::Pass)
    }

    pub fn has_failures(&self) -> bool {
        self.checks.iter().any(|c| c.status == CheckStatus::Fail)
    }

    pub fn warnings(&self) -> usize {
        self.checks.iter().filter(|c| c.status == CheckStatus::Warn).count()
    }

    pub fn render(&self) -> String {
        let width = self.checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
        let mut out = String::new();
        for c in &self.checks {
            out.push_str(&format!("{:width$}  {:4}  {}\n", c.name, c.status.label(), c.value));
        }
        out
    }
}

fn finite_or_failing_pixel(data: &[f64], block_len: usize) -> Option<(usize, f64)> {
    data.iter()
        .enumerate()
        .find(|(_, v)| !v.is_finite())
        .map(|(i, v)| (i / block_len, *v))
}

/// Runs the five suitability checks for a measurement configuration: the
/// Jacobian field must be bounded and summable, the noise kernel summable,
/// the resulting gain field summable, the noise spectrum invertible on the
/// sampled frequency grid, and the frequency-domain gain product
/// transformable. Purely diagnostic; construction errors surface as failed
/// checks, not as errors.
pub fn validate_assumptions(g: &JacobianField, kernel: &StationaryKernel) -> AssumptionReport {
    let grid = g.grid();
    let area = grid.cell_area();
    let mut checks = Vec::with_capacity(5);

    // Jacobian boundedness and summability.
    let jac_check = match finite_or_failing_pixel(g.data(), g.block_len()) {
        Some((pixel, v)) => {
            let (r, c) = grid.row_col(pixel);
            AssumptionCheck {
                name: "jacobian bounded",
                status: CheckStatus::Fail,
                value: format!("non-finite entry {v} at pixel {pixel} ({r}, {c})"),
            }
        }
        None => {
            let l1: f64 = g.data().iter().map(|v| v.abs()).sum::<f64>() * area;
            let linf = g.data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
            AssumptionCheck {
                name: "jacobian bounded",
                status: CheckStatus::Pass,
                value: format!("L1 = {l1:.3e}, Linf = {linf:.3e}"),
            }
        }
    };
    checks.push(jac_check);

    // Kernel summability.
    let kernel_check = match kernel {
        StationaryKernel::IdealWhite(sigma) => {
            let mass = sigma.abs().max();
            if mass.is_finite() {
                AssumptionCheck {
                    name: "kernel summable",
                    status: CheckStatus::Pass,
                    value: format!("white, point mass = {mass:.3e}"),
                }
            } else {
                AssumptionCheck {
                    name: "kernel summable",
                    status: CheckStatus::Fail,
                    value: "non-finite covariance".into(),
                }
            }
        }
        StationaryKernel::Sampled(k) => {
            let (l1, linf) = (k.l1_norm(), k.max_abs());
            if l1.is_finite() && linf.is_finite() {
                AssumptionCheck {
                    name: "kernel summable",
                    status: CheckStatus::Pass,
                    value: format!("L1 = {l1:.3e}, Linf = {linf:.3e}"),
                }
            } else {
                AssumptionCheck {
                    name: "kernel summable",
                    status: CheckStatus::Fail,
                    value: format!("L1 = {l1:.3e}, Linf = {linf:.3e}"),
                }
            }
        }
    };
    checks.push(kernel_check);

    // Spectrum and its inverse, shared by the remaining checks.
    let inverse = match spectrum_of(kernel, grid).and_then(|s| {
        let inv = invert_spectrum(&s)?;
        Ok((s, inv))
    }) {
        Ok((spectrum, inverse)) => {
            let fraction = inverse.regularized_fraction();
            let status = if fraction > 0.0 { CheckStatus::Warn } else { CheckStatus::Pass };
            checks.push(AssumptionCheck {
                name: "spectrum invertible",
                status,
                value: format!(
                    "min eigenvalue = {:.3e}, regularized bins = {:.2}%",
                    spectrum.min_eigenvalue(),
                    100.0 * fraction
                ),
            });
            Some(inverse)
        }
        Err(e) => {
            checks.push(AssumptionCheck {
                name: "spectrum invertible",
                status: CheckStatus::Fail,
                value: format!("spectrum unavailable: {e}"),
            });
            None
        }
    };

    // Gain field summability, on the path the filter itself would take.
    let gain = match (kernel, &inverse) {
        (StationaryKernel::IdealWhite(sigma), _) => {
            gain_basis_white(g, sigma, ReductionMode::Deterministic)
        }
        (StationaryKernel::Sampled(_), Some(inv)) => {
            gain_basis_spectral(g, inv, &Fft2::new(grid.rows(), grid.cols()))
        }
        (StationaryKernel::Sampled(_), None) => Err(crate::error::FilterError::SingularNoise),
    };
    let gain_check = match &gain {
        Ok(phi) => match finite_or_failing_pixel(phi.data(), phi.block_len()) {
            Some((pixel, v)) => AssumptionCheck {
                name: "gain summable",
                status: CheckStatus::Fail,
                value: format!("non-finite entry {v} at pixel {pixel}"),
            },
            None => {
                let l1: f64 = phi.data().iter().map(|v| v.abs()).sum::<f64>() * area;
                let l2 =
                    (phi.data().iter().map(|v| v * v).sum::<f64>() * area).sqrt();
                AssumptionCheck {
                    name: "gain summable",
                    status: CheckStatus::Pass,
                    value: format!("L1 = {l1:.3e}, L2 = {l2:.3e} (unit state covariance)"),
                }
            }
        },
        Err(e) => AssumptionCheck {
            name: "gain summable",
            status: CheckStatus::Fail,
            value: format!("gain unavailable: {e}"),
        },
    };
    checks.push(gain_check);

    // Frequency-domain product norms.
    let freq_check = match &inverse {
        Some(inv) => frequency_product_norms(g, inv),
        None => AssumptionCheck {
            name: "gain spectrum transformable",
            status: CheckStatus::Fail,
            value: "spectrum unavailable".into(),
        },
    };
    checks.push(freq_check);

    AssumptionReport { checks }
}

/// L1/L2 norms of the frequency-domain product (transformed Jacobian times
/// inverse spectrum) under the frequency-cell quadrature.
fn frequency_product_norms(g: &JacobianField, inverse: &Spectrum) -> AssumptionCheck {
    let grid = g.grid();
    let (m, n) = (g.channels(), g.state_dim());
    let bins = grid.len();
    let fft = Fft2::new(grid.rows(), grid.cols());
    let area = grid.cell_area();
    let volume = grid.freq_cell_volume();

    // Transform each Jacobian entry field.
    let mut transformed = vec![Complex64::default(); m * n * bins];
    let mut scratch = vec![Complex64::default(); bins];
    for a in 0..m {
        for j in 0..n {
            for i in 0..bins {
                scratch[i] = Complex64::new(g.block(i)[a * n + j] * area, 0.0);
            }
            fft.forward(&mut scratch);
            let dst = (a * n + j) * bins;
            transformed[dst..dst + bins].copy_from_slice(&scratch);
        }
    }

    let mut l1 = 0.0;
    let mut l2 = 0.0;
    for f in 0..bins {
        let r_inv = inverse.block(f);
        for j in 0..n {
            for b in 0..m {
                let mut acc = Complex64::default();
                for a in 0..m {
                    acc += transformed[(a * n + j) * bins + f] * r_inv[a * m + b];
                }
                let mag = acc.norm();
                l1 += mag;
                l2 += mag * mag;
            }
        }
    }
    l1 *= volume;
    l2 = (l2 * volume).sqrt();
    if l1.is_finite() && l2.is_finite() {
        AssumptionCheck {
            name: "gain spectrum transformable",
            status: CheckStatus::Pass,
            value: format!("L1 = {l1:.3e}, L2 = {l2:.3e}"),
        }
    } else {
        AssumptionCheck {
            name: "gain spectrum transformable",
            status: CheckStatus::Fail,
            value: format!("L1 = {l1:.3e}, L2 = {l2:.3e}"),
        }
    }
}
