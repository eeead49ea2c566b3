use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{FilterError, Result};
use crate::fft::Fft2;
use crate::field::ImageField;
use crate::grid::FieldGrid;

/// Matrix-valued stationary covariance kernel sampled on a lag grid.
///
/// `block(dr, dc)` is the `channels x channels` covariance between a pixel
/// and its neighbour `(dr, dc)` lags away, sampled at the same pitch as the
/// measurement grid. Lags run over `-half_lags..=half_lags` per axis and the
/// kernel is implicitly zero beyond that support.
#[derive(Debug, Clone)]
pub struct SampledKernel {
    half_lags: (usize, usize),
    pitch: [f64; 2],
    channels: usize,
    data: Vec<f64>,
}

impl SampledKernel {
    /// Validates shape, the stationary symmetry `R(tau) = R(-tau)^T`, and
    /// positive semidefiniteness of the zero-lag block.
    pub fn new(
        half_lags: (usize, usize),
        pitch: [f64; 2],
        channels: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        let (lr, lc) = half_lags;
        let lag_count = (2 * lr + 1) * (2 * lc + 1);
        if channels == 0 {
            return Err(FilterError::InvalidKernel("channel count must be positive".into()));
        }
        if data.len() != lag_count * channels * channels {
            return Err(FilterError::InvalidKernel(format!(
                "kernel data length {} does not match {} lags x {}x{} blocks",
                data.len(),
                lag_count,
                channels,
                channels
            )));
        }
        if !(pitch[0] > 0.0 && pitch[1] > 0.0 && pitch[0].is_finite() && pitch[1].is_finite()) {
            return Err(FilterError::InvalidKernel("pitch must be positive and finite".into()));
        }
        let kernel = Self { half_lags, pitch, channels, data };

        let mut scale = 0.0f64;
        for v in &kernel.data {
            if !v.is_finite() {
                return Err(FilterError::InvalidKernel("kernel contains non-finite values".into()));
            }
            scale = scale.max(v.abs());
        }
        let tol = 1e-12 * scale.max(1e-300);
        for dr in -(lr as isize)..=lr as isize {
            for dc in -(lc as isize)..=lc as isize {
                let fwd = kernel.block(dr, dc);
                let rev = kernel.block(-dr, -dc);
                for a in 0..channels {
                    for b in 0..channels {
                        let diff = (fwd[a * channels + b] - rev[b * channels + a]).abs();
                        if diff > tol {
                            return Err(FilterError::InvalidKernel(format!(
                                "R({dr},{dc})[{a},{b}] breaks R(tau) = R(-tau)^T by {diff:e}"
                            )));
                        }
                    }
                }
            }
        }

        let zero = DMatrix::from_row_slice(channels, channels, kernel.block(0, 0));
        let sym = (&zero + zero.transpose()) * 0.5;
        let min_eig = sym
            .symmetric_eigenvalues()
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        if min_eig < -1e-10 * scale.max(1.0) {
            return Err(FilterError::InvalidKernel(format!(
                "zero-lag block is not positive semidefinite (min eigenvalue {min_eig:e})"
            )));
        }

        Ok(kernel)
    }

    /// Scalar kernel built from a lag-domain covariance function.
    pub fn scalar_from_fn(
        half_lags: (usize, usize),
        pitch: [f64; 2],
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Self> {
        let (lr, lc) = half_lags;
        let mut data = Vec::with_capacity((2 * lr + 1) * (2 * lc + 1));
        for dr in -(lr as isize)..=lr as isize {
            for dc in -(lc as isize)..=lc as isize {
                data.push(f(dr as f64 * pitch[0], dc as f64 * pitch[1]));
            }
        }
        Self::new(half_lags, pitch, 1, data)
    }

    /// Isotropic squared-exponential kernel with the given zero-lag variance
    /// and correlation length (same units as `pitch`).
    pub fn gaussian(
        variance: f64,
        corr_len: f64,
        half_lags: (usize, usize),
        pitch: [f64; 2],
    ) -> Result<Self> {
        if variance <= 0.0 || corr_len <= 0.0 {
            return Err(FilterError::InvalidKernel(
                "gaussian kernel needs positive variance and correlation length".into(),
            ));
        }
        Self::scalar_from_fn(half_lags, pitch, |tr, tc| {
            variance * (-(tr * tr + tc * tc) / (2.0 * corr_len * corr_len)).exp()
        })
    }

    /// Discrete stand-in for ideal white noise: all mass at zero lag with the
    /// per-pixel covariance `sigma / cell_area`, so integrals against it
    /// reproduce the continuous white model on the same grid.
    pub fn discrete_white(sigma: &DMatrix<f64>, pitch: [f64; 2]) -> Result<Self> {
        let m = sigma.nrows();
        if sigma.ncols() != m {
            return Err(FilterError::InvalidKernel("noise covariance must be square".into()));
        }
        let area = pitch[0] * pitch[1];
        let data: Vec<f64> = sigma.transpose().as_slice().iter().map(|v| v / area).collect();
        Self::new((0, 0), pitch, m, data)
    }

    pub fn half_lags(&self) -> (usize, usize) {
        self.half_lags
    }

    pub fn pitch(&self) -> [f64; 2] {
        self.pitch
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Row-major `channels x channels` block at lag `(dr, dc)`.
    pub fn block(&self, dr: isize, dc: isize) -> &[f64] {
        let (lr, lc) = self.half_lags;
        debug_assert!(dr.unsigned_abs() <= lr && dc.unsigned_abs() <= lc);
        let idx = (dr + lr as isize) as usize * (2 * lc + 1) + (dc + lc as isize) as usize;
        let len = self.channels * self.channels;
        &self.data[idx * len..(idx + 1) * len]
    }

    /// Largest absolute entry, the natural scale for tolerances.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Sum of absolute entries weighted by the lag cell area.
    pub fn l1_norm(&self) -> f64 {
        let area = self.pitch[0] * self.pitch[1];
        self.data.iter().map(|v| v.abs()).sum::<f64>() * area
    }
}

/// Stationary measurement-noise model.
#[derive(Debug, Clone)]
pub enum StationaryKernel {
    /// Ideal white noise with spectral density `sigma` at every frequency.
    /// The filter handles this case in closed form, no transforms needed.
    IdealWhite(DMatrix<f64>),
    /// General correlated noise described by a sampled kernel.
    Sampled(SampledKernel),
}

impl StationaryKernel {
    pub fn white(sigma: DMatrix<f64>) -> Result<Self> {
        let m = sigma.nrows();
        if sigma.ncols() != m || m == 0 {
            return Err(FilterError::InvalidKernel("noise covariance must be square".into()));
        }
        if (&sigma - sigma.transpose()).abs().max() > 1e-12 * sigma.abs().max().max(1.0) {
            return Err(FilterError::InvalidKernel("noise covariance must be symmetric".into()));
        }
        if sigma.clone().cholesky().is_none() {
            return Err(FilterError::SingularNoise);
        }
        Ok(Self::IdealWhite(sigma))
    }

    pub fn white_scalar(variance: f64) -> Result<Self> {
        Self::white(DMatrix::from_element(1, 1, variance))
    }

    pub fn channels(&self) -> usize {
        match self {
            Self::IdealWhite(s) => s.nrows(),
            Self::Sampled(k) => k.channels(),
        }
    }

    pub fn is_white(&self) -> bool {
        matches!(self, Self::IdealWhite(_))
    }
}

/// Matrix-valued spectrum on the DFT grid of a [`FieldGrid`].
///
/// Bins are laid out exactly like FFT output (`kr * cols + kc`), each a
/// row-major Hermitian `channels x channels` block. Values follow the
/// physical transform convention: the DFT sum times the cell area, so a
/// white kernel maps to the flat spectrum `sigma` independent of grid
/// resolution.
#[derive(Debug, Clone)]
pub struct Spectrum {
    grid: FieldGrid,
    channels: usize,
    data: Vec<Complex64>,
    min_eigenvalue: f64,
    max_abs: f64,
    floor: f64,
    regularized_fraction: f64,
}

impl Spectrum {
    pub fn grid(&self) -> &FieldGrid {
        &self.grid
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn block(&self, bin: usize) -> &[Complex64] {
        let len = self.channels * self.channels;
        &self.data[bin * len..(bin + 1) * len]
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    /// Smallest eigenvalue seen across bins of the spectrum this value was
    /// derived from (the forward spectrum, for inverses).
    pub fn min_eigenvalue(&self) -> f64 {
        self.min_eigenvalue
    }

    pub fn max_abs(&self) -> f64 {
        self.max_abs
    }

    /// Regularization floor applied during inversion; zero for forward spectra.
    pub fn floor(&self) -> f64 {
        self.floor
    }

    /// Fraction of bins whose eigenvalues had to be clamped to the floor.
    pub fn regularized_fraction(&self) -> f64 {
        self.regularized_fraction
    }
}

/// Spectrum of a stationary kernel on the DFT grid of `grid`.
///
/// Sampled kernels are embedded circularly, which is exact while the support
/// fits in half the grid; larger supports alias and are rejected.
pub fn spectrum_of(kernel: &StationaryKernel, grid: &FieldGrid) -> Result<Spectrum> {
    let m = kernel.channels();
    let bins = grid.len();
    match kernel {
        StationaryKernel::IdealWhite(sigma) => {
            let mut block = vec![Complex64::default(); m * m];
            for r in 0..m {
                for c in 0..m {
                    block[r * m + c] = Complex64::new(sigma[(r, c)], 0.0);
                }
            }
            let mut data = Vec::with_capacity(bins * m * m);
            for _ in 0..bins {
                data.extend_from_slice(&block);
            }
            let min_eig = sigma
                .clone()
                .symmetric_eigenvalues()
                .iter()
                .copied()
                .fold(f64::INFINITY, f64::min);
            Ok(Spectrum {
                grid: grid.clone(),
                channels: m,
                data,
                min_eigenvalue: min_eig,
                max_abs: sigma.abs().max(),
                floor: 0.0,
                regularized_fraction: 0.0,
            })
        }
        StationaryKernel::Sampled(k) => {
            let (lr, lc) = k.half_lags();
            if 2 * lr >= grid.rows() || 2 * lc >= grid.cols() {
                return Err(FilterError::InvalidKernel(format!(
                    "kernel support {}x{} does not fit a {}x{} grid without aliasing",
                    2 * lr + 1,
                    2 * lc + 1,
                    grid.rows(),
                    grid.cols()
                )));
            }
            let gp = grid.pitch();
            let kp = k.pitch();
            for ax in 0..2 {
                if (gp[ax] - kp[ax]).abs() > 1e-9 * gp[ax] {
                    return Err(FilterError::InvalidKernel(format!(
                        "kernel pitch ({}, {}) does not match grid pitch ({}, {})",
                        kp[0], kp[1], gp[0], gp[1]
                    )));
                }
            }

            let (rows, cols) = (grid.rows(), grid.cols());
            let fft = Fft2::new(rows, cols);
            let area = grid.cell_area();
            let mut data = vec![Complex64::default(); bins * m * m];
            let mut buf = vec![Complex64::default(); bins];
            for a in 0..m {
                for b in 0..m {
                    buf.fill(Complex64::default());
                    for dr in -(lr as isize)..=lr as isize {
                        for dc in -(lc as isize)..=lc as isize {
                            let r = dr.rem_euclid(rows as isize) as usize;
                            let c = dc.rem_euclid(cols as isize) as usize;
                            buf[r * cols + c] = Complex64::new(k.block(dr, dc)[a * m + b], 0.0);
                        }
                    }
                    fft.forward(&mut buf);
                    for (bin, v) in buf.iter().enumerate() {
                        data[bin * m * m + a * m + b] = v * area;
                    }
                }
            }

            // Real symmetric kernels give Hermitian spectra analytically;
            // folding removes transform roundoff.
            let mut min_eig = f64::INFINITY;
            let mut max_abs = 0.0f64;
            for bin in 0..bins {
                let blk = &mut data[bin * m * m..(bin + 1) * m * m];
                hermitianize(blk, m);
                min_eig = min_eig.min(min_hermitian_eigenvalue(blk, m));
                for v in blk.iter() {
                    max_abs = max_abs.max(v.norm());
                }
            }

            Ok(Spectrum {
                grid: grid.clone(),
                channels: m,
                data,
                min_eigenvalue: min_eig,
                max_abs,
                floor: 0.0,
                regularized_fraction: 0.0,
            })
        }
    }
}

/// Pointwise inverse of a spectrum with eigenvalue clamping.
///
/// Eigenvalues below the floor `1e-8 * max_abs` are raised to it before
/// inversion; the returned spectrum records which fraction of bins needed
/// that. Callers that care (the assumption validator does) surface a warning
/// when the fraction is nonzero.
pub fn invert_spectrum(spectrum: &Spectrum) -> Result<Spectrum> {
    let m = spectrum.channels;
    let bins = spectrum.grid.len();
    if spectrum.max_abs <= 0.0 {
        return Err(FilterError::SingularNoise);
    }
    let floor = 1e-8 * spectrum.max_abs;
    let mut data = vec![Complex64::default(); spectrum.data.len()];
    let mut regularized = 0usize;

    if m == 1 {
        for bin in 0..bins {
            let lambda = spectrum.data[bin].re;
            let clamped = lambda.max(floor);
            if lambda < floor {
                regularized += 1;
            }
            data[bin] = Complex64::new(1.0 / clamped, 0.0);
        }
    } else {
        for bin in 0..bins {
            let blk = spectrum.block(bin);
            let h = DMatrix::from_fn(m, m, |r, c| blk[r * m + c]);
            let eig = nalgebra::SymmetricEigen::new(h);
            let mut touched = false;
            let inv_vals: Vec<f64> = eig
                .eigenvalues
                .iter()
                .map(|&l| {
                    if l < floor {
                        touched = true;
                    }
                    1.0 / l.max(floor)
                })
                .collect();
            if touched {
                regularized += 1;
            }
            let inv = &eig.eigenvectors
                * DMatrix::from_diagonal(&DVector::from_vec(inv_vals).map(|v| Complex64::new(v, 0.0)))
                * eig.eigenvectors.adjoint();
            let out = &mut data[bin * m * m..(bin + 1) * m * m];
            for r in 0..m {
                for c in 0..m {
                    out[r * m + c] = inv[(r, c)];
                }
            }
        }
    }

    let max_abs = data.iter().fold(0.0f64, |acc, v| acc.max(v.norm()));
    Ok(Spectrum {
        grid: spectrum.grid.clone(),
        channels: m,
        data,
        min_eigenvalue: spectrum.min_eigenvalue,
        max_abs,
        floor,
        regularized_fraction: regularized as f64 / bins as f64,
    })
}

fn hermitianize(block: &mut [Complex64], m: usize) {
    for r in 0..m {
        for c in r..m {
            let avg = (block[r * m + c] + block[c * m + r].conj()) * 0.5;
            block[r * m + c] = avg;
            block[c * m + r] = avg.conj();
        }
    }
}

fn min_hermitian_eigenvalue(block: &[Complex64], m: usize) -> f64 {
    if m == 1 {
        return block[0].re;
    }
    let h = DMatrix::from_fn(m, m, |r, c| block[r * m + c]);
    nalgebra::SymmetricEigen::new(h)
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Draws one field with the exact (circular) covariance of the kernel.
///
/// White noise is sampled directly per pixel with covariance
/// `sigma / cell_area`. Correlated noise is synthesized spectrally: white
/// noise is transformed, shaped by the matrix square root of the spectral
/// density, and transformed back, which realizes the kernel covariance
/// without approximation on the periodic domain.
pub fn sample_noise_field<R: Rng + ?Sized>(
    kernel: &StationaryKernel,
    grid: &FieldGrid,
    rng: &mut R,
) -> Result<ImageField> {
    let m = kernel.channels();
    match kernel {
        StationaryKernel::IdealWhite(sigma) => {
            let scale = 1.0 / grid.cell_area().sqrt();
            let mut field = ImageField::zeros(grid.clone(), m);
            if m == 1 {
                let sd = sigma[(0, 0)].sqrt() * scale;
                for v in field.data_mut() {
                    *v = sd * rng.sample::<f64, _>(StandardNormal);
                }
            } else {
                let chol = sigma.clone().cholesky().ok_or(FilterError::SingularNoise)?;
                let l = chol.l() * scale;
                let mut z = DVector::zeros(m);
                for i in 0..grid.len() {
                    for zi in z.iter_mut() {
                        *zi = rng.sample::<f64, _>(StandardNormal);
                    }
                    let sample = &l * &z;
                    field.pixel_mut(i).copy_from_slice(sample.as_slice());
                }
            }
            Ok(field)
        }
        StationaryKernel::Sampled(_) => {
            let spectrum = spectrum_of(kernel, grid)?;
            let (rows, cols) = (grid.rows(), grid.cols());
            let bins = grid.len();
            let fft = Fft2::new(rows, cols);
            let area = grid.cell_area();
            let npix = bins as f64;

            // Per-channel forward transforms of independent white fields.
            let mut white = vec![vec![Complex64::default(); bins]; m];
            for chan in white.iter_mut() {
                for v in chan.iter_mut() {
                    *v = Complex64::new(rng.sample::<f64, _>(StandardNormal), 0.0);
                }
                fft.forward(chan);
            }

            // Shape by the PSD square root of spectrum / cell_area per bin.
            let mut shaped = vec![vec![Complex64::default(); bins]; m];
            if m == 1 {
                for bin in 0..bins {
                    let lambda = (spectrum.data[bin].re / area).max(0.0);
                    shaped[0][bin] = white[0][bin] * lambda.sqrt();
                }
            } else {
                for bin in 0..bins {
                    let blk = spectrum.block(bin);
                    let h = DMatrix::from_fn(m, m, |r, c| blk[r * m + c] / area);
                    let eig = nalgebra::SymmetricEigen::new(h);
                    let sqrt_vals = DVector::from_iterator(
                        m,
                        eig.eigenvalues.iter().map(|&l| Complex64::new(l.max(0.0).sqrt(), 0.0)),
                    );
                    let l = &eig.eigenvectors
                        * DMatrix::from_diagonal(&sqrt_vals)
                        * eig.eigenvectors.adjoint();
                    for r in 0..m {
                        let mut acc = Complex64::default();
                        for c in 0..m {
                            acc += l[(r, c)] * white[c][bin];
                        }
                        shaped[r][bin] = acc;
                    }
                }
            }

            // Hermitian spectra of real inputs come back exactly real up to
            // roundoff; keep the real part.
            let mut field = ImageField::zeros(grid.clone(), m);
            for (chan, buf) in shaped.iter_mut().enumerate() {
                fft.inverse(buf);
                for (i, v) in buf.iter().enumerate() {
                    debug_assert!(v.im.abs() <= 1e-9 * spectrum.max_abs.max(1.0));
                    field.pixel_mut(i)[chan] = v.re / npix;
                }
            }
            Ok(field)
        }
    }
}
