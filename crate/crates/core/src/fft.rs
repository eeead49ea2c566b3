use num_complex::Complex64;
use rustfft::{Fft, FftDirection, FftPlanner};
use std::sync::Arc;

/// Planned two-dimensional FFT for a fixed `rows x cols` layout.
///
/// Both directions are raw (unnormalized) sums, matching rustfft: applying
/// `forward` then `inverse` multiplies the data by `rows * cols`. Callers
/// apply the physical quadrature weights (cell area on the way forward,
/// frequency cell volume on the way back) themselves.
pub struct Fft2 {
    rows: usize,
    cols: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl Fft2 {
    pub fn new(rows: usize, cols: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            rows,
            cols,
            row_fwd: planner.plan_fft(cols, FftDirection::Forward),
            row_inv: planner.plan_fft(cols, FftDirection::Inverse),
            col_fwd: planner.plan_fft(rows, FftDirection::Forward),
            col_inv: planner.plan_fft(rows, FftDirection::Inverse),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn forward(&self, data: &mut [Complex64]) {
        self.transform(data, true);
    }

    pub fn inverse(&self, data: &mut [Complex64]) {
        self.transform(data, false);
    }

    fn transform(&self, data: &mut [Complex64], forward: bool) {
        assert_eq!(data.len(), self.rows * self.cols, "fft buffer size mismatch");
        let (row_fft, col_fft) = if forward {
            (&self.row_fwd, &self.col_fwd)
        } else {
            (&self.row_inv, &self.col_inv)
        };

        let mut scratch =
            vec![Complex64::default(); row_fft.get_inplace_scratch_len().max(col_fft.get_inplace_scratch_len())];
        for row in data.chunks_exact_mut(self.cols) {
            row_fft.process_with_scratch(row, &mut scratch);
        }

        // Column pass via transpose so each transform runs on contiguous data.
        let mut t = vec![Complex64::default(); data.len()];
        transpose_into(data, &mut t, self.rows, self.cols);
        for col in t.chunks_exact_mut(self.rows) {
            col_fft.process_with_scratch(col, &mut scratch);
        }
        transpose_into(&t, data, self.cols, self.rows);
    }
}

fn transpose_into(src: &[Complex64], dst: &mut [Complex64], rows: usize, cols: usize) {
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::TAU;

    fn naive_dft2(data: &[Complex64], rows: usize, cols: usize, sign: f64) -> Vec<Complex64> {
        let mut out = vec![Complex64::default(); data.len()];
        for kr in 0..rows {
            for kc in 0..cols {
                let mut acc = Complex64::default();
                for r in 0..rows {
                    for c in 0..cols {
                        let phase = sign
                            * TAU
                            * (kr as f64 * r as f64 / rows as f64
                                + kc as f64 * c as f64 / cols as f64);
                        acc += data[r * cols + c] * Complex64::new(phase.cos(), phase.sin());
                    }
                }
                out[kr * cols + kc] = acc;
            }
        }
        out
    }

    fn test_field(rows: usize, cols: usize) -> Vec<Complex64> {
        (0..rows * cols)
            .map(|i| {
                let x = i as f64;
                Complex64::new((0.3 * x).sin() + 0.1 * x, (0.7 * x).cos())
            })
            .collect()
    }

    #[test]
    fn matches_naive_dft_both_directions() {
        let (rows, cols) = (4, 6);
        let data = test_field(rows, cols);
        let fft = Fft2::new(rows, cols);

        let mut fwd = data.clone();
        fft.forward(&mut fwd);
        for (a, b) in fwd.iter().zip(naive_dft2(&data, rows, cols, -1.0)) {
            assert!((a - b).norm() < 1e-9, "{a} vs {b}");
        }

        let mut inv = data.clone();
        fft.inverse(&mut inv);
        for (a, b) in inv.iter().zip(naive_dft2(&data, rows, cols, 1.0)) {
            assert!((a - b).norm() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn round_trip_scales_by_pixel_count() {
        let (rows, cols) = (8, 5);
        let data = test_field(rows, cols);
        let fft = Fft2::new(rows, cols);
        let mut buf = data.clone();
        fft.forward(&mut buf);
        fft.inverse(&mut buf);
        let n = (rows * cols) as f64;
        for (a, b) in buf.iter().zip(&data) {
            assert!((a / n - b).norm() < 1e-12);
        }
    }

    #[test]
    fn delta_transforms_to_constant() {
        let (rows, cols) = (4, 4);
        let mut buf = vec![Complex64::default(); rows * cols];
        buf[0] = Complex64::new(2.0, 0.0);
        Fft2::new(rows, cols).forward(&mut buf);
        for v in buf {
            assert!((v - Complex64::new(2.0, 0.0)).norm() < 1e-12);
        }
    }
}
