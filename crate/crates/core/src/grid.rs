use crate::error::{FilterError, Result};

/// Uniform rectangular sampling grid with physical pixel coordinates.
///
/// Axis 0 runs over rows, axis 1 over columns; storage is row-major. The
/// coordinate of sample `(r, c)` is `origin + (r * pitch[0], c * pitch[1])`,
/// so `pitch` carries the physical units (meters for map grids, unit pixels
/// for sensor grids).
#[derive(Debug, Clone, PartialEq)]
pub struct FieldGrid {
    rows: usize,
    cols: usize,
    pitch: [f64; 2],
    origin: [f64; 2],
}

impl FieldGrid {
    pub fn new(rows: usize, cols: usize, pitch: [f64; 2], origin: [f64; 2]) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(FilterError::InvalidParameter(format!(
                "grid dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if !(pitch[0].is_finite() && pitch[1].is_finite() && pitch[0] > 0.0 && pitch[1] > 0.0) {
            return Err(FilterError::InvalidParameter(format!(
                "grid pitch must be positive and finite, got ({}, {})",
                pitch[0], pitch[1]
            )));
        }
        if !(origin[0].is_finite() && origin[1].is_finite()) {
            return Err(FilterError::InvalidParameter("grid origin must be finite".into()));
        }
        Ok(Self { rows, cols, pitch, origin })
    }

    /// Unit-pitch grid anchored at the origin, the natural geometry for a
    /// sensor whose noise levels are quoted per pixel.
    pub fn pixels(rows: usize, cols: usize) -> Self {
        Self { rows, cols, pitch: [1.0, 1.0], origin: [0.0, 0.0] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Number of samples.
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn pitch(&self) -> [f64; 2] {
        self.pitch
    }

    pub fn origin(&self) -> [f64; 2] {
        self.origin
    }

    /// Area of one sampling cell, the weight of the midpoint quadrature used
    /// for every integral over the field domain.
    pub fn cell_area(&self) -> f64 {
        self.pitch[0] * self.pitch[1]
    }

    pub fn index(&self, r: usize, c: usize) -> usize {
        debug_assert!(r < self.rows && c < self.cols);
        r * self.cols + c
    }

    pub fn row_col(&self, index: usize) -> (usize, usize) {
        (index / self.cols, index % self.cols)
    }

    /// Physical coordinate of sample `(r, c)`.
    pub fn coord(&self, r: usize, c: usize) -> [f64; 2] {
        [
            self.origin[0] + r as f64 * self.pitch[0],
            self.origin[1] + c as f64 * self.pitch[1],
        ]
    }

    /// Signed frequency (cycles per coordinate unit) of DFT bin `(r, c)`,
    /// matching the usual fftfreq layout: non-negative frequencies first,
    /// then the negative tail.
    pub fn freq_coord(&self, r: usize, c: usize) -> [f64; 2] {
        [
            signed_bin(r, self.rows) / (self.rows as f64 * self.pitch[0]),
            signed_bin(c, self.cols) / (self.cols as f64 * self.pitch[1]),
        ]
    }

    /// Volume of one frequency cell, the quadrature weight on the DFT grid.
    /// Equals `1 / (len * cell_area)`.
    pub fn freq_cell_volume(&self) -> f64 {
        1.0 / (self.rows as f64 * self.pitch[0] * self.cols as f64 * self.pitch[1])
    }

    pub fn same_geometry(&self, other: &Self) -> bool {
        self == other
    }

    pub fn describe(&self) -> String {
        format!(
            "{}x{} pitch ({}, {}) origin ({}, {})",
            self.rows, self.cols, self.pitch[0], self.pitch[1], self.origin[0], self.origin[1]
        )
    }

    pub fn ensure_matches(&self, other: &Self, context: &'static str) -> Result<()> {
        if self.same_geometry(other) {
            Ok(())
        } else {
            Err(FilterError::GridMismatch {
                context,
                left: self.describe(),
                right: other.describe(),
            })
        }
    }
}

fn signed_bin(k: usize, n: usize) -> f64 {
    if k < n.div_ceil(2) {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coords_follow_origin_and_pitch() {
        let g = FieldGrid::new(4, 6, [0.5, 2.0], [-1.0, 3.0]).unwrap();
        assert_eq!(g.coord(0, 0), [-1.0, 3.0]);
        assert_eq!(g.coord(3, 5), [-1.0 + 1.5, 3.0 + 10.0]);
        assert_eq!(g.cell_area(), 1.0);
        assert_eq!(g.len(), 24);
        assert_eq!(g.index(2, 4), 16);
        assert_eq!(g.row_col(16), (2, 4));
    }

    #[test]
    fn freq_coords_match_fftfreq_layout() {
        // Even length: 0, 1, 2, -3, -2, -1 over n * pitch.
        let g = FieldGrid::new(6, 5, [2.0, 1.0], [0.0, 0.0]).unwrap();
        let rows: Vec<f64> = (0..6).map(|r| g.freq_coord(r, 0)[0]).collect();
        let expect: Vec<f64> = [0.0, 1.0, 2.0, -3.0, -2.0, -1.0]
            .iter()
            .map(|k| k / 12.0)
            .collect();
        assert_eq!(rows, expect);
        // Odd length: 0, 1, 2, -2, -1 over n * pitch.
        let cols: Vec<f64> = (0..5).map(|c| g.freq_coord(0, c)[1]).collect();
        let expect: Vec<f64> = [0.0, 1.0, 2.0, -2.0, -1.0].iter().map(|k| k / 5.0).collect();
        assert_eq!(cols, expect);
    }

    #[test]
    fn freq_cell_volume_is_reciprocal_extent() {
        let g = FieldGrid::new(8, 4, [0.25, 0.5], [0.0, 0.0]).unwrap();
        let v = g.freq_cell_volume();
        assert!((v - 1.0 / (8.0 * 0.25 * 4.0 * 0.5)).abs() < 1e-15);
        assert!((v * g.len() as f64 * g.cell_area() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn mismatch_reports_both_geometries() {
        let a = FieldGrid::pixels(4, 4);
        let b = FieldGrid::pixels(4, 5);
        let err = a.ensure_matches(&b, "test").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("4x4") && msg.contains("4x5"), "{msg}");
    }

    #[test]
    fn rejects_degenerate_grids() {
        assert!(FieldGrid::new(0, 4, [1.0, 1.0], [0.0, 0.0]).is_err());
        assert!(FieldGrid::new(4, 4, [0.0, 1.0], [0.0, 0.0]).is_err());
        assert!(FieldGrid::new(4, 4, [1.0, f64::NAN], [0.0, 0.0]).is_err());
    }
}
