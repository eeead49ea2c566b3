use crate::error::{FilterError, Result};
use crate::grid::FieldGrid;

/// Dense multi-channel field sampled on a [`FieldGrid`].
///
/// Storage is pixel-major: the `channels` values of pixel `i` live at
/// `data[i * channels .. (i + 1) * channels]`. A per-pixel validity mask
/// tracks samples with no usable value (for example map queries outside the
/// surveyed region); invalid pixels carry zeros and are excluded from the
/// update integrals.
#[derive(Debug, Clone)]
pub struct ImageField {
    grid: FieldGrid,
    channels: usize,
    data: Vec<f64>,
    valid: Vec<bool>,
}

impl ImageField {
    /// Zero-filled field with every pixel valid.
    pub fn zeros(grid: FieldGrid, channels: usize) -> Self {
        let n = grid.len();
        Self { grid, channels, data: vec![0.0; n * channels], valid: vec![true; n] }
    }

    pub fn from_vec(grid: FieldGrid, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.len() * channels {
            return Err(FilterError::DimensionMismatch(format!(
                "field data length {} does not match {} pixels x {} channels",
                data.len(),
                grid.len(),
                channels
            )));
        }
        let n = grid.len();
        Ok(Self { grid, channels, data, valid: vec![true; n] })
    }

    pub fn grid(&self) -> &FieldGrid {
        &self.grid
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn pixel(&self, index: usize) -> &[f64] {
        &self.data[index * self.channels..(index + 1) * self.channels]
    }

    pub fn pixel_mut(&mut self, index: usize) -> &mut [f64] {
        &mut self.data[index * self.channels..(index + 1) * self.channels]
    }

    /// Single-channel accessor.
    pub fn scalar(&self, index: usize) -> f64 {
        debug_assert_eq!(self.channels, 1);
        self.data[index]
    }

    pub fn set_scalar(&mut self, index: usize, value: f64) {
        debug_assert_eq!(self.channels, 1);
        self.data[index] = value;
    }

    pub fn is_valid(&self, index: usize) -> bool {
        self.valid[index]
    }

    /// Invalidates a pixel and zeroes its values so downstream sums can skip
    /// the mask check where contributions of zero are harmless.
    pub fn mark_invalid(&mut self, index: usize) {
        self.valid[index] = false;
        for v in self.pixel_mut(index) {
            *v = 0.0;
        }
    }

    pub fn validity(&self) -> &[bool] {
        &self.valid
    }

    pub fn invalid_count(&self) -> usize {
        self.valid.iter().filter(|v| !**v).count()
    }

    /// Min and max over valid pixels of channel 0. `None` when nothing is valid.
    pub fn value_range(&self) -> Option<(f64, f64)> {
        let mut range: Option<(f64, f64)> = None;
        for i in 0..self.grid.len() {
            if !self.valid[i] {
                continue;
            }
            let v = self.data[i * self.channels];
            range = Some(match range {
                None => (v, v),
                Some((lo, hi)) => (lo.min(v), hi.max(v)),
            });
        }
        range
    }
}

/// Measurement Jacobian sampled per pixel: the `channels x state_dim` block
/// of pixel `i` is stored row-major at `i * channels * state_dim`.
///
/// Pixels without map support carry all-zero blocks, which drops them from
/// the information integrals without a separate mask.
#[derive(Debug, Clone)]
pub struct JacobianField {
    grid: FieldGrid,
    channels: usize,
    state_dim: usize,
    data: Vec<f64>,
}

impl JacobianField {
    pub fn zeros(grid: FieldGrid, channels: usize, state_dim: usize) -> Self {
        let n = grid.len();
        Self { grid, channels, state_dim, data: vec![0.0; n * channels * state_dim] }
    }

    pub fn from_vec(
        grid: FieldGrid,
        channels: usize,
        state_dim: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        if data.len() != grid.len() * channels * state_dim {
            return Err(FilterError::DimensionMismatch(format!(
                "jacobian data length {} does not match {} pixels x {}x{} blocks",
                data.len(),
                grid.len(),
                channels,
                state_dim
            )));
        }
        Ok(Self { grid, channels, state_dim, data })
    }

    pub fn grid(&self) -> &FieldGrid {
        &self.grid
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn block_len(&self) -> usize {
        self.channels * self.state_dim
    }

    /// Row-major `channels x state_dim` block of one pixel.
    pub fn block(&self, index: usize) -> &[f64] {
        let len = self.block_len();
        &self.data[index * len..(index + 1) * len]
    }

    pub fn block_mut(&mut self, index: usize) -> &mut [f64] {
        let len = self.block_len();
        &mut self.data[index * len..(index + 1) * len]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// Gain (or gain basis) sampled per pixel: the `state_dim x channels` block
/// of pixel `i` is stored row-major at `i * state_dim * channels`.
#[derive(Debug, Clone)]
pub struct GainField {
    grid: FieldGrid,
    state_dim: usize,
    channels: usize,
    data: Vec<f64>,
}

impl GainField {
    pub fn zeros(grid: FieldGrid, state_dim: usize, channels: usize) -> Self {
        let n = grid.len();
        Self { grid, state_dim, channels, data: vec![0.0; n * state_dim * channels] }
    }

    pub fn from_vec(
        grid: FieldGrid,
        state_dim: usize,
        channels: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        if data.len() != grid.len() * state_dim * channels {
            return Err(FilterError::DimensionMismatch(format!(
                "gain data length {} does not match {} pixels x {}x{} blocks",
                data.len(),
                grid.len(),
                state_dim,
                channels
            )));
        }
        Ok(Self { grid, state_dim, channels, data })
    }

    pub fn grid(&self) -> &FieldGrid {
        &self.grid
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn block_len(&self) -> usize {
        self.state_dim * self.channels
    }

    /// Row-major `state_dim x channels` block of one pixel.
    pub fn block(&self, index: usize) -> &[f64] {
        let len = self.block_len();
        &self.data[index * len..(index + 1) * len]
    }

    pub fn block_mut(&mut self, index: usize) -> &mut [f64] {
        let len = self.block_len();
        &mut self.data[index * len..(index + 1) * len]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixel_slices_are_channel_contiguous() {
        let g = FieldGrid::pixels(2, 3);
        let mut f = ImageField::zeros(g, 2);
        f.pixel_mut(4).copy_from_slice(&[1.5, -2.5]);
        assert_eq!(f.pixel(4), &[1.5, -2.5]);
        assert_eq!(f.pixel(3), &[0.0, 0.0]);
        assert_eq!(f.data().len(), 12);
    }

    #[test]
    fn invalidation_zeroes_values() {
        let g = FieldGrid::pixels(2, 2);
        let mut f = ImageField::from_vec(g, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        f.mark_invalid(2);
        assert!(!f.is_valid(2));
        assert_eq!(f.scalar(2), 0.0);
        assert_eq!(f.invalid_count(), 1);
        assert_eq!(f.value_range(), Some((1.0, 4.0)));
    }

    #[test]
    fn length_checks() {
        let g = FieldGrid::pixels(2, 2);
        assert!(ImageField::from_vec(g.clone(), 1, vec![0.0; 3]).is_err());
        assert!(JacobianField::from_vec(g.clone(), 1, 3, vec![0.0; 12]).is_ok());
        assert!(JacobianField::from_vec(g.clone(), 1, 3, vec![0.0; 11]).is_err());
        assert!(GainField::from_vec(g, 2, 2, vec![0.0; 16]).is_ok());
    }

    #[test]
    fn jacobian_blocks_are_row_major() {
        let g = FieldGrid::pixels(1, 2);
        let mut j = JacobianField::zeros(g, 2, 3);
        j.block_mut(1).copy_from_slice(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        // Row 0 = (1,2,3), row 1 = (4,5,6).
        assert_eq!(j.block(1)[0 * 3 + 2], 3.0);
        assert_eq!(j.block(1)[1 * 3 + 0], 4.0);
    }
}
