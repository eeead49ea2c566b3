//! Intensity preprocessing: Gaussian blur, min-max normalization, histogram
//! equalization, and histogram matching.
//!
//! Every stage treats invalid pixels as missing: they contribute nothing to
//! kernels or histograms and stay invalid in the output. The blur is a
//! normalized convolution, so constant regions (and borders) pass through
//! exactly.

use crate::field::ImageField;

const BINS: usize = 256;

/// Stage toggles, applied in the fixed order blur, normalize, equalize.
/// Histogram matching needs a reference image and is invoked separately via
/// [`match_histogram`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreprocessConfig {
    /// Blur standard deviation in pixels; `None` disables the stage.
    pub blur_sigma: Option<f64>,
    pub normalize: bool,
    pub equalize: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { blur_sigma: Some(0.5), normalize: false, equalize: false }
    }
}

impl PreprocessConfig {
    /// All stages off; `apply` becomes a clone.
    pub fn none() -> Self {
        Self { blur_sigma: None, normalize: false, equalize: false }
    }

    pub fn is_identity(&self) -> bool {
        self.blur_sigma.is_none() && !self.normalize && !self.equalize
    }
}

pub fn apply(img: &ImageField, cfg: &PreprocessConfig) -> ImageField {
    let mut out = match cfg.blur_sigma {
        Some(sigma) if sigma > 0.0 => gaussian_blur(img, sigma),
        _ => img.clone(),
    };
    if cfg.normalize {
        normalize_minmax(&mut out);
    }
    if cfg.equalize {
        equalize_histogram(&mut out);
    }
    out
}

/// Truncated sampled Gaussian, normalized to sum 1.
fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut taps: Vec<f64> =
        (-radius..=radius).map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= sum;
    }
    taps
}

/// Separable normalized convolution: numerator and mask are filtered with
/// the same taps and divided at the end, which keeps constants exact at
/// borders and around invalid pixels.
pub fn gaussian_blur(img: &ImageField, sigma: f64) -> ImageField {
    assert!(sigma > 0.0 && sigma.is_finite(), "blur sigma must be positive");
    let taps = gaussian_taps(sigma);
    let radius = (taps.len() / 2) as i64;
    let grid = img.grid();
    let (rows, cols, channels) = (grid.rows(), grid.cols(), img.channels());
    let len = grid.len();

    let mut num = vec![0.0; len * channels];
    let mut den = vec![0.0; len];
    // Column pass directly off the source, using validity as the mask.
    for r in 0..rows {
        for c in 0..cols {
            let idx = r * cols + c;
            let mut d = 0.0;
            let mut acc = vec![0.0; channels];
            for (t, w) in taps.iter().enumerate() {
                let cc = c as i64 + t as i64 - radius;
                if cc < 0 || cc >= cols as i64 {
                    continue;
                }
                let src = r * cols + cc as usize;
                if !img.is_valid(src) {
                    continue;
                }
                d += w;
                let px = img.pixel(src);
                for ch in 0..channels {
                    acc[ch] += w * px[ch];
                }
            }
            den[idx] = d;
            num[idx * channels..(idx + 1) * channels].copy_from_slice(&acc);
        }
    }

    let mut out = ImageField::zeros(grid.clone(), channels);
    for r in 0..rows {
        for c in 0..cols {
            let idx = r * cols + c;
            if !img.is_valid(idx) {
                out.mark_invalid(idx);
                continue;
            }
            let mut d = 0.0;
            let mut acc = vec![0.0; channels];
            for (t, w) in taps.iter().enumerate() {
                let rr = r as i64 + t as i64 - radius;
                if rr < 0 || rr >= rows as i64 {
                    continue;
                }
                let src = rr as usize * cols + c;
                d += w * den[src];
                for ch in 0..channels {
                    acc[ch] += w * num[src * channels + ch];
                }
            }
            if d <= 0.0 {
                out.mark_invalid(idx);
                continue;
            }
            let px = out.pixel_mut(idx);
            for ch in 0..channels {
                px[ch] = acc[ch] / d;
            }
        }
    }
    out
}

/// Rescales valid values to span [0, 1] per channel; constant channels are
/// left untouched.
pub fn normalize_minmax(img: &mut ImageField) {
    let channels = img.channels();
    for ch in 0..channels {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for idx in 0..img.grid().len() {
            if img.is_valid(idx) {
                let v = img.pixel(idx)[ch];
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        let span = hi - lo;
        if !(span > 1e-12) {
            continue;
        }
        for idx in 0..img.grid().len() {
            if img.is_valid(idx) {
                let px = img.pixel_mut(idx);
                px[ch] = (px[ch] - lo) / span;
            }
        }
    }
}

fn bin_of(v: f64) -> usize {
    ((v * BINS as f64) as usize).min(BINS - 1)
}

/// Histogram of valid values per channel, then the inclusive CDF.
fn cdf_of(img: &ImageField, ch: usize) -> Option<[f64; BINS]> {
    let mut hist = [0u64; BINS];
    let mut count = 0u64;
    for idx in 0..img.grid().len() {
        if img.is_valid(idx) {
            hist[bin_of(img.pixel(idx)[ch].clamp(0.0, 1.0))] += 1;
            count += 1;
        }
    }
    if count == 0 {
        return None;
    }
    let mut cdf = [0.0; BINS];
    let mut running = 0u64;
    for b in 0..BINS {
        running += hist[b];
        cdf[b] = running as f64 / count as f64;
    }
    Some(cdf)
}

/// Maps each value to its inclusive CDF, flattening the intensity
/// distribution onto [0, 1] up to bin quantization.
pub fn equalize_histogram(img: &mut ImageField) {
    for ch in 0..img.channels() {
        let Some(cdf) = cdf_of(img, ch) else { continue };
        for idx in 0..img.grid().len() {
            if img.is_valid(idx) {
                let px = img.pixel_mut(idx);
                px[ch] = cdf[bin_of(px[ch].clamp(0.0, 1.0))];
            }
        }
    }
}

/// Remaps `img` so its intensity distribution follows `reference`: each
/// value goes through its own CDF, then the reference quantile function,
/// landing on a bin center.
pub fn match_histogram(img: &mut ImageField, reference: &ImageField) {
    let channels = img.channels().min(reference.channels());
    for ch in 0..channels {
        let (Some(src), Some(dst)) = (cdf_of(img, ch), cdf_of(reference, ch)) else { continue };
        for idx in 0..img.grid().len() {
            if !img.is_valid(idx) {
                continue;
            }
            let px = img.pixel_mut(idx);
            let q = src[bin_of(px[ch].clamp(0.0, 1.0))];
            let b = dst.partition_point(|c| *c < q).min(BINS - 1);
            px[ch] = (b as f64 + 0.5) / BINS as f64;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::FieldGrid;

    fn field_from(values: Vec<f64>, rows: usize, cols: usize) -> ImageField {
        ImageField::from_vec(FieldGrid::pixels(rows, cols), 1, values).unwrap()
    }

    #[test]
    fn blur_of_impulse_is_the_normalized_discrete_gaussian() {
        let sigma = 0.5;
        let mut values = vec![0.0; 15 * 15];
        values[7 * 15 + 7] = 1.0;
        let img = field_from(values, 15, 15);
        let out = gaussian_blur(&img, sigma);

        // Closed-form truncated discrete Gaussian on the same support.
        let radius = 2i64;
        let mut total = 0.0;
        for dr in -radius..=radius {
            for dc in -radius..=radius {
                total += (-((dr * dr + dc * dc) as f64) / (2.0 * sigma * sigma)).exp();
            }
        }
        for dr in -radius..=radius {
            for dc in -radius..=radius {
                let expect = (-((dr * dr + dc * dc) as f64) / (2.0 * sigma * sigma)).exp() / total;
                let idx = ((7 + dr) * 15 + 7 + dc) as usize;
                assert!(
                    (out.scalar(idx) - expect).abs() < 1e-12,
                    "lag ({dr},{dc}): {} vs {expect}",
                    out.scalar(idx)
                );
            }
        }
        // Mass is conserved away from borders.
        let sum: f64 = out.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn blur_keeps_constants_exact_at_borders_and_holes() {
        let mut img = field_from(vec![0.75; 9 * 9], 9, 9);
        img.mark_invalid(4 * 9 + 4);
        let out = gaussian_blur(&img, 1.0);
        for idx in 0..81 {
            if idx == 4 * 9 + 4 {
                assert!(!out.is_valid(idx));
            } else {
                assert!((out.scalar(idx) - 0.75).abs() < 1e-14, "pixel {idx}");
            }
        }
    }

    #[test]
    fn normalize_spans_unit_interval_and_guards_constants() {
        let mut img = field_from(vec![0.2, 0.4, 0.6, 0.3], 2, 2);
        normalize_minmax(&mut img);
        assert!((img.scalar(0) - 0.0).abs() < 1e-15);
        assert!((img.scalar(2) - 1.0).abs() < 1e-15);
        assert!((img.scalar(3) - 0.25).abs() < 1e-15);

        let mut flat = field_from(vec![0.6; 4], 2, 2);
        normalize_minmax(&mut flat);
        assert!(flat.data().iter().all(|v| (*v - 0.6).abs() < 1e-15));
    }

    #[test]
    fn equalization_of_uniform_histogram_is_identity_within_a_bin() {
        let n = 64 * 64;
        let values: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        let mut img = field_from(values.clone(), 64, 64);
        equalize_histogram(&mut img);
        for (out, v) in img.data().iter().zip(&values) {
            assert!((out - v).abs() <= 1.0 / BINS as f64 + 1e-12, "{out} vs {v}");
        }
    }

    #[test]
    fn matching_an_image_to_itself_is_identity_within_a_bin() {
        let values: Vec<f64> =
            (0..48 * 48).map(|i| 0.5 + 0.5 * ((i as f64) * 0.013).sin()).collect();
        let reference = field_from(values.clone(), 48, 48);
        let mut img = reference.clone();
        match_histogram(&mut img, &reference);
        for (out, v) in img.data().iter().zip(&values) {
            assert!((out - v).abs() <= 1.0 / BINS as f64, "{out} vs {v}");
        }
    }

    #[test]
    fn matching_moves_the_histogram_toward_the_reference() {
        // Dark image matched against a bright reference brightens.
        let dark: Vec<f64> = (0..1024).map(|i| 0.1 + 0.2 * (i as f64 / 1024.0)).collect();
        let bright: Vec<f64> = (0..1024).map(|i| 0.6 + 0.3 * (i as f64 / 1024.0)).collect();
        let mut img = field_from(dark, 32, 32);
        let reference = field_from(bright, 32, 32);
        match_histogram(&mut img, &reference);
        let mean = img.data().iter().sum::<f64>() / 1024.0;
        assert!((mean - 0.75).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn apply_runs_stages_in_order_and_none_is_identity() {
        let values: Vec<f64> = (0..256).map(|i| 0.2 + 0.3 * (i as f64 / 255.0)).collect();
        let img = field_from(values, 16, 16);

        let identity = apply(&img, &PreprocessConfig::none());
        assert_eq!(identity.data(), img.data());

        let cfg = PreprocessConfig { blur_sigma: None, normalize: true, equalize: false };
        let normalized = apply(&img, &cfg);
        let lo = normalized.data().iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = normalized.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(lo.abs() < 1e-15 && (hi - 1.0).abs() < 1e-15);
    }

    #[test]
    fn invalid_pixels_do_not_leak_into_histograms() {
        let mut img = field_from(vec![0.5; 16], 4, 4);
        for v in 0..8 {
            img.pixel_mut(v)[0] = 0.9;
        }
        for v in 8..16 {
            img.mark_invalid(v);
        }
        // All valid pixels sit in one bin, so the inclusive CDF sends them
        // to 1.0; the invalid 0.5 pixels must not widen the histogram.
        equalize_histogram(&mut img);
        for v in 0..8 {
            assert!((img.scalar(v) - 1.0).abs() < 1e-15);
        }
    }
}
