//! Netpbm grayscale IO. Writing always produces 16-bit binary `P5` (the
//! sample depth the quantization budget needs); reading accepts binary `P5`
//! and ASCII `P2` at 8 or 16 bits. Multi-byte samples are most significant
//! byte first, as the format defines.

use std::fs;
use std::path::Path;

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Pgm {
    pub rows: usize,
    pub cols: usize,
    pub maxval: u16,
    /// Row-major samples, `rows * cols` of them.
    pub data: Vec<u16>,
}

impl Pgm {
    /// Samples rescaled onto `[lo, hi]`.
    pub fn to_values(&self, lo: f64, hi: f64) -> Vec<f64> {
        let scale = (hi - lo) / self.maxval as f64;
        self.data.iter().map(|&s| lo + s as f64 * scale).collect()
    }
}

/// Quantizes `[lo, hi]` values onto the 16-bit sample range, clamping
/// anything outside; returns the samples and how many were clamped.
pub fn quantize(values: &[f64], lo: f64, hi: f64) -> (Vec<u16>, usize) {
    let scale = 65535.0 / (hi - lo);
    let mut clamped = 0;
    let data = values
        .iter()
        .map(|&v| {
            let s = (v - lo) * scale;
            if !(0.0..=65535.0).contains(&s) {
                clamped += 1;
            }
            s.round().clamp(0.0, 65535.0) as u16
        })
        .collect();
    (data, clamped)
}

pub fn write_pgm16(path: &Path, rows: usize, cols: usize, data: &[u16]) -> Result<()> {
    assert_eq!(data.len(), rows * cols, "sample count does not match dimensions");
    let mut bytes = Vec::with_capacity(32 + data.len() * 2);
    bytes.extend_from_slice(format!("P5\n{cols} {rows}\n65535\n").as_bytes());
    for &s in data {
        bytes.extend_from_slice(&s.to_be_bytes());
    }
    fs::write(path, bytes).map_err(|source| HarnessError::Output {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_pgm(path: &Path) -> Result<Pgm> {
    let bytes = fs::read(path)
        .map_err(|e| HarnessError::Dataset(format!("{}: {e}", path.display())))?;
    parse_pgm(&bytes).map_err(|e| HarnessError::Dataset(format!("{}: {e}", path.display())))
}

/// Reads one header token, skipping whitespace and `#` comments.
fn next_token(bytes: &[u8], pos: &mut usize) -> std::result::Result<String, String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err("unexpected end of header".into());
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

fn parse_dim(token: &str, what: &str) -> std::result::Result<usize, String> {
    token.parse::<usize>().map_err(|_| format!("bad {what} {token:?}"))
}

pub fn parse_pgm(bytes: &[u8]) -> std::result::Result<Pgm, String> {
    let mut pos = 0;
    let magic = next_token(bytes, &mut pos)?;
    if magic != "P5" && magic != "P2" {
        return Err(format!("not a PGM (magic {magic:?})"));
    }
    let cols = parse_dim(&next_token(bytes, &mut pos)?, "width")?;
    let rows = parse_dim(&next_token(bytes, &mut pos)?, "height")?;
    let maxval = parse_dim(&next_token(bytes, &mut pos)?, "maxval")?;
    if rows == 0 || cols == 0 {
        return Err("zero image dimension".into());
    }
    if maxval == 0 || maxval > 65535 {
        return Err(format!("maxval {maxval} out of range"));
    }
    let maxval = maxval as u16;
    let count = rows * cols;
    let mut data = Vec::with_capacity(count);

    if magic == "P2" {
        for _ in 0..count {
            let v = parse_dim(&next_token(bytes, &mut pos)?, "sample")?;
            if v > maxval as usize {
                return Err(format!("sample {v} exceeds maxval {maxval}"));
            }
            data.push(v as u16);
        }
        return Ok(Pgm { rows, cols, maxval, data });
    }

    // Binary raster: exactly one whitespace byte after the maxval.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err("missing raster separator".into());
    }
    pos += 1;
    let raster = &bytes[pos..];
    if maxval < 256 {
        if raster.len() < count {
            return Err(format!("raster holds {} of {count} samples", raster.len()));
        }
        data.extend(raster[..count].iter().map(|&b| b as u16));
    } else {
        if raster.len() < 2 * count {
            return Err(format!("raster holds {} of {} bytes", raster.len(), 2 * count));
        }
        for pair in raster[..2 * count].chunks_exact(2) {
            data.push(u16::from_be_bytes([pair[0], pair[1]]));
        }
    }
    Ok(Pgm { rows, cols, maxval, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sixteen_bit_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        let data: Vec<u16> = (0..12).map(|i| (i * 5000) as u16).collect();
        write_pgm16(&path, 3, 4, &data).unwrap();
        let back = read_pgm(&path).unwrap();
        assert_eq!(back, Pgm { rows: 3, cols: 4, maxval: 65535, data });
    }

    #[test]
    fn ascii_and_eight_bit_variants_parse() {
        let ascii = b"P2\n# comment\n2 2\n255\n0 128\n255 7\n";
        let p = parse_pgm(ascii).unwrap();
        assert_eq!(p.data, vec![0, 128, 255, 7]);
        assert_eq!(p.maxval, 255);

        let binary = b"P5\n2 1\n255\n\x10\xFF";
        let p = parse_pgm(binary).unwrap();
        assert_eq!(p.data, vec![16, 255]);
    }

    #[test]
    fn value_mapping_round_trips_within_half_a_step() {
        let values = [0.0, 0.25, -0.9999, 1.73, 2.0, -1.0];
        let (q, clamped) = quantize(&values, -1.0, 2.0);
        assert_eq!(clamped, 0);
        let back = Pgm { rows: 1, cols: 6, maxval: 65535, data: q }.to_values(-1.0, 2.0);
        let half_step = 3.0 / 65535.0 / 2.0;
        for (a, b) in values.iter().zip(&back) {
            assert!((a - b).abs() <= half_step + 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn out_of_range_samples_are_clamped_and_counted() {
        let (q, clamped) = quantize(&[-2.0, 0.5, 3.0], -1.0, 2.0);
        assert_eq!(clamped, 2);
        assert_eq!(q[0], 0);
        assert_eq!(q[2], 65535);
    }

    #[test]
    fn malformed_headers_are_rejected() {
        assert!(parse_pgm(b"P6\n2 2\n255\n").is_err());
        assert!(parse_pgm(b"P5\n0 2\n255\n").is_err());
        assert!(parse_pgm(b"P5\n2 2\n70000\n").is_err());
        assert!(parse_pgm(b"P5\n2 2\n255\nab").is_err());
        assert!(parse_pgm(b"P2\n2 2\n255\n1 2 3\n").is_err());
    }
}
