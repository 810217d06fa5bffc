//! Minimal binary PNM writers/readers: P6 (RGB rasters) and P5 (grayscale
//! heatmaps). Output is byte-deterministic; the P5 writer min-max
//! normalizes and reports the raw range so a sidecar can keep the truth.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::scene::Raster;
use crate::tensor::Tensor;

pub fn write_ppm(path: &Path, raster: &Raster) -> Result<()> {
    let mut bytes =
        format!("P6\n{} {}\n255\n", raster.width, raster.height).into_bytes();
    bytes.extend_from_slice(&raster.rgb);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Raster> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (magic, rest) = next_token(&bytes, 0);
    if magic != b"P6" {
        return Err(Error::format(path, "not a binary PPM (P6) file"));
    }
    let (w, rest) = parse_number(path, &bytes, rest)?;
    let (h, rest) = parse_number(path, &bytes, rest)?;
    let (maxval, rest) = parse_number(path, &bytes, rest)?;
    if maxval != 255 {
        return Err(Error::format(path, format!("unsupported maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the pixels.
    let start = rest + 1;
    let need = (w * h * 3) as usize;
    if bytes.len() < start + need {
        return Err(Error::format(path, "truncated pixel data"));
    }
    Ok(Raster { width: w, height: h, rgb: bytes[start..start + need].to_vec() })
}

fn next_token(bytes: &[u8], mut pos: usize) -> (&[u8], usize) {
    while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
        pos += 1;
    }
    let start = pos;
    while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
        pos += 1;
    }
    (&bytes[start..pos], pos)
}

fn parse_number(path: &Path, bytes: &[u8], pos: usize) -> Result<(u32, usize)> {
    let (tok, end) = next_token(bytes, pos);
    let s = std::str::from_utf8(tok).map_err(|_| Error::format(path, "bad header"))?;
    let v = s
        .parse::<u32>()
        .map_err(|_| Error::format(path, format!("bad header number '{s}'")))?;
    Ok((v, end))
}

/// Write a square map as an 8-bit PGM, min-max normalized; returns the raw
/// (min, max) so callers can record them in a JSON sidecar. A constant map
/// writes as all zeros.
pub fn write_pgm_normalized<S: Scalar>(path: &Path, map: &Tensor<S>) -> Result<(f64, f64)> {
    if map.rank() != 2 {
        return Err(Error::Dimension {
            op: "write_pgm_normalized",
            axis: "rank",
            expected: 2,
            got: map.rank(),
        });
    }
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for &v in map.data() {
        let v = v.as_f64();
        min = min.min(v);
        max = max.max(v);
    }
    let span = max - min;
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    for &v in map.data() {
        let scaled = if span > 0.0 {
            ((v.as_f64() - min) / span * 255.0).round() as u8
        } else {
            0
        };
        bytes.push(scaled);
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok((min, max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn ppm_roundtrip_is_lossless() {
        let raster = Raster {
            width: 3,
            height: 2,
            rgb: vec![0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 255, 128, 64, 32, 16, 8, 4],
        };
        let dir = tempdir().unwrap();
        let p = dir.path().join("t.ppm");
        write_ppm(&p, &raster).unwrap();
        assert_eq!(read_ppm(&p).unwrap(), raster);
    }

    #[test]
    fn ppm_reader_rejects_other_magic() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("bad.ppm");
        fs::write(&p, b"P5\n1 1\n255\n\0").unwrap();
        assert!(read_ppm(&p).is_err());
    }

    #[test]
    fn pgm_normalizes_to_full_range_and_reports_raw_extrema() {
        let map = Tensor::<f32>::from_vec(&[2, 2], vec![-1.0, 0.0, 1.0, 3.0]).unwrap();
        let dir = tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        let (min, max) = write_pgm_normalized(&p, &map).unwrap();
        assert_eq!((min, max), (-1.0, 3.0));
        let bytes = fs::read(&p).unwrap();
        let pixels = &bytes[bytes.len() - 4..];
        assert_eq!(pixels[0], 0);
        assert_eq!(pixels[3], 255);
        // (0 - -1) / 4 * 255 = 63.75 -> 64
        assert_eq!(pixels[1], 64);
    }

    #[test]
    fn constant_pgm_writes_zeros() {
        let map = Tensor::<f32>::filled(&[2, 2], 5.0);
        let dir = tempdir().unwrap();
        let p = dir.path().join("c.pgm");
        let (min, max) = write_pgm_normalized(&p, &map).unwrap();
        assert_eq!((min, max), (5.0, 5.0));
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[bytes.len() - 4..], &[0, 0, 0, 0]);
    }
}
