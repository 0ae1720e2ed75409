//! 16-bit grayscale PGM (P5) depth maps and 8-bit color-mapped PPM (P6)
//! previews. PGM sample values are big-endian per the format; depth maps use
//! the affine mapping `depth = pixel / 65535 * depth_range + depth_min`.

use crate::cube::{DepthImage, DepthUnit};
use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

/// Quantizes a depth image to 16 bits over [depth_min, depth_min + range].
/// Invalid (NaN) pixels quantize to 0.
pub fn write_depth_pgm(
    depth: &DepthImage,
    depth_min: f64,
    depth_range: f64,
    path: &Path,
) -> Result<()> {
    if !(depth_range > 0.0) {
        return Err(Error::InvalidValue(format!(
            "depth range must be > 0, got {depth_range}"
        )));
    }
    let mut buf = format!("P5\n{} {}\n65535\n", depth.cols, depth.rows).into_bytes();
    for &d in depth.data() {
        let q = if d.is_finite() {
            (((d - depth_min) / depth_range * 65535.0).round()).clamp(0.0, 65535.0) as u16
        } else {
            0
        };
        buf.extend_from_slice(&q.to_be_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a 16-bit P5 file back into a depth image via the same affine map.
pub fn read_depth_pgm(
    path: &Path,
    depth_min: f64,
    depth_range: f64,
    unit: DepthUnit,
) -> Result<DepthImage> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    let (cols, rows, maxval, offset) = parse_pnm_header(&bytes, b"P5", path)?;
    if maxval != 65535 {
        return Err(Error::format(
            path,
            format!("expected 16-bit depth PGM (maxval 65535), got {maxval}"),
        ));
    }
    let need = rows * cols * 2;
    if bytes.len() - offset != need {
        return Err(Error::format(
            path,
            format!("expected {need} payload bytes, found {}", bytes.len() - offset),
        ));
    }
    let data: Vec<f64> = bytes[offset..]
        .chunks_exact(2)
        .map(|c| {
            let q = u16::from_be_bytes(c.try_into().unwrap());
            q as f64 / 65535.0 * depth_range + depth_min
        })
        .collect();
    DepthImage::new(rows, cols, unit, data)
}

fn parse_pnm_header(bytes: &[u8], magic: &[u8], path: &Path) -> Result<(usize, usize, u32, usize)> {
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String> {
        // skip whitespace and comment lines
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, "truncated PNM header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let m = token(bytes)?;
    if m.as_bytes() != magic {
        return Err(Error::format(
            path,
            format!("bad PNM magic '{m}', expected {}", String::from_utf8_lossy(magic)),
        ));
    }
    let cols: usize = token(bytes)?
        .parse()
        .map_err(|_| Error::format(path, "bad width"))?;
    let rows: usize = token(bytes)?
        .parse()
        .map_err(|_| Error::format(path, "bad height"))?;
    let maxval: u32 = token(bytes)?
        .parse()
        .map_err(|_| Error::format(path, "bad maxval"))?;
    // exactly one whitespace byte separates header and payload
    Ok((cols, rows, maxval, pos + 1))
}

/// Piecewise-linear blue -> cyan -> yellow -> red color map on [0, 1].
fn colormap(x: f64) -> [u8; 3] {
    let x = x.clamp(0.0, 1.0);
    let seg = |a: f64, b: f64, t: f64| (a + (b - a) * t) * 255.0;
    let (r, g, b) = if x < 0.25 {
        let t = x / 0.25;
        (0.0, seg(0.0, 1.0, t) / 255.0, 1.0)
    } else if x < 0.5 {
        let t = (x - 0.25) / 0.25;
        (0.0, 1.0, seg(1.0, 0.0, t) / 255.0)
    } else if x < 0.75 {
        let t = (x - 0.5) / 0.25;
        (seg(0.0, 1.0, t) / 255.0, 1.0, 0.0)
    } else {
        let t = (x - 0.75) / 0.25;
        (1.0, seg(1.0, 0.0, t) / 255.0, 0.0)
    };
    [
        (r * 255.0).round() as u8,
        (g * 255.0).round() as u8,
        (b * 255.0).round() as u8,
    ]
}

/// Color-mapped preview of a depth image; invalid pixels render black.
pub fn write_depth_ppm(
    depth: &DepthImage,
    depth_min: f64,
    depth_range: f64,
    path: &Path,
) -> Result<()> {
    if !(depth_range > 0.0) {
        return Err(Error::InvalidValue(format!(
            "depth range must be > 0, got {depth_range}"
        )));
    }
    let mut buf = format!("P6\n{} {}\n255\n", depth.cols, depth.rows).into_bytes();
    for &d in depth.data() {
        if d.is_finite() {
            buf.extend_from_slice(&colormap((d - depth_min) / depth_range));
        } else {
            buf.extend_from_slice(&[0, 0, 0]);
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip_within_one_quantization_step() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.pgm");
        let (min, range) = (1.0, 63.0);
        let data: Vec<f64> = (0..16).map(|i| 1.0 + i as f64 * 4.0).collect();
        let depth = DepthImage::new(4, 4, DepthUnit::Bins, data).unwrap();
        write_depth_pgm(&depth, min, range, &path).unwrap();
        let back = read_depth_pgm(&path, min, range, DepthUnit::Bins).unwrap();
        let step = range / 65535.0;
        for (a, b) in depth.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= step, "{a} vs {b}");
        }
    }

    #[test]
    fn pgm_header_is_validated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pgm");
        std::fs::write(&path, b"P2\n2 2\n255\n0 0 0 0").unwrap();
        assert!(read_depth_pgm(&path, 0.0, 1.0, DepthUnit::Bins).is_err());
    }

    #[test]
    fn ppm_writes_expected_size() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.ppm");
        let depth = DepthImage::constant(3, 5, DepthUnit::Bins, 2.0);
        write_depth_ppm(&depth, 1.0, 4.0, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header = b"P6\n5 3\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes.len() - header.len(), 3 * 5 * 3);
    }
}
