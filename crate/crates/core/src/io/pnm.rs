//! Binary PGM/PPM rasters and raw little-endian f32 rasters with a
//! sidecar header.
//!
//! 16-bit PGM stores depth as whole millimeters (0 = invalid), which is
//! lossy; the f32 format preserves sub-millimeter depth exactly and is the
//! default for sequence replay.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::geometry::Grid;
use crate::{Error, Result};

/// Write depth (mm) as binary 16-bit PGM. NaN maps to 0, values clamp to
/// the u16 range, fractions round to nearest.
pub fn write_pgm16(path: &Path, depth: &Grid<f64>) -> Result<()> {
    let mut buf = Vec::with_capacity(32 + depth.data.len() * 2);
    buf.extend_from_slice(format!("P5\n{} {}\n65535\n", depth.width, depth.height).as_bytes());
    for &d in &depth.data {
        let v = if d.is_nan() { 0u16 } else { d.round().clamp(0.0, 65535.0) as u16 };
        buf.extend_from_slice(&v.to_be_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Read a binary 16-bit PGM as depth in mm; 0 becomes NaN (invalid).
pub fn read_pgm16(path: &Path) -> Result<Grid<f64>> {
    let bytes =
        fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let (magic, rest) = split_token(&bytes)
        .ok_or_else(|| Error::parse(path.display().to_string(), "missing PGM header"))?;
    if magic != b"P5" {
        return Err(Error::parse(path.display().to_string(), "not a binary PGM (P5)"));
    }
    let (w, rest) = parse_header_int(rest, path)?;
    let (h, rest) = parse_header_int(rest, path)?;
    let (maxval, rest) = parse_header_int(rest, path)?;
    if maxval != 65535 {
        return Err(Error::parse(path.display().to_string(), "expected 16-bit PGM (maxval 65535)"));
    }
    if rest.len() < w * h * 2 {
        return Err(Error::parse(path.display().to_string(), "truncated PGM payload"));
    }
    let data = rest[..w * h * 2]
        .chunks_exact(2)
        .map(|c| {
            let v = u16::from_be_bytes([c[0], c[1]]);
            if v == 0 {
                f64::NAN
            } else {
                v as f64
            }
        })
        .collect();
    Ok(Grid { width: w, height: h, data })
}

/// Write RGB color as binary PPM.
pub fn write_ppm(path: &Path, color: &Grid<[u8; 3]>) -> Result<()> {
    let mut buf = Vec::with_capacity(32 + color.data.len() * 3);
    buf.extend_from_slice(format!("P6\n{} {}\n255\n", color.width, color.height).as_bytes());
    for c in &color.data {
        buf.extend_from_slice(c);
    }
    fs::write(path, buf).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Read a binary PPM.
pub fn read_ppm(path: &Path) -> Result<Grid<[u8; 3]>> {
    let bytes =
        fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let (magic, rest) = split_token(&bytes)
        .ok_or_else(|| Error::parse(path.display().to_string(), "missing PPM header"))?;
    if magic != b"P6" {
        return Err(Error::parse(path.display().to_string(), "not a binary PPM (P6)"));
    }
    let (w, rest) = parse_header_int(rest, path)?;
    let (h, rest) = parse_header_int(rest, path)?;
    let (maxval, rest) = parse_header_int(rest, path)?;
    if maxval != 255 {
        return Err(Error::parse(path.display().to_string(), "expected 8-bit PPM (maxval 255)"));
    }
    if rest.len() < w * h * 3 {
        return Err(Error::parse(path.display().to_string(), "truncated PPM payload"));
    }
    let data = rest[..w * h * 3].chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    Ok(Grid { width: w, height: h, data })
}

/// Write a raster as raw little-endian f32 at `path` with dimensions in a
/// `<path>.hdr` sidecar. NaN is preserved and marks invalid pixels.
pub fn write_f32_raster(path: &Path, raster: &Grid<f64>) -> Result<()> {
    let header = format!("width={}\nheight={}\n", raster.width, raster.height);
    let hdr_path = sidecar(path);
    fs::write(&hdr_path, header)
        .map_err(|e| Error::io(format!("writing {}", hdr_path.display()), e))?;
    let mut file =
        fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut buf = Vec::with_capacity(raster.data.len() * 4);
    for &v in &raster.data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    file.write_all(&buf).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Read a raw f32 raster with its `<path>.hdr` sidecar.
pub fn read_f32_raster(path: &Path) -> Result<Grid<f64>> {
    let hdr_path = sidecar(path);
    let header = fs::read_to_string(&hdr_path)
        .map_err(|e| Error::io(format!("reading {}", hdr_path.display()), e))?;
    let map = super::kv::parse_str(&header, &hdr_path.display().to_string())?;
    let width = super::kv::get_usize(&map, "width", &hdr_path)?;
    let height = super::kv::get_usize(&map, "height", &hdr_path)?;
    let mut file =
        fs::File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    if bytes.len() < width * height * 4 {
        return Err(Error::parse(path.display().to_string(), "truncated f32 raster"));
    }
    let data = bytes[..width * height * 4]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(Grid { width, height, data })
}

fn sidecar(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".hdr");
    std::path::PathBuf::from(s)
}

fn split_token(bytes: &[u8]) -> Option<(&[u8], &[u8])> {
    let start = bytes.iter().position(|b| !b.is_ascii_whitespace())?;
    let rest = &bytes[start..];
    let end = rest.iter().position(|b| b.is_ascii_whitespace()).unwrap_or(rest.len());
    Some((&rest[..end], &rest[end..]))
}

fn parse_header_int<'a>(bytes: &'a [u8], path: &Path) -> Result<(usize, &'a [u8])> {
    let (tok, rest) = split_token(bytes)
        .ok_or_else(|| Error::parse(path.display().to_string(), "truncated PNM header"))?;
    let value = std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::parse(path.display().to_string(), "bad integer in PNM header"))?;
    // exactly one whitespace byte separates the last header field from payload
    Ok((value, rest.get(1..).unwrap_or(&[])))
}
