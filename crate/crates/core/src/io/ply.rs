//! ASCII PLY export/import of the point model.
//!
//! Vertices carry position, normal, color, the fusion weight and the
//! stability flag, so a dumped model can be reloaded to resume a run.

use std::io::{BufWriter, Write};
use std::path::Path;

use crate::fusion::ModelPoint;
use crate::{Error, Result, Vec3};

const PROPERTIES: [&str; 11] =
    ["x", "y", "z", "nx", "ny", "nz", "red", "green", "blue", "weight", "stable"];

pub fn write_ply(path: &Path, model: &[ModelPoint]) -> Result<()> {
    let file = std::fs::File::create(path)
        .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(format!("writing {}", path.display()), e);
    writeln!(w, "ply\nformat ascii 1.0").map_err(io_err)?;
    writeln!(w, "element vertex {}", model.len()).map_err(io_err)?;
    for prop in PROPERTIES {
        let ty = match prop {
            "red" | "green" | "blue" | "stable" => "uchar",
            _ => "float",
        };
        writeln!(w, "property {ty} {prop}").map_err(io_err)?;
    }
    writeln!(w, "end_header").map_err(io_err)?;
    for p in model {
        let [r, g, b] = p.color.map(|c| c.round().clamp(0.0, 255.0) as u8);
        writeln!(
            w,
            "{} {} {} {} {} {} {r} {g} {b} {} {}",
            p.position.x,
            p.position.y,
            p.position.z,
            p.normal.x,
            p.normal.y,
            p.normal.z,
            p.weight,
            u8::from(p.stable),
        )
        .map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Read a model written by [`write_ply`]. Time stamps restart at zero.
pub fn read_ply(path: &Path) -> Result<Vec<ModelPoint>> {
    let origin = path.display().to_string();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut lines = text.lines();
    let bad = |msg: &str| Error::parse(origin.clone(), msg.to_string());
    if lines.next() != Some("ply") {
        return Err(bad("missing ply magic"));
    }
    if lines.next() != Some("format ascii 1.0") {
        return Err(bad("only ascii 1.0 is supported"));
    }
    let mut count = None;
    let mut props = Vec::new();
    for line in lines.by_ref() {
        if line == "end_header" {
            break;
        }
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("element") => {
                if tok.next() != Some("vertex") {
                    return Err(bad("only vertex elements are supported"));
                }
                count = tok.next().and_then(|s| s.parse::<usize>().ok());
                if count.is_none() {
                    return Err(bad("bad vertex count"));
                }
            }
            Some("property") => {
                let _ty = tok.next();
                if let Some(name) = tok.next() {
                    props.push(name.to_string());
                }
            }
            Some("comment") => {}
            _ => return Err(bad("unexpected header line")),
        }
    }
    if props != PROPERTIES {
        return Err(bad("unexpected vertex property layout"));
    }
    let count = count.ok_or_else(|| bad("missing vertex element"))?;
    let mut model = Vec::with_capacity(count);
    for _ in 0..count {
        let line = lines.next().ok_or_else(|| bad("truncated vertex list"))?;
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("bad vertex value"))?;
        if vals.len() != PROPERTIES.len() {
            return Err(bad("wrong number of vertex values"));
        }
        model.push(ModelPoint {
            position: Vec3::new(vals[0], vals[1], vals[2]),
            normal: Vec3::new(vals[3], vals[4], vals[5]),
            color: [vals[6], vals[7], vals[8]],
            weight: vals[9],
            stable: vals[10] != 0.0,
            time_stamp: 0,
        });
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_model() -> Vec<ModelPoint> {
        (0..5)
            .map(|i| ModelPoint {
                position: Vec3::new(i as f64 * 0.25, -1.5, 50.0 + i as f64),
                normal: Vec3::new(0.0, 0.0, -1.0),
                color: [10.0 * i as f64, 128.0, 200.0],
                weight: 1.0 + i as f64 * 0.5,
                time_stamp: i,
                stable: i % 2 == 0,
            })
            .collect()
    }

    #[test]
    fn roundtrip_preserves_geometry_weight_and_stability() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ply");
        let model = sample_model();
        write_ply(&path, &model).unwrap();
        let back = read_ply(&path).unwrap();
        assert_eq!(back.len(), model.len());
        for (a, b) in model.iter().zip(&back) {
            assert_eq!(a.position, b.position);
            assert_eq!(a.normal, b.normal);
            assert_eq!(a.weight, b.weight);
            assert_eq!(a.stable, b.stable);
            assert_eq!(b.time_stamp, 0);
            for (ca, cb) in a.color.iter().zip(&b.color) {
                assert!((ca - cb).abs() <= 0.5);
            }
        }
    }

    #[test]
    fn rejects_foreign_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ply");
        std::fs::write(
            &path,
            "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nend_header\n0\n",
        )
        .unwrap();
        assert!(read_ply(&path).is_err());
    }
}
