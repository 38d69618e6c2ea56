//! Minimal Wavefront OBJ reader/writer (`v`, `vt`, `f` records).
//!
//! Coordinates are written with Rust's shortest round-trip float formatting,
//! so load → save → load reproduces vertices and UVs bit for bit.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Point3;

use super::{Mesh, UvMap};
use crate::error::{Error, Result};

pub fn load_mesh(path: impl AsRef<Path>) -> Result<Mesh> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_obj(&text, path)
}

pub fn save_mesh(path: impl AsRef<Path>, mesh: &Mesh) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_obj(mesh)).map_err(|e| Error::io(path, e))
}

pub fn parse_obj(text: &str, source: &Path) -> Result<Mesh> {
    let mut vertices = Vec::new();
    let mut coords = Vec::new();
    let mut faces = Vec::new();
    let mut uv_corners: Vec<Option<[usize; 3]>> = Vec::new();

    let parse_err = |line: usize, message: String| Error::Parse {
        path: source.to_path_buf(),
        line,
        message,
    };

    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        let mut parts = content.split_whitespace();
        let Some(tag) = parts.next() else { continue };
        match tag {
            "v" => {
                let xyz = parse_floats(parts, 3).map_err(|m| parse_err(line, m))?;
                vertices.push(Point3::new(xyz[0], xyz[1], xyz[2]));
            }
            "vt" => {
                let uv = parse_floats(parts, 2).map_err(|m| parse_err(line, m))?;
                coords.push([uv[0], uv[1]]);
            }
            "f" => {
                let corners: Vec<&str> = parts.collect();
                let face_index = faces.len();
                if corners.len() != 3 {
                    return Err(Error::NonTriangleFace {
                        face: face_index,
                        corners: corners.len(),
                    });
                }
                let mut v = [0usize; 3];
                let mut t = [None; 3];
                for (k, corner) in corners.iter().enumerate() {
                    let mut fields = corner.split('/');
                    let vi = fields.next().unwrap_or("");
                    v[k] = resolve_index(vi, vertices.len()).map_err(|m| parse_err(line, m))?;
                    if let Some(ti) = fields.next().filter(|s| !s.is_empty()) {
                        t[k] = Some(resolve_index(ti, coords.len()).map_err(|m| parse_err(line, m))?);
                    }
                }
                let uv = match t {
                    [Some(a), Some(b), Some(c)] => Some([a, b, c]),
                    [None, None, None] => None,
                    _ => return Err(parse_err(line, "face mixes corners with and without texture indices".into())),
                };
                faces.push(v);
                uv_corners.push(uv);
            }
            _ => {}
        }
    }

    let uv = if uv_corners.iter().all(Option::is_some) && !uv_corners.is_empty() {
        Some(UvMap {
            coords,
            corners: uv_corners.into_iter().flatten().collect(),
        })
    } else if uv_corners.iter().any(Option::is_some) {
        return Err(parse_err(0, "texture indices present on some faces but not all".into()));
    } else {
        None
    };
    Mesh::new(vertices, faces, uv)
}

fn parse_floats<'a>(parts: impl Iterator<Item = &'a str>, n: usize) -> std::result::Result<Vec<f64>, String> {
    let values: Vec<f64> = parts
        .take(n)
        .map(|s| s.parse::<f64>().map_err(|e| format!("bad number '{s}': {e}")))
        .collect::<std::result::Result<_, _>>()?;
    if values.len() != n {
        return Err(format!("expected {n} coordinates, found {}", values.len()));
    }
    Ok(values)
}

fn resolve_index(token: &str, count: usize) -> std::result::Result<usize, String> {
    let raw: i64 = token.parse().map_err(|_| format!("bad index '{token}'"))?;
    let idx = if raw > 0 {
        raw - 1
    } else if raw < 0 {
        count as i64 + raw
    } else {
        return Err("index 0 is not valid in OBJ".into());
    };
    if idx < 0 || idx as usize >= count {
        return Err(format!("index {raw} out of range ({count} defined)"));
    }
    Ok(idx as usize)
}

pub fn write_obj(mesh: &Mesh) -> String {
    let mut out = String::new();
    for p in mesh.vertices() {
        let _ = writeln!(out, "v {} {} {}", p.x, p.y, p.z);
    }
    match mesh.uv() {
        Some(uv) => {
            for c in &uv.coords {
                let _ = writeln!(out, "vt {} {}", c[0], c[1]);
            }
            for (f, t) in mesh.faces().iter().zip(&uv.corners) {
                let _ = writeln!(
                    out,
                    "f {}/{} {}/{} {}/{}",
                    f[0] + 1,
                    t[0] + 1,
                    f[1] + 1,
                    t[1] + 1,
                    f[2] + 1,
                    t[2] + 1
                );
            }
        }
        None => {
            for f in mesh.faces() {
                let _ = writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
            }
        }
    }
    out
}
