//! Wavefront OBJ and STL (ASCII and binary) triangle mesh readers.

use std::io::{BufRead, Read};
use std::path::Path;

use nalgebra::Vector3;

use crate::scene::{Mesh, Triangle};
use crate::SimError;

fn parse_err(line: usize, msg: impl std::fmt::Display) -> SimError {
    SimError::Mesh(format!("line {line}: {msg}"))
}

/// Polygon faces are fan-triangulated; texture and normal indices are
/// ignored and negative (relative) indices are supported.
pub fn read_obj<R: BufRead>(reader: R, label: &str) -> Result<Mesh, SimError> {
    let mut verts: Vec<Vector3<f64>> = Vec::new();
    let mut triangles = Vec::new();
    for (no, line) in reader.lines().enumerate() {
        let line = line?;
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let xyz: Vec<f64> = it
                    .take(3)
                    .map(|s| s.parse::<f64>().map_err(|e| parse_err(no + 1, e)))
                    .collect::<Result<_, _>>()?;
                if xyz.len() != 3 {
                    return Err(parse_err(no + 1, "vertex needs three coordinates"));
                }
                verts.push(Vector3::new(xyz[0], xyz[1], xyz[2]));
            }
            Some("f") => {
                let idx: Vec<usize> = it
                    .map(|tok| {
                        let first = tok.split('/').next().unwrap_or("");
                        let i: i64 = first.parse().map_err(|e| parse_err(no + 1, e))?;
                        let resolved = if i < 0 { verts.len() as i64 + i } else { i - 1 };
                        if resolved < 0 || resolved as usize >= verts.len() {
                            return Err(parse_err(no + 1, format!("vertex index {i} out of range")));
                        }
                        Ok(resolved as usize)
                    })
                    .collect::<Result<_, _>>()?;
                if idx.len() < 3 {
                    return Err(parse_err(no + 1, "face needs at least three vertices"));
                }
                for k in 1..idx.len() - 1 {
                    triangles.push(Triangle::new(verts[idx[0]], verts[idx[k]], verts[idx[k + 1]]));
                }
            }
            _ => {}
        }
    }
    Ok(Mesh { label: label.to_string(), triangles })
}

/// Detects ASCII versus binary STL from the content, not the header word:
/// binary files may also start with "solid".
pub fn read_stl<R: Read>(mut reader: R, label: &str) -> Result<Mesh, SimError> {
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    if bytes.len() >= 84 {
        let n = u32::from_le_bytes(bytes[80..84].try_into().unwrap()) as usize;
        if bytes.len() == 84 + 50 * n {
            return Ok(read_binary_stl(&bytes[84..], n, label));
        }
    }
    let text = std::str::from_utf8(&bytes).map_err(|_| SimError::Mesh("STL is neither binary nor ASCII".into()))?;
    read_ascii_stl(text, label)
}

fn read_binary_stl(body: &[u8], n: usize, label: &str) -> Mesh {
    let f = |b: &[u8], k: usize| f32::from_le_bytes(b[4 * k..4 * k + 4].try_into().unwrap()) as f64;
    let triangles = (0..n)
        .map(|i| {
            let rec = &body[50 * i..50 * i + 50];
            let v = |j: usize| Vector3::new(f(rec, 3 + 3 * j), f(rec, 4 + 3 * j), f(rec, 5 + 3 * j));
            Triangle::new(v(0), v(1), v(2))
        })
        .collect();
    Mesh { label: label.to_string(), triangles }
}

fn read_ascii_stl(text: &str, label: &str) -> Result<Mesh, SimError> {
    let mut triangles = Vec::new();
    let mut pending = Vec::with_capacity(3);
    for (no, line) in text.lines().enumerate() {
        let mut it = line.split_whitespace();
        match it.next() {
            Some("vertex") => {
                let xyz: Vec<f64> = it
                    .map(|s| s.parse::<f64>().map_err(|e| parse_err(no + 1, e)))
                    .collect::<Result<_, _>>()?;
                if xyz.len() != 3 {
                    return Err(parse_err(no + 1, "vertex needs three coordinates"));
                }
                pending.push(Vector3::new(xyz[0], xyz[1], xyz[2]));
            }
            Some("endfacet") => {
                if pending.len() != 3 {
                    return Err(parse_err(no + 1, format!("facet with {} vertices", pending.len())));
                }
                triangles.push(Triangle::new(pending[0], pending[1], pending[2]));
                pending.clear();
            }
            _ => {}
        }
    }
    Ok(Mesh { label: label.to_string(), triangles })
}

/// Reads by extension (`.obj` or `.stl`), labelling the mesh `label`.
pub fn read_mesh_file(path: &Path, label: &str) -> Result<Mesh, SimError> {
    let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    let file = std::fs::File::open(path)?;
    match ext.as_deref() {
        Some("obj") => read_obj(std::io::BufReader::new(file), label),
        Some("stl") => read_stl(file, label),
        _ => Err(SimError::Mesh(format!("unsupported mesh format: {}", path.display()))),
    }
}
