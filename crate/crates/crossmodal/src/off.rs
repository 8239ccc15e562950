//! ASCII OFF meshes.
//!
//! The reader accepts polygon faces (fan-triangulated from their first
//! vertex), `#` comments, trailing per-face colour values and the glued
//! `OFF<v> <f> <e>` header some ModelNet files carry. The writer emits
//! `OFF`, `V F 0`, one vertex per line and one `3 i j k` line per face, with
//! shortest round-trip decimal floats so that reading back is exact.

use std::fmt::Write as _;
use std::path::Path;

use crossmodal_core::mesh::TriangleMesh;

use crate::error::{Error, IoContext, Result};

/// Parses an OFF document into a triangle mesh without a label.
pub fn parse_off(raw: &[u8]) -> Result<TriangleMesh> {
    let text = std::str::from_utf8(raw).map_err(|_| Error::Format("OFF input is not ASCII".into()))?;
    let mut lines = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty());

    let header = lines.next().ok_or_else(|| Error::Format("empty input, expected `OFF` header".into()))?;
    let rest = header
        .strip_prefix("OFF")
        .ok_or_else(|| Error::Format(format!("expected `OFF` header, found `{header}`")))?
        .trim();
    let counts_line = if rest.is_empty() {
        lines.next().ok_or_else(|| Error::Truncated("missing counts line".into()))?
    } else {
        rest
    };
    let counts: Vec<usize> = counts_line
        .split_whitespace()
        .take(2)
        .map(|t| t.parse().map_err(|_| Error::Format(format!("bad count `{t}`"))))
        .collect::<Result<_>>()?;
    let [nv, nf] = counts[..] else {
        return Err(Error::Format(format!("counts line `{counts_line}` needs vertex and face counts")));
    };

    let mut vertices = Vec::with_capacity(nv);
    for i in 0..nv {
        let line = lines
            .next()
            .ok_or_else(|| Error::Truncated(format!("declared {nv} vertices, found {i}")))?;
        let coords: Vec<f64> = line
            .split_whitespace()
            .take(3)
            .map(|t| t.parse().map_err(|_| Error::Format(format!("bad coordinate `{t}` in vertex {i}"))))
            .collect::<Result<_>>()?;
        let [x, y, z] = coords[..] else {
            return Err(Error::Format(format!("vertex {i} has fewer than 3 coordinates")));
        };
        vertices.push([x, y, z]);
    }

    let mut faces = Vec::with_capacity(nf);
    for i in 0..nf {
        let line = lines
            .next()
            .ok_or_else(|| Error::Truncated(format!("declared {nf} faces, found {i}")))?;
        let mut tokens = line.split_whitespace();
        let n: usize = tokens
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::Format(format!("bad vertex count in face {i}")))?;
        if n < 3 {
            return Err(Error::Format(format!("face {i} has {n} vertices")));
        }
        let idx: Vec<u32> = tokens
            .take(n)
            .map(|t| {
                let v: usize = t.parse().map_err(|_| Error::Format(format!("bad index `{t}` in face {i}")))?;
                if v >= nv {
                    return Err(Error::Index(format!("face {i} references vertex {v} of {nv}")));
                }
                Ok(v as u32)
            })
            .collect::<Result<_>>()?;
        if idx.len() < n {
            return Err(Error::Format(format!("face {i} declares {n} indices, found {}", idx.len())));
        }
        for j in 1..n - 1 {
            faces.push([idx[0], idx[j], idx[j + 1]]);
        }
    }
    Ok(TriangleMesh::new(vertices, faces, None)?)
}

pub fn serialize_off(mesh: &TriangleMesh) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "OFF");
    let _ = writeln!(out, "{} {} 0", mesh.vertices().len(), mesh.faces().len());
    for [x, y, z] in mesh.vertices() {
        let _ = writeln!(out, "{x} {y} {z}");
    }
    for [a, b, c] in mesh.faces() {
        let _ = writeln!(out, "3 {a} {b} {c}");
    }
    out
}

pub fn read_off(path: &Path) -> Result<TriangleMesh> {
    let raw = std::fs::read(path).at(path)?;
    parse_off(&raw)
}

pub fn write_off(path: &Path, mesh: &TriangleMesh) -> Result<()> {
    std::fs::write(path, serialize_off(mesh)).at(path)
}
