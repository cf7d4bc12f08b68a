//! Plain-text tetrahedral mesh format.
//!
//! ```text
//! tetmesh v1
//! vertices <N>
//! <x> <y> <z>            N lines, meters
//! tets <M>
//! <a> <b> <c> <d>        M lines, zero-based, positive orientation
//! fixed <K>              optional
//! <i> <j> ...            K indices, any line breaks
//! marked <F>             optional
//! <a> <b> <c>            F surface triangles given by vertex indices
//! ```
//!
//! Blank lines and lines starting with `#` are ignored. Floats are written in
//! shortest round-trip form, so write-then-read reproduces the mesh exactly.

use std::fmt::Write as _;
use std::path::Path;

use super::{GeometryError, Result, TetMesh};
use crate::Vec3;

pub const MESH_FORMAT_HEADER: &str = "tetmesh v1";

struct Lines<'a> {
    inner: std::iter::Peekable<std::iter::Enumerate<std::str::Lines<'a>>>,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            inner: text.lines().enumerate().peekable(),
        }
    }

    fn skip_blank(&mut self) {
        while let Some((_, l)) = self.inner.peek() {
            let t = l.trim();
            if t.is_empty() || t.starts_with('#') {
                self.inner.next();
            } else {
                break;
            }
        }
    }

    fn next(&mut self) -> Option<(usize, &'a str)> {
        self.skip_blank();
        self.inner.next().map(|(i, l)| (i + 1, l.trim()))
    }

    fn peek_line(&mut self) -> usize {
        self.skip_blank();
        self.inner.peek().map(|(i, _)| i + 1).unwrap_or(0)
    }
}

fn parse_err(line: usize, reason: impl Into<String>) -> GeometryError {
    GeometryError::Parse {
        line,
        reason: reason.into(),
    }
}

fn section(lines: &mut Lines, name: &str) -> Result<Option<usize>> {
    lines.skip_blank();
    let Some(&(_, raw)) = lines.inner.peek() else {
        return Ok(None);
    };
    let mut parts = raw.split_whitespace();
    if parts.next() != Some(name) {
        return Ok(None);
    }
    let (line, _) = lines.next().unwrap();
    let count = parts
        .next()
        .and_then(|c| c.parse::<usize>().ok())
        .ok_or_else(|| parse_err(line, format!("expected `{name} <count>`")))?;
    Ok(Some(count))
}

fn numbers<T: std::str::FromStr>(line: usize, text: &str, expected: usize) -> Result<Vec<T>> {
    let values: std::result::Result<Vec<T>, _> = text.split_whitespace().map(str::parse).collect();
    let values = values.map_err(|_| parse_err(line, format!("malformed numbers in `{text}`")))?;
    if values.len() != expected {
        return Err(parse_err(
            line,
            format!("expected {expected} values, found {}", values.len()),
        ));
    }
    Ok(values)
}

pub fn parse_tet_mesh(text: &str) -> Result<TetMesh> {
    let mut lines = Lines::new(text);
    match lines.next() {
        Some((_, h)) if h == MESH_FORMAT_HEADER => {}
        Some((line, h)) => {
            return Err(parse_err(
                line,
                format!("unsupported header `{h}`, expected `{MESH_FORMAT_HEADER}`"),
            ))
        }
        None => return Err(parse_err(0, "empty file")),
    }

    let n = section(&mut lines, "vertices")?
        .ok_or_else(|| parse_err(lines.peek_line(), "missing `vertices` section"))?;
    let mut vertices = Vec::with_capacity(n);
    for _ in 0..n {
        let (line, text) = lines
            .next()
            .ok_or_else(|| parse_err(0, "unexpected end of file in vertices"))?;
        let v: Vec<f64> = numbers(line, text, 3)?;
        if v.iter().any(|c| !c.is_finite()) {
            return Err(parse_err(line, "non-finite coordinate"));
        }
        vertices.push(Vec3::new(v[0], v[1], v[2]));
    }

    let m = section(&mut lines, "tets")?
        .ok_or_else(|| parse_err(lines.peek_line(), "missing `tets` section"))?;
    let mut tets = Vec::with_capacity(m);
    for _ in 0..m {
        let (line, text) = lines
            .next()
            .ok_or_else(|| parse_err(0, "unexpected end of file in tets"))?;
        let t: Vec<usize> = numbers(line, text, 4)?;
        tets.push([t[0], t[1], t[2], t[3]]);
    }

    let mut fixed = Vec::new();
    if let Some(k) = section(&mut lines, "fixed")? {
        while fixed.len() < k {
            let (line, text) = lines
                .next()
                .ok_or_else(|| parse_err(0, "unexpected end of file in fixed"))?;
            for tok in text.split_whitespace() {
                fixed.push(
                    tok.parse::<usize>()
                        .map_err(|_| parse_err(line, format!("bad index `{tok}`")))?,
                );
            }
        }
        if fixed.len() != k {
            return Err(parse_err(lines.peek_line(), "fixed count mismatch"));
        }
    }

    let mut marked = Vec::new();
    if let Some(f) = section(&mut lines, "marked")? {
        for _ in 0..f {
            let (line, text) = lines
                .next()
                .ok_or_else(|| parse_err(0, "unexpected end of file in marked"))?;
            let t: Vec<usize> = numbers(line, text, 3)?;
            marked.push([t[0], t[1], t[2]]);
        }
    }

    if let Some((line, text)) = lines.next() {
        return Err(parse_err(line, format!("unexpected content `{text}`")));
    }

    TetMesh::new(vertices, tets)?
        .with_fixed(fixed)?
        .with_marked_triples(&marked)
}

pub fn load_tet_mesh(path: impl AsRef<Path>) -> Result<TetMesh> {
    let text = std::fs::read_to_string(path)?;
    parse_tet_mesh(&text)
}

pub fn write_tet_mesh(mesh: &TetMesh) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{MESH_FORMAT_HEADER}");
    let _ = writeln!(out, "vertices {}", mesh.vertices.len());
    for v in &mesh.vertices {
        let _ = writeln!(out, "{} {} {}", v.x, v.y, v.z);
    }
    let _ = writeln!(out, "tets {}", mesh.tets.len());
    for t in &mesh.tets {
        let _ = writeln!(out, "{} {} {} {}", t[0], t[1], t[2], t[3]);
    }
    if !mesh.fixed.is_empty() {
        let _ = writeln!(out, "fixed {}", mesh.fixed.len());
        for chunk in mesh.fixed.chunks(16) {
            let line: Vec<String> = chunk.iter().map(|i| i.to_string()).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
    }
    if !mesh.marked.is_empty() {
        let _ = writeln!(out, "marked {}", mesh.marked.len());
        for &f in &mesh.marked {
            let t = mesh.surface.faces[f];
            let _ = writeln!(out, "{} {} {}", t[0], t[1], t[2]);
        }
    }
    out
}
