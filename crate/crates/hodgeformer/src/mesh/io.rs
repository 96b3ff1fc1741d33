//! OBJ and OFF readers plus an OFF writer.
//!
//! Both readers accept only pure triangle meshes; anything else is reported
//! as unsupported topology. Parse failures carry the file path and 1-based
//! line number.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mesh::Mesh;

/// Loads a mesh, picking the format from the file extension
/// (`.obj` / `.off`, case-insensitive).
pub fn load_mesh(path: &Path) -> Result<Mesh> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase());
    match ext.as_deref() {
        Some("obj") => load_obj(path),
        Some("off") => load_off(path),
        _ => Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: "unknown mesh format (expected a .obj or .off file)".into(),
        }),
    }
}

pub fn load_obj(path: &Path) -> Result<Mesh> {
    parse_obj(&fs::read_to_string(path)?, path)
}

pub fn load_off(path: &Path) -> Result<Mesh> {
    parse_off(&fs::read_to_string(path)?, path)
}

pub fn parse_obj(text: &str, path: &Path) -> Result<Mesh> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut vertices: Vec<[f64; 3]> = Vec::new();
    let mut faces: Vec<[usize; 3]> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut tokens = line.split_whitespace();
        match tokens.next().unwrap() {
            "v" => {
                let mut coords = [0.0f64; 3];
                for c in &mut coords {
                    let tok = tokens
                        .next()
                        .ok_or_else(|| err(line_no, "vertex needs 3 coordinates".into()))?;
                    *c = tok
                        .parse()
                        .map_err(|_| err(line_no, format!("bad coordinate {tok:?}")))?;
                }
                vertices.push(coords);
            }
            "f" => {
                let refs: Vec<&str> = tokens.collect();
                if refs.len() != 3 {
                    return Err(Error::UnsupportedTopology(format!(
                        "{}:{line_no}: face with {} vertices; only triangles are supported",
                        path.display(),
                        refs.len()
                    )));
                }
                let mut face = [0usize; 3];
                for (k, r) in refs.iter().enumerate() {
                    // "f v", "f v/vt", "f v/vt/vn", "f v//vn" all start with
                    // the vertex index.
                    let first = r.split('/').next().unwrap();
                    let i: i64 = first
                        .parse()
                        .map_err(|_| err(line_no, format!("bad vertex reference {r:?}")))?;
                    let resolved = if i > 0 {
                        (i - 1) as usize
                    } else if i < 0 && vertices.len() as i64 + i >= 0 {
                        (vertices.len() as i64 + i) as usize
                    } else {
                        return Err(err(line_no, format!("vertex reference {i} out of range")));
                    };
                    if resolved >= vertices.len() {
                        return Err(err(line_no, format!("vertex reference {i} out of range")));
                    }
                    face[k] = resolved;
                }
                faces.push(face);
            }
            // Normals, texture coords, groups, materials, smoothing, lines.
            "vn" | "vt" | "vp" | "g" | "o" | "s" | "usemtl" | "mtllib" | "l" => {}
            other => {
                return Err(err(line_no, format!("unrecognized directive {other:?}")));
            }
        }
    }
    Mesh::new(vertices, faces)
}

pub fn parse_off(text: &str, path: &Path) -> Result<Mesh> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    // Meaningful tokens with the line each came from; comments stripped.
    let mut tokens: Vec<(usize, &str)> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("");
        for tok in line.split_whitespace() {
            tokens.push((idx + 1, tok));
        }
    }
    let mut pos = 0usize;
    let mut next = |what: &str| -> Result<(usize, &str)> {
        let t = tokens
            .get(pos)
            .copied()
            .ok_or_else(|| err(tokens.last().map_or(1, |t| t.0), format!("missing {what}")))?;
        pos += 1;
        Ok(t)
    };

    let (line, magic) = next("OFF header")?;
    if magic != "OFF" {
        return Err(err(line, format!("expected OFF header, found {magic:?}")));
    }
    let mut count = |what: &str| -> Result<usize> {
        let (line, tok) = next(what)?;
        tok.parse()
            .map_err(|_| err(line, format!("bad {what} {tok:?}")))
    };
    let n_v = count("vertex count")?;
    let n_f = count("face count")?;
    let _n_e = count("edge count")?;

    let mut vertices = Vec::with_capacity(n_v);
    for _ in 0..n_v {
        let mut coords = [0.0f64; 3];
        for c in &mut coords {
            let (line, tok) = next("vertex coordinate")?;
            *c = tok
                .parse()
                .map_err(|_| err(line, format!("bad coordinate {tok:?}")))?;
        }
        vertices.push(coords);
    }
    let mut faces = Vec::with_capacity(n_f);
    for _ in 0..n_f {
        let (line, tok) = next("face vertex count")?;
        let k: usize = tok
            .parse()
            .map_err(|_| err(line, format!("bad face size {tok:?}")))?;
        if k != 3 {
            return Err(Error::UnsupportedTopology(format!(
                "{}:{line}: face with {k} vertices; only triangles are supported",
                path.display()
            )));
        }
        let mut face = [0usize; 3];
        for v in &mut face {
            let (line, tok) = next("face vertex index")?;
            *v = tok
                .parse()
                .map_err(|_| err(line, format!("bad vertex index {tok:?}")))?;
            if *v >= n_v {
                return Err(err(line, format!("vertex index {v} out of range (< {n_v})")));
            }
        }
        faces.push(face);
    }
    Mesh::new(vertices, faces)
}

/// Writes OFF with shortest round-trip float formatting, so save/load is
/// byte-deterministic for a given mesh.
pub fn write_off(mesh: &Mesh, path: &Path) -> Result<()> {
    fs::write(path, off_string(mesh))?;
    Ok(())
}

pub fn off_string(mesh: &Mesh) -> String {
    let mut out = String::new();
    out.push_str("OFF\n");
    out.push_str(&format!(
        "{} {} {}\n",
        mesh.n_vertices(),
        mesh.n_faces(),
        mesh.n_edges()
    ));
    for v in &mesh.vertices {
        out.push_str(&format!("{} {} {}\n", v[0], v[1], v[2]));
    }
    for f in mesh.faces() {
        out.push_str(&format!("3 {} {} {}\n", f[0], f[1], f[2]));
    }
    out
}
