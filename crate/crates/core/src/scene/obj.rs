//! Wavefront OBJ reading and writing.
//!
//! Supported statements: `v x y z [r g b]`, `vt u v`, `vn`, and `f` with any of
//! the `v`, `v/vt`, `v//vn`, `v/vt/vn` corner forms. Indices are 1-based;
//! negative indices count back from the most recent element. Everything else
//! (`o`, `g`, `s`, `usemtl`, `mtllib`, ...) is ignored.
//!
//! Texture coordinates are attached per vertex: the first face corner that
//! pairs a vertex with a `vt` decides that vertex's uv.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::mesh::Mesh;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct ObjOptions {
    /// Split polygons with more than three corners into triangle fans.
    pub fan_triangulate: bool,
}

impl Default for ObjOptions {
    fn default() -> Self {
        ObjOptions { fan_triangulate: true }
    }
}

pub fn load_obj(path: impl AsRef<Path>) -> Result<Mesh> {
    load_obj_with(path, ObjOptions::default())
}

pub fn load_obj_with(path: impl AsRef<Path>, options: ObjOptions) -> Result<Mesh> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    parse_obj(&text, path, options)
}

pub fn parse_obj(text: &str, path: &Path, options: ObjOptions) -> Result<Mesh> {
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut positions: Vec<[f64; 3]> = Vec::new();
    let mut colors: Vec<Option<[f32; 3]>> = Vec::new();
    let mut texcoords: Vec<[f32; 2]> = Vec::new();
    let mut normal_count = 0usize;
    let mut triangles: Vec<[u32; 3]> = Vec::new();
    let mut vertex_uv: Vec<Option<[f32; 2]>> = Vec::new();
    let mut any_uv = false;

    for (lineno, raw) in text.lines().enumerate() {
        let line_no = lineno + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        let mut tokens = line.split_whitespace();
        let Some(keyword) = tokens.next() else {
            continue;
        };
        let rest: Vec<&str> = tokens.collect();

        match keyword {
            "v" => {
                if rest.len() != 3 && rest.len() != 6 {
                    return Err(err(line_no, format!("`v` expects 3 or 6 numbers, got {}", rest.len())));
                }
                let nums = parse_floats(&rest).map_err(|m| err(line_no, m))?;
                positions.push([nums[0], nums[1], nums[2]]);
                colors.push(if nums.len() == 6 {
                    Some([nums[3] as f32, nums[4] as f32, nums[5] as f32])
                } else {
                    None
                });
            }
            "vt" => {
                if rest.len() < 2 {
                    return Err(err(line_no, "`vt` expects at least 2 numbers".into()));
                }
                let nums = parse_floats(&rest[..2]).map_err(|m| err(line_no, m))?;
                texcoords.push([nums[0] as f32, nums[1] as f32]);
            }
            "vn" => normal_count += 1,
            "f" => {
                if rest.len() < 3 {
                    return Err(err(line_no, format!("face needs at least 3 corners, got {}", rest.len())));
                }
                if rest.len() > 3 && !options.fan_triangulate {
                    return Err(Error::NonTriangularFace {
                        path: path.to_path_buf(),
                        line: line_no,
                        vertices: rest.len(),
                    });
                }
                let mut corners = Vec::with_capacity(rest.len());
                for token in &rest {
                    let mut parts = token.split('/');
                    let v = resolve_index(parts.next().unwrap_or(""), positions.len())
                        .map_err(|m| err(line_no, m))?;
                    let vt = match parts.next() {
                        Some("") | None => None,
                        Some(s) => Some(resolve_index(s, texcoords.len()).map_err(|m| err(line_no, m))?),
                    };
                    if let Some(s) = parts.next() {
                        if !s.is_empty() {
                            resolve_index(s, normal_count).map_err(|m| err(line_no, m))?;
                        }
                    }
                    if let Some(vt) = vt {
                        any_uv = true;
                        if vertex_uv.len() < positions.len() {
                            vertex_uv.resize(positions.len(), None);
                        }
                        vertex_uv[v].get_or_insert(texcoords[vt]);
                    }
                    corners.push(v as u32);
                }
                for k in 1..corners.len() - 1 {
                    let tri = [corners[0], corners[k], corners[k + 1]];
                    if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
                        return Err(err(line_no, format!("degenerate face {tri:?}")));
                    }
                    triangles.push(tri);
                }
            }
            _ => {}
        }
    }

    let mut mesh = Mesh::new(positions, triangles)?;
    if colors.iter().all(Option::is_some) && !colors.is_empty() {
        mesh.vertex_colors = Some(colors.into_iter().flatten().collect());
    }
    if any_uv {
        vertex_uv.resize(mesh.num_vertices(), None);
        mesh.uvs = Some(vertex_uv.into_iter().map(|uv| uv.unwrap_or([0.0, 0.0])).collect());
    }
    Ok(mesh)
}

fn parse_floats(tokens: &[&str]) -> std::result::Result<Vec<f64>, String> {
    tokens
        .iter()
        .map(|t| t.parse::<f64>().map_err(|_| format!("invalid number `{t}`")))
        .collect()
}

fn resolve_index(token: &str, count: usize) -> std::result::Result<usize, String> {
    let idx: i64 = token
        .parse()
        .map_err(|_| format!("invalid index `{token}`"))?;
    let resolved = match idx {
        0 => return Err("index 0 is invalid (OBJ indices are 1-based)".into()),
        i if i > 0 => i - 1,
        i => count as i64 + i,
    };
    if resolved < 0 || resolved as usize >= count {
        return Err(format!("index {idx} out of range ({count} elements defined so far)"));
    }
    Ok(resolved as usize)
}

/// Serializes positions, optional vertex colors, uvs, and faces.
pub fn obj_string(mesh: &Mesh) -> String {
    let mut out = String::new();
    for (i, p) in mesh.positions.iter().enumerate() {
        match &mesh.vertex_colors {
            Some(c) => {
                let c = c[i];
                writeln!(out, "v {} {} {} {} {} {}", p[0], p[1], p[2], c[0], c[1], c[2]).unwrap();
            }
            None => writeln!(out, "v {} {} {}", p[0], p[1], p[2]).unwrap(),
        }
    }
    if let Some(uvs) = &mesh.uvs {
        for uv in uvs {
            writeln!(out, "vt {} {}", uv[0], uv[1]).unwrap();
        }
    }
    for t in &mesh.triangles {
        let [a, b, c] = t.map(|i| i + 1);
        if mesh.uvs.is_some() {
            writeln!(out, "f {a}/{a} {b}/{b} {c}/{c}").unwrap();
        } else {
            writeln!(out, "f {a} {b} {c}").unwrap();
        }
    }
    out
}

pub fn write_obj(mesh: &Mesh, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, obj_string(mesh))?;
    Ok(())
}
