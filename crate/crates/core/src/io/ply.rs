//! Gaussian point clouds in the common 3DGS PLY layout.
//!
//! The vertex element carries `x y z nx ny nz f_dc_0..2 f_rest_0..44
//! opacity scale_0..2 rot_0..3` as little-endian `f32`. `f_rest` is channel
//! major: index `c * 15 + (k - 1)` holds SH basis `k` of channel `c`.
//! `opacity` is the logit and `scale_*` the log-scale, as in training.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{Gaussian, Vec3, SH_COEFFS};
use crate::io::init::INIT_OPACITY;

const REST: usize = SH_COEFFS - 1;

fn property_names() -> Vec<String> {
    let mut names: Vec<String> = ["x", "y", "z", "nx", "ny", "nz"].iter().map(|s| s.to_string()).collect();
    names.extend((0..3).map(|i| format!("f_dc_{i}")));
    names.extend((0..3 * REST).map(|i| format!("f_rest_{i}")));
    names.push("opacity".into());
    names.extend((0..3).map(|i| format!("scale_{i}")));
    names.extend((0..4).map(|i| format!("rot_{i}")));
    names
}

pub fn encode_gs_ply(gaussians: &[Gaussian]) -> Vec<u8> {
    let names = property_names();
    let mut out = format!("ply\nformat binary_little_endian 1.0\nelement vertex {}\n", gaussians.len());
    for n in &names {
        out.push_str(&format!("property float {n}\n"));
    }
    out.push_str("end_header\n");
    let mut bytes = out.into_bytes();
    for g in gaussians {
        let mut row = Vec::with_capacity(names.len());
        row.extend(g.position.iter().copied());
        row.extend([0.0; 3]);
        row.extend(g.sh[0]);
        for c in 0..3 {
            for k in 1..SH_COEFFS {
                row.push(g.sh[k][c]);
            }
        }
        row.push(g.opacity_logit);
        row.extend(g.log_scale.iter().copied());
        row.extend(g.rotation);
        for v in row {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    bytes
}

pub fn export_gs_ply(path: &Path, gaussians: &[Gaussian]) -> Result<()> {
    std::fs::write(path, encode_gs_ply(gaussians)).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy)]
enum Scalar {
    U8,
    I8,
    U16,
    I16,
    U32,
    I32,
    F32,
    F64,
}

impl Scalar {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "uchar" | "uint8" => Scalar::U8,
            "char" | "int8" => Scalar::I8,
            "ushort" | "uint16" => Scalar::U16,
            "short" | "int16" => Scalar::I16,
            "uint" | "uint32" => Scalar::U32,
            "int" | "int32" => Scalar::I32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::U8 | Scalar::I8 => 1,
            Scalar::U16 | Scalar::I16 => 2,
            Scalar::U32 | Scalar::I32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Scalar::U8 => b[0] as f64,
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

/// Vertex rows of a PLY file keyed by property name.
struct VertexTable {
    names: HashMap<String, usize>,
    rows: Vec<Vec<f64>>,
}

impl VertexTable {
    fn get(&self, row: usize, name: &str) -> Option<f64> {
        self.names.get(name).map(|&i| self.rows[row][i])
    }
}

fn parse_ply(path: &Path, bytes: &[u8]) -> Result<VertexTable> {
    let bad = |msg: String| Error::parse(path, "header", msg);
    let marker = b"end_header\n";
    let end = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| bad("missing end_header".into()))?;
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("header is not UTF-8".into()))?;
    let body = &bytes[end + marker.len()..];
    let mut lines = header.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(bad("not a PLY file".into()));
    }
    let mut ascii = false;
    let mut vertex_count = None;
    let mut in_vertex = false;
    let mut before_vertex = 0usize;
    let mut props: Vec<(String, Scalar)> = Vec::new();
    for line in lines {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["format", "ascii", _] => ascii = true,
            ["format", "binary_little_endian", _] => ascii = false,
            ["format", f, _] => return Err(bad(format!("unsupported format {f}"))),
            ["element", "vertex", n] => {
                vertex_count = Some(n.parse::<usize>().map_err(|_| bad(format!("bad vertex count {n}")))?);
                in_vertex = true;
            }
            ["element", _, n] => {
                if vertex_count.is_none() && n.parse::<usize>().map_or(true, |n| n > 0) {
                    before_vertex += 1;
                }
                in_vertex = false;
            }
            ["property", "list", ..] if in_vertex => return Err(bad("list properties on vertices are not supported".into())),
            ["property", ty, name] if in_vertex => {
                let s = Scalar::parse(ty).ok_or_else(|| bad(format!("unknown property type {ty}")))?;
                props.push((name.to_string(), s));
            }
            _ => {}
        }
    }
    if before_vertex > 0 {
        return Err(bad("the vertex element must come first".into()));
    }
    let n = vertex_count.ok_or_else(|| bad("no vertex element".into()))?;
    let mut rows = Vec::with_capacity(n);
    if ascii {
        let text = std::str::from_utf8(body).map_err(|_| Error::parse(path, "body", "not UTF-8"))?;
        let mut it = text.split_whitespace();
        for r in 0..n {
            let mut row = Vec::with_capacity(props.len());
            for (name, _) in &props {
                let tok = it.next().ok_or_else(|| Error::parse(path, format!("vertex {r}"), "file ends early"))?;
                row.push(tok.parse::<f64>().map_err(|_| Error::parse(path, format!("vertex {r}.{name}"), format!("bad number {tok:?}")))?);
            }
            rows.push(row);
        }
    } else {
        let stride: usize = props.iter().map(|(_, s)| s.size()).sum();
        if body.len() < n * stride {
            return Err(Error::parse(path, "body", format!("expected {} bytes of vertices, found {}", n * stride, body.len())));
        }
        for r in 0..n {
            let mut off = r * stride;
            let mut row = Vec::with_capacity(props.len());
            for (_, s) in &props {
                row.push(s.read(&body[off..]));
                off += s.size();
            }
            rows.push(row);
        }
    }
    let names = props.into_iter().enumerate().map(|(i, (n, _))| (n, i)).collect();
    Ok(VertexTable { names, rows })
}

/// Reads Gaussians. Only `x y z` are required; missing properties fall
/// back to an isotropic splat sized by
/// [`neighbor_scales`](crate::io::init::neighbor_scales), with opacity 0.1
/// and zero SH. A plain point cloud with `red green blue` bytes gets those
/// as the diffuse color.
pub fn import_gs_ply(path: &Path) -> Result<Vec<Gaussian>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let t = parse_ply(path, &bytes)?;
    for req in ["x", "y", "z"] {
        if !t.names.contains_key(req) {
            return Err(Error::parse(path, req, "required vertex property is missing"));
        }
    }
    let positions: Vec<Vec3> = (0..t.rows.len())
        .map(|r| Vec3::new(t.get(r, "x").unwrap(), t.get(r, "y").unwrap(), t.get(r, "z").unwrap()))
        .collect();
    let has_scale = (0..3).all(|i| t.names.contains_key(&format!("scale_{i}")));
    let default_scales = if has_scale {
        Vec::new()
    } else {
        crate::io::init::neighbor_scales(&positions)
    };
    let mut out = Vec::with_capacity(t.rows.len());
    for (r, p) in positions.iter().enumerate() {
        let mut g = Gaussian::new(*p, default_scales.get(r).copied().unwrap_or(1.0), INIT_OPACITY);
        if let Some(o) = t.get(r, "opacity") {
            g.opacity_logit = o;
        }
        for i in 0..3 {
            if let Some(s) = t.get(r, &format!("scale_{i}")) {
                g.log_scale[i] = s;
            }
            if let Some(d) = t.get(r, &format!("f_dc_{i}")) {
                g.sh[0][i] = d;
            } else if let Some(c) = t.get(r, ["red", "green", "blue"][i]) {
                g.sh[0][i] = (c / 255.0 - 0.5) / crate::appearance::SH_C0;
            }
        }
        for c in 0..3 {
            for k in 1..SH_COEFFS {
                if let Some(v) = t.get(r, &format!("f_rest_{}", c * REST + k - 1)) {
                    g.sh[k][c] = v;
                }
            }
        }
        if (0..4).all(|i| t.names.contains_key(&format!("rot_{i}"))) {
            for i in 0..4 {
                g.rotation[i] = t.get(r, &format!("rot_{i}")).unwrap();
            }
            g.normalize_rotation();
        }
        if !g.params().iter().all(|v| v.is_finite()) {
            return Err(Error::parse(path, format!("vertex {r}"), "non-finite value"));
        }
        out.push(g);
    }
    Ok(out)
}
