//! Binary little-endian PLY for Gaussian checkpoints and meshes.
//!
//! Checkpoint layout per vertex, all `float`: x y z nx ny nz f_dc_0..2
//! f_rest_0..(3·(coeffs−1)−1) opacity scale_0..2 rot_0..3. The optional
//! normals are ignored on load and written as zeros. `f_rest` is stored
//! channel-major: all red coefficients, then green, then blue.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{sh_coeff_count, Gaussian, GaussianCloud, Vec3, MAX_SH_DEGREE};
use crate::sky::SkyModel;
use crate::surface::TriangleMesh;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => f64::from(b[0] as i8),
            Scalar::U8 => f64::from(b[0]),
            Scalar::I16 => f64::from(i16::from_le_bytes([b[0], b[1]])),
            Scalar::U16 => f64::from(u16::from_le_bytes([b[0], b[1]])),
            Scalar::I32 => f64::from(i32::from_le_bytes([b[0], b[1], b[2], b[3]])),
            Scalar::U32 => f64::from(u32::from_le_bytes([b[0], b[1], b[2], b[3]])),
            Scalar::F32 => f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])),
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().expect("8 bytes")),
        }
    }
}

#[derive(Clone, Debug)]
struct Property {
    name: String,
    /// `Some(count type)` for list properties.
    list: Option<Scalar>,
    ty: Scalar,
}

#[derive(Clone, Debug)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

#[derive(Clone, Debug)]
struct Header {
    elements: Vec<Element>,
    comments: Vec<String>,
    body: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    const END: &[u8] = b"end_header";
    let pos = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| Error::format("PLY header has no end_header"))?;
    let mut body = pos + END.len();
    if bytes.get(body) == Some(&b'\r') {
        body += 1;
    }
    if bytes.get(body) != Some(&b'\n') {
        return Err(Error::format("end_header must be followed by a newline"));
    }
    body += 1;
    let text = std::str::from_utf8(&bytes[..pos]).map_err(|_| Error::format("PLY header is not UTF-8"))?;
    let mut lines = text.lines().map(str::trim);
    if lines.next() != Some("ply") {
        return Err(Error::format("missing `ply` magic"));
    }
    let mut elements: Vec<Element> = Vec::new();
    let mut comments = Vec::new();
    let mut format_seen = false;
    for line in lines {
        let mut tok = line.split_whitespace();
        match tok.next() {
            None => {}
            Some("format") => {
                let f = tok.next().unwrap_or("");
                if f != "binary_little_endian" {
                    return Err(Error::format(format!("unsupported PLY format `{f}`; need binary_little_endian")));
                }
                format_seen = true;
            }
            Some("comment") => comments.push(tok.collect::<Vec<_>>().join(" ")),
            Some("obj_info") => {}
            Some("element") => {
                let name = tok.next().ok_or_else(|| Error::format("element without name"))?;
                let count = tok
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| Error::format(format!("element `{name}` has no valid count")))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    props: Vec::new(),
                });
            }
            Some("property") => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| Error::format("property before any element"))?;
                let t = tok.next().unwrap_or("");
                let prop = if t == "list" {
                    let ct = tok.next().and_then(Scalar::parse);
                    let it = tok.next().and_then(Scalar::parse);
                    match (ct, it, tok.next()) {
                        (Some(c), Some(i), Some(n)) => Property {
                            name: n.to_string(),
                            list: Some(c),
                            ty: i,
                        },
                        _ => return Err(Error::format(format!("malformed list property `{line}`"))),
                    }
                } else {
                    match (Scalar::parse(t), tok.next()) {
                        (Some(ty), Some(n)) => Property {
                            name: n.to_string(),
                            list: None,
                            ty,
                        },
                        _ => return Err(Error::format(format!("malformed property `{line}`"))),
                    }
                };
                el.props.push(prop);
            }
            Some(other) => return Err(Error::format(format!("unknown PLY header keyword `{other}`"))),
        }
    }
    if !format_seen {
        return Err(Error::format("PLY header has no format line"));
    }
    Ok(Header { elements, comments, body })
}

/// Raw scalar values of the `vertex` element, row-major, plus property names.
fn read_vertices(bytes: &[u8], header: &Header) -> Result<(Vec<String>, Vec<f64>, usize)> {
    let mut offset = header.body;
    for el in &header.elements {
        if el.props.iter().any(|p| p.list.is_some()) && el.name != "vertex" {
            if el.count == 0 {
                continue;
            }
            return Err(Error::format(format!("list element `{}` before vertex data is not supported", el.name)));
        }
        let stride: usize = el.props.iter().map(|p| p.ty.size()).sum();
        let size = stride
            .checked_mul(el.count)
            .ok_or_else(|| Error::format("PLY element size overflows"))?;
        let end = offset
            .checked_add(size)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::format(format!("PLY body truncated in element `{}`", el.name)))?;
        if el.name == "vertex" {
            if el.props.iter().any(|p| p.list.is_some()) {
                return Err(Error::format("vertex element must not contain list properties"));
            }
            let mut values = Vec::with_capacity(el.count * el.props.len());
            for row in bytes[offset..end].chunks_exact(stride.max(1)).take(el.count) {
                let mut at = 0;
                for p in &el.props {
                    values.push(p.ty.read(&row[at..]));
                    at += p.ty.size();
                }
            }
            let names = el.props.iter().map(|p| p.name.clone()).collect();
            return Ok((names, values, el.count));
        }
        offset = end;
    }
    Err(Error::MissingProperty("vertex".into()))
}

fn cloud_from_vertices(names: &[String], values: &[f64], count: usize) -> Result<GaussianCloud> {
    let col = |name: &str| -> Result<usize> {
        names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::MissingProperty(name.to_string()))
    };
    let rest = names.iter().filter(|n| n.starts_with("f_rest_")).count();
    let degree = (0..=MAX_SH_DEGREE)
        .find(|&d| 3 * (sh_coeff_count(d) - 1) == rest)
        .ok_or_else(|| Error::format(format!("{rest} f_rest properties match no SH degree <= 3")))?;
    let pos = [col("x")?, col("y")?, col("z")?];
    let dc = [col("f_dc_0")?, col("f_dc_1")?, col("f_dc_2")?];
    let rest_cols = (0..rest).map(|i| col(&format!("f_rest_{i}"))).collect::<Result<Vec<_>>>()?;
    let opacity = col("opacity")?;
    let scale = [col("scale_0")?, col("scale_1")?, col("scale_2")?];
    let rot = [col("rot_0")?, col("rot_1")?, col("rot_2")?, col("rot_3")?];
    let stride = names.len();
    let per_channel = rest / 3;
    let mut gaussians = Vec::with_capacity(count);
    for (i, row) in values.chunks_exact(stride.max(1)).take(count).enumerate() {
        if let Some(k) = row.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("PLY vertex {i}, property `{}`", names[k])));
        }
        let mut sh = vec![[row[dc[0]], row[dc[1]], row[dc[2]]]];
        for c in 0..per_channel {
            sh.push([0, 1, 2].map(|ch| row[rest_cols[ch * per_channel + c]]));
        }
        gaussians.push(Gaussian {
            mean: Vec3::new(row[pos[0]], row[pos[1]], row[pos[2]]),
            rot: rot.map(|c| row[c]),
            log_scale: Vec3::new(row[scale[0]], row[scale[1]], row[scale[2]]),
            opacity_logit: row[opacity],
            sh,
        });
    }
    GaussianCloud::from_gaussians(degree, gaussians)
}

/// Parse a Gaussian checkpoint from memory.
pub fn parse_gaussian_ply(bytes: &[u8]) -> Result<GaussianCloud> {
    let header = parse_header(bytes)?;
    let (names, values, count) = read_vertices(bytes, &header)?;
    cloud_from_vertices(&names, &values, count)
}

pub fn load_gaussian_ply(path: impl AsRef<Path>) -> Result<GaussianCloud> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_gaussian_ply(&bytes).map_err(|e| with_path(e, path))
}

pub(crate) fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        Error::NonFinite(m) => Error::NonFinite(format!("{} ({m})", path.display())),
        other => other,
    }
}

fn property_names(degree: usize) -> Vec<String> {
    let mut names: Vec<String> = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    names.extend((0..3 * (sh_coeff_count(degree) - 1)).map(|i| format!("f_rest_{i}")));
    names.push("opacity".into());
    names.extend(["scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"].map(String::from));
    names
}

/// Serialize a cloud; values are narrowed to 32-bit floats.
pub fn encode_gaussian_ply(cloud: &GaussianCloud, comments: &[String]) -> Result<Vec<u8>> {
    let names = property_names(cloud.sh_degree);
    let mut out = Vec::new();
    out.extend_from_slice(b"ply\nformat binary_little_endian 1.0\n");
    for c in comments {
        if c.contains('\n') {
            return Err(Error::InvalidArgument("PLY comments must be single lines".into()));
        }
        writeln!(out, "comment {c}").expect("write to Vec");
    }
    writeln!(out, "element vertex {}", cloud.len()).expect("write to Vec");
    for n in &names {
        writeln!(out, "property float {n}").expect("write to Vec");
    }
    out.extend_from_slice(b"end_header\n");
    let rest = sh_coeff_count(cloud.sh_degree) - 1;
    out.reserve(cloud.len() * names.len() * 4);
    for (i, g) in cloud.iter().enumerate() {
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("kernel {i}")));
        }
        let mut row: Vec<f64> = Vec::with_capacity(names.len());
        row.extend(g.mean.iter());
        row.extend([0.0; 3]);
        row.extend(g.sh[0]);
        for ch in 0..3 {
            row.extend((1..=rest).map(|c| g.sh[c][ch]));
        }
        row.push(g.opacity_logit);
        row.extend(g.log_scale.iter());
        row.extend(g.rot);
        for v in row {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_gaussian_ply(cloud: &GaussianCloud, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_gaussian_ply(cloud, &[])?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

const SKY_TAG: &str = "sky_ball";

/// Sky checkpoint: a Gaussian PLY whose header comment records the sphere
/// and the fallback color.
pub fn save_sky_ply(sky: &SkyModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let c = sky.center;
    let f = sky.fallback_color;
    let comment = format!(
        "{SKY_TAG} center {:e} {:e} {:e} radius {:e} fallback {:e} {:e} {:e}",
        c.x, c.y, c.z, sky.radius, f[0], f[1], f[2]
    );
    let bytes = encode_gaussian_ply(&sky.cloud, &[comment])?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn parse_sky_ply(bytes: &[u8]) -> Result<SkyModel> {
    let header = parse_header(bytes)?;
    let line = header
        .comments
        .iter()
        .find(|c| c.starts_with(SKY_TAG))
        .ok_or_else(|| Error::format("not a sky checkpoint (no sky_ball comment)"))?;
    let tok: Vec<&str> = line.split_whitespace().collect();
    let num = |i: usize| -> Result<f64> {
        tok.get(i)
            .and_then(|t| t.parse::<f64>().ok())
            .filter(|v| v.is_finite())
            .ok_or_else(|| Error::format(format!("malformed sky comment `{line}`")))
    };
    if tok.len() != 11 || tok[1] != "center" || tok[5] != "radius" || tok[7] != "fallback" {
        return Err(Error::format(format!("malformed sky comment `{line}`")));
    }
    let (names, values, count) = read_vertices(bytes, &header)?;
    Ok(SkyModel {
        cloud: cloud_from_vertices(&names, &values, count)?,
        center: Vec3::new(num(2)?, num(3)?, num(4)?),
        radius: num(6)?,
        fallback_color: [num(8)?, num(9)?, num(10)?],
    })
}

pub fn load_sky_ply(path: impl AsRef<Path>) -> Result<SkyModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_sky_ply(&bytes).map_err(|e| with_path(e, path))
}

/// Binary PLY mesh with float positions, optional uchar colors and int faces.
pub fn encode_mesh_ply(mesh: &TriangleMesh) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(b"ply\nformat binary_little_endian 1.0\n");
    writeln!(out, "element vertex {}", mesh.vertices.len()).expect("write to Vec");
    out.extend_from_slice(b"property float x\nproperty float y\nproperty float z\n");
    if mesh.colors.is_some() {
        out.extend_from_slice(b"property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    writeln!(out, "element face {}", mesh.triangles.len()).expect("write to Vec");
    out.extend_from_slice(b"property list uchar int vertex_indices\nend_header\n");
    for (i, v) in mesh.vertices.iter().enumerate() {
        for c in v.iter() {
            out.extend_from_slice(&(*c as f32).to_le_bytes());
        }
        if let Some(cs) = &mesh.colors {
            out.extend(cs[i].map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8));
        }
    }
    for t in &mesh.triangles {
        out.push(3);
        for &i in t {
            out.extend_from_slice(&(i as i32).to_le_bytes());
        }
    }
    out
}

/// Parse a triangle mesh written by [`encode_mesh_ply`] (or any binary PLY
/// with float vertex positions and triangle faces).
pub fn parse_mesh_ply(bytes: &[u8]) -> Result<TriangleMesh> {
    let header = parse_header(bytes)?;
    let mut offset = header.body;
    let mut mesh = TriangleMesh::default();
    let truncated = || Error::format("mesh PLY body truncated");
    for el in &header.elements {
        match el.name.as_str() {
            "vertex" => {
                let stride: usize = el.props.iter().map(|p| p.ty.size()).sum();
                let idx = |n: &str| el.props.iter().position(|p| p.name == n);
                let (x, y, z) = match (idx("x"), idx("y"), idx("z")) {
                    (Some(x), Some(y), Some(z)) => (x, y, z),
                    _ => return Err(Error::MissingProperty("x/y/z".into())),
                };
                let rgb = [idx("red"), idx("green"), idx("blue")];
                let end = stride
                    .checked_mul(el.count)
                    .and_then(|s| s.checked_add(offset))
                    .filter(|&e| e <= bytes.len())
                    .ok_or_else(truncated)?;
                let mut colors = Vec::new();
                for row in bytes[offset..end].chunks_exact(stride.max(1)).take(el.count) {
                    let mut vals = Vec::with_capacity(el.props.len());
                    let mut at = 0;
                    for p in &el.props {
                        vals.push(p.ty.read(&row[at..]));
                        at += p.ty.size();
                    }
                    if vals.iter().any(|v| !v.is_finite()) {
                        return Err(Error::NonFinite("mesh vertex".into()));
                    }
                    mesh.vertices.push(Vec3::new(vals[x], vals[y], vals[z]));
                    if let [Some(r), Some(g), Some(b)] = rgb {
                        colors.push([vals[r], vals[g], vals[b]].map(|c| c / 255.0));
                    }
                }
                if !colors.is_empty() {
                    mesh.colors = Some(colors);
                }
                offset = end;
            }
            "face" => {
                let p = match el.props.as_slice() {
                    [p] if p.list.is_some() => p,
                    _ => return Err(Error::format("face element must hold one index list")),
                };
                let ct = p.list.expect("list");
                for _ in 0..el.count {
                    let n = bytes.get(offset..offset + ct.size()).ok_or_else(truncated)?;
                    let n = ct.read(n);
                    offset += ct.size();
                    if n != 3.0 {
                        return Err(Error::format("only triangle faces are supported"));
                    }
                    let mut tri = [0u32; 3];
                    for t in &mut tri {
                        let b = bytes.get(offset..offset + p.ty.size()).ok_or_else(truncated)?;
                        let v = p.ty.read(b);
                        if !(v >= 0.0 && v < mesh.vertices.len() as f64) {
                            return Err(Error::format(format!("face index {v} out of range")));
                        }
                        *t = v as u32;
                        offset += p.ty.size();
                    }
                    mesh.triangles.push(tri);
                }
            }
            other => return Err(Error::format(format!("unexpected mesh element `{other}`"))),
        }
    }
    Ok(mesh)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::logit;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(n: usize, degree: usize, seed: u64) -> GaussianCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = || f64::from(rng.random_range(-3.0f32..3.0));
        let gaussians = (0..n)
            .map(|_| Gaussian {
                mean: Vec3::new(f(), f(), f()),
                rot: [f(), f(), f(), f()],
                log_scale: Vec3::new(f(), f(), f()),
                opacity_logit: f(),
                sh: (0..sh_coeff_count(degree)).map(|_| [f(), f(), f()]).collect(),
            })
            .collect();
        GaussianCloud::from_gaussians(degree, gaussians).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        for degree in 0..=3 {
            let cloud = random_cloud(1000, degree, degree as u64);
            let bytes = encode_gaussian_ply(&cloud, &[]).unwrap();
            assert_eq!(parse_gaussian_ply(&bytes).unwrap(), cloud);
        }
    }

    #[test]
    fn degree_from_rest_count() {
        let bytes = encode_gaussian_ply(&random_cloud(2, 3, 0), &[]).unwrap();
        let text = String::from_utf8_lossy(&bytes[..2000]);
        assert_eq!(text.matches("f_rest_").count(), 45);
        assert_eq!(parse_gaussian_ply(&bytes).unwrap().sh_degree, 3);
    }

    #[test]
    fn zero_raw_values_activate() {
        let g = Gaussian {
            mean: Vec3::zeros(),
            rot: [1.0, 0.0, 0.0, 0.0],
            log_scale: Vec3::zeros(),
            opacity_logit: 0.0,
            sh: vec![[0.0; 3]],
        };
        let cloud = GaussianCloud::from_gaussians(0, vec![g]).unwrap();
        let back = parse_gaussian_ply(&encode_gaussian_ply(&cloud, &[]).unwrap()).unwrap();
        assert_eq!(back.gaussians[0].opacity(), 0.5);
        assert_eq!(back.gaussians[0].scales(), Vec3::repeat(1.0));
        assert_eq!(logit(0.5), 0.0);
    }

    #[test]
    fn empty_cloud_is_valid() {
        let cloud = GaussianCloud::new(1).unwrap();
        let back = parse_gaussian_ply(&encode_gaussian_ply(&cloud, &[]).unwrap()).unwrap();
        assert!(back.is_empty());
    }

    fn replace_header(bytes: &[u8], from: &str, to: &str) -> Vec<u8> {
        let end = bytes.windows(10).position(|w| w == b"end_header").unwrap();
        let head = String::from_utf8(bytes[..end].to_vec()).unwrap().replace(from, to);
        [head.as_bytes(), &bytes[end..]].concat()
    }

    #[test]
    fn missing_property_named() {
        let bytes = encode_gaussian_ply(&random_cloud(3, 0, 1), &[]).unwrap();
        let broken = replace_header(&bytes, "property float opacity", "property float opacitx");
        match parse_gaussian_ply(&broken) {
            Err(Error::MissingProperty(p)) => assert_eq!(p, "opacity"),
            other => panic!("{other:?}"),
        }
        let bytes = encode_gaussian_ply(&random_cloud(3, 1, 1), &[]).unwrap();
        let broken = replace_header(&bytes, "property float f_rest_8\n", "");
        assert!(parse_gaussian_ply(&broken).is_err());
    }

    #[test]
    fn bad_rest_count_rejected() {
        let bytes = encode_gaussian_ply(&random_cloud(3, 1, 1), &[]).unwrap();
        let broken = replace_header(&bytes, "property float f_rest_8", "property float extra");
        assert!(matches!(parse_gaussian_ply(&broken), Err(Error::Format(_))));
    }

    #[test]
    fn nan_rejected_and_truncation_detected() {
        let mut bytes = encode_gaussian_ply(&random_cloud(3, 0, 2), &[]).unwrap();
        let n = bytes.len();
        assert!(parse_gaussian_ply(&bytes[..n - 1]).is_err());
        bytes[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(parse_gaussian_ply(&bytes), Err(Error::NonFinite(_))));
    }

    #[test]
    fn ascii_rejected() {
        let bytes = b"ply\nformat ascii 1.0\nelement vertex 0\nend_header\n";
        assert!(parse_gaussian_ply(bytes).is_err());
    }

    #[test]
    fn mesh_round_trip() {
        let mesh = TriangleMesh {
            vertices: vec![Vec3::zeros(), Vec3::x(), Vec3::y(), Vec3::z()],
            colors: Some(vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 1.0, 1.0]]),
            triangles: vec![[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]],
        };
        assert_eq!(parse_mesh_ply(&encode_mesh_ply(&mesh)).unwrap(), mesh);
    }
}
