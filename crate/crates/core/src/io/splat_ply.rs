//! Binary little-endian PLY storage for gaussian scenes.
//!
//! Layout per vertex: position, zeroed normal placeholder, DC color
//! coefficients `f_dc_*`, higher-band coefficients `f_rest_*` (planar,
//! channel-major: `f_rest[c * K + k]` is channel `c` of band coefficient
//! `k+1`), opacity logit, log scales and a scalar-first quaternion. All
//! fields are `float32`.

use std::io::{BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{Vector3, Vector4};

use crate::error::{Error, Result};
use crate::math;
use crate::scene::{Gaussian3D, Scene};

/// Quaternions whose norm is already within this tolerance of 1 are kept
/// bit-exact on load; renormalizing them would perturb low mantissa bits and
/// break byte-identical round trips.
const QUAT_NORM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ScalarType {
    F32,
    F64,
    U8,
    I8,
    U16,
    I16,
    U32,
    I32,
}

impl ScalarType {
    fn parse(s: &str) -> Option<ScalarType> {
        Some(match s {
            "float" | "float32" => ScalarType::F32,
            "double" | "float64" => ScalarType::F64,
            "uchar" | "uint8" => ScalarType::U8,
            "char" | "int8" => ScalarType::I8,
            "ushort" | "uint16" => ScalarType::U16,
            "short" | "int16" => ScalarType::I16,
            "uint" | "uint32" => ScalarType::U32,
            "int" | "int32" => ScalarType::I32,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            ScalarType::F64 => 8,
            ScalarType::F32 | ScalarType::U32 | ScalarType::I32 => 4,
            ScalarType::U16 | ScalarType::I16 => 2,
            ScalarType::U8 | ScalarType::I8 => 1,
        }
    }
}

struct Header {
    vertex_count: usize,
    /// (name, type) in declaration order.
    properties: Vec<(String, ScalarType)>,
    data_offset: usize,
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<Header> {
    let head_limit = bytes.len().min(64 * 1024);
    let text = &bytes[..head_limit];
    let end_marker = b"end_header\n";
    let end = find_subslice(text, end_marker)
        .ok_or_else(|| Error::format(path, "missing end_header"))?;
    let header_str = std::str::from_utf8(&text[..end])
        .map_err(|_| Error::format(path, "header is not valid ascii"))?;
    let data_offset = end + end_marker.len();

    let mut lines = header_str.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(Error::format(path, "not a ply file (missing magic)"));
    }

    let mut vertex_count = None;
    let mut properties = Vec::new();
    let mut in_vertex_element = false;
    let mut format_seen = false;

    for line in lines {
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("format") => {
                let fmt = parts.next().unwrap_or("");
                if fmt != "binary_little_endian" {
                    return Err(Error::format(
                        path,
                        format!("unsupported ply format `{fmt}`, expected binary_little_endian"),
                    ));
                }
                format_seen = true;
            }
            Some("comment") | Some("obj_info") => {}
            Some("element") => {
                let name = parts.next().unwrap_or("");
                let count: usize = parts
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| Error::format(path, "element line missing count"))?;
                if name == "vertex" {
                    vertex_count = Some(count);
                    in_vertex_element = true;
                } else {
                    if count != 0 {
                        return Err(Error::format(
                            path,
                            format!("unsupported non-empty element `{name}`"),
                        ));
                    }
                    in_vertex_element = false;
                }
            }
            Some("property") => {
                if !in_vertex_element {
                    continue;
                }
                let ty_str = parts.next().unwrap_or("");
                if ty_str == "list" {
                    return Err(Error::format(path, "list properties not supported on vertices"));
                }
                let ty = ScalarType::parse(ty_str).ok_or_else(|| {
                    Error::format(path, format!("unknown property type `{ty_str}`"))
                })?;
                let name = parts
                    .next()
                    .ok_or_else(|| Error::format(path, "property line missing name"))?;
                properties.push((name.to_string(), ty));
            }
            _ => {}
        }
    }

    if !format_seen {
        return Err(Error::format(path, "missing format line"));
    }
    let vertex_count =
        vertex_count.ok_or_else(|| Error::format(path, "missing vertex element"))?;
    Ok(Header {
        vertex_count,
        properties,
        data_offset,
    })
}

fn find_subslice(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    haystack
        .windows(needle.len())
        .position(|w| w == needle)
}

fn read_scalar(buf: &[u8], ty: ScalarType) -> f64 {
    let mut cursor = buf;
    match ty {
        ScalarType::F32 => cursor.read_f32::<LittleEndian>().unwrap() as f64,
        ScalarType::F64 => cursor.read_f64::<LittleEndian>().unwrap(),
        ScalarType::U8 => buf[0] as f64,
        ScalarType::I8 => buf[0] as i8 as f64,
        ScalarType::U16 => cursor.read_u16::<LittleEndian>().unwrap() as f64,
        ScalarType::I16 => cursor.read_i16::<LittleEndian>().unwrap() as f64,
        ScalarType::U32 => cursor.read_u32::<LittleEndian>().unwrap() as f64,
        ScalarType::I32 => cursor.read_i32::<LittleEndian>().unwrap() as f64,
    }
}

/// Loads a gaussian scene. The SH degree is inferred from the number of
/// `f_rest_*` properties; unknown extra properties are skipped.
pub fn load_gaussian_ply(path: impl AsRef<Path>) -> Result<Scene> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let header = parse_header(&bytes, path)?;

    if header.vertex_count == 0 {
        return Err(Error::EmptyScene);
    }

    let mut offsets = std::collections::HashMap::new();
    let mut record_size = 0usize;
    let mut rest_count = 0usize;
    for (name, ty) in &header.properties {
        offsets.insert(name.as_str(), (record_size, *ty));
        record_size += ty.size();
        if name.starts_with("f_rest_") {
            rest_count += 1;
        }
    }

    let required = [
        "x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2",
        "rot_0", "rot_1", "rot_2", "rot_3",
    ];
    for name in required {
        if !offsets.contains_key(name) {
            return Err(Error::format(path, format!("missing required property `{name}`")));
        }
    }
    if rest_count % 3 != 0 {
        return Err(Error::format(
            path,
            format!("f_rest property count {rest_count} is not a multiple of 3"),
        ));
    }
    let k_rest = rest_count / 3;
    let sh_degree = math::sh_degree_from_count(k_rest + 1).ok_or_else(|| {
        Error::format(
            path,
            format!("{rest_count} f_rest properties do not fit any SH degree"),
        )
    })?;
    // f_rest offsets must be addressable by index.
    let mut rest_offsets = vec![None; rest_count];
    for (name, _) in &header.properties {
        if let Some(idx_str) = name.strip_prefix("f_rest_") {
            let idx: usize = idx_str
                .parse()
                .map_err(|_| Error::format(path, format!("bad f_rest index `{name}`")))?;
            if idx >= rest_count {
                return Err(Error::format(
                    path,
                    format!("f_rest index {idx} out of range for count {rest_count}"),
                ));
            }
            rest_offsets[idx] = Some(offsets[name.as_str()]);
        }
    }

    let need = header.data_offset + header.vertex_count * record_size;
    if bytes.len() < need {
        return Err(Error::format(
            path,
            format!(
                "payload truncated: need {need} bytes for {} vertices, file has {}",
                header.vertex_count,
                bytes.len()
            ),
        ));
    }

    let get = |rec: &[u8], name: &str| -> f64 {
        let (off, ty) = offsets[name];
        read_scalar(&rec[off..], ty)
    };

    let mut gaussians = Vec::with_capacity(header.vertex_count);
    for i in 0..header.vertex_count {
        let rec = &bytes[header.data_offset + i * record_size..][..record_size];
        let mean = Vector3::new(get(rec, "x"), get(rec, "y"), get(rec, "z"));
        let log_scale = Vector3::new(get(rec, "scale_0"), get(rec, "scale_1"), get(rec, "scale_2"));
        let mut rot = Vector4::new(
            get(rec, "rot_0"),
            get(rec, "rot_1"),
            get(rec, "rot_2"),
            get(rec, "rot_3"),
        );
        // Keep already-unit quaternions untouched so round trips are
        // byte-exact; normalize anything else.
        if (rot.norm() - 1.0).abs() > QUAT_NORM_TOL {
            rot = math::quat_normalize(rot);
        }
        let mut sh = Vec::with_capacity(1 + k_rest);
        sh.push(Vector3::new(
            get(rec, "f_dc_0"),
            get(rec, "f_dc_1"),
            get(rec, "f_dc_2"),
        ));
        for k in 0..k_rest {
            let mut coeff = Vector3::zeros();
            for c in 0..3 {
                let (off, ty) = rest_offsets[c * k_rest + k]
                    .ok_or_else(|| Error::format(path, "non-contiguous f_rest indices"))?;
                coeff[c] = read_scalar(&rec[off..], ty);
            }
            sh.push(coeff);
        }
        gaussians.push(Gaussian3D {
            mean,
            log_scale,
            rot,
            opacity_logit: get(rec, "opacity"),
            sh,
        });
    }

    let scene = Scene {
        gaussians,
        sh_degree,
    };
    scene.validate()?;
    Ok(scene)
}

/// Writes a gaussian scene; inverse of [`load_gaussian_ply`] up to the f32
/// storage precision.
pub fn save_gaussian_ply(path: impl AsRef<Path>, scene: &Scene) -> Result<()> {
    let path = path.as_ref();
    scene.validate().map_err(|e| match e {
        Error::EmptyScene => Error::EmptyScene,
        other => other,
    })?;
    let k_rest = math::sh_coeff_count(scene.sh_degree) - 1;

    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);

    let mut header = String::new();
    header.push_str("ply\nformat binary_little_endian 1.0\n");
    header.push_str(&format!("element vertex {}\n", scene.len()));
    for name in ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"] {
        header.push_str(&format!("property float {name}\n"));
    }
    for i in 0..3 * k_rest {
        header.push_str(&format!("property float f_rest_{i}\n"));
    }
    header.push_str("property float opacity\n");
    for i in 0..3 {
        header.push_str(&format!("property float scale_{i}\n"));
    }
    for i in 0..4 {
        header.push_str(&format!("property float rot_{i}\n"));
    }
    header.push_str("end_header\n");
    w.write_all(header.as_bytes()).map_err(io_err)?;

    for g in &scene.gaussians {
        for k in 0..3 {
            w.write_f32::<LittleEndian>(g.mean[k] as f32).map_err(io_err)?;
        }
        for _ in 0..3 {
            w.write_f32::<LittleEndian>(0.0).map_err(io_err)?;
        }
        for c in 0..3 {
            w.write_f32::<LittleEndian>(g.sh[0][c] as f32).map_err(io_err)?;
        }
        for c in 0..3 {
            for k in 0..k_rest {
                w.write_f32::<LittleEndian>(g.sh[1 + k][c] as f32).map_err(io_err)?;
            }
        }
        w.write_f32::<LittleEndian>(g.opacity_logit as f32).map_err(io_err)?;
        for k in 0..3 {
            w.write_f32::<LittleEndian>(g.log_scale[k] as f32).map_err(io_err)?;
        }
        for k in 0..4 {
            w.write_f32::<LittleEndian>(g.rot[k] as f32).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn random_scene(n: usize, sh_degree: usize, seed: u64) -> Scene {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let bands = math::sh_coeff_count(sh_degree);
        let gaussians = (0..n)
            .map(|_| {
                // Narrow to f32 up front so in-memory values are exactly
                // representable in the file precision.
                let f = |rng: &mut ChaCha12Rng| (rng.random::<f64>() * 2.0 - 1.0) as f32 as f64;
                let rot = math::quat_normalize(Vector4::new(
                    f(&mut rng),
                    f(&mut rng),
                    f(&mut rng),
                    f(&mut rng),
                ))
                .map(|v| v as f32 as f64);
                Gaussian3D {
                    mean: Vector3::new(f(&mut rng), f(&mut rng), f(&mut rng)),
                    log_scale: Vector3::new(f(&mut rng), f(&mut rng), f(&mut rng)),
                    rot,
                    opacity_logit: f(&mut rng),
                    sh: (0..bands)
                        .map(|_| Vector3::new(f(&mut rng), f(&mut rng), f(&mut rng)))
                        .collect(),
                }
            })
            .collect();
        Scene {
            gaussians,
            sh_degree,
        }
    }

    #[test]
    fn round_trip_bytes_identical() {
        let dir = tempfile::tempdir().unwrap();
        for degree in [0usize, 1, 2] {
            let scene = random_scene(100, degree, 9 + degree as u64);
            let p1 = dir.path().join(format!("a{degree}.ply"));
            let p2 = dir.path().join(format!("b{degree}.ply"));
            save_gaussian_ply(&p1, &scene).unwrap();
            let loaded = load_gaussian_ply(&p1).unwrap();
            assert_eq!(loaded.sh_degree, degree);
            save_gaussian_ply(&p2, &loaded).unwrap();
            let b1 = std::fs::read(&p1).unwrap();
            let b2 = std::fs::read(&p2).unwrap();
            assert_eq!(b1, b2, "degree {degree} round trip not byte-identical");
        }
    }

    #[test]
    fn file_size_matches_declared_layout() {
        let dir = tempfile::tempdir().unwrap();
        let scene = random_scene(10_000, 1, 3);
        let p = dir.path().join("big.ply");
        save_gaussian_ply(&p, &scene).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let header = parse_header(&bytes, &p).unwrap();
        let props = header.properties.len();
        assert_eq!(props, 17 + 9); // degree 1: 3*3 f_rest properties
        assert_eq!(bytes.len(), header.data_offset + 10_000 * 4 * props);
    }

    #[test]
    fn non_unit_quaternion_normalized_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let mut scene = random_scene(3, 0, 5);
        scene.gaussians[1].rot = Vector4::new(2.0, 0.0, 0.0, 0.0);
        let p = dir.path().join("q.ply");
        save_gaussian_ply(&p, &scene).unwrap();
        let loaded = load_gaussian_ply(&p).unwrap();
        assert!((loaded.gaussians[1].rot.norm() - 1.0).abs() < 1e-9);
        assert_eq!(loaded.gaussians[1].rot[0], 1.0);
    }

    #[test]
    fn sh_layout_is_channel_major() {
        // One gaussian, degree 1: f_rest = [r1 r2 r3 | g1 g2 g3 | b1 b2 b3].
        let mut scene = random_scene(1, 1, 7);
        scene.gaussians[0].sh = vec![
            Vector3::zeros(),
            Vector3::new(1.0, 4.0, 7.0),
            Vector3::new(2.0, 5.0, 8.0),
            Vector3::new(3.0, 6.0, 9.0),
        ];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sh.ply");
        save_gaussian_ply(&p, &scene).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let header = parse_header(&bytes, &p).unwrap();
        let rec = &bytes[header.data_offset..];
        // f_rest starts after x y z nx ny nz f_dc_0..2 = 9 floats.
        let mut rest = Vec::new();
        for i in 0..9 {
            let off = (9 + i) * 4;
            rest.push(f32::from_le_bytes(rec[off..off + 4].try_into().unwrap()));
        }
        assert_eq!(rest, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let loaded = load_gaussian_ply(&p).unwrap();
        assert_eq!(loaded.gaussians[0].sh[1], Vector3::new(1.0, 4.0, 7.0));
        assert_eq!(loaded.gaussians[0].sh[3], Vector3::new(3.0, 6.0, 9.0));
    }

    #[test]
    fn missing_property_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.ply");
        let mut data = Vec::new();
        data.extend_from_slice(
            b"ply\nformat binary_little_endian 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nend_header\n",
        );
        data.extend_from_slice(&[0u8; 12]);
        std::fs::write(&p, data).unwrap();
        let err = load_gaussian_ply(&p).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "got {err:?}");
    }

    #[test]
    fn empty_vertex_element_is_empty_scene() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.ply");
        std::fs::write(
            &p,
            b"ply\nformat binary_little_endian 1.0\nelement vertex 0\nproperty float x\nend_header\n",
        )
        .unwrap();
        assert!(matches!(load_gaussian_ply(&p), Err(Error::EmptyScene)));
    }

    #[test]
    fn ascii_ply_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ascii.ply");
        std::fs::write(
            &p,
            b"ply\nformat ascii 1.0\nelement vertex 0\nend_header\n",
        )
        .unwrap();
        assert!(matches!(load_gaussian_ply(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn truncated_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let scene = random_scene(4, 0, 1);
        let p = dir.path().join("trunc.ply");
        save_gaussian_ply(&p, &scene).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load_gaussian_ply(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn unwritable_path_reports_io_error() {
        let err = save_gaussian_ply("/nonexistent-dir/x.ply", &random_scene(1, 0, 2)).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
