//! Triangle mesh and point cloud files (OBJ, binary PLY).

use std::io::{BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::mesh::TriangleMesh;

pub fn save_mesh_obj(path: impl AsRef<Path>, mesh: &TriangleMesh) -> Result<()> {
    let path = path.as_ref();
    mesh.validate()?;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);

    for v in &mesh.vertices {
        writeln!(w, "v {} {} {}", v[0], v[1], v[2]).map_err(io_err)?;
    }
    let has_normals = mesh.vertex_normals.is_some();
    if let Some(normals) = &mesh.vertex_normals {
        for n in normals {
            writeln!(w, "vn {} {} {}", n[0], n[1], n[2]).map_err(io_err)?;
        }
    }
    for f in &mesh.faces {
        if has_normals {
            writeln!(
                w,
                "f {0}//{0} {1}//{1} {2}//{2}",
                f[0] + 1,
                f[1] + 1,
                f[2] + 1
            )
            .map_err(io_err)?;
        } else {
            writeln!(w, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

pub fn load_mesh_obj(path: impl AsRef<Path>) -> Result<TriangleMesh> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut vertices: Vec<Vector3<f64>> = Vec::new();
    let mut normals: Vec<Vector3<f64>> = Vec::new();
    let mut faces: Vec<[u32; 3]> = Vec::new();

    for (lineno, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let bad = |what: &str| {
            Error::format(path, format!("line {}: {what}", lineno + 1))
        };
        match parts.next() {
            Some("v") => {
                let mut v = Vector3::zeros();
                for k in 0..3 {
                    v[k] = parts
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| bad("malformed vertex"))?;
                }
                vertices.push(v);
            }
            Some("vn") => {
                let mut v = Vector3::zeros();
                for k in 0..3 {
                    v[k] = parts
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| bad("malformed normal"))?;
                }
                normals.push(v);
            }
            Some("f") => {
                let idx: Vec<u32> = parts
                    .map(|tok| {
                        let first = tok.split('/').next().unwrap_or("");
                        let i: i64 = first.parse().map_err(|_| bad("malformed face index"))?;
                        let resolved = if i < 0 {
                            vertices.len() as i64 + i
                        } else {
                            i - 1
                        };
                        if resolved < 0 || resolved as usize >= vertices.len() {
                            return Err(bad("face index out of range"));
                        }
                        Ok(resolved as u32)
                    })
                    .collect::<Result<_>>()?;
                if idx.len() < 3 {
                    return Err(bad("face with fewer than 3 vertices"));
                }
                for k in 1..idx.len() - 1 {
                    faces.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }

    let vertex_normals = if normals.len() == vertices.len() {
        Some(normals)
    } else {
        None
    };
    let mesh = TriangleMesh {
        vertices,
        faces,
        vertex_normals,
    };
    mesh.validate()?;
    Ok(mesh)
}

pub fn save_mesh_ply(path: impl AsRef<Path>, mesh: &TriangleMesh) -> Result<()> {
    let path = path.as_ref();
    mesh.validate()?;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);

    let has_normals = mesh.vertex_normals.is_some();
    let mut header = String::from("ply\nformat binary_little_endian 1.0\n");
    header.push_str(&format!("element vertex {}\n", mesh.vertices.len()));
    header.push_str("property float x\nproperty float y\nproperty float z\n");
    if has_normals {
        header.push_str("property float nx\nproperty float ny\nproperty float nz\n");
    }
    header.push_str(&format!("element face {}\n", mesh.faces.len()));
    header.push_str("property list uchar int vertex_indices\nend_header\n");
    w.write_all(header.as_bytes()).map_err(io_err)?;

    for (i, v) in mesh.vertices.iter().enumerate() {
        for k in 0..3 {
            w.write_f32::<LittleEndian>(v[k] as f32).map_err(io_err)?;
        }
        if let Some(normals) = &mesh.vertex_normals {
            for k in 0..3 {
                w.write_f32::<LittleEndian>(normals[i][k] as f32).map_err(io_err)?;
            }
        }
    }
    for f in &mesh.faces {
        w.write_u8(3).map_err(io_err)?;
        for k in 0..3 {
            w.write_i32::<LittleEndian>(f[k] as i32).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

pub fn load_mesh_ply(path: impl AsRef<Path>) -> Result<TriangleMesh> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;

    let end_marker = b"end_header\n";
    let end = bytes
        .windows(end_marker.len())
        .position(|w| w == end_marker)
        .ok_or_else(|| Error::format(path, "missing end_header"))?;
    let header = std::str::from_utf8(&bytes[..end])
        .map_err(|_| Error::format(path, "header not ascii"))?;
    let mut cursor = &bytes[end + end_marker.len()..];

    let mut n_vertices = 0usize;
    let mut n_faces = 0usize;
    let mut vertex_props: Vec<String> = Vec::new();
    let mut in_vertex = false;
    let mut binary_le = false;
    for line in header.lines() {
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("format") => binary_le = parts.next() == Some("binary_little_endian"),
            Some("element") => {
                let name = parts.next().unwrap_or("");
                let count = parts.next().and_then(|c| c.parse().ok()).unwrap_or(0);
                in_vertex = name == "vertex";
                if in_vertex {
                    n_vertices = count;
                } else if name == "face" {
                    n_faces = count;
                }
            }
            Some("property") => {
                if in_vertex {
                    let ty = parts.next().unwrap_or("");
                    if ty != "float" && ty != "float32" {
                        return Err(Error::format(
                            path,
                            format!("unsupported vertex property type `{ty}`"),
                        ));
                    }
                    vertex_props.push(parts.next().unwrap_or("").to_string());
                }
            }
            _ => {}
        }
    }
    if !binary_le {
        return Err(Error::format(path, "expected binary_little_endian"));
    }
    let has_normals = vertex_props.iter().any(|p| p == "nx");
    let floats_per_vertex = vertex_props.len();
    if floats_per_vertex < 3 {
        return Err(Error::format(path, "vertex element lacks x y z"));
    }

    let mut vertices = Vec::with_capacity(n_vertices);
    let mut normals = Vec::with_capacity(if has_normals { n_vertices } else { 0 });
    for _ in 0..n_vertices {
        let mut vals = vec![0.0f64; floats_per_vertex];
        for v in vals.iter_mut() {
            *v = cursor
                .read_f32::<LittleEndian>()
                .map_err(|e| Error::io(path, e))? as f64;
        }
        vertices.push(Vector3::new(vals[0], vals[1], vals[2]));
        if has_normals {
            normals.push(Vector3::new(vals[3], vals[4], vals[5]));
        }
    }
    let mut faces = Vec::with_capacity(n_faces);
    for _ in 0..n_faces {
        let n = cursor.read_u8().map_err(|e| Error::io(path, e))? as usize;
        let mut idx = Vec::with_capacity(n);
        for _ in 0..n {
            idx.push(cursor.read_i32::<LittleEndian>().map_err(|e| Error::io(path, e))? as u32);
        }
        if n < 3 {
            return Err(Error::format(path, "face with fewer than 3 vertices"));
        }
        for k in 1..n - 1 {
            faces.push([idx[0], idx[k], idx[k + 1]]);
        }
    }

    let mesh = TriangleMesh {
        vertices,
        faces,
        vertex_normals: if has_normals { Some(normals) } else { None },
    };
    mesh.validate()?;
    Ok(mesh)
}

/// Oriented point cloud as binary PLY (x y z nx ny nz).
pub fn save_point_cloud_ply(
    path: impl AsRef<Path>,
    points: &[Vector3<f64>],
    normals: &[Vector3<f64>],
) -> Result<()> {
    let path = path.as_ref();
    if points.len() != normals.len() {
        return Err(Error::Validation(format!(
            "point/normal count mismatch: {} vs {}",
            points.len(),
            normals.len()
        )));
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);
    let mut header = String::from("ply\nformat binary_little_endian 1.0\n");
    header.push_str(&format!("element vertex {}\n", points.len()));
    for name in ["x", "y", "z", "nx", "ny", "nz"] {
        header.push_str(&format!("property float {name}\n"));
    }
    header.push_str("end_header\n");
    w.write_all(header.as_bytes()).map_err(io_err)?;
    for (p, n) in points.iter().zip(normals) {
        for k in 0..3 {
            w.write_f32::<LittleEndian>(p[k] as f32).map_err(io_err)?;
        }
        for k in 0..3 {
            w.write_f32::<LittleEndian>(n[k] as f32).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::TriangleMesh;

    fn quad_mesh() -> TriangleMesh {
        TriangleMesh {
            vertices: vec![
                Vector3::new(0.0, 0.0, 0.0),
                Vector3::new(1.0, 0.0, 0.0),
                Vector3::new(1.0, 1.0, 0.0),
                Vector3::new(0.0, 1.0, 0.0),
            ],
            faces: vec![[0, 1, 2], [0, 2, 3]],
            vertex_normals: None,
        }
    }

    #[test]
    fn obj_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.obj");
        let mesh = quad_mesh();
        save_mesh_obj(&p, &mesh).unwrap();
        let loaded = load_mesh_obj(&p).unwrap();
        assert_eq!(loaded.faces, mesh.faces);
        for (a, b) in loaded.vertices.iter().zip(&mesh.vertices) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn obj_round_trip_with_normals() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("n.obj");
        let mut mesh = quad_mesh();
        mesh.vertex_normals = Some(vec![Vector3::new(0.0, 0.0, 1.0); 4]);
        save_mesh_obj(&p, &mesh).unwrap();
        let loaded = load_mesh_obj(&p).unwrap();
        assert!(loaded.vertex_normals.is_some());
    }

    #[test]
    fn obj_quad_faces_triangulated() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("quad.obj");
        std::fs::write(
            &p,
            "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n",
        )
        .unwrap();
        let mesh = load_mesh_obj(&p).unwrap();
        assert_eq!(mesh.faces.len(), 2);
        assert_eq!(mesh.faces[0], [0, 1, 2]);
        assert_eq!(mesh.faces[1], [0, 2, 3]);
    }

    #[test]
    fn obj_out_of_range_face_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.obj");
        std::fs::write(&p, "v 0 0 0\nv 1 0 0\nf 1 2 3\n").unwrap();
        assert!(matches!(load_mesh_obj(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn ply_round_trip_with_normals() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ply");
        let mut mesh = quad_mesh();
        mesh.vertex_normals = Some(vec![Vector3::new(0.0, 0.0, 1.0); 4]);
        save_mesh_ply(&p, &mesh).unwrap();
        let loaded = load_mesh_ply(&p).unwrap();
        assert_eq!(loaded.faces, mesh.faces);
        assert!(loaded.vertex_normals.is_some());
        for (a, b) in loaded.vertices.iter().zip(&mesh.vertices) {
            assert!((a - b).norm() < 1e-6);
        }
    }

    #[test]
    fn point_cloud_requires_matching_normals() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pc.ply");
        let pts = vec![Vector3::zeros(); 3];
        let nrm = vec![Vector3::new(0.0, 0.0, 1.0); 2];
        assert!(save_point_cloud_ply(&p, &pts, &nrm).is_err());
    }
}
