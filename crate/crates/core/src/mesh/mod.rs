//! Triangle meshes and the meshing pipeline: scalar grids, marching cubes,
//! screened Poisson reconstruction and quadric-error decimation.

pub mod bvh;
pub mod decimate;
pub mod extract;
pub mod grid;
pub mod marching;
pub mod poisson;

use std::collections::HashMap;

use nalgebra::Vector3;

use crate::error::{Error, Result};

/// Indexed triangle mesh with optional per-vertex normals.
#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub faces: Vec<[u32; 3]>,
    pub vertex_normals: Option<Vec<Vector3<f64>>>,
}

impl TriangleMesh {
    pub fn empty() -> TriangleMesh {
        TriangleMesh {
            vertices: Vec::new(),
            faces: Vec::new(),
            vertex_normals: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len() as u32;
        for (fi, f) in self.faces.iter().enumerate() {
            if f.iter().any(|&v| v >= n) {
                return Err(Error::BadMesh(format!(
                    "face {fi} references vertex out of range (n={n})"
                )));
            }
        }
        if let Some(normals) = &self.vertex_normals {
            if normals.len() != self.vertices.len() {
                return Err(Error::BadMesh(format!(
                    "{} normals for {} vertices",
                    normals.len(),
                    self.vertices.len()
                )));
            }
        }
        for (vi, v) in self.vertices.iter().enumerate() {
            if !v.iter().all(|x| x.is_finite()) {
                return Err(Error::BadMesh(format!("vertex {vi} is non-finite")));
            }
        }
        Ok(())
    }

    pub fn face_vertices(&self, f: usize) -> [Vector3<f64>; 3] {
        let [a, b, c] = self.faces[f];
        [
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        ]
    }

    /// Unnormalized face normal (twice the area vector).
    pub fn face_normal_raw(&self, f: usize) -> Vector3<f64> {
        let [a, b, c] = self.face_vertices(f);
        (b - a).cross(&(c - a))
    }

    pub fn face_area(&self, f: usize) -> f64 {
        0.5 * self.face_normal_raw(f).norm()
    }

    pub fn total_area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }

    /// Area-weighted vertex normals (unit length where defined).
    pub fn compute_vertex_normals(&mut self) {
        let mut normals = vec![Vector3::zeros(); self.vertices.len()];
        for f in 0..self.faces.len() {
            let n = self.face_normal_raw(f);
            for &v in &self.faces[f] {
                normals[v as usize] += n;
            }
        }
        for n in &mut normals {
            let len = n.norm();
            if len > 1e-12 {
                *n /= len;
            }
        }
        self.vertex_normals = Some(normals);
    }

    pub fn bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for v in &self.vertices {
            for k in 0..3 {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
        }
        (lo, hi)
    }

    pub fn mean_edge_length(&self) -> f64 {
        if self.faces.is_empty() {
            return 0.0;
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for f in 0..self.faces.len() {
            let [a, b, c] = self.face_vertices(f);
            total += (a - b).norm() + (b - c).norm() + (c - a).norm();
            count += 3;
        }
        total / count as f64
    }

    /// Map from undirected edge to incident face count.
    fn edge_face_counts(&self) -> HashMap<(u32, u32), u32> {
        let mut edges: HashMap<(u32, u32), u32> = HashMap::new();
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                let key = (a.min(b), a.max(b));
                *edges.entry(key).or_insert(0) += 1;
            }
        }
        edges
    }

    /// Number of edges bounding exactly one face.
    pub fn boundary_edge_count(&self) -> usize {
        self.edge_face_counts().values().filter(|&&c| c == 1).count()
    }

    /// V - E + F over the whole mesh.
    pub fn euler_characteristic(&self) -> i64 {
        let e = self.edge_face_counts().len() as i64;
        self.vertices.len() as i64 - e + self.faces.len() as i64
    }

    /// Face ids grouped into edge-connected components, largest first.
    pub fn connected_components(&self) -> Vec<Vec<u32>> {
        let mut edge_to_faces: HashMap<(u32, u32), Vec<u32>> = HashMap::new();
        for (fi, f) in self.faces.iter().enumerate() {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                edge_to_faces
                    .entry((a.min(b), a.max(b)))
                    .or_default()
                    .push(fi as u32);
            }
        }
        let mut component = vec![u32::MAX; self.faces.len()];
        let mut components: Vec<Vec<u32>> = Vec::new();
        for start in 0..self.faces.len() as u32 {
            if component[start as usize] != u32::MAX {
                continue;
            }
            let id = components.len() as u32;
            let mut stack = vec![start];
            let mut members = Vec::new();
            component[start as usize] = id;
            while let Some(fi) = stack.pop() {
                members.push(fi);
                let f = self.faces[fi as usize];
                for k in 0..3 {
                    let (a, b) = (f[k], f[(k + 1) % 3]);
                    for &nb in &edge_to_faces[&(a.min(b), a.max(b))] {
                        if component[nb as usize] == u32::MAX {
                            component[nb as usize] = id;
                            stack.push(nb);
                        }
                    }
                }
            }
            components.push(members);
        }
        components.sort_by(|a, b| b.len().cmp(&a.len()));
        components
    }

    /// Drops connected components smaller than `min_faces`, then unreferenced
    /// vertices. Vertex order is preserved for the survivors.
    pub fn filter_components(&self, min_faces: usize) -> TriangleMesh {
        let keep_faces: Vec<[u32; 3]> = self
            .connected_components()
            .into_iter()
            .filter(|c| c.len() >= min_faces)
            .flat_map(|c| c.into_iter().map(|fi| self.faces[fi as usize]))
            .collect();
        let mut used = vec![false; self.vertices.len()];
        for f in &keep_faces {
            for &v in f {
                used[v as usize] = true;
            }
        }
        let mut remap = vec![u32::MAX; self.vertices.len()];
        let mut vertices = Vec::new();
        let mut normals = Vec::new();
        for (i, &u) in used.iter().enumerate() {
            if u {
                remap[i] = vertices.len() as u32;
                vertices.push(self.vertices[i]);
                if let Some(n) = &self.vertex_normals {
                    normals.push(n[i]);
                }
            }
        }
        let faces = keep_faces
            .into_iter()
            .map(|f| f.map(|v| remap[v as usize]))
            .collect();
        TriangleMesh {
            vertices,
            faces,
            vertex_normals: self.vertex_normals.as_ref().map(|_| normals),
        }
    }

    /// Concatenates another mesh (vertex indices shifted).
    pub fn append(&mut self, other: &TriangleMesh) {
        let off = self.vertices.len() as u32;
        self.vertices.extend_from_slice(&other.vertices);
        self.faces
            .extend(other.faces.iter().map(|f| f.map(|v| v + off)));
        match (&mut self.vertex_normals, &other.vertex_normals) {
            (Some(a), Some(b)) => a.extend_from_slice(b),
            (a @ Some(_), None) => {
                // Normals are no longer complete; drop them.
                *a = None;
            }
            _ => {
                self.vertex_normals = None;
            }
        }
    }
}

/// Unit icosphere: subdivided icosahedron, a standard closed test surface.
pub fn icosphere(subdivisions: usize) -> TriangleMesh {
    let phi = (1.0 + 5.0_f64.sqrt()) / 2.0;
    let mut vertices: Vec<Vector3<f64>> = vec![
        Vector3::new(-1.0, phi, 0.0),
        Vector3::new(1.0, phi, 0.0),
        Vector3::new(-1.0, -phi, 0.0),
        Vector3::new(1.0, -phi, 0.0),
        Vector3::new(0.0, -1.0, phi),
        Vector3::new(0.0, 1.0, phi),
        Vector3::new(0.0, -1.0, -phi),
        Vector3::new(0.0, 1.0, -phi),
        Vector3::new(phi, 0.0, -1.0),
        Vector3::new(phi, 0.0, 1.0),
        Vector3::new(-phi, 0.0, -1.0),
        Vector3::new(-phi, 0.0, 1.0),
    ]
    .into_iter()
    .map(|v| v.normalize())
    .collect();
    let mut faces: Vec<[u32; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut midpoint: HashMap<(u32, u32), u32> = HashMap::new();
        let mut new_faces = Vec::with_capacity(faces.len() * 4);
        for f in &faces {
            let mut mid = [0u32; 3];
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                let key = (a.min(b), a.max(b));
                mid[k] = *midpoint.entry(key).or_insert_with(|| {
                    let m = ((vertices[a as usize] + vertices[b as usize]) * 0.5).normalize();
                    vertices.push(m);
                    (vertices.len() - 1) as u32
                });
            }
            new_faces.push([f[0], mid[0], mid[2]]);
            new_faces.push([f[1], mid[1], mid[0]]);
            new_faces.push([f[2], mid[2], mid[1]]);
            new_faces.push([mid[0], mid[1], mid[2]]);
        }
        faces = new_faces;
    }
    TriangleMesh {
        vertices,
        faces,
        vertex_normals: None,
    }
}
