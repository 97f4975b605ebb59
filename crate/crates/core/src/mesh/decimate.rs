//! Quadric-error-metric mesh decimation by iterative edge collapse.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::collections::HashSet;

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};

use super::TriangleMesh;
use crate::error::Result;

/// Symmetric 4x4 plane quadric; cost(v) = [v 1] Q [v 1]^T.
#[derive(Debug, Clone, Copy)]
struct Quadric(Matrix4<f64>);

impl Quadric {
    fn zero() -> Quadric {
        Quadric(Matrix4::zeros())
    }

    /// Quadric of the plane through `p` with unit normal `n`, scaled by
    /// `area` so large faces dominate.
    fn from_plane(n: Vector3<f64>, p: Vector3<f64>, area: f64) -> Quadric {
        let d = -n.dot(&p);
        let v = Vector4::new(n.x, n.y, n.z, d);
        Quadric(v * v.transpose() * area)
    }

    fn add(&mut self, other: &Quadric) {
        self.0 += other.0;
    }

    fn cost(&self, v: Vector3<f64>) -> f64 {
        let h = Vector4::new(v.x, v.y, v.z, 1.0);
        (h.transpose() * self.0 * h)[0]
    }

    /// Minimizer of the quadric, or None when the 3x3 block is singular.
    fn optimal_position(&self) -> Option<Vector3<f64>> {
        let a = Matrix3::from_fn(|i, j| self.0[(i, j)]);
        let b = Vector3::new(self.0[(0, 3)], self.0[(1, 3)], self.0[(2, 3)]);
        let x = a.lu().solve(&(-b))?;
        if !x.iter().all(|c| c.is_finite()) {
            return None;
        }
        let residual = (a * x + b).norm();
        if residual > 1e-9 * (b.norm() + 1.0) {
            return None;
        }
        Some(x)
    }
}

#[derive(Debug)]
struct Candidate {
    cost: f64,
    a: u32,
    b: u32,
    versions: (u32, u32),
    position: Vector3<f64>,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Candidate {}
impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Candidate {
    // Reversed so BinaryHeap pops the cheapest collapse; ties broken by ids
    // for deterministic ordering.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| (other.a, other.b).cmp(&(self.a, self.b)))
    }
}

struct Decimator {
    positions: Vec<Vector3<f64>>,
    faces: Vec<[u32; 3]>,
    quadrics: Vec<Quadric>,
    incident: Vec<Vec<u32>>,
    face_alive: Vec<bool>,
    vertex_alive: Vec<bool>,
    version: Vec<u32>,
    heap: BinaryHeap<Candidate>,
    alive_vertices: usize,
}

impl Decimator {
    fn new(mesh: &TriangleMesh) -> Decimator {
        let nv = mesh.vertices.len();
        let mut quadrics = vec![Quadric::zero(); nv];
        let mut incident = vec![Vec::new(); nv];
        for (fi, f) in mesh.faces.iter().enumerate() {
            let raw = mesh.face_normal_raw(fi);
            let len = raw.norm();
            if len > 1e-30 {
                let q = Quadric::from_plane(
                    raw / len,
                    mesh.vertices[f[0] as usize],
                    0.5 * len,
                );
                for &v in f {
                    quadrics[v as usize].add(&q);
                }
            }
            for &v in f {
                incident[v as usize].push(fi as u32);
            }
        }
        let mut d = Decimator {
            positions: mesh.vertices.clone(),
            faces: mesh.faces.clone(),
            quadrics,
            incident,
            face_alive: vec![true; mesh.faces.len()],
            vertex_alive: vec![true; nv],
            version: vec![0; nv],
            heap: BinaryHeap::new(),
            alive_vertices: nv,
        };
        let mut edges: Vec<(u32, u32)> = mesh
            .faces
            .iter()
            .flat_map(|f| (0..3).map(|k| ordered(f[k], f[(k + 1) % 3])))
            .collect();
        edges.sort_unstable();
        edges.dedup();
        for (a, b) in edges {
            d.push_candidate(a, b);
        }
        d
    }

    fn push_candidate(&mut self, a: u32, b: u32) {
        let mut q = self.quadrics[a as usize];
        q.add(&self.quadrics[b as usize]);
        let position = q.optimal_position().unwrap_or_else(|| {
            (self.positions[a as usize] + self.positions[b as usize]) * 0.5
        });
        self.heap.push(Candidate {
            cost: q.cost(position).max(0.0),
            a,
            b,
            versions: (self.version[a as usize], self.version[b as usize]),
            position,
        });
    }

    fn neighbors(&self, v: u32) -> Vec<u32> {
        let mut out: Vec<u32> = self.incident[v as usize]
            .iter()
            .filter(|&&f| self.face_alive[f as usize])
            .flat_map(|&f| self.faces[f as usize].into_iter())
            .filter(|&u| u != v)
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Collapsing may only merge the faces on the edge itself; otherwise the
    /// mesh pinches. Holds iff the common neighborhood of the endpoints is
    /// exactly the opposite vertices of the shared faces.
    fn link_condition_holds(&self, a: u32, b: u32) -> bool {
        let na: HashSet<u32> = self.neighbors(a).into_iter().collect();
        let common = self
            .neighbors(b)
            .into_iter()
            .filter(|u| na.contains(u))
            .count();
        let shared_faces = self.incident[a as usize]
            .iter()
            .filter(|&&f| {
                self.face_alive[f as usize] && self.faces[f as usize].contains(&b)
            })
            .count();
        common == shared_faces
    }

    /// Rejects collapses that invert or squash any surviving incident face.
    fn flips_normal(&self, moved: u32, other: u32, target: Vector3<f64>) -> bool {
        for &fi in &self.incident[moved as usize] {
            if !self.face_alive[fi as usize] {
                continue;
            }
            let f = self.faces[fi as usize];
            if f.contains(&other) {
                continue; // dies in the collapse
            }
            let old = triangle_normal(
                self.positions[f[0] as usize],
                self.positions[f[1] as usize],
                self.positions[f[2] as usize],
            );
            let pick = |v: u32| {
                if v == moved {
                    target
                } else {
                    self.positions[v as usize]
                }
            };
            let new = triangle_normal(pick(f[0]), pick(f[1]), pick(f[2]));
            if new.norm() < 1e-14 || old.dot(&new) <= 0.0 {
                return true;
            }
        }
        false
    }

    fn collapse(&mut self, cand: &Candidate) {
        let (a, b) = (cand.a, cand.b);
        self.positions[a as usize] = cand.position;
        let qb = self.quadrics[b as usize];
        self.quadrics[a as usize].add(&qb);
        self.vertex_alive[b as usize] = false;
        self.alive_vertices -= 1;
        let b_faces = std::mem::take(&mut self.incident[b as usize]);
        for fi in b_faces {
            if !self.face_alive[fi as usize] {
                continue;
            }
            let f = &mut self.faces[fi as usize];
            if f.contains(&a) {
                self.face_alive[fi as usize] = false;
            } else {
                for v in f.iter_mut() {
                    if *v == b {
                        *v = a;
                    }
                }
                self.incident[a as usize].push(fi);
            }
        }
        self.version[a as usize] += 1;
        self.version[b as usize] += 1;
        for n in self.neighbors(a) {
            let (x, y) = ordered(a, n);
            self.push_candidate(x, y);
        }
    }

    fn run(&mut self, target: usize) {
        while self.alive_vertices > target {
            let Some(cand) = self.heap.pop() else { break };
            let (a, b) = (cand.a as usize, cand.b as usize);
            if !self.vertex_alive[a]
                || !self.vertex_alive[b]
                || cand.versions != (self.version[a], self.version[b])
            {
                continue; // stale entry
            }
            if !self.link_condition_holds(cand.a, cand.b)
                || self.flips_normal(cand.a, cand.b, cand.position)
                || self.flips_normal(cand.b, cand.a, cand.position)
            {
                continue;
            }
            self.collapse(&cand);
        }
    }

    fn into_mesh(self, had_normals: bool) -> TriangleMesh {
        let mut remap = vec![u32::MAX; self.positions.len()];
        let mut vertices = Vec::with_capacity(self.alive_vertices);
        for (i, alive) in self.vertex_alive.iter().enumerate() {
            if *alive {
                remap[i] = vertices.len() as u32;
                vertices.push(self.positions[i]);
            }
        }
        let faces = self
            .faces
            .iter()
            .zip(&self.face_alive)
            .filter(|(_, alive)| **alive)
            .map(|(f, _)| f.map(|v| remap[v as usize]))
            .collect();
        let mut mesh = TriangleMesh {
            vertices,
            faces,
            vertex_normals: None,
        };
        if had_normals {
            mesh.compute_vertex_normals();
        }
        mesh
    }
}

fn ordered(a: u32, b: u32) -> (u32, u32) {
    (a.min(b), a.max(b))
}

fn triangle_normal(a: Vector3<f64>, b: Vector3<f64>, c: Vector3<f64>) -> Vector3<f64> {
    (b - a).cross(&(c - a))
}

/// Collapses minimum-cost edges until at most `target_vertices` remain.
/// Collapses that would flip a face normal or pinch the surface are skipped,
/// so the result can stop above the target when no safe collapse is left.
pub fn decimate_qem(mesh: &TriangleMesh, target_vertices: usize) -> Result<TriangleMesh> {
    mesh.validate()?;
    if target_vertices >= mesh.vertices.len() {
        if target_vertices > mesh.vertices.len() {
            eprintln!(
                "decimate: target {} above current vertex count {}, returning input",
                target_vertices,
                mesh.vertices.len()
            );
        }
        return Ok(mesh.clone());
    }
    let mut d = Decimator::new(mesh);
    d.run(target_vertices.max(4));
    Ok(d.into_mesh(mesh.vertex_normals.is_some()))
}
