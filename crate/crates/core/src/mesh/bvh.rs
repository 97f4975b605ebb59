//! Bounding-volume hierarchy over mesh triangles for closest-point queries.

use nalgebra::Vector3;

use super::TriangleMesh;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
struct Node {
    lo: Vector3<f64>,
    hi: Vector3<f64>,
    /// Leaf: (start, len) into `order`. Inner: children indices.
    content: NodeContent,
}

#[derive(Debug, Clone)]
enum NodeContent {
    Leaf { start: usize, len: usize },
    Inner { left: usize, right: usize },
}

/// Static BVH over the triangles of one mesh.
#[derive(Debug, Clone)]
pub struct MeshBvh {
    tris: Vec<[Vector3<f64>; 3]>,
    order: Vec<u32>,
    nodes: Vec<Node>,
    root: usize,
}

const LEAF_SIZE: usize = 8;

impl MeshBvh {
    pub fn build(mesh: &TriangleMesh) -> Result<MeshBvh> {
        if mesh.faces.is_empty() {
            return Err(Error::BadMesh("cannot build BVH over an empty mesh".into()));
        }
        mesh.validate()?;
        let tris: Vec<[Vector3<f64>; 3]> =
            (0..mesh.faces.len()).map(|f| mesh.face_vertices(f)).collect();
        let centroids: Vec<Vector3<f64>> =
            tris.iter().map(|t| (t[0] + t[1] + t[2]) / 3.0).collect();
        let mut order: Vec<u32> = (0..tris.len() as u32).collect();
        let mut nodes = Vec::new();
        let root = build_node(&tris, &centroids, &mut order, 0, tris.len(), &mut nodes);
        Ok(MeshBvh {
            tris,
            order,
            nodes,
            root,
        })
    }

    /// Distance from `p` to the mesh surface, and the face achieving it.
    pub fn distance(&self, p: Vector3<f64>) -> (f64, usize) {
        let mut best = (f64::INFINITY, 0usize);
        let mut stack = vec![self.root];
        while let Some(ni) = stack.pop() {
            let node = &self.nodes[ni];
            if aabb_dist_sq(node.lo, node.hi, p) >= best.0 {
                continue;
            }
            match node.content {
                NodeContent::Leaf { start, len } => {
                    for &ti in &self.order[start..start + len] {
                        let t = &self.tris[ti as usize];
                        let q = closest_point_triangle(p, t[0], t[1], t[2]);
                        let d2 = (p - q).norm_squared();
                        if d2 < best.0 {
                            best = (d2, ti as usize);
                        }
                    }
                }
                NodeContent::Inner { left, right } => {
                    // Visit the nearer child first for tighter pruning.
                    let dl = aabb_dist_sq(self.nodes[left].lo, self.nodes[left].hi, p);
                    let dr = aabb_dist_sq(self.nodes[right].lo, self.nodes[right].hi, p);
                    if dl <= dr {
                        stack.push(right);
                        stack.push(left);
                    } else {
                        stack.push(left);
                        stack.push(right);
                    }
                }
            }
        }
        (best.0.sqrt(), best.1)
    }
}

fn build_node(
    tris: &[[Vector3<f64>; 3]],
    centroids: &[Vector3<f64>],
    order: &mut [u32],
    start: usize,
    len: usize,
    nodes: &mut Vec<Node>,
) -> usize {
    let slice = &order[start..start + len];
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for &ti in slice {
        for v in &tris[ti as usize] {
            for k in 0..3 {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
        }
    }
    if len <= LEAF_SIZE {
        nodes.push(Node {
            lo,
            hi,
            content: NodeContent::Leaf { start, len },
        });
        return nodes.len() - 1;
    }
    let size = hi - lo;
    let axis = if size.x >= size.y && size.x >= size.z {
        0
    } else if size.y >= size.z {
        1
    } else {
        2
    };
    let mid = len / 2;
    order[start..start + len].select_nth_unstable_by(mid, |&a, &b| {
        centroids[a as usize][axis]
            .total_cmp(&centroids[b as usize][axis])
            .then(a.cmp(&b))
    });
    let left = build_node(tris, centroids, order, start, mid, nodes);
    let right = build_node(tris, centroids, order, start + mid, len - mid, nodes);
    nodes.push(Node {
        lo,
        hi,
        content: NodeContent::Inner { left, right },
    });
    nodes.len() - 1
}

fn aabb_dist_sq(lo: Vector3<f64>, hi: Vector3<f64>, p: Vector3<f64>) -> f64 {
    let mut d2 = 0.0;
    for k in 0..3 {
        let d = (lo[k] - p[k]).max(0.0).max(p[k] - hi[k]);
        d2 += d * d;
    }
    d2
}

/// Closest point on triangle abc to p (Voronoi-region case analysis).
pub fn closest_point_triangle(
    p: Vector3<f64>,
    a: Vector3<f64>,
    b: Vector3<f64>,
    c: Vector3<f64>,
) -> Vector3<f64> {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return a + ab * v;
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return a + ac * w;
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return b + (c - b) * w;
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    a + ab * v + ac * w
}
