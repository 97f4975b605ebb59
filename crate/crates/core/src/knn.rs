//! Deterministic kd-tree with k-nearest queries, plus the per-gaussian
//! neighborhood cache used by the density field.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::scene::Scene;

/// Static kd-tree over points. Construction and queries are fully
/// deterministic: splits cycle through axes and all distance ties resolve to
/// the lower point index.
pub struct KdTree {
    points: Vec<Vector3<f64>>,
    nodes: Vec<Node>,
    root: i32,
}

struct Node {
    point: u32,
    axis: u8,
    left: i32,
    right: i32,
}

impl KdTree {
    pub fn build(points: &[Vector3<f64>]) -> Result<KdTree> {
        if points.is_empty() {
            return Err(Error::EmptyPointSet("kd-tree over zero points".into()));
        }
        let mut ids: Vec<u32> = (0..points.len() as u32).collect();
        let mut nodes = Vec::with_capacity(points.len());
        let root = build_node(points, &mut ids, 0, &mut nodes);
        Ok(KdTree {
            points: points.to_vec(),
            nodes,
            root,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index of the nearest point (ties to the lowest index).
    pub fn nearest(&self, q: Vector3<f64>) -> usize {
        let mut best = (f64::INFINITY, u32::MAX);
        self.search_nearest(self.root, q, &mut best);
        best.1 as usize
    }

    /// The `k` nearest points as (index, squared distance), ordered by
    /// (distance, index).
    pub fn k_nearest(&self, q: Vector3<f64>, k: usize) -> Vec<(usize, f64)> {
        let k = k.min(self.points.len());
        if k == 0 {
            return Vec::new();
        }
        // Max-heap of (dist2, id) keeping the k best seen so far.
        let mut heap: Vec<(f64, u32)> = Vec::with_capacity(k + 1);
        self.search_knn(self.root, q, k, &mut heap);
        let mut out: Vec<(usize, f64)> = heap.into_iter().map(|(d, i)| (i as usize, d)).collect();
        out.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        out
    }

    fn search_nearest(&self, node: i32, q: Vector3<f64>, best: &mut (f64, u32)) {
        if node < 0 {
            return;
        }
        let n = &self.nodes[node as usize];
        let p = self.points[n.point as usize];
        let d2 = (p - q).norm_squared();
        if d2 < best.0 || (d2 == best.0 && n.point < best.1) {
            *best = (d2, n.point);
        }
        let delta = q[n.axis as usize] - p[n.axis as usize];
        let (near, far) = if delta < 0.0 {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        self.search_nearest(near, q, best);
        if delta * delta <= best.0 {
            self.search_nearest(far, q, best);
        }
    }

    fn search_knn(&self, node: i32, q: Vector3<f64>, k: usize, heap: &mut Vec<(f64, u32)>) {
        if node < 0 {
            return;
        }
        let n = &self.nodes[node as usize];
        let p = self.points[n.point as usize];
        let d2 = (p - q).norm_squared();
        heap_offer(heap, k, (d2, n.point));
        let delta = q[n.axis as usize] - p[n.axis as usize];
        let (near, far) = if delta < 0.0 {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        self.search_knn(near, q, k, heap);
        let worst = heap_worst(heap, k);
        if delta * delta <= worst {
            self.search_knn(far, q, k, heap);
        }
    }
}

/// Ordering used everywhere distances compete: nearer first, then lower id.
fn key_less(a: (f64, u32), b: (f64, u32)) -> bool {
    a.0 < b.0 || (a.0 == b.0 && a.1 < b.1)
}

fn heap_offer(heap: &mut Vec<(f64, u32)>, k: usize, item: (f64, u32)) {
    if heap.len() < k {
        heap.push(item);
        let last = heap.len() - 1;
        heap_sift_up(heap, last);
    } else if key_less(item, heap[0]) {
        heap[0] = item;
        heap_sift_down(heap, 0);
    }
}

fn heap_worst(heap: &[(f64, u32)], k: usize) -> f64 {
    if heap.len() < k {
        f64::INFINITY
    } else {
        heap[0].0
    }
}

fn heap_sift_up(heap: &mut [(f64, u32)], mut i: usize) {
    while i > 0 {
        let parent = (i - 1) / 2;
        if key_less(heap[parent], heap[i]) {
            heap.swap(parent, i);
            i = parent;
        } else {
            break;
        }
    }
}

fn heap_sift_down(heap: &mut [(f64, u32)], mut i: usize) {
    loop {
        let (l, r) = (2 * i + 1, 2 * i + 2);
        let mut largest = i;
        if l < heap.len() && key_less(heap[largest], heap[l]) {
            largest = l;
        }
        if r < heap.len() && key_less(heap[largest], heap[r]) {
            largest = r;
        }
        if largest == i {
            return;
        }
        heap.swap(i, largest);
        i = largest;
    }
}

fn build_node(
    points: &[Vector3<f64>],
    ids: &mut [u32],
    depth: usize,
    nodes: &mut Vec<Node>,
) -> i32 {
    if ids.is_empty() {
        return -1;
    }
    let axis = (depth % 3) as u8;
    let mid = ids.len() / 2;
    ids.select_nth_unstable_by(mid, |&a, &b| {
        points[a as usize][axis as usize]
            .total_cmp(&points[b as usize][axis as usize])
            .then(a.cmp(&b))
    });
    let point = ids[mid];
    let slot = nodes.len();
    nodes.push(Node {
        point,
        axis,
        left: -1,
        right: -1,
    });
    let (lo, rest) = ids.split_at_mut(mid);
    let hi = &mut rest[1..];
    let left = build_node(points, lo, depth + 1, nodes);
    let right = build_node(points, hi, depth + 1, nodes);
    nodes[slot].left = left;
    nodes[slot].right = right;
    slot as i32
}

/// Precomputed k-nearest-gaussian lists keyed by the gaussian nearest to a
/// query point. Rebuilt periodically during training as means move.
pub struct NeighborIndex {
    tree: KdTree,
    neighbors: Vec<Vec<u32>>,
    k: usize,
}

impl NeighborIndex {
    /// Neighborhood size used by the localized density evaluation.
    pub const DEFAULT_K: usize = 16;

    pub fn build(scene: &Scene, k: usize) -> Result<NeighborIndex> {
        if k == 0 {
            return Err(Error::Validation("neighborhood size must be positive".into()));
        }
        let means: Vec<Vector3<f64>> = scene.gaussians.iter().map(|g| g.mean).collect();
        let tree = KdTree::build(&means)?;
        let neighbors = means
            .iter()
            .map(|&m| {
                tree.k_nearest(m, k)
                    .into_iter()
                    .map(|(i, _)| i as u32)
                    .collect()
            })
            .collect();
        Ok(NeighborIndex {
            tree,
            neighbors,
            k,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    /// Gaussian whose mean is closest to `p`.
    pub fn nearest_gaussian(&self, p: Vector3<f64>) -> usize {
        self.tree.nearest(p)
    }

    /// Candidate gaussians for field evaluation at `p`: the stored neighbor
    /// list of the gaussian nearest to `p` (always contains that gaussian).
    pub fn candidates(&self, p: Vector3<f64>) -> &[u32] {
        &self.neighbors[self.tree.nearest(p)]
    }

    pub fn neighbors_of(&self, g: usize) -> &[u32] {
        &self.neighbors[g]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn random_points(n: usize, seed: u64) -> Vec<Vector3<f64>> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                Vector3::new(
                    math::normal_deviate(&mut rng),
                    math::normal_deviate(&mut rng),
                    math::normal_deviate(&mut rng),
                )
            })
            .collect()
    }

    fn brute_knn(points: &[Vector3<f64>], q: Vector3<f64>, k: usize) -> Vec<(usize, f64)> {
        let mut all: Vec<(usize, f64)> = points
            .iter()
            .enumerate()
            .map(|(i, p)| (i, (p - q).norm_squared()))
            .collect();
        all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        all.truncate(k);
        all
    }

    #[test]
    fn knn_matches_brute_force() {
        let points = random_points(300, 17);
        let tree = KdTree::build(&points).unwrap();
        let queries = random_points(50, 18);
        for q in queries {
            let got = tree.k_nearest(q, 16);
            let want = brute_knn(&points, q, 16);
            assert_eq!(got, want);
            assert_eq!(tree.nearest(q), want[0].0);
        }
    }

    #[test]
    fn knn_with_duplicate_points_ties_to_low_index() {
        let mut points = random_points(20, 3);
        points[7] = points[2];
        points[15] = points[2];
        let tree = KdTree::build(&points).unwrap();
        let got = tree.k_nearest(points[2], 3);
        assert_eq!(got[0].0, 2);
        assert_eq!(got[1].0, 7);
        assert_eq!(got[2].0, 15);
        assert_eq!(tree.nearest(points[2]), 2);
    }

    #[test]
    fn k_larger_than_point_count_returns_all() {
        let points = random_points(5, 4);
        let tree = KdTree::build(&points).unwrap();
        let got = tree.k_nearest(Vector3::zeros(), 16);
        assert_eq!(got.len(), 5);
    }

    #[test]
    fn empty_tree_is_an_error() {
        assert!(KdTree::build(&[]).is_err());
    }
}
