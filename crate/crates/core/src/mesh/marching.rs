//! Marching cubes over a regular scalar grid.
//!
//! The 256-case triangulation table is generated at startup by tracing
//! iso-contour loops over the cell surface instead of being pasted in, which
//! keeps the case enumeration auditable: cross-cell consistency and loop
//! closure are structural properties of the generator, checked by tests.

use std::collections::HashMap;
use std::sync::OnceLock;

use nalgebra::Vector3;
use rayon::prelude::*;

use super::grid::ScalarGrid;
use super::TriangleMesh;

/// Cell corner `i` sits at offset (i&1, i>>1&1, i>>2&1) in cell units.
const CORNER_OFFSET: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [0, 1, 0],
    [1, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [0, 1, 1],
    [1, 1, 1],
];

/// The 12 cell edges as corner pairs: 0..4 along x, 4..8 along y, 8..12
/// along z. The first corner is always the lower one along the edge axis.
const EDGE_CORNERS: [(u8, u8); 12] = [
    (0, 1),
    (2, 3),
    (4, 5),
    (6, 7),
    (0, 2),
    (1, 3),
    (4, 6),
    (5, 7),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

/// Corner cycles of the six cell faces, counter-clockwise when viewed from
/// outside the cell. Shared edges appear in opposite order on the two
/// adjacent faces, which is what makes the contour segments link up.
const FACE_CYCLES: [[u8; 4]; 6] = [
    [0, 4, 6, 2], // -x
    [1, 3, 7, 5], // +x
    [0, 1, 5, 4], // -y
    [2, 6, 7, 3], // +y
    [0, 2, 3, 1], // -z
    [4, 5, 7, 6], // +z
];

fn edge_between(a: u8, b: u8) -> u8 {
    let key = (a.min(b), a.max(b));
    EDGE_CORNERS
        .iter()
        .position(|&e| e == key)
        .expect("corner pair is a cell edge") as u8
}

/// Closed contour loops for all 256 inside/outside corner configurations,
/// as ordered lists of crossing-edge indices. Loop order is chosen so the
/// natural winding gives normals pointing toward decreasing field values
/// (outward for a density-like field, inside = value > iso).
struct McTables {
    loops: Vec<Vec<Vec<u8>>>,
}

fn generate_tables() -> McTables {
    let mut loops = Vec::with_capacity(256);
    for config in 0u16..256 {
        let inside = |c: u8| config >> c & 1 == 1;
        // Directed contour segment per face: from the edge where the inside
        // region is exited (walking the cycle) to the next crossing, which is
        // necessarily an entry since crossings alternate along the cycle.
        let mut next_edge: HashMap<u8, u8> = HashMap::new();
        for cycle in &FACE_CYCLES {
            let crossings: Vec<(usize, bool)> = (0..4)
                .filter_map(|k| {
                    let (a, b) = (cycle[k], cycle[(k + 1) % 4]);
                    match (inside(a), inside(b)) {
                        (true, false) => Some((k, true)),
                        (false, true) => Some((k, false)),
                        _ => None,
                    }
                })
                .collect();
            for (idx, &(k, is_exit)) in crossings.iter().enumerate() {
                if !is_exit {
                    continue;
                }
                let (nk, entry) = crossings[(idx + 1) % crossings.len()];
                debug_assert!(!entry);
                let from = edge_between(cycle[k], cycle[(k + 1) % 4]);
                let to = edge_between(cycle[nk], cycle[(nk + 1) % 4]);
                next_edge.insert(from, to);
            }
        }
        // Each crossing edge has exactly one outgoing and one incoming
        // segment, so the segments decompose into closed loops. The walk
        // circles the inside region clockwise as seen from the low-field
        // side; reversing makes the natural winding face decreasing values.
        let mut cfg_loops = Vec::new();
        let mut visited: Vec<u8> = Vec::new();
        let mut starts: Vec<u8> = next_edge.keys().copied().collect();
        starts.sort_unstable();
        for &start in &starts {
            if visited.contains(&start) {
                continue;
            }
            let mut loop_edges = vec![start];
            let mut cur = next_edge[&start];
            while cur != start {
                loop_edges.push(cur);
                cur = next_edge[&cur];
            }
            visited.extend_from_slice(&loop_edges);
            loop_edges.reverse();
            cfg_loops.push(loop_edges);
        }
        loops.push(cfg_loops);
    }
    McTables { loops }
}

fn tables() -> &'static McTables {
    static TABLES: OnceLock<McTables> = OnceLock::new();
    TABLES.get_or_init(generate_tables)
}

/// Extracts the `iso` level set of a node-sampled field. Triangles are wound
/// so normals point toward decreasing field values; for a field that
/// decreases outward (density-like) the surface is oriented outward.
pub fn marching_cubes(grid: &ScalarGrid, iso: f64) -> TriangleMesh {
    let tab = tables();
    let [nx, ny, nz] = grid.dims;
    let cells_z = nz - 1;

    // Edge key: (flat node index of the lower corner, axis). Loops of four
    // or more vertices are star-triangulated around a cell-private centroid
    // vertex. Loop segments lie on cell faces and are matched 1:1 by the
    // neighbor across that face, while star edges stay private to the cell,
    // so no mesh edge can collect more than two faces away from the grid
    // boundary even on ambiguous configurations.
    type EdgeKey = (usize, u8);
    #[derive(Clone, Copy, PartialEq, Eq, Hash)]
    enum VKey {
        Edge(EdgeKey),
        Centroid(u32),
    }
    struct SlabOut {
        tris: Vec<[VKey; 3]>,
        pos: HashMap<EdgeKey, Vector3<f64>>,
        centroids: Vec<Vector3<f64>>,
    }

    let slabs: Vec<SlabOut> = (0..cells_z)
        .into_par_iter()
        .map(|k| {
            let mut out = SlabOut {
                tris: Vec::new(),
                pos: HashMap::new(),
                centroids: Vec::new(),
            };
            for j in 0..ny - 1 {
                for i in 0..nx - 1 {
                    let mut config = 0usize;
                    let mut values = [0.0f64; 8];
                    for (c, off) in CORNER_OFFSET.iter().enumerate() {
                        let v = grid.at(i + off[0], j + off[1], k + off[2]);
                        values[c] = v;
                        if v > iso {
                            config |= 1 << c;
                        }
                    }
                    if config == 0 || config == 255 {
                        continue;
                    }
                    for lp in &tab.loops[config] {
                        let keys: Vec<EdgeKey> = lp
                            .iter()
                            .map(|&e| {
                                let (ca, cb) = EDGE_CORNERS[e as usize];
                                let oa = CORNER_OFFSET[ca as usize];
                                let key = (
                                    grid.index(i + oa[0], j + oa[1], k + oa[2]),
                                    e / 4,
                                );
                                out.pos.entry(key).or_insert_with(|| {
                                    let ob = CORNER_OFFSET[cb as usize];
                                    let pa = grid.node_position(
                                        i + oa[0],
                                        j + oa[1],
                                        k + oa[2],
                                    );
                                    let pb = grid.node_position(
                                        i + ob[0],
                                        j + ob[1],
                                        k + ob[2],
                                    );
                                    let (fa, fb) =
                                        (values[ca as usize], values[cb as usize]);
                                    let t = if fb == fa {
                                        0.5
                                    } else {
                                        ((iso - fa) / (fb - fa)).clamp(0.0, 1.0)
                                    };
                                    pa + (pb - pa) * t
                                });
                                key
                            })
                            .collect();
                        if keys.len() == 3 {
                            out.tris.push([
                                VKey::Edge(keys[0]),
                                VKey::Edge(keys[1]),
                                VKey::Edge(keys[2]),
                            ]);
                        } else {
                            let centroid = keys
                                .iter()
                                .map(|key| out.pos[key])
                                .sum::<Vector3<f64>>()
                                / keys.len() as f64;
                            let ci = out.centroids.len() as u32;
                            out.centroids.push(centroid);
                            for (s, &a) in keys.iter().enumerate() {
                                let b = keys[(s + 1) % keys.len()];
                                out.tris.push([
                                    VKey::Centroid(ci),
                                    VKey::Edge(a),
                                    VKey::Edge(b),
                                ]);
                            }
                        }
                    }
                }
            }
            out
        })
        .collect();

    // Sequential weld in slab order keeps vertex ids deterministic. Edge
    // vertices are shared across cells; centroid ids are per-slab-local.
    let mut vertex_id: HashMap<EdgeKey, u32> = HashMap::new();
    let mut mesh = TriangleMesh::empty();
    for slab in &slabs {
        let mut centroid_id: Vec<Option<u32>> = vec![None; slab.centroids.len()];
        for tri in &slab.tris {
            let mut ids = [0u32; 3];
            for (slot, key) in tri.iter().enumerate() {
                ids[slot] = match *key {
                    VKey::Edge(ek) => *vertex_id.entry(ek).or_insert_with(|| {
                        mesh.vertices.push(slab.pos[&ek]);
                        (mesh.vertices.len() - 1) as u32
                    }),
                    VKey::Centroid(ci) => {
                        *centroid_id[ci as usize].get_or_insert_with(|| {
                            mesh.vertices.push(slab.centroids[ci as usize]);
                            (mesh.vertices.len() - 1) as u32
                        })
                    }
                };
            }
            if ids[0] != ids[1] && ids[1] != ids[2] && ids[0] != ids[2] {
                mesh.faces.push(ids);
            }
        }
    }
    mesh
}

/// Samples `f` on a grid fit to `lo..hi` with `n` nodes along the longest
/// axis, then extracts the `iso` level set.
pub fn marching_cubes_fn<F>(
    f: F,
    lo: Vector3<f64>,
    hi: Vector3<f64>,
    n: usize,
    iso: f64,
) -> crate::Result<TriangleMesh>
where
    F: Fn(Vector3<f64>) -> f64 + Sync,
{
    let mut grid = ScalarGrid::fit_bounds(lo, hi, n)?;
    grid.fill(f);
    Ok(marching_cubes(&grid, iso))
}
