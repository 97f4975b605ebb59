//! Regular scalar grids used by marching cubes and the Poisson solver.

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Scalar field sampled at the nodes of a regular grid with cubic cells.
///
/// `dims` counts nodes per axis (so `dims[k] - 1` cells); values are stored
/// x-fastest, then y, then z.
#[derive(Debug, Clone)]
pub struct ScalarGrid {
    pub dims: [usize; 3],
    pub origin: Vector3<f64>,
    pub spacing: f64,
    pub values: Vec<f64>,
}

impl ScalarGrid {
    pub fn new(dims: [usize; 3], origin: Vector3<f64>, spacing: f64) -> Result<ScalarGrid> {
        if dims.iter().any(|&d| d < 2) {
            return Err(Error::Validation(format!(
                "grid needs at least 2 nodes per axis, got {dims:?}"
            )));
        }
        if !(spacing > 0.0) {
            return Err(Error::Validation(format!(
                "grid spacing must be positive, got {spacing}"
            )));
        }
        Ok(ScalarGrid {
            dims,
            origin,
            spacing,
            values: vec![0.0; dims[0] * dims[1] * dims[2]],
        })
    }

    /// Grid covering `lo..hi` with `n` nodes along the longest axis; other
    /// axes get however many cubic cells are needed to reach past their end.
    pub fn fit_bounds(lo: Vector3<f64>, hi: Vector3<f64>, n: usize) -> Result<ScalarGrid> {
        let size = hi - lo;
        if size.iter().any(|&s| !(s >= 0.0)) || size.max() <= 0.0 {
            return Err(Error::Validation(format!(
                "degenerate grid bounds {lo:?}..{hi:?}"
            )));
        }
        let n = n.max(2);
        let spacing = size.max() / (n - 1) as f64;
        let mut dims = [0usize; 3];
        for k in 0..3 {
            dims[k] = ((size[k] / spacing).ceil() as usize + 1).max(2);
        }
        ScalarGrid::new(dims, lo, spacing)
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.dims[1] + j) * self.dims[0] + i
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.index(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        let idx = self.index(i, j, k);
        self.values[idx] = v;
    }

    pub fn node_position(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        self.origin + Vector3::new(i as f64, j as f64, k as f64) * self.spacing
    }

    pub fn node_count(&self) -> usize {
        self.values.len()
    }

    /// Fills all nodes from `f`, parallel over z-slabs. Deterministic because
    /// each slab writes a disjoint range and `f` must be pure.
    pub fn fill<F>(&mut self, f: F)
    where
        F: Fn(Vector3<f64>) -> f64 + Sync,
    {
        let dims = self.dims;
        let origin = self.origin;
        let spacing = self.spacing;
        let slab = dims[0] * dims[1];
        self.values
            .par_chunks_mut(slab)
            .enumerate()
            .for_each(|(k, chunk)| {
                for j in 0..dims[1] {
                    for i in 0..dims[0] {
                        let p =
                            origin + Vector3::new(i as f64, j as f64, k as f64) * spacing;
                        chunk[j * dims[0] + i] = f(p);
                    }
                }
            });
    }

    /// Trilinear interpolation; clamps to the grid boundary.
    pub fn sample(&self, p: Vector3<f64>) -> f64 {
        let mut t = Vector3::zeros();
        let mut base = [0usize; 3];
        for k in 0..3 {
            let u = ((p[k] - self.origin[k]) / self.spacing)
                .clamp(0.0, (self.dims[k] - 1) as f64);
            let i = (u.floor() as usize).min(self.dims[k] - 2);
            base[k] = i;
            t[k] = u - i as f64;
        }
        let mut acc = 0.0;
        for dz in 0..2 {
            for dy in 0..2 {
                for dx in 0..2 {
                    let w = (if dx == 0 { 1.0 - t.x } else { t.x })
                        * (if dy == 0 { 1.0 - t.y } else { t.y })
                        * (if dz == 0 { 1.0 - t.z } else { t.z });
                    acc += w * self.at(base[0] + dx, base[1] + dy, base[2] + dz);
                }
            }
        }
        acc
    }
}
