//! Bound-gaussian table file: one JSON header line describing the layout,
//! followed by fixed-width little-endian binary rows. The mesh itself is
//! stored separately (OBJ or PLY); loading reattaches the table to it and
//! validates the pairing.

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::bind::{BoundGaussian, BoundScene};
use crate::error::{Error, Result};
use crate::math;
use crate::mesh::TriangleMesh;

const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    count: usize,
    n_per_triangle: usize,
    sh_degree: usize,
}

pub fn save_bound_table(path: impl AsRef<Path>, bs: &BoundScene) -> Result<()> {
    let path = path.as_ref();
    bs.validate()?;
    let header = Header {
        version: FORMAT_VERSION,
        count: bs.bound.len(),
        n_per_triangle: bs.n_per_triangle,
        sh_degree: bs.sh_degree,
    };
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    let header_text = serde_json::to_string(&header)
        .map_err(|e| Error::format(path, format!("header serialization failed: {e}")))?;
    writeln!(w, "{header_text}").map_err(io_err)?;
    for bg in &bs.bound {
        w.write_u32::<LittleEndian>(bg.tri_id).map_err(io_err)?;
        for c in 0..3 {
            w.write_f64::<LittleEndian>(bg.bary[c]).map_err(io_err)?;
        }
        for c in 0..2 {
            w.write_f64::<LittleEndian>(bg.log_scale2[c]).map_err(io_err)?;
        }
        for c in 0..2 {
            w.write_f64::<LittleEndian>(bg.rot2[c]).map_err(io_err)?;
        }
        w.write_f64::<LittleEndian>(bg.opacity_logit).map_err(io_err)?;
        for sh in &bg.sh {
            for c in 0..3 {
                w.write_f64::<LittleEndian>(sh[c]).map_err(io_err)?;
            }
        }
    }
    w.flush().map_err(io_err)
}

pub fn load_bound_table(path: impl AsRef<Path>, mesh: &TriangleMesh) -> Result<BoundScene> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut header_line = String::new();
    r.read_line(&mut header_line).map_err(|e| Error::io(path, e))?;
    let header: Header = serde_json::from_str(header_line.trim())
        .map_err(|e| Error::format(path, format!("bad header: {e}")))?;
    if header.version != FORMAT_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported table version {}", header.version),
        ));
    }
    let k_sh = math::sh_coeff_count(header.sh_degree);
    let mut bound = Vec::with_capacity(header.count);
    let io_err = |e| Error::io(path, e);
    for _ in 0..header.count {
        let tri_id = r.read_u32::<LittleEndian>().map_err(io_err)?;
        let mut scalars = [0.0f64; 8];
        for s in &mut scalars {
            *s = r.read_f64::<LittleEndian>().map_err(io_err)?;
        }
        let mut sh = Vec::with_capacity(k_sh);
        for _ in 0..k_sh {
            let mut c = [0.0f64; 3];
            for x in &mut c {
                *x = r.read_f64::<LittleEndian>().map_err(io_err)?;
            }
            sh.push(Vector3::new(c[0], c[1], c[2]));
        }
        bound.push(BoundGaussian {
            tri_id,
            bary: Vector3::new(scalars[0], scalars[1], scalars[2]),
            log_scale2: Vector2::new(scalars[3], scalars[4]),
            rot2: Vector2::new(scalars[5], scalars[6]),
            opacity_logit: scalars[7],
            sh,
        });
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(io_err)? != 0 {
        return Err(Error::format(path, "trailing bytes after bound table"));
    }
    let bs = BoundScene {
        mesh: mesh.clone(),
        bound,
        n_per_triangle: header.n_per_triangle,
        sh_degree: header.sh_degree,
    };
    bs.validate()?;
    Ok(bs)
}
