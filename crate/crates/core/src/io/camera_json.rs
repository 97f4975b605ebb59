//! Camera JSON files.
//!
//! The on-disk convention defaults to "opencv" (+z forward, y down). Files
//! may declare `"convention": "opengl"` (-z forward, y up); poses are
//! converted to the internal opencv frame on load. A bare JSON array of
//! cameras is accepted and treated as opencv.

use std::path::Path;

use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::Camera;

#[derive(Debug, Serialize, Deserialize)]
struct CameraRecord {
    width: usize,
    height: usize,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    /// Row-major 4x4 world-to-camera matrix.
    world_to_cam: [f64; 16],
}

#[derive(Debug, Serialize, Deserialize)]
struct CameraFile {
    #[serde(default = "default_convention")]
    convention: String,
    cameras: Vec<CameraRecord>,
}

fn default_convention() -> String {
    "opencv".to_string()
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum CameraFileCompat {
    Tagged(CameraFile),
    Bare(Vec<CameraRecord>),
}

fn record_to_camera(rec: CameraRecord, opengl: bool, idx: usize, path: &Path) -> Result<Camera> {
    let mut m = Matrix4::zeros();
    for r in 0..4 {
        for c in 0..4 {
            m[(r, c)] = rec.world_to_cam[r * 4 + c];
        }
    }
    if opengl {
        // OpenGL cameras look down -z with y up; flipping those two axes
        // yields the internal frame.
        let mut flip = Matrix4::identity();
        flip[(1, 1)] = -1.0;
        flip[(2, 2)] = -1.0;
        m = flip * m;
    }
    let mut cam = Camera {
        width: rec.width,
        height: rec.height,
        fx: rec.fx,
        fy: rec.fy,
        cx: rec.cx,
        cy: rec.cy,
        world_to_cam: m,
    };
    cam.validate().map_err(|e| {
        Error::format(path, format!("camera {idx}: {e}"))
    })?;
    cam.reorthonormalize();
    Ok(cam)
}

pub fn load_cameras(path: impl AsRef<Path>) -> Result<Vec<Camera>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parsed: CameraFileCompat = serde_json::from_str(&text)
        .map_err(|e| Error::format(path, format!("json parse failed: {e}")))?;
    let (convention, records) = match parsed {
        CameraFileCompat::Tagged(f) => (f.convention, f.cameras),
        CameraFileCompat::Bare(cams) => (default_convention(), cams),
    };
    let opengl = match convention.as_str() {
        "opencv" => false,
        "opengl" => true,
        other => {
            return Err(Error::format(
                path,
                format!("unknown camera convention `{other}` (expected opencv or opengl)"),
            ))
        }
    };
    if records.is_empty() {
        return Err(Error::format(path, "camera list is empty"));
    }
    records
        .into_iter()
        .enumerate()
        .map(|(i, rec)| record_to_camera(rec, opengl, i, path))
        .collect()
}

/// Saves cameras in the internal opencv convention.
pub fn save_cameras(path: impl AsRef<Path>, cameras: &[Camera]) -> Result<()> {
    let path = path.as_ref();
    if cameras.is_empty() {
        return Err(Error::Validation("refusing to save empty camera list".into()));
    }
    let records: Vec<CameraRecord> = cameras
        .iter()
        .map(|cam| {
            let mut m = [0.0; 16];
            for r in 0..4 {
                for c in 0..4 {
                    m[r * 4 + c] = cam.world_to_cam[(r, c)];
                }
            }
            CameraRecord {
                width: cam.width,
                height: cam.height,
                fx: cam.fx,
                fy: cam.fy,
                cx: cam.cx,
                cy: cam.cy,
                world_to_cam: m,
            }
        })
        .collect();
    let file = CameraFile {
        convention: default_convention(),
        cameras: records,
    };
    let text = serde_json::to_string_pretty(&file)
        .map_err(|e| Error::format(path, format!("serialize failed: {e}")))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
