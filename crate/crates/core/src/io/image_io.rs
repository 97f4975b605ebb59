//! PNG images and raw depth maps.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::render::{DepthMap, Image};

/// Saves an RGB image; channels are clamped to [0, 1] and quantized to 8 bits
/// with round-to-nearest.
pub fn save_png(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    let path = path.as_ref();
    let mut buf = image::RgbImage::new(img.width as u32, img.height as u32);
    for y in 0..img.height {
        for x in 0..img.width {
            let c = img.pixel(x, y);
            let px = image::Rgb([
                (c[0].clamp(0.0, 1.0) * 255.0).round() as u8,
                (c[1].clamp(0.0, 1.0) * 255.0).round() as u8,
                (c[2].clamp(0.0, 1.0) * 255.0).round() as u8,
            ]);
            buf.put_pixel(x as u32, y as u32, px);
        }
    }
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::format(path, format!("png encode failed: {e}")))
}

pub fn load_png(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let img = image::open(path)
        .map_err(|e| Error::format(path, format!("png decode failed: {e}")))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Image::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let p = img.get_pixel(x as u32, y as u32);
            out.set_pixel(
                x,
                y,
                nalgebra::Vector3::new(
                    p[0] as f64 / 255.0,
                    p[1] as f64 / 255.0,
                    p[2] as f64 / 255.0,
                ),
            );
        }
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct DepthHeader {
    width: usize,
    height: usize,
    /// Always "f32le_row_major": depth then coverage plane.
    encoding: String,
}

/// Raw depth storage: a JSON header next to a flat binary payload holding the
/// depth plane followed by the coverage (accumulated alpha) plane.
pub struct DepthFile;

impl DepthFile {
    pub fn save(path_base: impl AsRef<Path>, depth: &DepthMap) -> Result<()> {
        let base = path_base.as_ref();
        let bin_path = base.with_extension("bin");
        let json_path = base.with_extension("json");
        let header = DepthHeader {
            width: depth.width,
            height: depth.height,
            encoding: "f32le_row_major".to_string(),
        };
        std::fs::write(
            &json_path,
            serde_json::to_string_pretty(&header).expect("header serializes"),
        )
        .map_err(|e| Error::io(&json_path, e))?;
        let mut bytes = Vec::with_capacity(8 * depth.depth.len());
        for v in &depth.depth {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        for v in &depth.coverage {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        std::fs::write(&bin_path, bytes).map_err(|e| Error::io(&bin_path, e))
    }

    pub fn load(path_base: impl AsRef<Path>) -> Result<DepthMap> {
        let base = path_base.as_ref();
        let bin_path = base.with_extension("bin");
        let json_path = base.with_extension("json");
        let header: DepthHeader = serde_json::from_str(
            &std::fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?,
        )
        .map_err(|e| Error::format(&json_path, format!("bad depth header: {e}")))?;
        if header.encoding != "f32le_row_major" {
            return Err(Error::format(
                &json_path,
                format!("unknown depth encoding `{}`", header.encoding),
            ));
        }
        let bytes = std::fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
        let n = header.width * header.height;
        if bytes.len() != 8 * n {
            return Err(Error::format(
                &bin_path,
                format!("expected {} bytes, found {}", 8 * n, bytes.len()),
            ));
        }
        let read_plane = |offset: usize| -> Vec<f64> {
            (0..n)
                .map(|i| {
                    let at = offset + 4 * i;
                    f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as f64
                })
                .collect()
        };
        Ok(DepthMap {
            width: header.width,
            height: header.height,
            depth: read_plane(0),
            coverage: read_plane(4 * n),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    #[test]
    fn png_round_trip_is_exact_on_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("img.png");
        let mut img = Image::new(8, 4);
        for y in 0..4 {
            for x in 0..8 {
                // Exactly representable 8-bit levels survive the round trip.
                let v = ((x + 8 * y) % 256) as f64 / 255.0;
                img.set_pixel(x, y, Vector3::new(v, 1.0 - v, 0.5 * v));
            }
        }
        // Quantize the expectation the same way the encoder does.
        save_png(&p, &img).unwrap();
        let loaded = load_png(&p).unwrap();
        for (a, b) in img.pixels.iter().zip(&loaded.pixels) {
            for c in 0..3 {
                let expect = (a[c] * 255.0).round() / 255.0;
                assert!((expect - b[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn depth_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("depth");
        let depth = DepthMap {
            width: 3,
            height: 2,
            depth: vec![0.5, 1.5, 2.5, 3.5, 0.0, 9.25],
            coverage: vec![1.0, 0.75, 0.5, 0.25, 0.0, 1.0],
        };
        DepthFile::save(&base, &depth).unwrap();
        let loaded = DepthFile::load(&base).unwrap();
        assert_eq!(loaded.depth, depth.depth);
        assert_eq!(loaded.coverage, depth.coverage);
    }
}
