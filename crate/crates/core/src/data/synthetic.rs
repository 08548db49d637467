//! Procedural test images: smooth colour gradients with a few hard-edged
//! shapes and some periodic texture, quantized to 8 bits.

use std::path::{Path, PathBuf};

use rand::Rng;

use super::io::{save_image, write_manifest};
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::seed;

enum Shape {
    Disc { cy: f32, cx: f32, r: f32 },
    Rect { top: f32, left: f32, bottom: f32, right: f32 },
}

impl Shape {
    fn contains(&self, y: f32, x: f32) -> bool {
        match *self {
            Shape::Disc { cy, cx, r } => (y - cy).powi(2) + (x - cx).powi(2) <= r * r,
            Shape::Rect {
                top,
                left,
                bottom,
                right,
            } => y >= top && y < bottom && x >= left && x < right,
        }
    }
}

pub fn synthetic_image(height: usize, width: usize, seed: u64) -> ImageBuffer {
    let mut rng = seed::rng(seed::derive_seed(seed, "synthetic"));
    let (hf, wf) = (height as f32, width as f32);
    let base: [[f32; 3]; 3] = std::array::from_fn(|_| std::array::from_fn(|_| rng.gen_range(0.1..0.9)));
    let n_shapes = rng.gen_range(3..8);
    let shapes: Vec<(Shape, [f32; 3])> = (0..n_shapes)
        .map(|_| {
            let colour = std::array::from_fn(|_| rng.gen_range(0.0..1.0));
            let shape = if rng.gen_bool(0.5) {
                Shape::Disc {
                    cy: rng.gen_range(0.0..hf),
                    cx: rng.gen_range(0.0..wf),
                    r: rng.gen_range(0.05..0.3) * hf.min(wf),
                }
            } else {
                let (top, left) = (rng.gen_range(0.0..hf), rng.gen_range(0.0..wf));
                Shape::Rect {
                    top,
                    left,
                    bottom: top + rng.gen_range(0.1..0.5) * hf,
                    right: left + rng.gen_range(0.1..0.5) * wf,
                }
            };
            (shape, colour)
        })
        .collect();
    let freq = rng.gen_range(0.15..0.6f32);
    let angle = rng.gen_range(0.0..std::f32::consts::PI);
    let (fy, fx) = (freq * angle.sin(), freq * angle.cos());
    let amp = rng.gen_range(0.02..0.08f32);

    let mut px = Vec::with_capacity(height * width * 3);
    for r in 0..height {
        for c in 0..width {
            let (y, x) = (r as f32, c as f32);
            let (u, v) = (y / hf, x / wf);
            let mut rgb: [f32; 3] =
                std::array::from_fn(|ch| base[0][ch] * (1.0 - u) + base[1][ch] * u * (1.0 - v) + base[2][ch] * u * v);
            for (shape, colour) in &shapes {
                if shape.contains(y, x) {
                    rgb = *colour;
                }
            }
            let texture = amp * (fy * y + fx * x).sin();
            for v in rgb {
                let noise = rng.gen_range(-0.01..0.01f32);
                let s = (v + texture + noise).clamp(0.0, 1.0);
                px.push((s * 255.0).round() / 255.0);
            }
        }
    }
    ImageBuffer::new(height, width, px).expect("dimensions are consistent")
}

/// Writes `count` synthetic PNGs plus a `manifest.txt` listing them into
/// `dir` and returns the manifest path.
pub fn write_synthetic_dataset(
    dir: &Path,
    count: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::with_capacity(count);
    for i in 0..count {
        let name = PathBuf::from(format!("synthetic_{i:03}.png"));
        let img = synthetic_image(height, width, seed::derive_seed(seed, &format!("image{i}")));
        save_image(&img, &dir.join(&name))?;
        names.push(name);
    }
    let manifest = dir.join("manifest.txt");
    write_manifest(&names, &manifest)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_image, read_manifest};

    #[test]
    fn deterministic_and_8bit_exact() {
        let a = synthetic_image(20, 30, 1);
        assert_eq!(a, synthetic_image(20, 30, 1));
        assert_ne!(a, synthetic_image(20, 30, 2));
        assert_eq!(a, a.quantized_8bit());
    }

    #[test]
    fn dataset_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_synthetic_dataset(dir.path(), 3, 16, 20, 4).unwrap();
        let paths = read_manifest(&m).unwrap();
        assert_eq!(paths.len(), 3);
        assert_eq!(load_image(&paths[1]).unwrap().dims(), (16, 20));
    }
}
