//! Generator for a small synthetic corpus of colored shapes.
//!
//! Every image contains exactly one instance of each concept on a noisy
//! gray background: a red disc ("polyp"), a green square ("nodule") and a
//! blue triangle ("instrument"). Shapes never touch, so each label forms a
//! single 8-connected component.

use std::fs;
use std::path::Path;

use serde_json::json;

use crate::corpus::{save_label_map, Raster};
use crate::geometry::Grid;
use crate::rng::{derive_seed, Stream};
use crate::{Error, Result};

pub const DATASET: &str = "synthetic";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Disc,
    Square,
    Triangle,
}

/// `(label, concept, shape, rgb)` of each synthetic concept.
const CONCEPTS: [(u8, &str, Shape, [f32; 3]); 3] = [
    (1, "polyp", Shape::Disc, [0.85, 0.15, 0.15]),
    (2, "nodule", Shape::Square, [0.15, 0.8, 0.2]),
    (3, "instrument", Shape::Triangle, [0.2, 0.3, 0.9]),
];

pub fn concepts() -> Vec<&'static str> {
    CONCEPTS.iter().map(|c| c.1).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub images: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            images: 200,
            size: 128,
            seed: 7,
        }
    }
}

fn inside(shape: Shape, dy: f64, dx: f64, r: f64) -> bool {
    match shape {
        Shape::Disc => dx * dx + dy * dy <= r * r,
        Shape::Square => dx.abs() <= r * 0.85 && dy.abs() <= r * 0.85,
        // Apex up, base at dy = r; half-width grows linearly from the apex.
        Shape::Triangle => dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0,
    }
}

/// Renders one image and its label map.
pub fn render(size: usize, seed: u64) -> (Raster, Grid<u8>) {
    let mut s = Stream::new(seed);
    let bg = 0.15 + 0.2 * s.unit() as f32;
    let mut pixels: Vec<f32> = (0..size * size * 3)
        .map(|_| (bg + 0.08 * (s.unit() as f32 - 0.5)).clamp(0.0, 1.0))
        .collect();
    let mut labels = Grid::filled(size, size, 0u8);

    let side = size as f64;
    let mut placed: Vec<(f64, f64, f64)> = Vec::new();
    for &(label, _, shape, color) in &CONCEPTS {
        let (mut cy, mut cx, mut r);
        loop {
            r = side * (0.08 + 0.07 * s.unit());
            cy = r + 1.0 + (side - 2.0 * r - 2.0) * s.unit();
            cx = r + 1.0 + (side - 2.0 * r - 2.0) * s.unit();
            // Bounding circles at least 3 px apart.
            if placed
                .iter()
                .all(|&(py, px, pr)| ((py - cy).powi(2) + (px - cx).powi(2)).sqrt() > pr + r + 3.0)
            {
                break;
            }
        }
        placed.push((cy, cx, r));
        let jitter: Vec<f32> = (0..3).map(|_| 0.1 * (s.unit() as f32 - 0.5)).collect();
        for row in 0..size {
            for col in 0..size {
                let (dy, dx) = (row as f64 + 0.5 - cy, col as f64 + 0.5 - cx);
                if inside(shape, dy, dx, r) {
                    labels.set(row, col, label);
                    for ch in 0..3 {
                        pixels[(row * size + col) * 3 + ch] = (color[ch] + jitter[ch]).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    let raster = Raster::new(size, size, pixels).expect("dimensions are consistent");
    (raster, labels)
}

/// Writes `images/`, `masks/` and `manifest.jsonl` under `dir`.
pub fn write_corpus(dir: &Path, spec: &SyntheticSpec) -> Result<()> {
    if spec.images == 0 || spec.size < 16 {
        return Err(Error::Validation("synthetic corpus needs >= 1 image of side >= 16".into()));
    }
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::file(&p, e))?;
    }
    let labels: serde_json::Map<String, serde_json::Value> = CONCEPTS
        .iter()
        .map(|(l, c, _, _)| (l.to_string(), json!(c)))
        .collect();
    let mut manifest = String::new();
    for i in 0..spec.images {
        let id = format!("syn-{i:04}");
        let (image, mask) = render(spec.size, derive_seed(spec.seed, i as u64));
        image.save_png(&dir.join("images").join(format!("{id}.png")))?;
        save_label_map(&mask, &dir.join("masks").join(format!("{id}.png")))?;
        let line = json!({
            "id": id,
            "image": format!("images/{id}.png"),
            "mask": format!("masks/{id}.png"),
            "dataset": DATASET,
            "modality": "synthetic",
            "labels": labels,
        });
        manifest.push_str(&line.to_string());
        manifest.push('\n');
    }
    let path = dir.join("manifest.jsonl");
    fs::write(&path, manifest).map_err(|e| Error::file(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::connected_components;

    #[test]
    fn each_concept_is_one_component() {
        for seed in 0..20 {
            let (_, labels) = render(64, seed);
            for (label, ..) in CONCEPTS {
                assert_eq!(connected_components(&labels, label).len(), 1, "seed {seed} label {label}");
            }
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        assert_eq!(render(32, 5), render(32, 5));
        assert_ne!(render(32, 5).1, render(32, 6).1);
    }
}
