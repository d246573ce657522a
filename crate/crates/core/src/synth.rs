//! Deterministic synthetic segmentation scenes.
//!
//! A scene is a softly striped background (category 0) with one to four
//! non-overlapping rectangles, disks or triangles. Every shape category has
//! its own base colour; per-pixel Gaussian noise (sigma 0.05) is added and
//! values are clamped to [0, 1].

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{PftError, Result};
use crate::pyramid::check_input_size;
use crate::segmap::LabelMap;
use crate::tensor::Tensor;

pub const NOISE_STD: f64 = 0.05;
pub const MIN_SHAPE_PIXELS: usize = 16;
/// Offset between the train and validation seed ranges.
pub const VAL_SEED_OFFSET: u64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Rectangle { x0: f64, y0: f64, x1: f64, y1: f64 },
    Disk { cx: f64, cy: f64, r: f64 },
    Triangle { pts: [(f64, f64); 3] },
}

impl Shape {
    /// Whether the point `(x, y)` lies inside (pixel centres are tested).
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Rectangle { x0, y0, x1, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
            Shape::Disk { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Triangle { pts } => {
                let edge = |(ax, ay): (f64, f64), (bx, by): (f64, f64)| (bx - ax) * (y - ay) - (by - ay) * (x - ax);
                let d = [edge(pts[0], pts[1]), edge(pts[1], pts[2]), edge(pts[2], pts[0])];
                d.iter().all(|v| *v >= 0.0) || d.iter().all(|v| *v <= 0.0)
            }
        }
    }

    pub fn area(&self) -> f64 {
        match *self {
            Shape::Rectangle { x0, y0, x1, y1 } => (x1 - x0) * (y1 - y0),
            Shape::Disk { r, .. } => std::f64::consts::PI * r * r,
            Shape::Triangle { pts } => {
                let [(ax, ay), (bx, by), (cx, cy)] = pts;
                0.5 * ((bx - ax) * (cy - ay) - (cx - ax) * (by - ay)).abs()
            }
        }
    }

    pub fn perimeter(&self) -> f64 {
        match *self {
            Shape::Rectangle { x0, y0, x1, y1 } => 2.0 * ((x1 - x0) + (y1 - y0)),
            Shape::Disk { r, .. } => 2.0 * std::f64::consts::PI * r,
            Shape::Triangle { pts } => (0..3)
                .map(|i| {
                    let (a, b) = (pts[i], pts[(i + 1) % 3]);
                    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
                })
                .sum(),
        }
    }

    /// `(x0, y0, x1, y1)` bounding box.
    pub fn bbox(&self) -> (f64, f64, f64, f64) {
        match *self {
            Shape::Rectangle { x0, y0, x1, y1 } => (x0, y0, x1, y1),
            Shape::Disk { cx, cy, r } => (cx - r, cy - r, cx + r, cy + r),
            Shape::Triangle { pts } => {
                let xs = pts.map(|p| p.0);
                let ys = pts.map(|p| p.1);
                let min = |v: [f64; 3]| v.iter().copied().fold(f64::INFINITY, f64::min);
                let max = |v: [f64; 3]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                (min(xs), min(ys), max(xs), max(ys))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlacedShape {
    pub category: u8,
    pub shape: Shape,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    /// `[3, H, W]` in [0, 1].
    pub image: Tensor,
    pub labels: LabelMap,
    pub seed: u64,
    /// In paint order.
    pub shapes: Vec<PlacedShape>,
}

/// Base RGB colour of a category.
pub fn category_color(category: u8, classes: usize) -> [f64; 3] {
    if category == 0 {
        return [0.45, 0.45, 0.45];
    }
    let hue = (category as f64 - 1.0) / (classes.max(2) - 1) as f64;
    let h6 = hue * 6.0;
    let x = 1.0 - (h6 % 2.0 - 1.0).abs();
    let (r, g, b) = match h6 as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    let value = if category.is_multiple_of(2) { 0.7 } else { 0.95 };
    [0.05 + value * 0.9 * r, 0.05 + value * 0.9 * g, 0.05 + value * 0.9 * b]
}

fn random_shape<R: Rng>(rng: &mut R, h: usize, w: usize) -> Shape {
    let (hf, wf) = (h as f64, w as f64);
    let min_dim = (hf.min(wf) / 6.0).max(5.0);
    let max_dim = (hf.min(wf) / 2.2).max(min_dim + 1.0);
    let size = rng.random_range(min_dim..max_dim);
    match rng.random_range(0..3) {
        0 => {
            let aspect = rng.random_range(0.6..1.6);
            let (sw, sh) = ((size * aspect).min(wf - 2.0), (size / aspect).min(hf - 2.0));
            let x0 = rng.random_range(0.0..wf - sw);
            let y0 = rng.random_range(0.0..hf - sh);
            Shape::Rectangle {
                x0,
                y0,
                x1: x0 + sw,
                y1: y0 + sh,
            }
        }
        1 => {
            let r = size / 2.0;
            Shape::Disk {
                cx: rng.random_range(r..wf - r),
                cy: rng.random_range(r..hf - r),
                r,
            }
        }
        _ => {
            let x0 = rng.random_range(0.0..wf - size);
            let y0 = rng.random_range(0.0..hf - size);
            let apex = rng.random_range(x0..x0 + size);
            Shape::Triangle {
                pts: [(x0, y0 + size), (x0 + size, y0 + size), (apex, y0)],
            }
        }
    }
}

fn overlaps(a: &Shape, b: &Shape) -> bool {
    let (ax0, ay0, ax1, ay1) = a.bbox();
    let (bx0, by0, bx1, by1) = b.bbox();
    const GAP: f64 = 1.0;
    ax0 < bx1 + GAP && bx0 < ax1 + GAP && ay0 < by1 + GAP && by0 < ay1 + GAP
}

fn pixel_count(shape: &Shape, h: usize, w: usize) -> usize {
    let mut n = 0;
    for y in 0..h {
        for x in 0..w {
            n += shape.contains(x as f64 + 0.5, y as f64 + 0.5) as usize;
        }
    }
    n
}

/// Deterministic scene for `seed`; `H`, `W` multiples of 32, `classes >= 2`.
pub fn generate_scene(seed: u64, height: usize, width: usize, classes: usize) -> Result<SceneSample> {
    check_input_size(height, width)?;
    if !(2..=255).contains(&classes) {
        return Err(PftError::Config(format!("scene needs 2..=255 categories, got {classes}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let wanted = rng.random_range(1..=4);
    let mut shapes: Vec<PlacedShape> = Vec::new();
    let mut attempts = 0;
    while shapes.len() < wanted && attempts < 200 {
        attempts += 1;
        let shape = random_shape(&mut rng, height, width);
        let category = rng.random_range(1..classes) as u8;
        if shapes.iter().any(|s| overlaps(&s.shape, &shape)) {
            continue;
        }
        if pixel_count(&shape, height, width) < MIN_SHAPE_PIXELS {
            continue;
        }
        shapes.push(PlacedShape { category, shape });
    }

    let mut labels = LabelMap::filled(height, width, 0);
    for s in &shapes {
        for y in 0..height {
            for x in 0..width {
                if s.shape.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    labels.set(y, x, s.category);
                }
            }
        }
    }

    let noise = Normal::new(0.0, NOISE_STD).expect("noise std");
    let freq = rng.random_range(0.15..0.45);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let hw = height * width;
    let mut data = vec![0.0; 3 * hw];
    for y in 0..height {
        for x in 0..width {
            let label = labels.get(y, x);
            let base = category_color(label, classes);
            let texture = if label == 0 {
                0.06 * (freq * (x as f64 + 0.7 * y as f64) + phase).sin()
            } else {
                0.0
            };
            for (c, b) in base.iter().enumerate() {
                let v = b + texture + noise.sample(&mut rng);
                data[c * hw + y * width + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    Ok(SceneSample {
        image: Tensor::new(vec![3, height, width], data)?,
        labels,
        seed,
        shapes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

/// Seed of the `index`-th sample of a split.
pub fn split_seed(split: Split, base_seed: u64, index: usize) -> u64 {
    match split {
        Split::Train => base_seed + index as u64,
        Split::Val => base_seed + VAL_SEED_OFFSET + index as u64,
    }
}

/// Ordered, reproducible sequence of scenes.
pub fn dataset(split: Split, size: usize, base_seed: u64, height: usize, width: usize, classes: usize) -> Result<Vec<SceneSample>> {
    if split == Split::Train && size as u64 > VAL_SEED_OFFSET {
        return Err(PftError::Config("train split would overlap the validation seeds".into()));
    }
    (0..size)
        .map(|i| generate_scene(split_seed(split, base_seed, i), height, width, classes))
        .collect()
}

#[derive(Serialize, Deserialize)]
struct SampleMeta {
    seed: u64,
    height: usize,
    width: usize,
    classes: usize,
    shapes: Vec<PlacedShape>,
}

/// Writes `{seed}.f64` (raw little-endian image), `{seed}.pgm` and `{seed}.json`.
pub fn write_sample(dir: &Path, sample: &SceneSample, classes: usize) -> Result<()> {
    fs::create_dir_all(dir)?;
    let stem = dir.join(sample.seed.to_string());
    let bytes: Vec<u8> = sample.image.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(stem.with_extension("f64"), bytes)?;
    sample.labels.write_pgm(fs::File::create(stem.with_extension("pgm"))?)?;
    let meta = SampleMeta {
        seed: sample.seed,
        height: sample.labels.height,
        width: sample.labels.width,
        classes,
        shapes: sample.shapes.clone(),
    };
    fs::write(stem.with_extension("json"), serde_json::to_vec_pretty(&meta)?)?;
    Ok(())
}

pub fn read_sample(dir: &Path, seed: u64) -> Result<SceneSample> {
    let stem = dir.join(seed.to_string());
    let meta: SampleMeta = serde_json::from_slice(&fs::read(stem.with_extension("json"))?)?;
    let raw = fs::read(stem.with_extension("f64"))?;
    let data = raw
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    let image = Tensor::new(vec![3, meta.height, meta.width], data)?;
    let labels = LabelMap::read_pgm(fs::File::open(stem.with_extension("pgm"))?)?;
    Ok(SceneSample {
        image,
        labels,
        seed: meta.seed,
        shapes: meta.shapes,
    })
}
