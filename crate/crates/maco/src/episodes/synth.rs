//! Procedural desk-scale dataset: classes drawn as colored geometric glyphs.
//!
//! Each class fixes a shape (circle, triangle, bar, cross), a hue on the
//! golden-angle wheel, and a stroke style (solid, outline, striped); every
//! image jitters position, size, orientation and brightness and adds light
//! pixel noise. Hue alone nearly separates classes, so a small network can
//! learn the task quickly, while the jitter keeps single-pixel shortcuts
//! from working.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

use crate::error::Result;
use crate::tensor::Tensor;

use super::{Dataset, DatasetClass};

const SHAPES: usize = 4;
const STROKES: usize = 3;
/// Conjugate golden ratio; multiples mod 1 spread hues maximally.
const GOLDEN: f64 = 0.618_033_988_749_895;

/// Renders `num_classes * images_per_class` images of extent
/// [image_size, image_size, 3] with values in [0, 1], deterministic in
/// `seed`.
pub fn synth_dataset_generate(
    num_classes: usize,
    images_per_class: usize,
    image_size: usize,
    seed: u64,
) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut classes = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let spec = ClassSpec::for_index(c);
        let images = (0..images_per_class)
            .map(|_| render(&spec, image_size, &mut rng))
            .collect();
        classes.push(DatasetClass { id: format!("class{c:03}"), images });
    }
    Dataset::new(classes)
}

struct ClassSpec {
    shape: usize,
    stroke: usize,
    hue: f64,
}

impl ClassSpec {
    fn for_index(c: usize) -> Self {
        ClassSpec {
            shape: c % SHAPES,
            stroke: (c / SHAPES) % STROKES,
            hue: (c as f64 * GOLDEN).fract() * 360.0,
        }
    }
}

fn render(spec: &ClassSpec, size: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let s = size as f64;
    // Per-image jitter; drawn unconditionally so every image consumes the
    // same amount of the stream.
    let cx = s * (0.5 + rng.gen_range(-0.07..=0.07));
    let cy = s * (0.5 + rng.gen_range(-0.07..=0.07));
    let radius = s * rng.gen_range(0.26..=0.34);
    let rot = rng.gen_range(-0.15..=0.15f64);
    let value = rng.gen_range(0.75..=0.95);
    let background = rng.gen_range(0.05..=0.15) as f32;

    let fg = hsv_to_rgb(spec.hue, 0.85, value);
    let (sin, cos) = rot.sin_cos();
    let mut data = vec![0.0f32; size * size * 3];
    for y in 0..size {
        for x in 0..size {
            // Shape-space coordinates: unit scale, rotation removed.
            let px = x as f64 + 0.5 - cx;
            let py = y as f64 + 0.5 - cy;
            let qx = (cos * px + sin * py) / radius;
            let qy = (-sin * px + cos * py) / radius;
            let lit = match spec.stroke {
                0 => inside(spec.shape, qx, qy),
                1 => inside(spec.shape, qx, qy) && !inside(spec.shape, qx / 0.72, qy / 0.72),
                _ => inside(spec.shape, qx, qy) && ((qx + qy) * 2.5).floor() as i64 % 2 == 0,
            };
            let base = (y * size + x) * 3;
            for ch in 0..3 {
                let v = if lit { fg[ch] } else { background };
                let noise = rng.gen_range(-0.02..=0.02f32);
                data[base + ch] = (v + noise).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(vec![size, size, 3], data).expect("rendered extents are consistent")
}

/// Membership test for the four glyphs in unit shape space.
fn inside(shape: usize, x: f64, y: f64) -> bool {
    match shape {
        // Circle of radius 1.
        0 => x * x + y * y <= 1.0,
        // Equilateral triangle, circumradius 1: apex at (0, -1), base edge
        // at y = 0.5, slanted edges y + 1 = ±sqrt(3) x.
        1 => y <= 0.5 && 3f64.sqrt() * x.abs() <= y + 1.0,
        // Horizontal bar.
        2 => x.abs() <= 1.0 && y.abs() <= 0.35,
        // Upright cross: union of two perpendicular bars.
        _ => (x.abs() <= 1.0 && y.abs() <= 0.3) || (y.abs() <= 1.0 && x.abs() <= 0.3),
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f32; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) as f32, (g + m) as f32, (b + m) as f32]
}
