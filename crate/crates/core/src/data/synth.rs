//! Synthetic saliency data: flat-coloured shapes on a textured background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Sample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MIN_FOREGROUND: f64 = 0.05;
pub const MAX_FOREGROUND: f64 = 0.5;
/// Smallest per-channel distance between a shape colour and the background base colour.
const MIN_CONTRAST: f64 = 0.25;
const NOISE_AMPLITUDE: f64 = 0.04;

#[derive(Debug, Clone, Copy)]
enum Shape {
    Ellipse {
        cx: f64,
        cy: f64,
        rx: f64,
        ry: f64,
        angle: f64,
    },
    Rectangle {
        cx: f64,
        cy: f64,
        hw: f64,
        hh: f64,
        angle: f64,
    },
    Triangle([(f64, f64); 3]),
}

impl Shape {
    fn random(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Self {
        let side = h.min(w) as f64;
        let cx = rng.random_range(0.15..0.85) * w as f64;
        let cy = rng.random_range(0.15..0.85) * h as f64;
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        match rng.random_range(0..3) {
            0 => Shape::Ellipse {
                cx,
                cy,
                rx: rng.random_range(0.08..0.3) * side,
                ry: rng.random_range(0.08..0.3) * side,
                angle,
            },
            1 => Shape::Rectangle {
                cx,
                cy,
                hw: rng.random_range(0.07..0.28) * side,
                hh: rng.random_range(0.07..0.28) * side,
                angle,
            },
            _ => {
                let r = rng.random_range(0.12..0.35) * side;
                let mut vertex = |base: f64| {
                    let a = base + rng.random_range(-0.5..0.5);
                    (cx + r * a.cos(), cy + r * a.sin())
                };
                let third = 2.0 * std::f64::consts::PI / 3.0;
                Shape::Triangle([
                    vertex(angle),
                    vertex(angle + third),
                    vertex(angle + 2.0 * third),
                ])
            }
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let rotate = |cx: f64, cy: f64, angle: f64| {
            let (s, c) = angle.sin_cos();
            let (dx, dy) = (x - cx, y - cy);
            (c * dx + s * dy, -s * dx + c * dy)
        };
        match *self {
            Shape::Ellipse {
                cx,
                cy,
                rx,
                ry,
                angle,
            } => {
                let (u, v) = rotate(cx, cy, angle);
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Shape::Rectangle {
                cx,
                cy,
                hw,
                hh,
                angle,
            } => {
                let (u, v) = rotate(cx, cy, angle);
                u.abs() <= hw && v.abs() <= hh
            }
            Shape::Triangle([a, b, c]) => {
                let edge = |p: (f64, f64), q: (f64, f64)| {
                    (q.0 - p.0) * (y - p.1) - (q.1 - p.1) * (x - p.0)
                };
                let (d1, d2, d3) = (edge(a, b), edge(b, c), edge(c, a));
                let neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                let pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                !(neg && pos)
            }
        }
    }

    /// Coverage sampled at pixel centres.
    fn rasterize(&self, h: usize, w: usize) -> Vec<bool> {
        (0..h * w)
            .map(|i| self.contains((i % w) as f64 + 0.5, (i / w) as f64 + 0.5))
            .collect()
    }
}

fn background(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ([f64; 3], Vec<f64>) {
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.2..0.8));
    let slope: [(f64, f64); 3] =
        std::array::from_fn(|_| (rng.random_range(-0.25..0.25), rng.random_range(-0.25..0.25)));
    let mut img = vec![0.0; 3 * h * w];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let (u, v) = (
                    (x as f64 + 0.5) / w as f64 - 0.5,
                    (y as f64 + 0.5) / h as f64 - 0.5,
                );
                let noise = rng.random_range(-NOISE_AMPLITUDE..NOISE_AMPLITUDE);
                img[(c * h + y) * w + x] = base[c] + slope[c].0 * u + slope[c].1 * v + noise;
            }
        }
    }
    (base, img)
}

fn shape_color(rng: &mut ChaCha8Rng, base: &[f64; 3]) -> [f64; 3] {
    loop {
        let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
        let distance = color
            .iter()
            .zip(base)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if distance >= MIN_CONTRAST {
            return color;
        }
    }
}

/// Draws 1-3 disjoint shapes; `None` if placement fails or coverage is out of range.
fn try_layout(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Option<Vec<Vec<bool>>> {
    let count = rng.random_range(1..=3);
    let mut union = vec![false; h * w];
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        let placed = (0..20).find_map(|_| {
            let cover = Shape::random(rng, h, w).rasterize(h, w);
            let empty = !cover.iter().any(|c| *c);
            let overlaps = cover.iter().zip(&union).any(|(a, b)| *a && *b);
            (!empty && !overlaps).then_some(cover)
        })?;
        union.iter_mut().zip(&placed).for_each(|(u, p)| *u |= *p);
        shapes.push(placed);
    }
    let fraction = union.iter().filter(|u| **u).count() as f64 / (h * w) as f64;
    (MIN_FOREGROUND..=MAX_FOREGROUND)
        .contains(&fraction)
        .then_some(shapes)
}

/// The sample at position `index` of the dataset drawn from `seed`.
pub fn synth_sample(seed: u64, index: usize, size: (usize, usize)) -> Result<Sample> {
    let (h, w) = size;
    if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
        return Err(Error::Config(format!(
            "synthetic image size {h}x{w} must be positive and divisible by 16"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let (base, mut img) = background(&mut rng, h, w);
    let shapes = loop {
        if let Some(s) = try_layout(&mut rng, h, w) {
            break s;
        }
    };
    let mut mask = vec![0.0; h * w];
    for cover in &shapes {
        let color = shape_color(&mut rng, &base);
        for (px, _) in cover.iter().enumerate().filter(|(_, c)| **c) {
            mask[px] = 1.0;
            for (c, value) in color.iter().enumerate() {
                img[c * h * w + px] = *value;
            }
        }
    }
    img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(Sample {
        image: Tensor::new(vec![3, h, w], img)?,
        mask: Tensor::new(vec![1, h, w], mask)?,
        id: format!("{index:05}"),
    })
}

pub fn synth_dataset(seed: u64, n: usize, size: (usize, usize)) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(Error::Config(
            "synthetic dataset needs at least one sample".into(),
        ));
    }
    (0..n).map(|i| synth_sample(seed, i, size)).collect()
}
