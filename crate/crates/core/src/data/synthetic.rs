//! Procedural 28×28 grayscale image families with ten classes each.
//!
//! `Shapes` draws a stroked or filled glyph whose class is carried by its
//! outline. Every image also gets a random background level, a linear
//! illumination gradient, a random stroke contrast and mild pixel noise, so
//! most of the per-image variation that does not identify the class sits at
//! low spatial frequencies. `Patterns` is a texture family (oriented
//! gratings, checkerboards, dot lattices) used as a transfer target.

use std::f32::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Split};
use crate::error::{Error, Result};

pub const SIDE: usize = 28;
pub const CLASSES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Shapes,
    Patterns,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Shapes => "synthetic-shapes",
            Family::Patterns => "synthetic-patterns",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic-shapes" => Ok(Family::Shapes),
            "synthetic-patterns" => Ok(Family::Patterns),
            _ => Err(Error::config(format!("unknown synthetic family {s:?}"))),
        }
    }
}

fn segment_dist(px: f32, py: f32, (ax, ay): (f32, f32), (bx, by): (f32, f32)) -> f32 {
    let (dx, dy) = (bx - ax, by - ay);
    let t = (((px - ax) * dx + (py - ay) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
    ((px - ax - t * dx).powi(2) + (py - ay - t * dy).powi(2)).sqrt()
}

/// Distance from a point in glyph coordinates (unit radius) to the class glyph.
fn glyph_dist(class: usize, x: f32, y: f32) -> f32 {
    let seg = |a, b| segment_dist(x, y, a, b);
    match class {
        0 => seg((-1.0, 0.0), (1.0, 0.0)),
        1 => seg((0.0, -1.0), (0.0, 1.0)),
        2 => seg((-0.8, -0.8), (0.8, 0.8)),
        3 => seg((-0.8, 0.8), (0.8, -0.8)),
        4 => seg((-1.0, 0.0), (1.0, 0.0)).min(seg((0.0, -1.0), (0.0, 1.0))),
        5 => seg((-0.8, -0.8), (0.8, 0.8)).min(seg((-0.8, 0.8), (0.8, -0.8))),
        6 => (x.abs().max(y.abs()) - 0.8).abs(),
        7 => ((x * x + y * y).sqrt() - 0.85).abs(),
        8 => ((x * x + y * y).sqrt() - 0.75).max(0.0),
        _ => seg((-0.7, -0.9), (-0.7, 0.7)).min(seg((-0.7, 0.7), (0.8, 0.7))),
    }
}

fn pattern_value(class: usize, x: f32, y: f32, freq: f32, phase: f32) -> f32 {
    let wave = |angle: f32, f: f32| 0.5 + 0.5 * (2.0 * PI * f * (x * angle.cos() + y * angle.sin()) + phase).sin();
    match class {
        0..=3 => wave(class as f32 * PI / 4.0, freq),
        4..=7 => wave((class - 4) as f32 * PI / 4.0, freq * 2.0),
        8 => {
            let a = (2.0 * PI * freq * x + phase).sin();
            let b = (2.0 * PI * freq * y + phase).sin();
            if a * b > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        _ => {
            let period = 1.0 / (freq * 1.5);
            let fx = (x / period + phase).rem_euclid(1.0) - 0.5;
            let fy = (y / period + phase).rem_euclid(1.0) - 0.5;
            if (fx * fx + fy * fy).sqrt() < 0.25 {
                1.0
            } else {
                0.0
            }
        }
    }
}

fn render(family: Family, class: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let noise = Normal::new(0.0f32, 0.03).unwrap();
    let level = rng.gen_range(0.05..0.55f32);
    let (gx, gy) = (rng.gen_range(-0.3..0.3f32), rng.gen_range(-0.3..0.3f32));
    let contrast = rng.gen_range(0.25..0.6f32);
    let c = (SIDE as f32 - 1.0) / 2.0;
    let mut out = Vec::with_capacity(SIDE * SIDE);
    match family {
        Family::Shapes => {
            let scale = rng.gen_range(6.0..10.0f32);
            let (cx, cy) = (c + rng.gen_range(-4.0..4.0f32), c + rng.gen_range(-4.0..4.0f32));
            let rot = rng.gen_range(-0.3..0.3f32);
            let thick = rng.gen_range(1.0..2.2f32);
            let (s, co) = rot.sin_cos();
            for py in 0..SIDE {
                for px in 0..SIDE {
                    let (dx, dy) = (px as f32 - cx, py as f32 - cy);
                    let (u, v) = ((co * dx + s * dy) / scale, (-s * dx + co * dy) / scale);
                    let d = glyph_dist(class, u, v) * scale;
                    let ink = (thick / 2.0 + 0.5 - d).clamp(0.0, 1.0);
                    let bg = level + gx * (px as f32 - c) / SIDE as f32 + gy * (py as f32 - c) / SIDE as f32;
                    let val = bg + contrast * ink + noise.sample(rng);
                    out.push((val * 255.0).round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        Family::Patterns => {
            let freq = rng.gen_range(0.08..0.12f32);
            let phase = rng.gen_range(0.0..2.0 * PI);
            for py in 0..SIDE {
                for px in 0..SIDE {
                    let p = pattern_value(class, px as f32, py as f32, freq, phase);
                    let bg = level + gx * (px as f32 - c) / SIDE as f32 + gy * (py as f32 - c) / SIDE as f32;
                    let val = bg + contrast * p + noise.sample(rng);
                    out.push((val * 255.0).round().clamp(0.0, 255.0) as u8);
                }
            }
        }
    }
    out
}

/// `n` images with labels cycling through the ten classes. The train and
/// val splits draw from disjoint random streams.
pub fn generate(family: Family, n: usize, seed: u64, split: Split) -> Dataset {
    let stream = match split {
        Split::Train => 0x7472_6169_6e00_0000u64,
        Split::Val => 0x7661_6c00_0000_0000u64,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stream ^ (family as u64) << 8);
    let mut pixels = Vec::with_capacity(n * SIDE * SIDE);
    let mut labels = Vec::with_capacity(n);
    for j in 0..n {
        let class = j % CLASSES;
        pixels.extend(render(family, class, &mut rng));
        labels.push(class as u16);
    }
    Dataset::new(family.name(), split, (1, SIDE, SIDE), pixels, labels).expect("consistent sizes")
}
