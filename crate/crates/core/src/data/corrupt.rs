use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    /// Salt and pepper with equal probability.
    ImpulseNoise,
    BoxBlur,
    Contrast,
    Brightness,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 5] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::BoxBlur,
        CorruptionKind::Contrast,
        CorruptionKind::Brightness,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::BoxBlur => "box_blur",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Brightness => "brightness",
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown corruption kind {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
}

const GAUSSIAN_SIGMA: [f32; 5] = [8.0, 16.0, 24.0, 32.0, 40.0];
const IMPULSE_P: [f64; 5] = [0.02, 0.04, 0.07, 0.10, 0.15];
const BLUR_K: [usize; 5] = [3, 3, 5, 5, 7];
const BLUR_PASSES: [usize; 5] = [1, 2, 1, 2, 2];
const CONTRAST: [f32; 5] = [0.75, 0.6, 0.45, 0.3, 0.2];
const BRIGHTNESS: [f32; 5] = [0.05, 0.1, 0.15, 0.2, 0.3];

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8) -> Result<Self> {
        let s = CorruptionSpec { kind, severity };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.severity) {
            return Err(Error::config(format!(
                "corruption severity must be in 1..=5, got {}",
                self.severity
            )));
        }
        Ok(())
    }

    /// The scalar parameter of this kind and severity, in pixel units on `[0, 1]`
    /// (noise SD, flip probability, kernel size, contrast factor, shift).
    pub fn parameter(&self) -> f64 {
        let i = self.severity as usize - 1;
        match self.kind {
            CorruptionKind::GaussianNoise => GAUSSIAN_SIGMA[i] as f64 / 255.0,
            CorruptionKind::ImpulseNoise => IMPULSE_P[i],
            CorruptionKind::BoxBlur => BLUR_K[i] as f64,
            CorruptionKind::Contrast => CONTRAST[i] as f64,
            CorruptionKind::Brightness => BRIGHTNESS[i] as f64,
        }
    }
}

fn to_u8(v: f32) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn box_blur(img: &[u8], c: usize, h: usize, w: usize, k: usize, passes: usize) -> Vec<u8> {
    let r = (k / 2) as isize;
    let mirror = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        // repeated reflection keeps wide kernels valid on small images
        loop {
            if i < 0 {
                i = -i;
            } else if i >= n {
                i = 2 * (n - 1) - i;
            } else {
                return i as usize;
            }
            if n == 1 {
                return 0;
            }
        }
    };
    let mut cur: Vec<f32> = img.iter().map(|&v| v as f32).collect();
    for _ in 0..passes {
        let mut next = vec![0.0f32; cur.len()];
        for ci in 0..c {
            let plane = &cur[ci * h * w..(ci + 1) * h * w];
            for y in 0..h {
                for x in 0..w {
                    let mut s = 0.0f32;
                    for dy in -r..=r {
                        let yy = mirror(y as isize + dy, h);
                        for dx in -r..=r {
                            s += plane[yy * w + mirror(x as isize + dx, w)];
                        }
                    }
                    next[ci * h * w + y * w + x] = s / (k * k) as f32;
                }
            }
        }
        cur = next;
    }
    cur.into_iter().map(to_u8).collect()
}

/// Applies one corruption to a `C×H×W` image. Pure given `(img, spec, seed)`.
pub fn corrupt(img: &[u8], (c, h, w): (usize, usize, usize), spec: CorruptionSpec, seed: u64) -> Result<Vec<u8>> {
    spec.validate()?;
    if img.len() != c * h * w {
        return Err(Error::shape(format!("image has {} bytes, expected {c}×{h}×{w}", img.len())));
    }
    let i = spec.severity as usize - 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(match spec.kind {
        CorruptionKind::GaussianNoise => {
            let noise = Normal::new(0.0f32, GAUSSIAN_SIGMA[i]).unwrap();
            img.iter().map(|&v| to_u8(v as f32 + noise.sample(&mut rng))).collect()
        }
        CorruptionKind::ImpulseNoise => img
            .iter()
            .map(|&v| {
                if rng.gen_bool(IMPULSE_P[i]) {
                    if rng.gen_bool(0.5) {
                        255
                    } else {
                        0
                    }
                } else {
                    v
                }
            })
            .collect(),
        CorruptionKind::BoxBlur => box_blur(img, c, h, w, BLUR_K[i], BLUR_PASSES[i]),
        CorruptionKind::Contrast => img
            .iter()
            .map(|&v| to_u8(128.0 + CONTRAST[i] * (v as f32 - 128.0)))
            .collect(),
        CorruptionKind::Brightness => img.iter().map(|&v| to_u8(v as f32 + BRIGHTNESS[i] * 255.0)).collect(),
    })
}

/// Corrupts every image; image `j` uses a seed derived from `(seed, j)`.
pub fn corrupt_dataset(ds: &Dataset, spec: CorruptionSpec, seed: u64) -> Result<Dataset> {
    let chw = (ds.channels, ds.height, ds.width);
    let mut pixels = Vec::with_capacity(ds.pixels().len());
    for j in 0..ds.len() {
        let s = seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(j as u64)
            .wrapping_add((spec.kind as u64) << 40 | (spec.severity as u64) << 32);
        pixels.extend(corrupt(ds.image(j), chw, spec, s)?);
    }
    let mut out = ds.with_pixels(pixels);
    out.name = format!("{}-{}-s{}", ds.name, spec.kind, spec.severity);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_is_total() {
        for kind in CorruptionKind::ALL {
            for s in 1..=5 {
                let p = CorruptionSpec::new(kind, s).unwrap().parameter();
                assert!(p.is_finite() && p > 0.0);
            }
        }
        assert!(CorruptionSpec::new(CorruptionKind::Contrast, 0).is_err());
        assert!(CorruptionSpec::new(CorruptionKind::Contrast, 6).is_err());
        assert!(matches!("fog".parse::<CorruptionKind>(), Err(Error::Config(_))));
        assert_eq!("box_blur".parse::<CorruptionKind>().unwrap(), CorruptionKind::BoxBlur);
    }

    #[test]
    fn contrast_formula() {
        let img: Vec<u8> = (0..=255).collect();
        let spec = CorruptionSpec::new(CorruptionKind::Contrast, 5).unwrap();
        let out = corrupt(&img, (1, 16, 16), spec, 0).unwrap();
        for (&a, &b) in img.iter().zip(&out) {
            assert_eq!(b, (128.0 + 0.2 * (a as f32 - 128.0)).round() as u8);
        }
        let gray = vec![128u8; 16];
        assert_eq!(corrupt(&gray, (1, 4, 4), spec, 0).unwrap(), gray);
    }

    #[test]
    fn noise_is_seeded() {
        let img = vec![100u8; 64];
        let spec = CorruptionSpec::new(CorruptionKind::GaussianNoise, 3).unwrap();
        let a = corrupt(&img, (1, 8, 8), spec, 7).unwrap();
        assert_eq!(a, corrupt(&img, (1, 8, 8), spec, 7).unwrap());
        assert_ne!(a, corrupt(&img, (1, 8, 8), spec, 8).unwrap());
    }

    #[test]
    fn blur_keeps_constants() {
        let img = vec![77u8; 3 * 5 * 5];
        for s in 1..=5 {
            let spec = CorruptionSpec::new(CorruptionKind::BoxBlur, s).unwrap();
            assert_eq!(corrupt(&img, (3, 5, 5), spec, 0).unwrap(), img);
        }
    }

    #[test]
    fn impulse_only_saturates() {
        let img = vec![90u8; 400];
        let spec = CorruptionSpec::new(CorruptionKind::ImpulseNoise, 5).unwrap();
        let out = corrupt(&img, (1, 20, 20), spec, 3).unwrap();
        assert!(out.iter().all(|&v| v == 0 || v == 90 || v == 255));
        assert!(out.iter().any(|&v| v != 90));
    }
}
