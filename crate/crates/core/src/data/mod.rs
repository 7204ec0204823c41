//! Datasets: binary loaders, procedural image families, corruptions and
//! batching.

mod corrupt;
mod formats;
pub mod synthetic;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use corrupt::{corrupt, corrupt_dataset, CorruptionKind, CorruptionSpec};
pub use formats::{
    load_cifar10_bin, load_idx, read_idx_images, read_idx_labels, write_cifar10_bin, write_idx_images,
    write_idx_labels,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

/// Images stored as `u8` in `C×H×W` order, one label per image.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub split: Split,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pixels: Vec<u8>,
    labels: Vec<u16>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        split: Split,
        (channels, height, width): (usize, usize, usize),
        pixels: Vec<u8>,
        labels: Vec<u16>,
    ) -> Result<Self> {
        let per = channels * height * width;
        if per == 0 && !labels.is_empty() {
            return Err(Error::data("image dimensions must be non-zero"));
        }
        if pixels.len() != per * labels.len() {
            return Err(Error::data(format!(
                "{} labels but {} pixel bytes ({} per image)",
                labels.len(),
                pixels.len(),
                per
            )));
        }
        Ok(Dataset {
            name: name.into(),
            split,
            channels,
            height,
            width,
            pixels,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.image_size();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> u16 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    /// Largest label + 1.
    pub fn num_classes(&self) -> usize {
        self.labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0)
    }

    /// New dataset made of the given indices, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut pixels = Vec::with_capacity(indices.len() * self.image_size());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        Dataset {
            name: self.name.clone(),
            split: self.split,
            channels: self.channels,
            height: self.height,
            width: self.width,
            pixels,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub(crate) fn with_pixels(&self, pixels: Vec<u8>) -> Dataset {
        debug_assert_eq!(pixels.len(), self.pixels.len());
        Dataset {
            pixels,
            ..self.clone()
        }
    }
}

/// Per-channel mean and standard deviation of pixel values scaled to `[0, 1]`.
pub fn channel_stats(ds: &Dataset) -> (Vec<f32>, Vec<f32>) {
    let c = ds.channels;
    let plane = ds.height * ds.width;
    let mut sum = vec![0.0f64; c];
    let mut sq = vec![0.0f64; c];
    for i in 0..ds.len() {
        for (ci, ch) in ds.image(i).chunks_exact(plane).enumerate() {
            for &p in ch {
                let v = p as f64 / 255.0;
                sum[ci] += v;
                sq[ci] += v * v;
            }
        }
    }
    let n = (ds.len() * plane).max(1) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(s, m)| ((s / n - m * m).max(0.0).sqrt().max(1e-3)) as f32)
        .collect();
    (mean.into_iter().map(|m| m as f32).collect(), std)
}

/// Per-channel normalization constants applied when batching.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn from_dataset(ds: &Dataset) -> Self {
        let (mean, std) = channel_stats(ds);
        Normalization { mean, std }
    }

    /// `B×C×H×W` tensor of `(pixel/255 − mean) / std` for the given indices.
    pub fn batch(&self, ds: &Dataset, indices: &[usize]) -> Result<Tensor> {
        if self.mean.len() != ds.channels || self.std.len() != ds.channels {
            return Err(Error::shape(format!(
                "normalization has {} channels, dataset has {}",
                self.mean.len(),
                ds.channels
            )));
        }
        if indices.is_empty() {
            return Err(Error::data("empty batch"));
        }
        let plane = ds.height * ds.width;
        let mut out = Vec::with_capacity(indices.len() * ds.image_size());
        for &i in indices {
            for (ci, ch) in ds.image(i).chunks_exact(plane).enumerate() {
                let (m, s) = (self.mean[ci], self.std[ci]);
                out.extend(ch.iter().map(|&p| (p as f32 / 255.0 - m) / s));
            }
        }
        Tensor::new(out, &[indices.len(), ds.channels, ds.height, ds.width])
    }

    pub fn labels(ds: &Dataset, indices: &[usize]) -> Result<Vec<u8>> {
        indices
            .iter()
            .map(|&i| {
                u8::try_from(ds.label(i)).map_err(|_| Error::data(format!("label {} too large", ds.label(i))))
            })
            .collect()
    }
}

/// Whole dataset as one normalized tensor.
pub fn normalize(ds: &Dataset, mean: &[f32], std: &[f32]) -> Result<Tensor> {
    let all: Vec<usize> = (0..ds.len()).collect();
    Normalization {
        mean: mean.to_vec(),
        std: std.to_vec(),
    }
    .batch(ds, &all)
}

/// Deterministic class-stratified sample of `n` indices. Per-class counts
/// differ by at most one whenever the classes have enough members.
pub fn subset_indices(ds: &Dataset, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n > ds.len() {
        return Err(Error::data(format!(
            "subset of {n} requested from {} samples",
            ds.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = ds.num_classes();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for i in 0..ds.len() {
        by_class[ds.label(i) as usize].push(i);
    }
    for members in &mut by_class {
        members.shuffle(&mut rng);
    }
    // round-robin over classes until n indices are taken
    let mut picked = Vec::with_capacity(n);
    let mut cursor = vec![0usize; classes];
    while picked.len() < n {
        for c in 0..classes {
            if picked.len() == n {
                break;
            }
            if let Some(&i) = by_class[c].get(cursor[c]) {
                picked.push(i);
                cursor[c] += 1;
            }
        }
    }
    picked.shuffle(&mut rng);
    Ok(picked)
}

pub fn subset(ds: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    Ok(ds.select(&subset_indices(ds, n, seed)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(labels: Vec<u16>) -> Dataset {
        let n = labels.len();
        Dataset::new("toy", Split::Train, (1, 2, 2), (0..n * 4).map(|i| i as u8).collect(), labels).unwrap()
    }

    #[test]
    fn full_subset_is_permutation() {
        let ds = toy((0..20).map(|i| (i % 3) as u16).collect());
        let mut idx = subset_indices(&ds, 20, 1).unwrap();
        idx.sort();
        assert_eq!(idx, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn stratified_counts() {
        let ds = toy((0..100).map(|i| (i % 4) as u16).collect());
        let s = subset(&ds, 13, 2).unwrap();
        let mut counts = [0usize; 4];
        for &l in s.labels() {
            counts[l as usize] += 1;
        }
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        assert_eq!(subset_indices(&ds, 13, 2).unwrap(), subset_indices(&ds, 13, 2).unwrap());
    }

    #[test]
    fn too_large_subset() {
        assert!(matches!(subset(&toy(vec![0, 1]), 3, 0), Err(Error::Data(_))));
    }

    #[test]
    fn normalize_values() {
        let ds = toy(vec![0]);
        let t = normalize(&ds, &[0.0], &[1.0 / 255.0]).unwrap();
        assert_eq!(t.data(), &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(t.shape(), &[1, 1, 2, 2]);
    }

    #[test]
    fn pixel_count_must_match() {
        assert!(Dataset::new("x", Split::Val, (1, 2, 2), vec![0; 7], vec![0, 1]).is_err());
    }
}
