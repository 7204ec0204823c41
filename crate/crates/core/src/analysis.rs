//! Measurement instruments: activation density, centered DFT amplitude
//! spectra of filter input/output, and multi-seed statistics.

use std::f64::consts::PI;

use crate::data::{Dataset, Normalization};
use crate::error::{Error, Result};
use crate::filters::Dimensionality;
use crate::nn::{Mode, Model};
use crate::tensor::Tensor;

/// Default activation threshold for [`density`].
pub const DENSITY_TAU: f32 = 1e-6;

/// Fraction of entries strictly greater than `tau`.
pub fn density(x: &Tensor, tau: f32) -> f64 {
    density_of(x.data(), tau)
}

pub fn density_of(values: &[f32], tau: f32) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().filter(|&&v| v > tau).count() as f64 / values.len() as f64
}

/// `|DFT2(x)|` of a row-major `h×w` grid with the zero frequency moved to
/// `(h/2, w/2)` (floor). Naive separable DFT in `f64`.
pub fn dft2_amplitude(x: &[f32], h: usize, w: usize) -> Result<Vec<f64>> {
    if x.len() != h * w || h == 0 || w == 0 {
        return Err(Error::shape(format!("dft2: grid {h}×{w} vs {} values", x.len())));
    }
    let twiddles = |n: usize| -> Vec<(f64, f64)> {
        (0..n)
            .map(|i| {
                let a = -2.0 * PI * i as f64 / n as f64;
                (a.cos(), a.sin())
            })
            .collect()
    };
    let (tw_h, tw_w) = (twiddles(h), twiddles(w));

    // rows: X1[r][v] = Σ_c x[r][c] e^{-2πi vc/w}
    let mut rows = vec![(0.0f64, 0.0f64); h * w];
    for r in 0..h {
        for v in 0..w {
            let (mut re, mut im) = (0.0, 0.0);
            for c in 0..w {
                let (cr, ci) = tw_w[(v * c) % w];
                let val = x[r * w + c] as f64;
                re += val * cr;
                im += val * ci;
            }
            rows[r * w + v] = (re, im);
        }
    }
    let mut out = vec![0.0f64; h * w];
    for u in 0..h {
        for v in 0..w {
            let (mut re, mut im) = (0.0, 0.0);
            for r in 0..h {
                let (tr, ti) = tw_h[(u * r) % h];
                let (ar, ai) = rows[r * w + v];
                re += ar * tr - ai * ti;
                im += ar * ti + ai * tr;
            }
            let su = (u + h / 2) % h;
            let sv = (v + w / 2) % w;
            out[su * w + sv] = re.hypot(im);
        }
    }
    Ok(out)
}

/// Channel- and sample-averaged amplitude cross-section through the centre
/// row of the 2-d spectrum, for the edge filter's input and output.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumProfile {
    pub input_amp: Vec<f64>,
    pub output_amp: Vec<f64>,
}

impl SpectrumProfile {
    pub fn width(&self) -> usize {
        self.input_amp.len()
    }

    pub fn dc_index(&self) -> usize {
        self.width() / 2
    }

    /// Indices of the centred low-frequency band covering `fraction` of the axis.
    pub fn central_band(&self, fraction: f64) -> std::ops::Range<usize> {
        let w = self.width();
        let count = ((fraction * w as f64).ceil() as usize).clamp(1, w);
        let start = self.dc_index().saturating_sub(count / 2);
        start..(start + count).min(w)
    }
}

/// Accumulates per-channel spectra of `B×C×H×W` feature pairs.
#[derive(Debug, Default)]
pub struct SpectrumAccumulator {
    width: usize,
    height: usize,
    input_sum: Vec<f64>,
    output_sum: Vec<f64>,
    planes: usize,
}

impl SpectrumAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, input: &Tensor, output: &Tensor) -> Result<()> {
        let s = input.shape();
        if s.len() != 4 || output.shape() != s {
            return Err(Error::config(format!(
                "spectrum needs matching 2-d feature maps, got {s:?} and {:?}",
                output.shape()
            )));
        }
        let (h, w) = (s[2], s[3]);
        if self.planes == 0 {
            self.height = h;
            self.width = w;
            self.input_sum = vec![0.0; w];
            self.output_sum = vec![0.0; w];
        } else if (h, w) != (self.height, self.width) {
            return Err(Error::shape("feature map size changed between batches"));
        }
        let centre = h / 2;
        for (pi, po) in input.data().chunks_exact(h * w).zip(output.data().chunks_exact(h * w)) {
            let ai = dft2_amplitude(pi, h, w)?;
            let ao = dft2_amplitude(po, h, w)?;
            for v in 0..w {
                self.input_sum[v] += ai[centre * w + v];
                self.output_sum[v] += ao[centre * w + v];
            }
            self.planes += 1;
        }
        Ok(())
    }

    pub fn finish(self) -> Result<SpectrumProfile> {
        if self.planes == 0 {
            return Err(Error::data("no feature maps were accumulated"));
        }
        let n = self.planes as f64;
        Ok(SpectrumProfile {
            input_amp: self.input_sum.iter().map(|v| v / n).collect(),
            output_amp: self.output_sum.iter().map(|v| v / n).collect(),
        })
    }
}

/// Spectrum of the edge filter's input and output over a whole dataset,
/// with the model in eval mode.
pub fn spectrum_profile(model: &Model, ds: &Dataset, norm: &Normalization, batch_size: usize) -> Result<SpectrumProfile> {
    match model.filter_spec() {
        Some(f) if f.dimensionality == Dimensionality::TwoD => {}
        _ => return Err(Error::config("spectrum analysis needs a model carrying a 2-d filter")),
    }
    let all: Vec<usize> = (0..ds.len()).collect();
    let mut acc = SpectrumAccumulator::new();
    for chunk in all.chunks(batch_size.max(1)) {
        let out = model.forward(&norm.batch(ds, chunk)?, Mode::Eval, true)?;
        match (out.capture("filter_in"), out.capture("filter_out")) {
            (Some(i), Some(o)) => acc.add(i, o)?,
            _ => return Err(Error::Contract("forward did not capture the filter input/output".into())),
        }
    }
    acc.finish()
}

/// Mean and unbiased standard deviation across seeds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeedStats {
    pub mean: f64,
    pub sd: f64,
    pub n_seeds: usize,
}

pub fn seed_stats(values: &[f64]) -> Result<SeedStats> {
    let n = values.len();
    if n < 2 {
        return Err(Error::data(format!(
            "seed statistics need at least 2 seeds, got {n}"
        )));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok(SeedStats {
        mean,
        sd: var.sqrt(),
        n_seeds: n,
    })
}

/// Improvement over the baseline in units of the baseline's SD.
pub fn sigma_gain(filter_mean: f64, baseline: &SeedStats) -> Result<f64> {
    if baseline.sd == 0.0 {
        return Err(Error::DegenerateSd);
    }
    Ok((filter_mean - baseline.mean) / baseline.sd)
}

/// Groups `(key, value)` rows and computes [`SeedStats`] per key, in first-seen order.
pub fn grouped_stats<K: PartialEq + Clone>(rows: &[(K, f64)]) -> Result<Vec<(K, SeedStats)>> {
    let mut groups: Vec<(K, Vec<f64>)> = Vec::new();
    for (k, v) in rows {
        match groups.iter_mut().find(|(g, _)| g == k) {
            Some((_, vals)) => vals.push(*v),
            None => groups.push((k.clone(), vec![*v])),
        }
    }
    groups
        .into_iter()
        .map(|(k, vals)| Ok((k, seed_stats(&vals)?)))
        .collect()
}

/// Float formatting used by every CSV: 9 significant digits.
pub fn fmt_float(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let s = format!("{v:.8e}");
    let parsed: f64 = s.parse().unwrap();
    let mag = parsed.abs().log10().floor() as i32;
    if (-5..15).contains(&mag) {
        let decimals = (8 - mag).max(0) as usize;
        let fixed = format!("{parsed:.decimals$}");
        if fixed.contains('.') {
            fixed.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            fixed
        }
    } else {
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn density_counts() {
        assert_eq!(density(&Tensor::zeros(&[3, 3]), DENSITY_TAU), 0.0);
        assert_eq!(density(&Tensor::full(&[2, 2], 1.0), DENSITY_TAU), 1.0);
        let x = Tensor::new(vec![0.0, 0.5, 0.0, 2.0], &[4]).unwrap();
        assert_eq!(density(&x, DENSITY_TAU), 0.5);
    }

    #[test]
    fn constant_is_dc_only() {
        let (h, w, c) = (6, 8, 1.5f32);
        let amp = dft2_amplitude(&vec![c; h * w], h, w).unwrap();
        for (i, &a) in amp.iter().enumerate() {
            if i == (h / 2) * w + w / 2 {
                assert!((a - (c as f64) * (h * w) as f64).abs() < 1e-9);
            } else {
                assert!(a < 1e-6, "bin {i} = {a}");
            }
        }
    }

    #[test]
    fn cosine_has_symmetric_peaks() {
        let (h, w, f) = (4, 16, 3);
        let x: Vec<f32> = (0..h * w)
            .map(|i| (2.0 * PI * f as f64 * (i % w) as f64 / w as f64).cos() as f32)
            .collect();
        let amp = dft2_amplitude(&x, h, w).unwrap();
        let row = &amp[(h / 2) * w..][..w];
        let c = w / 2;
        assert!(row[c + f] > 1.0 && (row[c + f] - row[c - f]).abs() < 1e-5);
        for (v, a) in row.iter().enumerate() {
            if v != c + f && v != c - f {
                assert!(*a < 1e-4, "{v}: {a}");
            }
        }
    }

    #[test]
    fn odd_sizes_centre_at_floor() {
        let amp = dft2_amplitude(&[1.0; 15], 3, 5).unwrap();
        assert!((amp[5 + 2] - 15.0).abs() < 1e-9);
    }

    #[test]
    fn stats_textbook() {
        let s = seed_stats(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((s.mean, s.sd, s.n_seeds), (2.0, 1.0, 3));
        assert_eq!(sigma_gain(2.0, &s).unwrap(), 0.0);
        assert_eq!(sigma_gain(4.0, &s).unwrap(), 2.0);
        assert!(matches!(seed_stats(&[1.0]), Err(Error::Data(_))));
        let flat = seed_stats(&[0.5, 0.5]).unwrap();
        assert!(matches!(sigma_gain(0.6, &flat), Err(Error::DegenerateSd)));
    }

    #[test]
    fn central_band_is_centred() {
        let p = SpectrumProfile { input_amp: vec![0.0; 14], output_amp: vec![0.0; 14] };
        assert_eq!(p.central_band(0.25), 5..9);
        assert!(p.central_band(0.25).contains(&p.dc_index()));
        let q = SpectrumProfile { input_amp: vec![0.0; 4], output_amp: vec![0.0; 4] };
        assert_eq!(q.central_band(0.25), 2..3);
    }

    #[test]
    fn float_format() {
        assert_eq!(fmt_float(0.5), "0.5");
        assert_eq!(fmt_float(1.0 / 3.0), "0.333333333");
        assert_eq!(fmt_float(123.456), "123.456");
        assert_eq!(fmt_float(2.0), "2");
        assert_eq!(fmt_float(0.0), "0");
        assert_eq!(fmt_float(-0.0123456789123), "-0.0123456789");
        assert_eq!(fmt_float(1e-9), "1.00000000e-9");
    }
}
