//! Low-pass filters over deep features and the edge filter built on them.
//!
//! The edge filter is `h − LPF(h)` where the LPF branch is detached, so the
//! layer's Jacobian seen by backprop is the identity. Filters run channel-wise:
//! over `(H, W)` for `B×C×H×W` feature maps and over `N` for `B×N×C` token
//! sequences. Borders use edge-exclusive reflect padding of width `(k−1)/2`,
//! which keeps the output the same size as the input.
//!
//! Window sums are accumulated in `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{sub, PaddingMode, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LpfKind {
    Mean,
    Median,
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimensionality {
    OneD,
    TwoD,
}

fn default_sigma() -> f32 {
    1.0
}

/// One edge-filter instance and where it sits in the host model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSpec {
    pub lpf_kind: LpfKind,
    pub dimensionality: Dimensionality,
    pub kernel_size: usize,
    #[serde(default = "default_sigma")]
    pub sigma: f32,
    /// Insertion index: 0 is after the stem, `i` is after block `i`.
    pub position: usize,
}

impl FilterSpec {
    pub fn new(lpf_kind: LpfKind, dimensionality: Dimensionality, kernel_size: usize) -> Self {
        FilterSpec {
            lpf_kind,
            dimensionality,
            kernel_size,
            sigma: default_sigma(),
            position: 0,
        }
    }

    pub fn at(mut self, position: usize) -> Self {
        self.position = position;
        self
    }

    pub fn with_sigma(mut self, sigma: f32) -> Self {
        self.sigma = sigma;
        self
    }

    pub fn mean_2d(kernel_size: usize) -> Self {
        Self::new(LpfKind::Mean, Dimensionality::TwoD, kernel_size)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.kernel_size;
        if k == 0 || k.is_multiple_of(2) {
            return Err(Error::config(format!(
                "filter.kernel_size must be odd and ≥ 1, got {k}"
            )));
        }
        if self.lpf_kind == LpfKind::Gaussian && !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::config(format!(
                "filter.sigma must be positive for a gaussian LPF, got {}",
                self.sigma
            )));
        }
        Ok(())
    }

    pub fn padding(&self) -> PaddingMode {
        PaddingMode::Reflect(self.kernel_size / 2)
    }
}

/// Edge-exclusive reflect padding of a 1-d signal.
pub fn reflect_pad(x: &[f32], width: usize) -> Result<Vec<f32>> {
    if width >= x.len() && width > 0 {
        return Err(Error::shape(format!(
            "reflect pad width {width} must be smaller than length {}",
            x.len()
        )));
    }
    let mode = PaddingMode::Reflect(width);
    let n = x.len();
    Ok((0..n + 2 * width)
        .map(|i| x[mode.source(i as isize - width as isize, n).unwrap()])
        .collect())
}

/// Edge-exclusive reflect padding of a row-major `h×w` grid on both axes.
pub fn reflect_pad_2d(x: &[f32], h: usize, w: usize, width: usize) -> Result<Vec<f32>> {
    if x.len() != h * w {
        return Err(Error::shape(format!("grid {h}×{w} needs {} values, got {}", h * w, x.len())));
    }
    let mode = PaddingMode::Reflect(width);
    mode.check_axis(h, "height")?;
    mode.check_axis(w, "width")?;
    let (ph, pw) = (h + 2 * width, w + 2 * width);
    let p = width as isize;
    let mut out = Vec::with_capacity(ph * pw);
    for i in 0..ph {
        let si = mode.source(i as isize - p, h).unwrap();
        for j in 0..pw {
            let sj = mode.source(j as isize - p, w).unwrap();
            out.push(x[si * w + sj]);
        }
    }
    Ok(out)
}

/// Normalized 1-d Gaussian taps `w[i] ∝ exp(−(i−c)²/2σ²)`.
pub fn gaussian_kernel(k: usize, sigma: f32) -> Result<Vec<f32>> {
    Ok(gaussian_taps(k, sigma)?.into_iter().map(|v| v as f32).collect())
}

fn gaussian_taps(k: usize, sigma: f32) -> Result<Vec<f64>> {
    if k.is_multiple_of(2) {
        return Err(Error::config(format!("gaussian kernel size must be odd, got {k}")));
    }
    if !sigma.is_finite() || sigma <= 0.0 {
        return Err(Error::config(format!("gaussian sigma must be positive and finite, got {sigma}")));
    }
    let c = (k / 2) as f64;
    let s2 = 2.0 * (sigma as f64).powi(2);
    let raw: Vec<f64> = (0..k).map(|i| (-((i as f64 - c).powi(2)) / s2).exp()).collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| v / total).collect())
}

/// Per-window reducer shared by the 1-d and 2-d paths.
enum Window {
    /// 1-d taps; 2-d windows are their outer product, applied separably.
    Weighted(Vec<f64>),
    Median,
}

impl Window {
    fn new(spec: &FilterSpec) -> Result<Self> {
        let k = spec.kernel_size;
        Ok(match spec.lpf_kind {
            LpfKind::Mean => Window::Weighted(vec![1.0 / k as f64; k]),
            LpfKind::Gaussian => Window::Weighted(gaussian_taps(k, spec.sigma)?),
            LpfKind::Median => Window::Median,
        })
    }

    fn reduce(&self, vals: &mut [f32]) -> f32 {
        match self {
            Window::Weighted(w) => vals.iter().zip(w).map(|(&v, &w)| v as f64 * w).sum::<f64>() as f32,
            Window::Median => median(vals),
        }
    }
}

/// Lower-middle order statistic; odd window sizes make it the true median.
fn median(vals: &mut [f32]) -> f32 {
    let mid = (vals.len() - 1) / 2;
    *vals.select_nth_unstable_by(mid, |a, b| a.total_cmp(b)).1
}

fn lpf_plane(plane: &[f32], h: usize, w: usize, k: usize, window: &Window, out: &mut [f32]) -> Result<()> {
    let r = k / 2;
    let padded = reflect_pad_2d(plane, h, w, r)?;
    let pw = w + 2 * r;
    match window {
        Window::Weighted(taps) => {
            // rows first into an f64 buffer, then columns
            let ph = h + 2 * r;
            let mut rows = vec![0.0f64; ph * w];
            for y in 0..ph {
                let src = &padded[y * pw..][..pw];
                for x in 0..w {
                    rows[y * w + x] = src[x..x + k].iter().zip(taps).map(|(&v, &t)| v as f64 * t).sum();
                }
            }
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0f64;
                    for (dy, &t) in taps.iter().enumerate() {
                        acc += rows[(y + dy) * w + x] * t;
                    }
                    out[y * w + x] = acc as f32;
                }
            }
        }
        Window::Median => {
            let mut buf = vec![0.0f32; k * k];
            for y in 0..h {
                for x in 0..w {
                    for dy in 0..k {
                        buf[dy * k..][..k].copy_from_slice(&padded[(y + dy) * pw + x..][..k]);
                    }
                    out[y * w + x] = median(&mut buf);
                }
            }
        }
    }
    Ok(())
}

fn lpf_line(line: &[f32], k: usize, window: &Window, out: &mut [f32]) -> Result<()> {
    let padded = reflect_pad(line, k / 2)?;
    let mut buf = vec![0.0f32; k];
    for (i, o) in out.iter_mut().enumerate() {
        buf.copy_from_slice(&padded[i..i + k]);
        *o = window.reduce(&mut buf);
    }
    Ok(())
}

/// Channel-wise low-pass filter. The result is always detached.
///
/// Layout is `B×C×H×W` for [`Dimensionality::TwoD`] and `B×N×C` for
/// [`Dimensionality::OneD`].
pub fn apply_lpf(h: &Tensor, spec: &FilterSpec) -> Result<Tensor> {
    spec.validate()?;
    let k = spec.kernel_size;
    let s = h.shape();
    let data = h.data();
    let mut out = vec![0.0f32; data.len()];
    match spec.dimensionality {
        Dimensionality::TwoD => {
            if s.len() != 4 {
                return Err(Error::shape(format!("2-d filter expects B×C×H×W features, got {s:?}")));
            }
            let (hh, ww) = (s[2], s[3]);
            let window = Window::new(spec)?;
            for (src, dst) in data.chunks_exact(hh * ww).zip(out.chunks_exact_mut(hh * ww)) {
                lpf_plane(src, hh, ww, k, &window, dst)?;
            }
        }
        Dimensionality::OneD => {
            if s.len() != 3 {
                return Err(Error::shape(format!("1-d filter expects B×N×C features, got {s:?}")));
            }
            let (b, n, c) = (s[0], s[1], s[2]);
            let window = Window::new(spec)?;
            let mut line = vec![0.0f32; n];
            let mut filtered = vec![0.0f32; n];
            for bi in 0..b {
                for ci in 0..c {
                    for t in 0..n {
                        line[t] = data[(bi * n + t) * c + ci];
                    }
                    lpf_line(&line, k, &window, &mut filtered)?;
                    for t in 0..n {
                        out[(bi * n + t) * c + ci] = filtered[t];
                    }
                }
            }
        }
    }
    Tensor::new(out, s)
}

/// `h − detach(LPF(h))`. Gradients pass through unchanged.
pub fn edge_filter(h: &Tensor, spec: &FilterSpec) -> Result<Tensor> {
    let low = apply_lpf(h, spec)?;
    sub(h, &low)
}

/// Edge filter along the sequence axis of `B×N×C` features.
pub fn edge_filter_1d_sequence(h: &Tensor, spec: &FilterSpec) -> Result<Tensor> {
    if spec.dimensionality != Dimensionality::OneD {
        return Err(Error::shape("edge_filter_1d_sequence needs a one_d filter spec"));
    }
    edge_filter(h, spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::sum;

    fn seq(values: &[f32]) -> Tensor {
        Tensor::new(values.to_vec(), &[1, values.len(), 1]).unwrap()
    }

    fn mean1(k: usize) -> FilterSpec {
        FilterSpec::new(LpfKind::Mean, Dimensionality::OneD, k)
    }

    fn close(a: &[f32], b: &[f32], tol: f32) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn reflect_pad_examples() {
        assert_eq!(reflect_pad(&[1.0, 2.0, 3.0, 4.0], 1).unwrap(), vec![2.0, 1.0, 2.0, 3.0, 4.0, 3.0]);
        assert_eq!(reflect_pad(&[5.0], 0).unwrap(), vec![5.0]);
        assert!(matches!(reflect_pad(&[1.0, 2.0], 2), Err(Error::Shape(_))));
    }

    #[test]
    fn reflect_pad_2d_matches_index_mirroring() {
        let grid: Vec<f32> = (1..=9).map(|v| v as f32).collect();
        let padded = reflect_pad_2d(&grid, 3, 3, 1).unwrap();
        let mirror = |i: isize, n: isize| -> usize {
            (if i < 0 { -i } else if i >= n { 2 * (n - 1) - i } else { i }) as usize
        };
        for i in 0..5isize {
            for j in 0..5isize {
                let expect = grid[mirror(i - 1, 3) * 3 + mirror(j - 1, 3)];
                assert_eq!(padded[(i * 5 + j) as usize], expect);
            }
        }
    }

    #[test]
    fn mean_k3_sequence() {
        let out = apply_lpf(&seq(&[1.0, 2.0, 3.0, 4.0]), &mean1(3)).unwrap();
        // windows over the padded row [2,1,2,3,4,3]
        let padded = [2.0f64, 1.0, 2.0, 3.0, 4.0, 3.0];
        let oracle: Vec<f64> = padded.windows(3).map(|w| w.iter().sum::<f64>() / 3.0).collect();
        assert_eq!(oracle, vec![5.0 / 3.0, 2.0, 3.0, 10.0 / 3.0]);
        assert!(close(out.data(), &[5.0 / 3.0, 2.0, 3.0, 10.0 / 3.0], 1e-6));
        let edge = edge_filter(&seq(&[1.0, 2.0, 3.0, 4.0]), &mean1(3)).unwrap();
        assert!(close(edge.data(), &[-2.0 / 3.0, 0.0, 0.0, 2.0 / 3.0], 1e-6));
    }

    #[test]
    fn gaussian_kernel_examples() {
        assert_eq!(gaussian_kernel(1, 1.0).unwrap(), vec![1.0]);
        let e = (-0.5f64).exp();
        let expect = [e / (1.0 + 2.0 * e), 1.0 / (1.0 + 2.0 * e), e / (1.0 + 2.0 * e)];
        let g = gaussian_kernel(3, 1.0).unwrap();
        for (a, b) in g.iter().zip(expect) {
            assert!((*a as f64 - b).abs() < 1e-7);
        }
        for (k, s) in [(5, 0.5), (7, 1.0), (11, 2.5)] {
            let g = gaussian_kernel(k, s).unwrap();
            assert!((g.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-7);
            assert!((0..k).all(|i| g[i] == g[k - 1 - i]));
        }
        assert!(matches!(gaussian_kernel(3, 0.0), Err(Error::Config(_))));
        assert!(matches!(gaussian_kernel(3, -1.0), Err(Error::Config(_))));
    }

    #[test]
    fn even_kernel_rejected() {
        let x = Tensor::zeros(&[1, 1, 4, 4]);
        assert!(matches!(apply_lpf(&x, &FilterSpec::mean_2d(4)), Err(Error::Config(_))));
    }

    #[test]
    fn layout_mismatch_rejected() {
        let x = Tensor::zeros(&[1, 4, 2]);
        assert!(matches!(apply_lpf(&x, &FilterSpec::mean_2d(3)), Err(Error::Shape(_))));
        let y = Tensor::zeros(&[1, 1, 4, 4]);
        assert!(matches!(edge_filter_1d_sequence(&y, &FilterSpec::mean_2d(3)), Err(Error::Shape(_))));
    }

    #[test]
    fn constants_and_unit_kernel() {
        for kind in [LpfKind::Mean, LpfKind::Median, LpfKind::Gaussian] {
            let x = Tensor::full(&[2, 3, 6, 6], 1.75);
            let spec = FilterSpec::new(kind, Dimensionality::TwoD, 5);
            assert!(close(apply_lpf(&x, &spec).unwrap().data(), x.data(), 1e-6));
            assert!(edge_filter(&x, &spec).unwrap().data().iter().all(|v| v.abs() <= 1e-6));

            let r = Tensor::new((0..36).map(|v| (v * 7 % 11) as f32).collect(), &[1, 1, 6, 6]).unwrap();
            let unit = FilterSpec::new(kind, Dimensionality::TwoD, 1);
            assert_eq!(apply_lpf(&r, &unit).unwrap().data(), r.data());
            assert!(edge_filter(&r, &unit).unwrap().data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn single_token_sequence_is_zero() {
        let x = Tensor::new(vec![3.0, -1.0], &[1, 1, 2]).unwrap();
        let out = edge_filter_1d_sequence(&x, &mean1(1)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channels_filtered_independently() {
        // B=1, N=4, C=2: channel 0 = [1,2,3,4], channel 1 = [4,3,2,1]
        let x = Tensor::new(vec![1.0, 4.0, 2.0, 3.0, 3.0, 2.0, 4.0, 1.0], &[1, 4, 2]).unwrap();
        let out = edge_filter_1d_sequence(&x, &mean1(3)).unwrap();
        let ch0: Vec<f32> = out.data().iter().step_by(2).copied().collect();
        let ch1: Vec<f32> = out.data().iter().skip(1).step_by(2).copied().collect();
        assert!(close(&ch0, &[-2.0 / 3.0, 0.0, 0.0, 2.0 / 3.0], 1e-6));
        assert!(close(&ch1, &[2.0 / 3.0, 0.0, 0.0, -2.0 / 3.0], 1e-6));
    }

    #[test]
    fn gradient_passes_through() {
        let x = Tensor::param((0..32).map(|v| ((v * 13) % 7) as f32).collect(), &[2, 1, 4, 4]).unwrap();
        let w = Tensor::new((0..32).map(|v| v as f32 * 0.5 - 3.0).collect(), &[2, 1, 4, 4]).unwrap();
        let y = edge_filter(&x, &FilterSpec::new(LpfKind::Median, Dimensionality::TwoD, 3)).unwrap();
        sum(&crate::tensor::mul(&y, &w).unwrap()).backward().unwrap();
        assert_eq!(x.grad().unwrap(), w.to_vec());
    }

    #[test]
    fn median_rejects_impulse() {
        let mut v = vec![0.0f32; 25];
        v[12] = 100.0;
        let x = Tensor::new(v, &[1, 1, 5, 5]).unwrap();
        let spec = FilterSpec::new(LpfKind::Median, Dimensionality::TwoD, 3);
        assert!(apply_lpf(&x, &spec).unwrap().data().iter().all(|&v| v == 0.0));
    }
}
