use serde::{Deserialize, Serialize};

use super::ops::gemm;
use super::Tensor;
use crate::error::{Error, Result};

/// Border handling for sliding-window ops.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PaddingMode {
    Zero(usize),
    /// Edge-exclusive mirror: `[1,2,3,4]` padded by 1 is `[2,1,2,3,4,3]`.
    Reflect(usize),
}

impl PaddingMode {
    pub fn width(self) -> usize {
        match self {
            PaddingMode::Zero(p) | PaddingMode::Reflect(p) => p,
        }
    }

    /// Source index along an axis of length `n` for padded coordinate `i`
    /// (already shifted by `-width`). `None` means a zero tap.
    pub(crate) fn source(self, i: isize, n: usize) -> Option<usize> {
        let n = n as isize;
        if (0..n).contains(&i) {
            return Some(i as usize);
        }
        match self {
            PaddingMode::Zero(_) => None,
            PaddingMode::Reflect(_) => {
                let r = if i < 0 { -i } else { 2 * (n - 1) - i };
                debug_assert!((0..n).contains(&r), "reflect width exceeds axis");
                Some(r as usize)
            }
        }
    }

    pub(crate) fn check_axis(self, n: usize, what: &str) -> Result<()> {
        if let PaddingMode::Reflect(p) = self {
            if p >= n {
                return Err(Error::shape(format!(
                    "reflect padding width {p} must be smaller than {what} size {n}"
                )));
            }
        }
        Ok(())
    }
}

/// For each kernel tap and output position, the source index (or zero tap).
fn index_map(
    len: usize,
    k: usize,
    stride: usize,
    pad: PaddingMode,
) -> Result<(usize, Vec<Option<usize>>)> {
    let padded = len + 2 * pad.width();
    if padded < k {
        return Err(Error::shape(format!(
            "kernel size {k} exceeds padded input size {padded}"
        )));
    }
    let out = (padded - k) / stride + 1;
    let p = pad.width() as isize;
    let mut map = Vec::with_capacity(k * out);
    for ki in 0..k {
        for o in 0..out {
            map.push(pad.source((o * stride + ki) as isize - p, len));
        }
    }
    Ok((out, map))
}

fn check_kernel(kh: usize, kw: usize) -> Result<()> {
    if kh.is_multiple_of(2) || kw.is_multiple_of(2) {
        return Err(Error::config(format!("kernel {kh}×{kw} must have odd sides")));
    }
    Ok(())
}

/// 2D cross-correlation (no kernel flip).
///
/// `x: [B×C_in×H×W]`, `kernel: [C_out×C_in×kh×kw]`. Implemented as im2col
/// followed by one GEMM over the whole batch.
pub fn conv2d(x: &Tensor, kernel: &Tensor, stride: usize, padding: PaddingMode) -> Result<Tensor> {
    let (xs, ks) = (x.shape(), kernel.shape());
    if xs.len() != 4 || ks.len() != 4 {
        return Err(Error::shape(format!(
            "conv2d expects 4-d input and kernel, got {xs:?} and {ks:?}"
        )));
    }
    let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (o, kc, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
    if kc != c {
        return Err(Error::shape(format!(
            "conv2d: input has {c} channels, kernel expects {kc}"
        )));
    }
    check_kernel(kh, kw)?;
    if stride == 0 {
        return Err(Error::config("conv2d stride must be ≥ 1"));
    }
    padding.check_axis(h, "height")?;
    padding.check_axis(w, "width")?;
    let (ho, rows) = index_map(h, kh, stride, padding)?;
    let (wo, cols) = index_map(w, kw, stride, padding)?;

    let r = c * kh * kw;
    let hw_out = ho * wo;
    let n = b * hw_out;
    let xd = x.data();

    let mut col = vec![0.0f32; r * n];
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let dst = &mut col[row * n..][..n];
                for bi in 0..b {
                    let plane = &xd[(bi * c + ci) * h * w..][..h * w];
                    for oy in 0..ho {
                        let Some(sy) = rows[ki * ho + oy] else { continue };
                        let src = &plane[sy * w..][..w];
                        let out = &mut dst[bi * hw_out + oy * wo..][..wo];
                        for (ox, v) in out.iter_mut().enumerate() {
                            if let Some(sx) = cols[kj * wo + ox] {
                                *v = src[sx];
                            }
                        }
                    }
                }
            }
        }
    }

    let mut out_mat = vec![0.0f32; o * n];
    gemm(o, r, n, kernel.data(), (r, 1), &col, (n, 1), &mut out_mat, 0.0);
    let mut out = vec![0.0f32; b * o * hw_out];
    for oi in 0..o {
        for bi in 0..b {
            out[(bi * o + oi) * hw_out..][..hw_out]
                .copy_from_slice(&out_mat[oi * n + bi * hw_out..][..hw_out]);
        }
    }

    let kv = kernel.to_vec();
    let (x_needs, k_needs) = (x.requires_grad(), kernel.requires_grad());
    Ok(Tensor::from_op(
        "conv2d",
        out,
        vec![b, o, ho, wo],
        vec![x.clone(), kernel.clone()],
        move |g| {
            let mut gmat = vec![0.0f32; o * n];
            for oi in 0..o {
                for bi in 0..b {
                    gmat[oi * n + bi * hw_out..][..hw_out]
                        .copy_from_slice(&g[(bi * o + oi) * hw_out..][..hw_out]);
                }
            }
            let gk = k_needs.then(|| {
                let mut gk = vec![0.0f32; o * r];
                gemm(o, n, r, &gmat, (n, 1), &col, (1, n), &mut gk, 0.0);
                gk
            });
            let gx = x_needs.then(|| {
                let mut dcol = vec![0.0f32; r * n];
                gemm(r, o, n, &kv, (1, r), &gmat, (n, 1), &mut dcol, 0.0);
                let mut gx = vec![0.0f32; b * c * h * w];
                for ci in 0..c {
                    for ki in 0..kh {
                        for kj in 0..kw {
                            let row = (ci * kh + ki) * kw + kj;
                            let src_row = &dcol[row * n..][..n];
                            for bi in 0..b {
                                let plane = &mut gx[(bi * c + ci) * h * w..][..h * w];
                                for oy in 0..ho {
                                    let Some(sy) = rows[ki * ho + oy] else { continue };
                                    let src = &src_row[bi * hw_out + oy * wo..][..wo];
                                    for (ox, &v) in src.iter().enumerate() {
                                        if let Some(sx) = cols[kj * wo + ox] {
                                            plane[sy * w + sx] += v;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                gx
            });
            vec![gx, gk]
        },
    ))
}

/// Per-channel convolution with stride 1: `kernel: [C×1×kh×kw]`.
pub fn depthwise_conv2d(x: &Tensor, kernel: &Tensor, padding: PaddingMode) -> Result<Tensor> {
    let (xs, ks) = (x.shape(), kernel.shape());
    if xs.len() != 4 || ks.len() != 4 || ks[1] != 1 || ks[0] != xs[1] {
        return Err(Error::shape(format!(
            "depthwise_conv2d: input {xs:?} incompatible with kernel {ks:?}"
        )));
    }
    let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (kh, kw) = (ks[2], ks[3]);
    check_kernel(kh, kw)?;
    padding.check_axis(h, "height")?;
    padding.check_axis(w, "width")?;
    let (ho, rows) = index_map(h, kh, 1, padding)?;
    let (wo, cols) = index_map(w, kw, 1, padding)?;

    let xd = x.data();
    let kd = kernel.data();
    let mut out = vec![0.0f32; b * c * ho * wo];
    for bi in 0..b {
        for ci in 0..c {
            let plane = &xd[(bi * c + ci) * h * w..][..h * w];
            let kern = &kd[ci * kh * kw..][..kh * kw];
            let dst = &mut out[(bi * c + ci) * ho * wo..][..ho * wo];
            for ki in 0..kh {
                for kj in 0..kw {
                    let wt = kern[ki * kw + kj];
                    for oy in 0..ho {
                        let Some(sy) = rows[ki * ho + oy] else { continue };
                        for ox in 0..wo {
                            if let Some(sx) = cols[kj * wo + ox] {
                                dst[oy * wo + ox] += wt * plane[sy * w + sx];
                            }
                        }
                    }
                }
            }
        }
    }

    let xv = x.to_vec();
    let kv = kernel.to_vec();
    Ok(Tensor::from_op(
        "depthwise_conv2d",
        out,
        vec![b, c, ho, wo],
        vec![x.clone(), kernel.clone()],
        move |g| {
            let mut gx = vec![0.0f32; b * c * h * w];
            let mut gk = vec![0.0f32; c * kh * kw];
            for bi in 0..b {
                for ci in 0..c {
                    let plane = &xv[(bi * c + ci) * h * w..][..h * w];
                    let gplane = &mut gx[(bi * c + ci) * h * w..][..h * w];
                    let gout = &g[(bi * c + ci) * ho * wo..][..ho * wo];
                    for ki in 0..kh {
                        for kj in 0..kw {
                            let wt = kv[ci * kh * kw + ki * kw + kj];
                            let mut acc = 0.0f32;
                            for oy in 0..ho {
                                let Some(sy) = rows[ki * ho + oy] else { continue };
                                for ox in 0..wo {
                                    if let Some(sx) = cols[kj * wo + ox] {
                                        let gv = gout[oy * wo + ox];
                                        acc += gv * plane[sy * w + sx];
                                        gplane[sy * w + sx] += gv * wt;
                                    }
                                }
                            }
                            gk[ci * kh * kw + ki * kw + kj] += acc;
                        }
                    }
                }
            }
            vec![Some(gx), Some(gk)]
        },
    ))
}
