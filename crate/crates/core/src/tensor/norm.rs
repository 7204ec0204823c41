use super::Tensor;
use crate::error::{Error, Result};

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;
pub const LN_EPS: f32 = 1e-5;

/// How batch norm chooses its statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics.
    Eval,
    /// Batch statistics; running statistics are left alone (NORM / TENT).
    BatchStats,
}

pub struct BnOutput {
    pub out: Tensor,
    /// New `(running_mean, running_var)` in [`BnMode::Train`].
    pub running: Option<(Vec<f32>, Vec<f32>)>,
}

/// Batch normalization over `[B×C×H×W]` with per-channel affine `gamma`,
/// `beta`. Pure: updated running statistics are returned, not written.
pub fn batch_norm2d(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &[f32],
    running_var: &[f32],
    mode: BnMode,
) -> Result<BnOutput> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::shape(format!("batch_norm2d expects B×C×H×W, got {s:?}")));
    }
    let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
    for (name, len) in [
        ("gamma", gamma.numel()),
        ("beta", beta.numel()),
        ("running_mean", running_mean.len()),
        ("running_var", running_var.len()),
    ] {
        if len != c {
            return Err(Error::shape(format!(
                "batch_norm2d: input has {c} channels but {name} has {len}"
            )));
        }
    }
    let n = b * hw;
    let xd = x.data();

    let (mean, var) = match mode {
        BnMode::Eval => (running_mean.to_vec(), running_var.to_vec()),
        BnMode::Train | BnMode::BatchStats => {
            if b == 1 {
                log::warn!("batch_norm2d: batch statistics from a single sample (variance degenerate, eps-guarded)");
            }
            let mut mean = vec![0.0f32; c];
            let mut var = vec![0.0f32; c];
            for ci in 0..c {
                let mut acc = 0.0f32;
                for bi in 0..b {
                    acc += xd[(bi * c + ci) * hw..][..hw].iter().sum::<f32>();
                }
                let m = acc / n as f32;
                let mut sq = 0.0f32;
                for bi in 0..b {
                    sq += xd[(bi * c + ci) * hw..][..hw]
                        .iter()
                        .map(|v| (v - m) * (v - m))
                        .sum::<f32>();
                }
                mean[ci] = m;
                var[ci] = sq / n as f32;
            }
            (mean, var)
        }
    };

    let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let (gd, bd) = (gamma.data(), beta.data());
    let mut xhat = vec![0.0f32; xd.len()];
    let mut out = vec![0.0f32; xd.len()];
    for bi in 0..b {
        for ci in 0..c {
            let off = (bi * c + ci) * hw;
            for i in off..off + hw {
                let xh = (xd[i] - mean[ci]) * inv_std[ci];
                xhat[i] = xh;
                out[i] = gd[ci] * xh + bd[ci];
            }
        }
    }

    let running = (mode == BnMode::Train).then(|| {
        let unbias = if n > 1 { n as f32 / (n - 1) as f32 } else { 1.0 };
        let rm = running_mean
            .iter()
            .zip(&mean)
            .map(|(r, m)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * m)
            .collect();
        let rv = running_var
            .iter()
            .zip(&var)
            .map(|(r, v)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * v * unbias)
            .collect();
        (rm, rv)
    });

    let gamma_v = gd.to_vec();
    let batch_stats = mode != BnMode::Eval;
    let out = Tensor::from_op(
        "batch_norm2d",
        out,
        s.to_vec(),
        vec![x.clone(), gamma.clone(), beta.clone()],
        move |g| {
            let mut sum_g = vec![0.0f32; c];
            let mut sum_gx = vec![0.0f32; c];
            for bi in 0..b {
                for ci in 0..c {
                    let off = (bi * c + ci) * hw;
                    for i in off..off + hw {
                        sum_g[ci] += g[i];
                        sum_gx[ci] += g[i] * xhat[i];
                    }
                }
            }
            let mut gx = vec![0.0f32; g.len()];
            for bi in 0..b {
                for ci in 0..c {
                    let off = (bi * c + ci) * hw;
                    let scale = gamma_v[ci] * inv_std[ci];
                    if batch_stats {
                        let nf = n as f32;
                        for i in off..off + hw {
                            gx[i] = scale / nf * (nf * g[i] - sum_g[ci] - xhat[i] * sum_gx[ci]);
                        }
                    } else {
                        for i in off..off + hw {
                            gx[i] = scale * g[i];
                        }
                    }
                }
            }
            vec![Some(gx), Some(sum_gx), Some(sum_g)]
        },
    );
    Ok(BnOutput { out, running })
}

/// Per-row standardization over the last axis with affine `gamma`, `beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    let c = *s.last().ok_or_else(|| Error::shape("layer_norm on 0-d tensor"))?;
    if gamma.numel() != c || beta.numel() != c {
        return Err(Error::shape(format!(
            "layer_norm: last axis {c} vs gamma {} / beta {}",
            gamma.numel(),
            beta.numel()
        )));
    }
    let xd = x.data();
    let rows = xd.len() / c;
    let mut xhat = vec![0.0f32; xd.len()];
    let mut inv_std = vec![0.0f32; rows];
    let mut out = vec![0.0f32; xd.len()];
    let (gd, bd) = (gamma.data(), beta.data());
    for r in 0..rows {
        let row = &xd[r * c..][..c];
        let m = row.iter().sum::<f32>() / c as f32;
        let v = row.iter().map(|x| (x - m) * (x - m)).sum::<f32>() / c as f32;
        let is = 1.0 / (v + LN_EPS).sqrt();
        inv_std[r] = is;
        for j in 0..c {
            let xh = (row[j] - m) * is;
            xhat[r * c + j] = xh;
            out[r * c + j] = gd[j] * xh + bd[j];
        }
    }
    let gamma_v = gd.to_vec();
    Ok(Tensor::from_op(
        "layer_norm",
        out,
        s.to_vec(),
        vec![x.clone(), gamma.clone(), beta.clone()],
        move |g| {
            let mut gx = vec![0.0f32; g.len()];
            let mut gg = vec![0.0f32; c];
            let mut gb = vec![0.0f32; c];
            let cf = c as f32;
            for r in 0..rows {
                let (gr, xr) = (&g[r * c..][..c], &xhat[r * c..][..c]);
                let mut s1 = 0.0f32;
                let mut s2 = 0.0f32;
                for j in 0..c {
                    let d = gr[j] * gamma_v[j];
                    s1 += d;
                    s2 += d * xr[j];
                    gg[j] += gr[j] * xr[j];
                    gb[j] += gr[j];
                }
                for j in 0..c {
                    let d = gr[j] * gamma_v[j];
                    gx[r * c + j] = inv_std[r] / cf * (cf * d - s1 - xr[j] * s2);
                }
            }
            vec![Some(gx), Some(gg), Some(gb)]
        },
    ))
}
