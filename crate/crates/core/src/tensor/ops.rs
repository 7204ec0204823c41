use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
}

/// `c = a·b + beta·c` for row-major views described by (row, col) strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_strides: (usize, usize),
    b: &[f32],
    b_strides: (usize, usize),
    c: &mut [f32],
    beta: f32,
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!(a.len() > (m - 1) * a_strides.0 + (k - 1) * a_strides.1);
    assert!(b.len() > (k - 1) * b_strides.0 + (n - 1) * b_strides.1);
    // SAFETY: extents of a, b and c checked above; c is exclusively borrowed.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `a op b`, where `b` either matches `a` or matches a trailing suffix of
/// `a`'s shape (it is then repeated along the leading dims).
pub fn elementwise(a: &Tensor, b: &Tensor, op: Elementwise) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    let broadcast = sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb;
    if !broadcast {
        return Err(Error::shape(format!(
            "{op:?}: shapes {sa:?} and {sb:?} are not compatible"
        )));
    }
    let inner = b.numel();
    let (ad, bd) = (a.data(), b.data());
    let data: Vec<f32> = ad
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let y = bd[i % inner];
            match op {
                Elementwise::Add => x + y,
                Elementwise::Sub => x - y,
                Elementwise::Mul => x * y,
            }
        })
        .collect();

    let (a_saved, b_saved) = match op {
        Elementwise::Mul => (Some(a.to_vec()), Some(b.to_vec())),
        _ => (None, None),
    };
    let b_needs = b.requires_grad();
    Ok(Tensor::from_op(
        match op {
            Elementwise::Add => "add",
            Elementwise::Sub => "sub",
            Elementwise::Mul => "mul",
        },
        data,
        sa.to_vec(),
        vec![a.clone(), b.clone()],
        move |g| {
            let ga: Vec<f32> = match op {
                Elementwise::Mul => {
                    let bv = b_saved.as_ref().unwrap();
                    g.iter().enumerate().map(|(i, &gi)| gi * bv[i % inner]).collect()
                }
                _ => g.to_vec(),
            };
            let gb = b_needs.then(|| {
                let mut gb = vec![0.0f32; inner];
                for (i, &gi) in g.iter().enumerate() {
                    gb[i % inner] += match op {
                        Elementwise::Add => gi,
                        Elementwise::Sub => -gi,
                        Elementwise::Mul => gi * a_saved.as_ref().unwrap()[i],
                    };
                }
                gb
            });
            vec![Some(ga), gb]
        },
    ))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    elementwise(a, b, Elementwise::Add)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    elementwise(a, b, Elementwise::Sub)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    elementwise(a, b, Elementwise::Mul)
}

/// `[B×M]·[M×K] → [B×K]`.
pub fn matmul(a: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (sa, sw) = (a.shape(), w.shape());
    if sa.len() != 2 || sw.len() != 2 || sa[1] != sw[0] {
        return Err(Error::shape(format!(
            "matmul: {sa:?} and {sw:?} have mismatched inner dims"
        )));
    }
    let (b, m, k) = (sa[0], sa[1], sw[1]);
    let mut out = vec![0.0; b * k];
    gemm(b, m, k, a.data(), (m, 1), w.data(), (k, 1), &mut out, 0.0);

    let (a_val, w_val) = (a.to_vec(), w.to_vec());
    let (a_needs, w_needs) = (a.requires_grad(), w.requires_grad());
    Ok(Tensor::from_op(
        "matmul",
        out,
        vec![b, k],
        vec![a.clone(), w.clone()],
        move |g| {
            // dA = G·Wᵀ, dW = Aᵀ·G
            let ga = a_needs.then(|| {
                let mut ga = vec![0.0; b * m];
                gemm(b, k, m, g, (k, 1), &w_val, (1, k), &mut ga, 0.0);
                ga
            });
            let gw = w_needs.then(|| {
                let mut gw = vec![0.0; m * k];
                gemm(m, b, k, &a_val, (1, m), g, (k, 1), &mut gw, 0.0);
                gw
            });
            vec![ga, gw]
        },
    ))
}

/// Adds a per-channel bias `[C]` to `[B×C×…]`.
pub fn add_channel_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() < 2 || bias.numel() != s[1] {
        return Err(Error::shape(format!(
            "channel bias {:?} does not match input {s:?}",
            bias.shape()
        )));
    }
    let c = s[1];
    let inner: usize = s[2..].iter().product();
    let bd = bias.data();
    let data: Vec<f32> = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| v + bd[(i / inner) % c])
        .collect();
    Ok(Tensor::from_op(
        "add_channel_bias",
        data,
        s.to_vec(),
        vec![x.clone(), bias.clone()],
        move |g| {
            let mut gb = vec![0.0f32; c];
            for (i, gi) in g.iter().enumerate() {
                gb[(i / inner) % c] += gi;
            }
            vec![Some(g.to_vec()), Some(gb)]
        },
    ))
}

pub fn relu(x: &Tensor) -> Tensor {
    // NaN passes through so divergence is not masked
    let data: Vec<f32> = x.data().iter().map(|&v| if v.is_nan() { v } else { v.max(0.0) }).collect();
    let mask: Vec<bool> = x.data().iter().map(|&v| v > 0.0).collect();
    Tensor::from_op("relu", data, x.shape().to_vec(), vec![x.clone()], move |g| {
        vec![Some(
            g.iter()
                .zip(&mask)
                .map(|(&gi, &m)| if m { gi } else { 0.0 })
                .collect(),
        )]
    })
}

pub fn sum(x: &Tensor) -> Tensor {
    let s: f32 = x.data().iter().sum();
    let n = x.numel();
    Tensor::from_op("sum", vec![s], vec![1], vec![x.clone()], move |g| {
        vec![Some(vec![g[0]; n])]
    })
}

pub fn mean(x: &Tensor) -> Tensor {
    let n = x.numel();
    let s: f32 = x.data().iter().sum::<f32>() / n as f32;
    Tensor::from_op("mean", vec![s], vec![1], vec![x.clone()], move |g| {
        vec![Some(vec![g[0] / n as f32; n])]
    })
}

/// `[B×C×H×W] → [B×C]`.
pub fn global_avg_pool2d(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::shape(format!("global_avg_pool2d expects B×C×H×W, got {s:?}")));
    }
    let (bc, hw) = (s[0] * s[1], s[2] * s[3]);
    let data: Vec<f32> = x
        .data()
        .chunks_exact(hw)
        .map(|c| c.iter().sum::<f32>() / hw as f32)
        .collect();
    Ok(Tensor::from_op(
        "global_avg_pool2d",
        data,
        vec![s[0], s[1]],
        vec![x.clone()],
        move |g| {
            let mut gx = Vec::with_capacity(bc * hw);
            for &gi in g {
                gx.extend(std::iter::repeat_n(gi / hw as f32, hw));
            }
            vec![Some(gx)]
        },
    ))
}

/// Mean over the middle axis: `[B×N×C] → [B×C]`.
pub fn mean_axis1(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::shape(format!("mean_axis1 expects B×N×C, got {s:?}")));
    }
    let (b, n, c) = (s[0], s[1], s[2]);
    let mut data = vec![0.0f32; b * c];
    for bi in 0..b {
        for t in 0..n {
            let row = &x.data()[(bi * n + t) * c..][..c];
            data[bi * c..][..c].iter_mut().zip(row).for_each(|(d, v)| *d += v);
        }
    }
    data.iter_mut().for_each(|v| *v /= n as f32);
    Ok(Tensor::from_op("mean_axis1", data, vec![b, c], vec![x.clone()], move |g| {
        let mut gx = vec![0.0f32; b * n * c];
        for bi in 0..b {
            for t in 0..n {
                gx[(bi * n + t) * c..][..c]
                    .iter_mut()
                    .zip(&g[bi * c..][..c])
                    .for_each(|(d, gv)| *d = gv / n as f32);
            }
        }
        vec![Some(gx)]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_difference;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(v: &[f32], s: &[usize]) -> Tensor {
        Tensor::new(v.to_vec(), s).unwrap()
    }

    #[test]
    fn self_subtraction() {
        let a = t(&[1.0, 2.0], &[2]);
        assert_eq!(sub(&a, &a).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn elementwise_mul() {
        let r = mul(&t(&[1.0, 2.0, 3.0], &[3]), &t(&[2.0, 2.0, 2.0], &[3])).unwrap();
        assert_eq!(r.data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn broadcast_bias() {
        let a = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = Tensor::param(vec![10.0, 20.0], &[2]).unwrap();
        let r = add(&a, &b).unwrap();
        assert_eq!(r.data(), &[11.0, 22.0, 13.0, 24.0]);
        sum(&r).backward().unwrap();
        assert_eq!(b.grad().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn shape_mismatch_names_both() {
        let err = add(&t(&[1.0; 6], &[2, 3]), &t(&[1.0; 2], &[2])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2]"), "{msg}");
    }

    #[test]
    fn matmul_identity_and_hand_sum() {
        let eye = t(&[1.0, 0.0, 0.0, 1.0], &[2, 2]);
        assert_eq!(matmul(&t(&[3.0, 4.0], &[1, 2]), &eye).unwrap().data(), &[3.0, 4.0]);
        let r = matmul(&t(&[1.0, 2.0], &[1, 2]), &t(&[1.0, 1.0], &[2, 1])).unwrap();
        assert_eq!(r.data(), &[3.0]);
        assert!(matches!(
            matmul(&t(&[1.0; 6], &[2, 3]), &t(&[1.0; 4], &[2, 2])),
            Err(Error::Shape(_))
        ));
    }

    fn rel_close(a: f64, b: f64, rtol: f64, atol: f64) -> bool {
        (a - b).abs() <= atol + rtol * b.abs().max(a.abs())
    }

    #[test]
    fn mul_grad_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let av: Vec<f32> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bv: Vec<f32> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = Tensor::param(av.clone(), &[4]).unwrap();
        let b = t(&bv, &[4]);
        sum(&mul(&a, &b).unwrap()).backward().unwrap();
        let fd = finite_difference(&av, 1e-3, |x| {
            x.iter().zip(&bv).map(|(p, q)| (p * q) as f64).sum()
        });
        for (g, f) in a.grad().unwrap().iter().zip(&fd) {
            assert!(rel_close(*g as f64, *f, 1e-3, 1e-4), "{g} vs {f}");
        }
        assert_eq!(a.grad().unwrap(), bv);
    }

    #[test]
    fn matmul_grad_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let av: Vec<f32> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wv: Vec<f32> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cv: Vec<f32> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = Tensor::param(av.clone(), &[3, 4]).unwrap();
        let w = Tensor::param(wv.clone(), &[4, 2]).unwrap();
        let c = t(&cv, &[3, 2]);
        sum(&mul(&matmul(&a, &w).unwrap(), &c).unwrap()).backward().unwrap();

        let f = |av: &[f32], wv: &[f32]| -> f64 {
            let mut s = 0.0f64;
            for i in 0..3 {
                for j in 0..2 {
                    let dot: f64 = (0..4).map(|k| av[i * 4 + k] as f64 * wv[k * 2 + j] as f64).sum();
                    s += dot * cv[i * 2 + j] as f64;
                }
            }
            s
        };
        let fd_a = finite_difference(&av, 1e-3, |x| f(x, &wv));
        let fd_w = finite_difference(&wv, 1e-3, |x| f(&av, x));
        for (g, e) in a.grad().unwrap().iter().zip(&fd_a).chain(w.grad().unwrap().iter().zip(&fd_w)) {
            assert!(rel_close(*g as f64, *e, 1e-3, 1e-4), "{g} vs {e}");
        }
    }

    #[test]
    fn pooling_shapes_and_grads() {
        let x = Tensor::param((0..16).map(|v| v as f32).collect(), &[1, 2, 2, 4]).unwrap();
        let p = global_avg_pool2d(&x).unwrap();
        assert_eq!(p.data(), &[3.5, 11.5]);
        sum(&p).backward().unwrap();
        assert!(x.grad().unwrap().iter().all(|&g| g == 0.125));

        let s = Tensor::param((0..12).map(|v| v as f32).collect(), &[2, 3, 2]).unwrap();
        let m = mean_axis1(&s).unwrap();
        assert_eq!(m.shape(), &[2, 2]);
        assert_eq!(m.data(), &[2.0, 3.0, 8.0, 9.0]);
    }

    #[test]
    fn relu_keeps_nan() {
        let y = relu(&Tensor::new(vec![-1.0, f32::NAN, 2.0], &[3]).unwrap());
        assert_eq!(y.data()[0], 0.0);
        assert!(y.data()[1].is_nan());
        assert_eq!(y.data()[2], 2.0);
    }
}
