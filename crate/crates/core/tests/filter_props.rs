use edgefilter::filters::{apply_lpf, edge_filter, Dimensionality, FilterSpec, LpfKind};
use edgefilter::tensor::sum;
use edgefilter::Tensor;
use proptest::prelude::*;

const KINDS: [LpfKind; 3] = [LpfKind::Mean, LpfKind::Median, LpfKind::Gaussian];

fn kind() -> impl Strategy<Value = LpfKind> {
    prop::sample::select(KINDS.to_vec())
}

/// B×C×H×W values plus an odd kernel that fits the spatial extent.
fn grid() -> impl Strategy<Value = (Vec<usize>, Vec<f32>, usize)> {
    grid_with_channels(1..4)
}

fn grid_with_channels(c: std::ops::Range<usize>) -> impl Strategy<Value = (Vec<usize>, Vec<f32>, usize)> {
    (1usize..3, c, 2usize..9, 2usize..9).prop_flat_map(|(b, c, h, w)| {
        let max_k = 2 * h.min(w) - 1;
        (
            Just(vec![b, c, h, w]),
            prop::collection::vec(-5.0f32..5.0, b * c * h * w),
            (0..=(max_k - 1) / 2).prop_map(|r| 2 * r + 1),
        )
    })
}

/// B×N×C values plus an odd kernel that fits N.
fn sequence() -> impl Strategy<Value = (Vec<usize>, Vec<f32>, usize)> {
    (1usize..3, 2usize..12, 1usize..4).prop_flat_map(|(b, n, c)| {
        (
            Just(vec![b, n, c]),
            prop::collection::vec(-5.0f32..5.0, b * n * c),
            (0..=(2 * n - 2) / 2).prop_map(|r| 2 * r + 1),
        )
    })
}

fn spec_for(shape: &[usize], kind: LpfKind, k: usize) -> FilterSpec {
    let dim = if shape.len() == 4 { Dimensionality::TwoD } else { Dimensionality::OneD };
    FilterSpec::new(kind, dim, k)
}

fn check_reconstruction(shape: Vec<usize>, data: Vec<f32>, k: usize, kind: LpfKind) -> Result<(), TestCaseError> {
    let h = Tensor::new(data, &shape).unwrap();
    let spec = spec_for(&shape, kind, k);
    let e = edge_filter(&h, &spec).unwrap();
    let l = apply_lpf(&h, &spec).unwrap();
    for ((a, b), x) in e.data().iter().zip(l.data()).zip(h.data()) {
        prop_assert!((a + b - x).abs() <= 1e-6 * (1.0 + x.abs()), "{a} + {b} vs {x}");
    }
    Ok(())
}

fn check_pass_through(shape: Vec<usize>, data: Vec<f32>, k: usize, kind: LpfKind, upstream: &[f32]) -> Result<(), TestCaseError> {
    let h = Tensor::param(data, &shape).unwrap();
    let g = Tensor::new(upstream.to_vec(), &shape).unwrap();
    let e = edge_filter(&h, &spec_for(&shape, kind, k)).unwrap();
    sum(&edgefilter::tensor::mul(&e, &g).unwrap()).backward().unwrap();
    prop_assert_eq!(h.grad().unwrap(), upstream.to_vec());
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(std::env::var("EDGEFILTER_STRESS").map_or(200, |_| 2000)))]

    #[test]
    fn reconstruction_2d((shape, data, k) in grid(), kind in kind()) {
        check_reconstruction(shape, data, k, kind)?;
    }

    #[test]
    fn reconstruction_1d((shape, data, k) in sequence(), kind in kind()) {
        check_reconstruction(shape, data, k, kind)?;
    }

    #[test]
    fn gradient_passes_through_exactly((shape, data, k) in grid(), kind in kind(), seed in any::<u64>()) {
        let upstream: Vec<f32> = (0..data.len()).map(|i| ((seed >> (i % 50)) & 0xff) as f32 / 17.0 - 7.0).collect();
        check_pass_through(shape, data, k, kind, &upstream)?;
    }

    #[test]
    fn gradient_passes_through_sequences((shape, data, k) in sequence(), kind in kind()) {
        let upstream: Vec<f32> = data.iter().map(|v| v * 0.5 - 1.0).collect();
        check_pass_through(shape, data, k, kind, &upstream)?;
    }

    #[test]
    fn constants_are_annihilated((shape, _d, k) in grid(), kind in kind(), v in -100.0f32..100.0) {
        let n = shape.iter().product();
        let e = edge_filter(&Tensor::full(&shape, v), &spec_for(&shape, kind, k)).unwrap();
        prop_assert_eq!(e.numel(), n);
        prop_assert!(e.data().iter().all(|x| x.abs() <= 1e-6 * (1.0 + v.abs())));
    }

    #[test]
    fn unit_kernel_is_zero_map((shape, data, _k) in grid(), kind in kind()) {
        let h = Tensor::new(data, &shape).unwrap();
        let e = edge_filter(&h, &spec_for(&shape, kind, 1)).unwrap();
        prop_assert!(e.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn channels_are_independent((shape, data, k) in grid_with_channels(2..5), kind in kind(), noise in prop::collection::vec(-3.0f32..3.0, 64)) {
        // perturb every channel except channel 0 and compare channel 0
        let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        let mut other = data.clone();
        for (i, v) in other.iter_mut().enumerate() {
            if (i / hw) % c != 0 {
                *v += noise[i % noise.len()];
            }
        }
        let spec = spec_for(&shape, kind, k);
        let e1 = edge_filter(&Tensor::new(data, &shape).unwrap(), &spec).unwrap();
        let e2 = edge_filter(&Tensor::new(other, &shape).unwrap(), &spec).unwrap();
        for bi in 0..b {
            let s = bi * c * hw;
            prop_assert_eq!(&e1.data()[s..s + hw], &e2.data()[s..s + hw]);
        }
    }

    #[test]
    fn output_ignores_dc_offset((shape, data, k) in grid(), kind in kind(), c in -50.0f32..50.0) {
        let spec = spec_for(&shape, kind, k);
        let shifted: Vec<f32> = data.iter().map(|v| v + c).collect();
        let a = edge_filter(&Tensor::new(data, &shape).unwrap(), &spec).unwrap();
        let b = edge_filter(&Tensor::new(shifted, &shape).unwrap(), &spec).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() <= 2e-5 * (1.0 + c.abs()), "{x} vs {y}");
        }
    }

    #[test]
    fn mean_filter_reduces_spatial_mean((shape, data, k) in grid(), c in prop_oneof![-50.0f32..-6.0, 6.0f32..50.0]) {
        // reflect padding leaves a small boundary residue in the output mean,
        // so inputs are given a DC component well above it
        let hw = shape[2] * shape[3];
        let data: Vec<f32> = data.iter().map(|v| v + c).collect();
        let e = edge_filter(&Tensor::new(data.clone(), &shape).unwrap(), &FilterSpec::mean_2d(k)).unwrap();
        for (plane, out) in data.chunks(hw).zip(e.data().chunks(hw)) {
            let m_in = plane.iter().map(|&v| v as f64).sum::<f64>() / hw as f64;
            let m_out = out.iter().map(|&v| v as f64).sum::<f64>() / hw as f64;
            prop_assert!(m_out.abs() < m_in.abs(), "{m_out} vs {m_in}");
        }
    }
}

#[test]
fn lpf_output_is_detached() {
    let h = Tensor::param((0..16).map(|v| v as f32).collect(), &[1, 1, 4, 4]).unwrap();
    let l = apply_lpf(&h, &FilterSpec::mean_2d(3)).unwrap();
    assert!(!l.requires_grad());
}
