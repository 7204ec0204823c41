use edgefilter::data::synthetic::{generate, Family};
use edgefilter::data::{
    corrupt, corrupt_dataset, load_cifar10_bin, load_idx, subset, write_cifar10_bin, write_idx_images,
    write_idx_labels, CorruptionKind, CorruptionSpec, Dataset, Normalization, Split,
};
use proptest::prelude::*;

fn kind() -> impl Strategy<Value = CorruptionKind> {
    prop::sample::select(CorruptionKind::ALL.to_vec())
}

fn dataset(chw: (usize, usize, usize), classes: u16) -> impl Strategy<Value = Dataset> {
    let per = chw.0 * chw.1 * chw.2;
    (1usize..12).prop_flat_map(move |n| {
        (prop::collection::vec(any::<u8>(), n * per), prop::collection::vec(0..classes, n))
            .prop_map(move |(pixels, labels)| Dataset::new("fixture", Split::Train, chw, pixels, labels).unwrap())
    })
}

fn mean_abs_delta(a: &Dataset, b: &Dataset) -> f64 {
    let total: u64 = a.pixels().iter().zip(b.pixels()).map(|(&x, &y)| x.abs_diff(y) as u64).sum();
    total as f64 / a.pixels().len() as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(std::env::var("EDGEFILTER_STRESS").map_or(64, |_| 2000)))]

    #[test]
    fn idx_round_trip_is_byte_exact(ds in dataset((1, 5, 7), 10)) {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = (dir.path().join("img.idx"), dir.path().join("lab.idx"));
        write_idx_images(&ds, &img).unwrap();
        write_idx_labels(&ds, &lab).unwrap();
        let back = load_idx(&img, &lab, "fixture", Split::Train).unwrap();
        prop_assert_eq!(back.pixels(), ds.pixels());
        prop_assert_eq!(back.labels(), ds.labels());

        let (img2, lab2) = (dir.path().join("img2.idx"), dir.path().join("lab2.idx"));
        write_idx_images(&back, &img2).unwrap();
        write_idx_labels(&back, &lab2).unwrap();
        prop_assert_eq!(std::fs::read(&img).unwrap(), std::fs::read(&img2).unwrap());
        prop_assert_eq!(std::fs::read(&lab).unwrap(), std::fs::read(&lab2).unwrap());
    }

    #[test]
    fn multichannel_idx_round_trip(ds in dataset((3, 4, 4), 10)) {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = (dir.path().join("img.idx"), dir.path().join("lab.idx"));
        write_idx_images(&ds, &img).unwrap();
        write_idx_labels(&ds, &lab).unwrap();
        let back = load_idx(&img, &lab, "fixture", Split::Val).unwrap();
        prop_assert_eq!((back.channels, back.height, back.width), (3, 4, 4));
        prop_assert_eq!(back.pixels(), ds.pixels());
    }

    #[test]
    fn cifar_round_trip_is_byte_exact(ds in dataset((3, 32, 32), 10)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("batch.bin");
        write_cifar10_bin(&ds, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        prop_assert_eq!(bytes.len(), ds.len() * 3073);
        let back = load_cifar10_bin(&path, "fixture", Split::Train).unwrap();
        prop_assert_eq!(&back, &ds);
        write_cifar10_bin(&back, &path).unwrap();
        prop_assert_eq!(std::fs::read(&path).unwrap(), bytes);
    }

    #[test]
    fn corrupt_is_seeded_and_shape_preserving(
        img in prop::collection::vec(any::<u8>(), 2 * 6 * 5),
        kind in kind(),
        severity in 1u8..=5,
        seed in any::<u64>(),
    ) {
        let spec = CorruptionSpec::new(kind, severity).unwrap();
        let a = corrupt(&img, (2, 6, 5), spec, seed).unwrap();
        prop_assert_eq!(a.len(), img.len());
        prop_assert_eq!(a, corrupt(&img, (2, 6, 5), spec, seed).unwrap());
    }

    #[test]
    fn normalized_batches_are_finite(ds in dataset((1, 3, 3), 10), idx in prop::collection::vec(0usize..64, 1..8)) {
        let norm = Normalization::from_dataset(&ds);
        let idx: Vec<usize> = idx.into_iter().map(|i| i % ds.len()).collect();
        let x = norm.batch(&ds, &idx).unwrap();
        prop_assert_eq!(x.shape(), &[idx.len(), 1, 3, 3]);
        prop_assert!(x.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn subsets_are_distinct_members(n in 1usize..40, seed in any::<u64>()) {
        let ds = generate(Family::Shapes, 40, 1, Split::Train);
        let sub = subset(&ds, n, seed).unwrap();
        prop_assert_eq!(sub.len(), n);
        let mut seen = std::collections::HashSet::new();
        for i in 0..sub.len() {
            let j = (0..ds.len()).find(|&j| ds.image(j) == sub.image(i)).unwrap();
            prop_assert_eq!(ds.label(j), sub.label(i));
            prop_assert!(seen.insert(j));
        }
    }
}

#[test]
fn severity_is_monotone_in_distortion() {
    let sample = generate(Family::Shapes, 100, 7, Split::Val);
    for kind in CorruptionKind::ALL {
        let deltas: Vec<f64> = (1..=5)
            .map(|s| mean_abs_delta(&sample, &corrupt_dataset(&sample, CorruptionSpec::new(kind, s).unwrap(), 3).unwrap()))
            .collect();
        for w in deltas.windows(2) {
            assert!(w[0] <= w[1], "{kind}: {deltas:?}");
        }
        assert!(deltas[0] > 0.0, "{kind} at severity 1 changed nothing");
    }
}

#[test]
fn corruption_names_the_stream() {
    let ds = generate(Family::Patterns, 10, 0, Split::Val);
    let c = corrupt_dataset(&ds, CorruptionSpec::new(CorruptionKind::BoxBlur, 4).unwrap(), 0).unwrap();
    assert_eq!(c.name, "synthetic-patterns-box_blur-s4");
    assert_eq!(c.labels(), ds.labels());
}
