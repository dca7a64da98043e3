use std::collections::HashSet;
use std::path::Path;

use proptest::prelude::*;
use usegan_core::data::image::{preprocess, resize_bilinear, RgbImage};
use usegan_core::data::synthetic::{generate_synthetic_dataset, NUM_CLASSES};
use usegan_core::data::{epoch_batches, split_counts, split_dataset, Entry, ImageSet, Manifest, Split};

fn manifest(n: usize) -> Manifest {
    Manifest {
        entries: (0..n)
            .map(|i| Entry {
                id: format!("img{i}"),
                path: format!("images/img{i}.png"),
                label: i % 3,
                split: Split::Train,
            })
            .collect(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn splits_partition_the_items(n in 10usize..600, seed in any::<u64>()) {
        let m = split_dataset(manifest(n), seed).unwrap();
        let (tr, va, te) = split_counts(n);
        prop_assert_eq!((tr, va, te), (n * 8 / 10, n / 10, n - n * 8 / 10 - n / 10));
        prop_assert_eq!(m.count(Split::Train), tr);
        prop_assert_eq!(m.count(Split::Val), va);
        prop_assert_eq!(m.count(Split::Test), te);
        let mut seen = HashSet::new();
        for s in Split::ALL {
            for e in m.ids(s) {
                prop_assert!(seen.insert(e.id.clone()), "{} in two splits", e.id);
            }
        }
        prop_assert_eq!(seen.len(), n);
        prop_assert_eq!(split_dataset(manifest(n), seed).unwrap(), m);
    }

    #[test]
    fn manifest_text_round_trips(n in 1usize..50, seed in any::<u64>()) {
        let m = if n >= 10 { split_dataset(manifest(n), seed).unwrap() } else { manifest(n) };
        let back = Manifest::parse(&m.to_text(), Path::new("m.tsv")).unwrap();
        prop_assert_eq!(back.digest(), m.digest());
        prop_assert_eq!(back, m);
    }

    #[test]
    fn epoch_batches_cover_the_split(n in 1usize..200, bs in 1usize..64, seed in any::<u64>(), epoch in 0u64..5) {
        let batches = epoch_batches(n, bs, seed, epoch, false);
        let all: Vec<usize> = batches.iter().flatten().copied().collect();
        prop_assert_eq!(all.len(), n);
        prop_assert_eq!(all.iter().copied().collect::<HashSet<_>>().len(), n);
        prop_assert!(batches.iter().all(|b| b.len() <= bs));
        prop_assert_eq!(epoch_batches(n, bs, seed, epoch, false), batches);
    }

    #[test]
    fn preprocessing_stays_in_range(w in 1usize..20, h in 1usize..20, side in 1usize..24, seed in any::<u64>()) {
        let mut rng = usegan_core::Rng::seed(seed);
        let mut img = RgbImage::new(w, h);
        for y in 0..h {
            for x in 0..w {
                img.put(x, y, [rng.below(256) as u8, rng.below(256) as u8, rng.below(256) as u8]);
            }
        }
        let t = preprocess(&img, side);
        prop_assert_eq!(t.shape(), &[3, side, side][..]);
        prop_assert!(t.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn same_size_resize_is_identity(h in 1usize..12, w in 1usize..12, seed in any::<u64>()) {
        let mut rng = usegan_core::Rng::seed(seed);
        let src: Vec<f64> = (0..h * w).map(|_| rng.uniform()).collect();
        prop_assert_eq!(resize_bilinear(&src, h, w, h, w), src);
    }

    #[test]
    fn resize_preserves_constants_and_bounds(h in 1usize..10, w in 1usize..10, oh in 1usize..20, ow in 1usize..20, seed in any::<u64>()) {
        let c = 0.37;
        prop_assert!(resize_bilinear(&vec![c; h * w], h, w, oh, ow).iter().all(|v| (v - c).abs() < 1e-15));
        let mut rng = usegan_core::Rng::seed(seed);
        let src: Vec<f64> = (0..h * w).map(|_| rng.uniform()).collect();
        let (lo, hi) = src.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        prop_assert!(resize_bilinear(&src, h, w, oh, ow).iter().all(|&v| v >= lo - 1e-15 && v <= hi + 1e-15));
    }
}

#[test]
fn synthetic_generation_is_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = generate_synthetic_dataset(a.path(), 1, 42).unwrap();
    let mb = generate_synthetic_dataset(b.path(), 1, 42).unwrap();
    assert_eq!(ma.digest(), mb.digest());
    let file = |dir: &Path| std::fs::read(dir.join(&ma.entries[0].path)).unwrap();
    assert_eq!(file(a.path()), file(b.path()));
    assert!(generate_synthetic_dataset(a.path(), 0, 42).is_err());
}

#[test]
fn synthetic_dataset_loads_with_balanced_labels() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_synthetic_dataset(dir.path(), 60, 1).unwrap();
    assert_eq!(m.entries.len(), 60);
    assert_eq!(Manifest::read(dir.path()).unwrap(), m);
    let mut counts = [0usize; NUM_CLASSES];
    m.entries.iter().for_each(|e| counts[e.label] += 1);
    let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
    assert!(hi - lo <= 1, "{counts:?}");
    let set = ImageSet::load(dir.path(), &m, Split::Train, 16).unwrap();
    assert_eq!(set.len(), m.count(Split::Train));
    let all = set.all().unwrap();
    assert_eq!(all.shape(), [set.len(), 3, 16, 16]);
    assert!(all.data().iter().all(|v| (-1.0..=1.0).contains(v)));
}
