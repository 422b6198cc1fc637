use mixseg_core::synth::{generate_dataset, generate_samples, SynthConfig};
use mixseg_core::{dataset_iou, hash, imageio, iou, load_manifest, manifest, miou, IoUResult, Split};
use ndarray::Array2;
use proptest::prelude::*;

fn mask(bits: &[bool], w: usize) -> Array2<u8> {
    Array2::from_shape_fn((bits.len() / w, w), |(i, j)| u8::from(bits[i * w + j]))
}

fn small_config(n: usize) -> SynthConfig {
    SynthConfig {
        n_images: n,
        image_size: (24, 24),
        ..Default::default()
    }
}

proptest! {
    #[test]
    fn iou_matches_pixel_count(a in prop::collection::vec(any::<bool>(), 36), b in prop::collection::vec(any::<bool>(), 36)) {
        let (p, g) = (mask(&a, 6), mask(&b, 6));
        let inter = a.iter().zip(&b).filter(|(x, y)| **x && **y).count() as u64;
        let union = a.iter().zip(&b).filter(|(x, y)| **x || **y).count() as u64;
        let r = iou(p.view(), g.view()).unwrap();
        prop_assert_eq!((r.intersection, r.union), (inter, union));
        prop_assert_eq!(r.iou, (union > 0).then(|| inter as f64 / union as f64));
        let swapped = iou(g.view(), p.view()).unwrap();
        prop_assert_eq!(swapped.iou, r.iou);
    }

    #[test]
    fn dataset_iou_pools_counts(pairs in prop::collection::vec((prop::collection::vec(any::<bool>(), 16), prop::collection::vec(any::<bool>(), 16)), 1..6)) {
        let preds: Vec<_> = pairs.iter().map(|(a, _)| mask(a, 4)).collect();
        let gts: Vec<_> = pairs.iter().map(|(_, b)| mask(b, 4)).collect();
        let pooled = dataset_iou(preds.iter().map(|m| m.view()), gts.iter().map(|m| m.view())).unwrap();
        let (mut i, mut u) = (0, 0);
        for (p, g) in preds.iter().zip(&gts) {
            let r = iou(p.view(), g.view()).unwrap();
            i += r.intersection;
            u += r.union;
        }
        prop_assert_eq!((pooled.intersection, pooled.union), (i, u));
    }

    #[test]
    fn prob16_quantization_error_is_bounded(p in 0.0f64..=1.0) {
        let back = imageio::u16_to_probability(imageio::probability_to_u16(p));
        prop_assert!((back - p).abs() <= 0.5 / 65535.0 + 1e-15);
    }
}

#[test]
fn miou_skips_undefined_classes() {
    let rows = [
        IoUResult::from_counts("a", 1, 2),
        IoUResult::from_counts("b", 0, 0),
        IoUResult::from_counts("c", 3, 4),
    ];
    assert_eq!(miou(&rows).unwrap(), 0.625);
    assert!(miou(&rows[1..2]).unwrap_err().is_validation());
}

#[test]
fn generation_is_seeded() {
    let a = generate_samples(&small_config(12)).unwrap();
    let b = generate_samples(&small_config(12)).unwrap();
    assert_eq!(a.len(), 12);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.id, y.id);
        assert_eq!(x.image, y.image);
        assert_eq!(x.expert, y.expert);
        assert_eq!(x.weak, y.weak);
    }
    let other = generate_samples(&SynthConfig {
        seed: 1,
        ..small_config(12)
    })
    .unwrap();
    assert!(a.iter().zip(&other).any(|(x, y)| x.image != y.image));
}

#[test]
fn dataset_round_trips_through_manifest() {
    let cfg = small_config(10);
    let dir = tempfile::tempdir().unwrap();
    let path = generate_dataset(&cfg, dir.path()).unwrap();
    let samples = generate_samples(&cfg).unwrap();
    let loaded = load_manifest(&path, &cfg.taxonomy()).unwrap();
    assert_eq!(loaded.len(), samples.len());
    for (l, s) in loaded.iter().zip(&samples) {
        assert_eq!(l.id, s.id);
        assert_eq!(l.split, s.split);
        assert_eq!(l.expert_masks.as_ref(), Some(&s.expert));
        assert_eq!(l.pseudo_masks, s.weak);
        let max_err = l.image.iter().zip(&s.image).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(max_err <= 0.5 / 255.0 + 1e-12, "image error {max_err}");
    }
    assert!(loaded.iter().any(|s| s.split == Split::Test));

    let records = manifest::read_records(&path).unwrap();
    let copy = dir.path().join("copy.jsonl");
    manifest::write_manifest(&copy, &records).unwrap();
    assert_eq!(hash::hash_file(&copy).unwrap(), hash::hash_file(&path).unwrap());

    let again = tempfile::tempdir().unwrap();
    let second = generate_dataset(&cfg, again.path()).unwrap();
    assert_eq!(hash::hash_file(&second).unwrap(), hash::hash_file(&path).unwrap());
}
