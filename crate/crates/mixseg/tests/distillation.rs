mod common;

use mixseg::core::{ClassTaxonomy, Split};
use mixseg::distillation::{
    binary_entropy, distill_loss, subsample, teacher_soft_labels, train_student, DistillConfig, SoftLabelStore,
};
use mixseg::segmentation::{train_segmentation, EmptyPool, ExpertPool, SegConfig, SupervisionPools};
use mixseg::training::TrainOptions;
use ndarray::Array3;
use proptest::prelude::*;

use common::{split, synth_samples, tiny_config};

fn arrays(len: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (
        prop::collection::vec(-30.0f64..30.0, len),
        prop::collection::vec(0.0f64..=1.0, len),
    )
}

proptest! {
    #[test]
    fn loss_never_drops_below_target_entropy((z, t) in arrays(18), tau in 0.5f64..20.0) {
        let z = Array3::from_shape_vec((2, 3, 3), z).unwrap();
        let t = Array3::from_shape_vec((2, 3, 3), t).unwrap();
        let loss = distill_loss(z.view(), t.view(), tau).unwrap();
        prop_assert!(loss >= binary_entropy(t.view()) - 1e-9);
    }

    #[test]
    fn matching_logits_reach_the_floor(t in prop::collection::vec(0.01f64..0.99, 8), tau in 0.5f64..20.0) {
        let t = Array3::from_shape_vec((2, 2, 2), t).unwrap();
        let z = t.mapv(|p| tau * (p / (1.0 - p)).ln());
        let loss = distill_loss(z.view(), t.view(), tau).unwrap();
        prop_assert!((loss - binary_entropy(t.view())).abs() < 1e-9);
    }

    #[test]
    fn smaller_fractions_nest(n in 1usize..200, a in 0.01f64..=1.0, b in 0.01f64..=1.0, seed in any::<u64>()) {
        let (small, large) = if a <= b { (a, b) } else { (b, a) };
        match (subsample(n, small, seed), subsample(n, large, seed)) {
            (Ok(s), Ok(l)) => {
                prop_assert_eq!(s.len(), (small * n as f64).floor() as usize);
                prop_assert!(s.iter().all(|i| l.contains(i)));
            }
            (Err(e), _) => prop_assert!(e.is_validation()),
            (Ok(_), Err(_)) => prop_assert!(false, "larger fraction failed"),
        }
    }
}

#[test]
fn bad_temperature_and_shapes_are_rejected() {
    let z = Array3::zeros((1, 2, 2));
    let t = Array3::from_elem((1, 2, 2), 0.5);
    assert!(distill_loss(z.view(), t.view(), 0.0).unwrap_err().is_validation());
    let wrong = Array3::from_elem((1, 2, 3), 0.5);
    assert!(distill_loss(z.view(), wrong.view(), 1.0).unwrap_err().is_validation());
    let outside = Array3::from_elem((1, 2, 2), 1.5);
    assert!(distill_loss(z.view(), outside.view(), 1.0).unwrap_err().is_validation());
}

#[test]
fn soft_labels_round_trip_and_cached_training_matches() {
    let cfg = tiny_config(20);
    let samples = synth_samples(&cfg);
    let train = split(&samples, Split::Train);
    let expert = ExpertPool::new(train.iter()).unwrap();
    let pools = SupervisionPools {
        expert: &expert,
        pseudo: &EmptyPool,
    };
    let seg = SegConfig {
        p_expert: 1.0,
        epochs: 1,
        batch_size: 4,
        samples_per_epoch: Some(8),
        ..Default::default()
    };
    let teacher = train_segmentation(&pools, &cfg.taxonomy(), &seg, &TrainOptions::default())
        .unwrap()
        .checkpoint;
    let images: Vec<_> = train.iter().map(|s| s.image.clone()).collect();
    let ids: Vec<String> = train.iter().map(|s| s.id.clone()).collect();
    let soft = teacher_soft_labels(&teacher, &images, 10.0).unwrap();
    assert!(soft.iter().flatten().all(|v| (0.0..=1.0).contains(v)));

    let dir = tempfile::tempdir().unwrap();
    SoftLabelStore::write(dir.path(), &cfg.taxonomy(), &ids, &soft, &teacher.hash(), 10.0).unwrap();
    let (info, cached) = SoftLabelStore::read(dir.path()).unwrap();
    assert_eq!(info.ids, ids);
    assert_eq!(info.teacher_hash, teacher.hash());
    for (a, b) in cached.iter().zip(&soft) {
        let err = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(err <= 0.5 / 65535.0 + 1e-12);
    }

    let dc = DistillConfig {
        epochs: 1,
        batch_size: 4,
        samples_per_epoch: Some(8),
        ..Default::default()
    };
    let a = train_student(&teacher, &images, Some(&cached), &dc, &TrainOptions::default()).unwrap();
    let b = train_student(&teacher, &images, Some(&cached), &dc, &TrainOptions::default()).unwrap();
    assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
    assert_eq!(a.checkpoint.meta.extra["teacher_hash"], teacher.hash());

    let other = ClassTaxonomy::new(["x"]).unwrap();
    assert!(SoftLabelStore::write(dir.path(), &other, &ids, &soft, &teacher.hash(), 10.0).is_err());
}
