//! Statistical and isolation properties of the episode sampler.

use maco::episodes::{
    augment_image, build_class_splits, synth_dataset_generate, AugmentPolicy, EpisodeSampler,
};
use maco::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn target_positions_are_uniform() {
    let ds = synth_dataset_generate(12, 6, 8, 0).unwrap();
    let ids = ds.class_ids();
    let mut s = EpisodeSampler::new(&ds, &ids, 5, 2, AugmentPolicy::disabled(), 123).unwrap();
    let n = 100_000usize;
    let mut counts = [0usize; 5];
    for _ in 0..n {
        counts[s.draw().unwrap().target] += 1;
    }
    // Each cell of a multinomial(n, 1/5) has sigma = sqrt(n * p * (1 - p)).
    let p = 0.2f64;
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    for (k, &c) in counts.iter().enumerate() {
        let dev = (c as f64 - n as f64 * p).abs();
        assert!(dev <= 3.0 * sigma, "slot {k}: count {c} deviates {dev:.0} > 3 sigma ({sigma:.0})");
    }
}

#[test]
fn query_never_collides_with_its_support() {
    let ds = synth_dataset_generate(10, 4, 8, 1).unwrap();
    let ids = ds.class_ids();
    // shots = 3 of 4 images leaves exactly one legal query.
    let mut s = EpisodeSampler::new(&ds, &ids, 5, 3, AugmentPolicy::disabled(), 5).unwrap();
    for _ in 0..10_000 {
        let d = s.draw().unwrap();
        assert!(!d.support[d.target].contains(&d.query));
    }
}

#[test]
fn split_samplers_stay_inside_their_classes() {
    let ds = synth_dataset_generate(30, 4, 8, 2).unwrap();
    let splits = build_class_splits(&ds.class_ids(), (20, 5, 5), 77).unwrap();
    let train_set: std::collections::BTreeSet<usize> =
        splits.train.iter().map(|id| ds.index_of(id).unwrap()).collect();
    let val_set: std::collections::BTreeSet<usize> =
        splits.val.iter().map(|id| ds.index_of(id).unwrap()).collect();
    assert!(train_set.is_disjoint(&val_set));

    let mut val = EpisodeSampler::new(&ds, &splits.val, 5, 2, AugmentPolicy::disabled(), 3).unwrap();
    for _ in 0..10_000 {
        let d = val.draw().unwrap();
        for &c in &d.classes {
            assert!(val_set.contains(&c), "val episode drew class {c} from outside its split");
            assert!(!train_set.contains(&c));
        }
    }
}

#[test]
fn augmentation_preserves_extents_and_range_in_bulk() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut policy_rng = ChaCha8Rng::seed_from_u64(10);
    for round in 0..10_000 {
        let (h, w) = if round % 100 == 0 { (84, 84) } else { (12, 12) };
        let img = Tensor::new(
            vec![h, w, 3],
            (0..h * w * 3).map(|_| rng.gen_range(0.0..=1.0f32)).collect(),
        )
        .unwrap();
        let policy = AugmentPolicy {
            enabled: true,
            rotation_max_degrees: policy_rng.gen_range(0.0..=45.0),
            translate_max_fraction: policy_rng.gen_range(0.0..=0.25),
            zoom_range: {
                let lo = policy_rng.gen_range(0.5..=1.0);
                [lo, policy_rng.gen_range(lo..=1.5)]
            },
            hflip_probability: policy_rng.gen_range(0.0..=1.0),
        };
        let out = augment_image(&img, &policy, &mut rng).unwrap();
        assert_eq!(out.shape(), img.shape());
        assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

#[test]
fn materialized_episodes_have_episode_geometry() {
    let ds = synth_dataset_generate(8, 6, 16, 4).unwrap();
    let ids = ds.class_ids();
    let mut s = EpisodeSampler::new(&ds, &ids, 5, 5, AugmentPolicy::default(), 21).unwrap();
    let eps = s.sample_batch(3).unwrap();
    assert_eq!(eps.len(), 3);
    for ep in &eps {
        assert_eq!(ep.support.len(), 5);
        for class in &ep.support {
            assert_eq!(class.len(), 5);
            for img in class {
                assert_eq!(img.shape(), &[16, 16, 3]);
            }
        }
        assert_eq!(ep.query.shape(), &[16, 16, 3]);
        assert!(ep.target < 5);
    }
}

#[test]
fn one_shot_episodes_are_legal() {
    let ds = synth_dataset_generate(8, 3, 8, 5).unwrap();
    let ids = ds.class_ids();
    let mut s = EpisodeSampler::new(&ds, &ids, 5, 1, AugmentPolicy::disabled(), 2).unwrap();
    for _ in 0..500 {
        let d = s.draw().unwrap();
        assert_eq!(d.support.iter().map(Vec::len).sum::<usize>(), 5);
        assert_ne!(d.support[d.target][0], d.query);
    }
}
