//! Structural and behavioral properties of the staged model: episode
//! geometry, pair enumeration, ablation independence, gradient routing.

use maco::model::{Episode, Model, ModelConfig};
use maco::tensor::{NormMode, Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy_config() -> ModelConfig {
    ModelConfig {
        image_size: 8,
        channels: 3,
        conv_blocks: 2,
        conv_channels: 4,
        feature_dim: 12,
        embed_dim: 8,
        relational_depth: 2,
        conditioning_depth: 2,
        ways: 5,
        shots: 2,
        ..ModelConfig::default()
    }
}

fn rand_image<F: Scalar>(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Tensor<F> {
    let n = cfg.image_size * cfg.image_size * cfg.channels;
    let data = (0..n).map(|_| F::from_f64(rng.gen_range(0.0..1.0))).collect();
    Tensor::new(vec![cfg.image_size, cfg.image_size, cfg.channels], data).unwrap()
}

fn rand_episode<F: Scalar>(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Episode<F> {
    Episode {
        support: (0..cfg.ways)
            .map(|_| (0..cfg.shots).map(|_| rand_image(rng, cfg)).collect())
            .collect(),
        query: rand_image(rng, cfg),
        target: rng.gen_range(0..cfg.ways),
    }
}

fn rand_vec<F: Scalar>(rng: &mut ChaCha8Rng, d: usize) -> Tensor<F> {
    Tensor::from_vec((0..d).map(|_| F::from_f64(rng.gen_range(-1.0..1.0))).collect())
}

fn max_rel_diff(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| ((x - y).abs() as f64) / 1.0_f64.max(x.abs() as f64).max(y.abs() as f64))
        .fold(0.0, f64::max)
}

#[test]
fn forward_yields_normalized_probs_and_matching_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut model: Model<f32> = Model::new(toy_config(), 7).unwrap();
    let ep = rand_episode(&mut rng, &model.config);
    let (probs, loss) = model.forward(&ep, NormMode::Train).unwrap();
    assert_eq!(probs.shape(), &[5]);
    let sum: f32 = probs.data().iter().sum();
    assert!((sum - 1.0).abs() < 1e-6, "prob sum {sum}");
    assert!(loss.is_finite());
    let expect = -probs.data()[ep.target].ln();
    assert!((loss - expect).abs() < 1e-5, "loss {loss} vs -ln p {expect}");
}

#[test]
fn support_permutation_leaves_output_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let model: Model<f32> = Model::new(toy_config(), 8).unwrap();
    let mut cfg = model.config.clone();
    cfg.shots = 4;
    let mut model = Model::<f32>::new(cfg, 8).unwrap();
    let ep = rand_episode(&mut rng, &model.config);

    let mut shuffled = ep.clone();
    for class in &mut shuffled.support {
        class.reverse();
        class.swap(0, 2);
    }

    for mode in [NormMode::Eval, NormMode::TrainFrozen] {
        let (p1, _) = model.forward(&ep, mode).unwrap();
        let (p2, _) = model.forward(&shuffled, mode).unwrap();
        let diff = max_rel_diff(p1.data(), p2.data());
        assert!(diff <= 1e-5, "mode {mode:?}: rel diff {diff}");
    }
}

#[test]
fn relational_stage_on_identical_images_is_self_pair() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut model: Model<f32> = Model::new(toy_config(), 9).unwrap();
    let x: Tensor<f32> = rand_vec(&mut rng, model.config.feature_dim);
    let copies: Vec<_> = (0..4).map(|_| x.clone()).collect();
    let via_stage = model.relational_stage(&copies, NormMode::Eval).unwrap();
    let self_pair = model.relational_g(&x, &x, NormMode::Eval).unwrap();
    // Averaging six identical g(x, x) rows reassociates the sum, so allow
    // rounding at the last place.
    let diff = max_rel_diff(via_stage.data(), self_pair.data());
    assert!(diff <= 1e-6, "mean over identical pairs drifted: {diff}");

    // n = 1 takes the same self-pair route; a mean over one row is exact.
    let single = model.relational_stage(&copies[..1], NormMode::Eval).unwrap();
    assert_eq!(single.data(), self_pair.data());
}

#[test]
fn relational_stage_two_shots_is_one_oriented_pair() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut model: Model<f32> = Model::new(toy_config(), 10).unwrap();
    let a: Tensor<f32> = rand_vec(&mut rng, model.config.feature_dim);
    let b: Tensor<f32> = rand_vec(&mut rng, model.config.feature_dim);
    let (lo, hi) = if a.data() < b.data() { (&a, &b) } else { (&b, &a) };
    let want = model.relational_g(lo, hi, NormMode::Eval).unwrap();
    let got_ab = model.relational_stage(&[a.clone(), b.clone()], NormMode::Eval).unwrap();
    let got_ba = model.relational_stage(&[b.clone(), a.clone()], NormMode::Eval).unwrap();
    assert_eq!(got_ab.data(), want.data());
    assert_eq!(got_ba.data(), want.data());
}

#[test]
fn relational_g_is_not_symmetric() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut model: Model<f32> = Model::new(toy_config(), 11).unwrap();
    let a: Tensor<f32> = rand_vec(&mut rng, model.config.feature_dim);
    let b: Tensor<f32> = rand_vec(&mut rng, model.config.feature_dim);
    let ab = model.relational_g(&a, &b, NormMode::Eval).unwrap();
    let ba = model.relational_g(&b, &a, NormMode::Eval).unwrap();
    assert_ne!(ab.data(), ba.data());
}

#[test]
fn pair_counter_follows_binomial() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for (n, binom) in [(2usize, 1usize), (3, 3), (4, 6), (5, 10), (6, 15)] {
        let mut cfg = toy_config();
        cfg.shots = n;
        let mut model: Model<f32> = Model::new(cfg, 12).unwrap();
        let ep = rand_episode(&mut rng, &model.config);
        let graph = maco::tensor::Graph::new();
        let out = model.forward_batch(&graph, &[ep], NormMode::Eval).unwrap();
        assert_eq!(out.trace.pairs_per_class, binom, "n={n}");
        assert_eq!(out.trace.pair_rows, 5 * binom, "n={n}");
    }
}

#[test]
fn disabled_conditioning_ignores_query_enabled_does_not() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let base = rand_episode::<f32>(&mut rng, &toy_config());

    let mut cfg = toy_config();
    cfg.conditioning_enabled = false;
    let mut ablated: Model<f32> = Model::new(cfg, 13).unwrap();
    let mut with_cond: Model<f32> = Model::new(toy_config(), 13).unwrap();

    let run = |model: &mut Model<f32>, query: Tensor<f32>| {
        let mut ep = base.clone();
        ep.query = query;
        let graph = maco::tensor::Graph::new();
        let out = model.forward_batch(&graph, &[ep], NormMode::Eval).unwrap();
        out.trace.conditioned
    };

    let q1 = rand_image::<f32>(&mut rng, &toy_config());
    let q2 = rand_image::<f32>(&mut rng, &toy_config());
    let c1 = run(&mut ablated, q1.clone());
    let c2 = run(&mut ablated, q2.clone());
    assert_eq!(c1.data(), c2.data(), "ablated conditioned vectors must not see the query");

    let e1 = run(&mut with_cond, q1);
    let e2 = run(&mut with_cond, q2);
    assert_ne!(e1.data(), e2.data(), "conditioning must propagate the query");
}

#[test]
fn eval_stage_composition_matches_full_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut model: Model<f32> = Model::new(toy_config(), 14).unwrap();
    let ep = rand_episode(&mut rng, &model.config);

    let (probs, _) = model.forward(&ep, NormMode::Eval).unwrap();

    let qfeat = model.feature_stage(&ep.query, NormMode::Eval).unwrap();
    let mut conditioned = Vec::new();
    for class in &ep.support {
        let feats: Vec<_> = class
            .iter()
            .map(|img| model.feature_stage(img, NormMode::Eval).unwrap())
            .collect();
        let class_vec = model.relational_stage(&feats, NormMode::Eval).unwrap();
        conditioned.push(model.conditioning_stage(&class_vec, &qfeat, NormMode::Eval).unwrap());
    }
    let logits = model.classification_stage(&conditioned, &qfeat, NormMode::Eval).unwrap();

    let max = logits.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f32> = logits.data().iter().map(|&l| (l - max).exp()).collect();
    let z: f32 = exps.iter().sum();
    let manual: Vec<f32> = exps.iter().map(|&e| e / z).collect();

    let diff = max_rel_diff(probs.data(), &manual);
    assert!(diff <= 1e-6, "composition diverges from forward: {diff}");
}

#[test]
fn shuffling_class_positions_keeps_loss_finite() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut model: Model<f32> = Model::new(toy_config(), 15).unwrap();
    let ep = rand_episode::<f32>(&mut rng, &model.config);
    let mut shuffled = ep.clone();
    shuffled.support.rotate_left(2);
    shuffled.target = (ep.target + model.config.ways - 2) % model.config.ways;
    let (_, loss) = model.forward(&shuffled, NormMode::Train).unwrap();
    assert!(loss.is_finite());
}

#[test]
fn feature_rows_feed_the_loss_with_expected_fan_in() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut model: Model<f32> = Model::new(toy_config(), 16).unwrap();
    let (ways, shots) = (model.config.ways, model.config.shots);
    let per_ep = model.config.images_per_episode();
    // Two episodes: with a single one the classifier's final norm layer sees
    // a one-row batch, whose statistics absorb the input exactly and cut the
    // train-mode gradient.
    let eps = [rand_episode(&mut rng, &model.config), rand_episode(&mut rng, &model.config)];
    let graph = maco::tensor::Graph::new();
    let out = model.forward_batch_with_input_grads(&graph, &eps, NormMode::Train).unwrap();
    let usage = &out.trace.feature_row_usage;
    assert_eq!(usage.len(), 2 * per_ep);
    // Every support image joins n-1 oriented pairs; the query is gathered
    // once per class for conditioning plus once for the classifier.
    for b in 0..2 {
        for i in 0..ways * shots {
            assert_eq!(usage[b * per_ep + i], shots - 1, "episode {b} support row {i}");
        }
        assert_eq!(usage[b * per_ep + ways * shots], ways + 1, "episode {b} query row");
    }

    // Every image leaf row must receive gradient.
    let grads = graph.backward(out.loss).unwrap();
    let g = grads.grad(out.images).unwrap();
    let row = model.config.image_size * model.config.image_size * model.config.channels;
    for r in 0..usage.len() {
        let nonzero = g[r * row..][..row].iter().any(|&v| v != 0.0);
        assert!(nonzero, "image row {r} received no gradient");
    }
}

#[test]
fn query_gradient_survives_classifier_path_removal_only_with_conditioning() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let base = rand_episode::<f32>(&mut rng, &toy_config());

    let query_grad_norm = |enabled: bool| -> f64 {
        let mut cfg = toy_config();
        cfg.conditioning_enabled = enabled;
        let mut model: Model<f32> = Model::new(cfg, 17).unwrap();
        // Cut the classifier's direct query pathway: zero every weight
        // column that reads the query segment of the joint vector.
        let e = model.config.embed_dim;
        let fd = model.config.feature_dim;
        let w = model.params.get_mut("classifier/dense/weight").unwrap();
        for o in 0..e {
            for i in e..e + fd {
                w.data_mut()[o * (e + fd) + i] = 0.0;
            }
        }
        let graph = maco::tensor::Graph::new();
        let out = model.forward_batch_with_input_grads(&graph, &[base.clone()], NormMode::Eval).unwrap();
        let grads = graph.backward(out.loss).unwrap();
        let g = grads.grad(out.images).unwrap();
        let row = model.config.image_size * model.config.image_size * model.config.channels;
        let q = model.config.ways * model.config.shots;
        g[q * row..][..row].iter().map(|&v| (v as f64).abs()).sum()
    };

    assert!(query_grad_norm(true) > 0.0, "conditioning path must carry query gradient");
    assert_eq!(query_grad_norm(false), 0.0, "ablation with a cut classifier path leaves no query route");
}

#[test]
fn episode_validation_catches_structural_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let cfg = toy_config();
    let good = rand_episode::<f32>(&mut rng, &cfg);
    assert!(good.validate(&cfg).is_ok());

    let mut missing_class = good.clone();
    missing_class.support.pop();
    assert!(missing_class.validate(&cfg).is_err());

    let mut short_class = good.clone();
    short_class.support[1].pop();
    assert!(short_class.validate(&cfg).is_err());

    let mut bad_target = good.clone();
    bad_target.target = cfg.ways;
    assert!(bad_target.validate(&cfg).is_err());

    let mut bad_shape = good.clone();
    bad_shape.query = Tensor::zeros(vec![4, 4, 3]);
    assert!(bad_shape.validate(&cfg).is_err());
}

#[test]
fn eval_features_are_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut model: Model<f32> = Model::new(toy_config(), 18).unwrap();
    let img = rand_image(&mut rng, &model.config);
    let f1 = model.feature_stage(&img, NormMode::Eval).unwrap();
    let f2 = model.feature_stage(&img, NormMode::Eval).unwrap();
    assert_eq!(f1.data(), f2.data());
    assert_eq!(f1.shape(), &[model.config.feature_dim]);
}

#[test]
fn published_geometry_flattens_as_stated() {
    // 84 -> 5x5x32 = 800 and 32 -> 2x2x32 = 128.
    let c84 = ModelConfig::default();
    assert_eq!(c84.flatten_dim().unwrap(), 800);
    let c32 = ModelConfig { image_size: 32, ..ModelConfig::default() };
    assert_eq!(c32.flatten_dim().unwrap(), 128);
}
