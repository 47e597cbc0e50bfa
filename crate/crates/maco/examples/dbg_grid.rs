use std::time::Instant;

use maco::episodes::{build_class_splits, synth_dataset_generate, AugmentPolicy, EpisodeSampler, SplitKind};
use maco::model::{Model, ModelConfig};
use maco::train::{evaluate, train_epoch, NadamState};

fn cell(lr: f64, batch: usize, aug: bool, seed: u64, max_episodes: usize) {
    let cfg = ModelConfig {
        image_size: 16,
        relational_depth: 2,
        conditioning_depth: 2,
        feature_dim: 32,
        ..ModelConfig::default()
    };
    let ds = synth_dataset_generate(30, 30, 16, 1234).unwrap();
    let splits = build_class_splits(&ds.class_ids(), (20, 5, 5), 77).unwrap();
    let policy = if aug { AugmentPolicy::default() } else { AugmentPolicy::disabled() };
    let mut model = Model::new(cfg, 1000 + seed).unwrap();
    let mut train = EpisodeSampler::new(&ds, &splits.train, 5, 5, policy, 10 + seed).unwrap();
    let mut opt = NadamState::new(lr);

    let t0 = Instant::now();
    let mut episodes = 0usize;
    let mut best = 0.0f64;
    let mut best_at = 0usize;
    let mut curve = Vec::new();
    loop {
        let mut hits = 0usize;
        while episodes < max_episodes && hits * batch < 256 {
            train_epoch(&mut model, &mut train, batch, batch, &mut opt, 1).unwrap();
            episodes += batch;
            hits += 1;
        }
        let mut vs = EpisodeSampler::new(&ds, &splits.val, 5, 5, AugmentPolicy::disabled(), 555).unwrap();
        let val = evaluate(&mut model, &mut vs, 100, SplitKind::Val, 1).unwrap();
        curve.push((episodes, val.accuracy));
        if val.accuracy > best {
            best = val.accuracy;
            best_at = episodes;
        }
        if val.accuracy >= 0.62 || episodes >= max_episodes {
            break;
        }
    }
    let pts: String = curve
        .iter()
        .map(|(e, a)| format!("{e}:{a:.2}"))
        .collect::<Vec<_>>()
        .join(" ");
    eprintln!(
        "lr {lr:<7} batch {batch:<2} aug {aug:<5} seed {seed}  best {best:.2}@{best_at:<4}  {:.0}s  [{pts}]",
        t0.elapsed().as_secs_f64()
    );
}

fn main() {
    let max: usize = std::env::args().nth(1).map(|s| s.parse().unwrap()).unwrap_or(3072);
    for &aug in &[false, true] {
        for &lr in &[1e-3, 3e-3, 1e-2] {
            for &batch in &[4, 8, 16] {
                cell(lr, batch, aug, 0, max);
            }
        }
    }
}
