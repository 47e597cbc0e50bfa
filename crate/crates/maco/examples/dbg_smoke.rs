use std::time::Instant;

use maco::episodes::{build_class_splits, synth_dataset_generate, AugmentPolicy, EpisodeSampler, SplitKind};
use maco::model::{Model, ModelConfig};
use maco::train::{evaluate, train_epoch, NadamState};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let seed: u64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0);
    let conditioning: bool = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(true);
    let batch: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(8);
    let bn_momentum: f64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(0.99);
    let max_episodes: usize = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(4096);
    let augment: bool = args.get(7).map(|s| s.parse().unwrap()).unwrap_or(true);

    let cfg = ModelConfig {
        relational_depth: 2,
        conditioning_depth: 2,
        conditioning_enabled: conditioning,
        bn_momentum,
        ..ModelConfig::default()
    };
    eprintln!("lr {lr} seed {seed} conditioning {conditioning} batch {batch} bn_m {bn_momentum} max {max_episodes} aug {augment}");

    let t0 = Instant::now();
    let ds = synth_dataset_generate(30, 30, 84, 1234).unwrap();
    let splits = build_class_splits(&ds.class_ids(), (20, 5, 5), 77).unwrap();
    eprintln!("dataset built in {:.1}s", t0.elapsed().as_secs_f64());

    let mut model = Model::new(cfg, 1000 + seed).unwrap();
    let policy = if augment { AugmentPolicy::default() } else { AugmentPolicy::disabled() };
    let mut train = EpisodeSampler::new(&ds, &splits.train, 5, 5, policy, 10 + seed).unwrap();
    let mut opt = NadamState::new(lr);

    let eval_every = 16usize;
    let t1 = Instant::now();
    let mut episodes = 0usize;
    loop {
        let round_start = Instant::now();
        let mut loss_sum = 0.0;
        let mut acc_sum = 0.0;
        for b in 0..eval_every {
            let bt = Instant::now();
            let rec = train_epoch(&mut model, &mut train, batch, batch, &mut opt, 1).unwrap();
            loss_sum += rec.loss;
            acc_sum += rec.accuracy;
            episodes += batch;
            if episodes <= 3 * batch {
                eprintln!("  batch {b}: {:.2}s", bt.elapsed().as_secs_f64());
            }
        }
        let train_time = round_start.elapsed().as_secs_f64();
        let mut vs = EpisodeSampler::new(&ds, &splits.val, 5, 5, AugmentPolicy::disabled(), 555).unwrap();
        let val = evaluate(&mut model, &mut vs, 50, SplitKind::Val, 1).unwrap();
        eprintln!(
            "ep {episodes:5}  train loss {:.3} acc {:.3} ({train_time:.0}s)  val loss {:.3} acc {:.3}  total {:.0}s",
            loss_sum / eval_every as f64,
            acc_sum / eval_every as f64,
            val.loss,
            val.accuracy,
            t1.elapsed().as_secs_f64()
        );
        if val.accuracy >= 0.6 {
            eprintln!("reached 60% at {episodes} episodes in {:.1}s", t1.elapsed().as_secs_f64());
            break;
        }
        if episodes >= max_episodes || t1.elapsed().as_secs_f64() > 2400.0 {
            eprintln!("budget exhausted at {episodes} episodes");
            break;
        }
    }
}
