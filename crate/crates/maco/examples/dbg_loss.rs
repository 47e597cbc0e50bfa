use maco::episodes::{synth_dataset_generate, AugmentPolicy, EpisodeSampler};
use maco::model::{Model, ModelConfig};
use maco::train::{train_epoch, NadamState};

fn main() {
    let cfg = ModelConfig {
        image_size: 16,
        channels: 3,
        conv_blocks: 2,
        conv_channels: 8,
        feature_dim: 32,
        embed_dim: 16,
        relational_depth: 2,
        conditioning_depth: 2,
        ways: 5,
        shots: 2,
        ..ModelConfig::default()
    };
    let ds = synth_dataset_generate(8, 6, 16, 7).unwrap();
    let ids = ds.class_ids();
    for lr in [1e-2] {
        for seed in 0..5u64 {
            let mut model = Model::new(cfg.clone(), 100 + seed).unwrap();
            let mut sampler =
                EpisodeSampler::new(&ds, &ids, 5, 2, AugmentPolicy::disabled(), 200 + seed).unwrap();
            let mut opt = NadamState::new(lr);
            let mut losses = Vec::new();
            let mut accs = Vec::new();
            for _ in 0..100 {
                let rec = train_epoch(&mut model, &mut sampler, 4, 4, &mut opt, 1).unwrap();
                losses.push(rec.loss);
                accs.push(rec.accuracy);
            }
            let head: f64 = losses[..20].iter().sum::<f64>() / 20.0;
            let tail: f64 = losses[80..].iter().sum::<f64>() / 20.0;
            let acc_tail: f64 = accs[80..].iter().sum::<f64>() / 20.0;
            println!(
                "lr {lr} seed {seed}: head {head:.4} tail {tail:.4} drop {}  acc_tail {acc_tail:.3}",
                tail < head,
            );
        }
    }
}
