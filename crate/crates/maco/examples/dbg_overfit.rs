use maco::episodes::{build_class_splits, synth_dataset_generate, AugmentPolicy, EpisodeSampler};
use maco::model::{Model, ModelConfig};
use maco::tensor::{Graph, NormMode};
use maco::train::{nadam_step, NadamState};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1e-2);
    let steps: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(300);
    let size: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(16);

    let cfg = ModelConfig {
        image_size: size,
        conv_blocks: 2,
        conv_channels: 8,
        feature_dim: 32,
        embed_dim: 16,
        relational_depth: 2,
        conditioning_depth: 2,
        ..ModelConfig::default()
    };
    let cfg = ModelConfig { feature_dim: cfg.flatten_dim().unwrap(), ..cfg };

    let ds = synth_dataset_generate(12, 8, size, 42).unwrap();
    let splits = build_class_splits(&ds.class_ids(), (12, 0, 0), 7).unwrap();
    let mut sampler = EpisodeSampler::new(&ds, &splits.train, 5, 5, AugmentPolicy::disabled(), 3).unwrap();
    let batch = sampler.sample_batch(2).unwrap();
    eprintln!("targets: {:?}", batch.iter().map(|e| e.target).collect::<Vec<_>>());

    let mut model = Model::new(cfg, 9).unwrap();
    let mut opt = NadamState::new(lr);
    for step in 0..steps {
        let graph = Graph::new();
        let out = model.forward_batch(&graph, &batch, NormMode::Train).unwrap();
        let loss = out.loss.item();
        let correct = out
            .probs
            .data()
            .chunks_exact(5)
            .zip(batch.iter())
            .filter(|(row, ep)| {
                row.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0 == ep.target
            })
            .count();
        if step % 20 == 0 || step + 1 == steps {
            eprintln!("step {step:4}  loss {loss:.4}  train-batch correct {correct}/2");
        }
        let mut grads = graph.backward(out.loss).unwrap();
        out.bound.write_grads(&mut grads, &mut model.params).unwrap();
        nadam_step(&mut model.params, &mut opt).unwrap();
    }
}
