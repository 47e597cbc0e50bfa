use std::time::Instant;

use maco::episodes::{synth_dataset_generate, AugmentPolicy, EpisodeSampler};
use maco::model::{Model, ModelConfig};
use maco::tensor::{Graph, NormMode, Tensor};

fn main() {
    // Conv cost per shape for one 26-image episode through the four blocks.
    let shapes =
        [(26usize, 84usize, 84usize, 3usize), (26, 42, 42, 32), (26, 21, 21, 32), (26, 10, 10, 32)];
    let cout = 32usize;
    for (b, h, w, cin) in shapes {
        let x = Tensor::new(vec![b, h, w, cin], vec![0.5f32; b * h * w * cin]).unwrap();
        let k = Tensor::new(vec![3, 3, cin, cout], vec![0.01f32; 9 * cin * cout]).unwrap();
        let bias = Tensor::new(vec![cout], vec![0.0f32; cout]).unwrap();
        let flop = 2.0 * (b * h * w * 9 * cin * cout) as f64;

        let reps = 3;
        let t = Instant::now();
        for _ in 0..reps {
            let graph = Graph::<f32>::new();
            let xv = graph.leaf(x.clone());
            let kv = graph.leaf(k.clone());
            let bv = graph.leaf(bias.clone());
            std::hint::black_box(xv.conv2d_same(kv, bv).unwrap());
        }
        let per = t.elapsed().as_secs_f64() / reps as f64;
        eprintln!("fwd  {b}x{h}x{w}x{cin}->{cout}: {:.1} ms  {:.1} GFLOP/s", per * 1e3, flop / per / 1e9);

        let t = Instant::now();
        for _ in 0..reps {
            let graph = Graph::<f32>::new();
            let xv = graph.leaf(x.clone());
            let kv = graph.leaf(k.clone());
            let bv = graph.leaf(bias.clone());
            let y = xv.conv2d_same(kv, bv).unwrap();
            let loss = y.mean_all();
            std::hint::black_box(graph.backward(loss).unwrap());
        }
        let per = t.elapsed().as_secs_f64() / reps as f64 - per;
        eprintln!("bwd  {b}x{h}x{w}x{cin}->{cout}: {:.1} ms  {:.1} GFLOP/s", per * 1e3, 2.0 * flop / per / 1e9);
    }

    // Full model on one episode, forward only vs forward+backward.
    let cfg = ModelConfig { relational_depth: 2, conditioning_depth: 2, ..ModelConfig::default() };
    let ds = synth_dataset_generate(10, 6, 84, 1).unwrap();
    let ids = ds.class_ids();
    let mut model = Model::new(cfg, 1).unwrap();
    let mut sampler = EpisodeSampler::new(&ds, &ids, 5, 5, AugmentPolicy::default(), 3).unwrap();
    let episode = sampler.sample().unwrap();

    let mut time = |label: &str, reps: usize, f: &mut dyn FnMut()| {
        let t = Instant::now();
        for _ in 0..reps {
            f();
        }
        eprintln!("{label}: {:.1} ms/rep", t.elapsed().as_secs_f64() * 1e3 / reps as f64);
    };

    time("episode forward eval", 3, &mut || {
        let graph = Graph::<f32>::new();
        std::hint::black_box(
            model.forward_batch(&graph, std::slice::from_ref(&episode), NormMode::Eval).unwrap(),
        );
    });
    time("episode forward train", 3, &mut || {
        let graph = Graph::<f32>::new();
        std::hint::black_box(
            model.forward_batch(&graph, std::slice::from_ref(&episode), NormMode::Train).unwrap(),
        );
    });
    time("episode forward+backward", 3, &mut || {
        let graph = Graph::<f32>::new();
        let out = model.forward_batch(&graph, std::slice::from_ref(&episode), NormMode::Train).unwrap();
        std::hint::black_box(graph.backward(out.loss).unwrap());
    });
    time("episode sample+augment", 10, &mut || {
        std::hint::black_box(sampler.sample().unwrap());
    });
}
