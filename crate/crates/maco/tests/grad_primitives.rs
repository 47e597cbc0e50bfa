//! Finite-difference checks for every graph primitive.
//!
//! Each case builds the op on fresh leaves, collapses the output to a scalar
//! through a fixed random weighting (so every output coordinate carries a
//! distinct signal), and compares the backward pass against central
//! differences in f64.

use maco::tensor::{grad_check_multi, Graph, Tensor, Var};
use maco::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const TOL: f64 = 1e-6;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect()).unwrap()
}

/// Distinct, well-separated values in random order; keeps max pooling away
/// from argmax ties under finite-difference steps.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| (i as f64) * 0.013 - (n as f64) * 0.0065).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.gen_range(0..=i));
    }
    Tensor::new(shape.to_vec(), vals).unwrap()
}

/// Push values off zero so the finite-difference window never straddles a
/// piecewise boundary.
fn away_from_zero(mut t: Tensor<f64>, margin: f64) -> Tensor<f64> {
    for v in t.data_mut() {
        if v.abs() < margin {
            *v = margin.copysign(*v + f64::MIN_POSITIVE);
        }
    }
    t
}

fn fd_check<B>(name: &str, inputs: &[Tensor<f64>], seed: u64, build: B)
where
    B: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    let out_n = {
        let g = Graph::new();
        let vars: Vec<_> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        build(&g, &vars).unwrap().numel()
    };
    let mut wrng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let w: Vec<f64> = (0..out_n).map(|_| wrng.gen_range(-1.0..1.0)).collect();

    fn scalarize<'g>(y: Var<'g, f64>, w: &[f64]) -> Result<Var<'g, f64>> {
        if y.numel() == 1 {
            Ok(y)
        } else {
            y.dot_const(w)
        }
    }

    let analytic: Vec<Vec<f64>> = {
        let g = Graph::new();
        let vars: Vec<_> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = scalarize(build(&g, &vars).unwrap(), &w).unwrap();
        let grads = g.backward(loss).unwrap();
        vars.iter()
            .map(|v| grads.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; v.numel()]))
            .collect()
    };

    let mut eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<_> = xs.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = scalarize(build(&g, &vars)?, &w)?;
        loss.value().item()
    };

    let report = grad_check_multi(&mut eval, inputs, &analytic).unwrap();
    assert!(report.within(TOL), "{name}: {}", report.describe());
}

#[test]
fn elu_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for trial in 0..5 {
        let x = away_from_zero(randn(&mut rng, &[3, 7]), 0.01);
        fd_check("elu", &[x], 200 + trial, |_, v| Ok(v[0].elu()));
    }
}

#[test]
fn dense_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    for trial in 0..5 {
        let (b, i, o) = (rng.gen_range(1..4), rng.gen_range(1..6), rng.gen_range(1..6));
        let inputs = [randn(&mut rng, &[b, i]), randn(&mut rng, &[o, i]), randn(&mut rng, &[o])];
        fd_check("dense", &inputs, 300 + trial, |_, v| v[0].dense(v[1], v[2]));
    }
    // Rank 1 input path.
    let inputs = [randn(&mut rng, &[4]), randn(&mut rng, &[3, 4]), randn(&mut rng, &[3])];
    fd_check("dense rank1", &inputs, 310, |_, v| v[0].dense(v[1], v[2]));
}

#[test]
fn conv2d_same_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    for trial in 0..4 {
        let (b, h, w) = (rng.gen_range(1..3), rng.gen_range(2..6), rng.gen_range(2..6));
        let (cin, cout) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let inputs = [
            randn(&mut rng, &[b, h, w, cin]),
            randn(&mut rng, &[3, 3, cin, cout]),
            randn(&mut rng, &[cout]),
        ];
        fd_check("conv2d_same", &inputs, 400 + trial, |_, v| v[0].conv2d_same(v[1], v[2]));
    }
    // Rank 3 input path.
    let inputs = [randn(&mut rng, &[5, 4, 2]), randn(&mut rng, &[3, 3, 2, 3]), randn(&mut rng, &[3])];
    fd_check("conv2d_same rank3", &inputs, 410, |_, v| v[0].conv2d_same(v[1], v[2]));
}

#[test]
fn conv1d_valid_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    for trial in 0..4 {
        let (b, l) = (rng.gen_range(1..3), rng.gen_range(3..8));
        let (c, f) = (rng.gen_range(1..5), rng.gen_range(1..5));
        let inputs = [randn(&mut rng, &[b, l, c]), randn(&mut rng, &[3, c, f]), randn(&mut rng, &[f])];
        fd_check("conv1d_valid", &inputs, 500 + trial, |_, v| v[0].conv1d_valid(v[1], v[2]));
    }
    let inputs = [randn(&mut rng, &[5, 3]), randn(&mut rng, &[3, 3, 2]), randn(&mut rng, &[2])];
    fd_check("conv1d_valid rank2", &inputs, 510, |_, v| v[0].conv1d_valid(v[1], v[2]));
}

#[test]
fn maxpool2_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    for trial in 0..4 {
        let x = distinct(&mut rng, &[2, 4, 6, 3]);
        fd_check("maxpool2", &[x], 600 + trial, |_, v| v[0].maxpool2());
    }
    // Odd extents exercise the dropped-edge path.
    let x = distinct(&mut rng, &[5, 5, 2]);
    fd_check("maxpool2 odd", &[x], 610, |_, v| v[0].maxpool2());
}

#[test]
fn batch_norm_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    for trial in 0..4 {
        let c = rng.gen_range(1..5);
        let m = rng.gen_range(2..7);
        let inputs = [randn(&mut rng, &[m, c]), randn(&mut rng, &[c]), randn(&mut rng, &[c])];
        fd_check("batch_norm", &inputs, 700 + trial, |_, v| {
            Ok(v[0].batch_norm(v[1], v[2], 1e-3)?.0)
        });
    }
    // Rank 4 input: statistics pool over batch and both spatial axes.
    let inputs = [randn(&mut rng, &[2, 3, 3, 2]), randn(&mut rng, &[2]), randn(&mut rng, &[2])];
    fd_check("batch_norm rank4", &inputs, 710, |_, v| Ok(v[0].batch_norm(v[1], v[2], 1e-3)?.0));
}

#[test]
fn affine_channels_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    let x = randn(&mut rng, &[4, 3]);
    let scale = vec![1.3, -0.4, 0.9];
    let shift = vec![0.2, 0.0, -1.0];
    fd_check("affine_channels", &[x], 800, move |_, v| {
        v[0].affine_channels(scale.clone(), shift.clone())
    });
}

#[test]
fn concat_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(108);
    let inputs = [randn(&mut rng, &[2, 3]), randn(&mut rng, &[2, 4])];
    fd_check("concat axis1", &inputs, 900, |_, v| v[0].concat(v[1], 1));
    let inputs = [randn(&mut rng, &[2, 3]), randn(&mut rng, &[4, 3])];
    fd_check("concat axis0", &inputs, 901, |_, v| v[0].concat(v[1], 0));
}

#[test]
fn gather_rows_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(109);
    let x = randn(&mut rng, &[5, 3]);
    fd_check("gather_rows", &[x], 1000, |_, v| v[0].gather_rows(&[4, 0, 4, 2]));
}

#[test]
fn stack_rows_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(110);
    let inputs = [randn(&mut rng, &[3]), randn(&mut rng, &[3]), randn(&mut rng, &[3])];
    fd_check("stack_rows", &inputs, 1100, |g, v| g.stack_rows(v));
}

#[test]
fn mean_over_set_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(111);
    let inputs = [randn(&mut rng, &[4]), randn(&mut rng, &[4]), randn(&mut rng, &[4])];
    fd_check("mean_over_set", &inputs, 1200, |g, v| g.mean_over_set(v));
}

#[test]
fn reshape_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(112);
    let x = randn(&mut rng, &[2, 6]);
    fd_check("reshape", &[x], 1300, |_, v| v[0].reshape(&[3, 4]));
}

#[test]
fn mean_axis1_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(113);
    let x = randn(&mut rng, &[2, 4, 3]);
    fd_check("mean_axis1", &[x], 1400, |_, v| v[0].mean_axis1());
}

#[test]
fn mean_all_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(114);
    let x = randn(&mut rng, &[3, 5]);
    fd_check("mean_all", &[x], 1500, |_, v| Ok(v[0].mean_all()));
}

#[test]
fn add_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(115);
    let inputs = [randn(&mut rng, &[3, 4]), randn(&mut rng, &[3, 4])];
    fd_check("add", &inputs, 1600, |_, v| v[0].add(v[1]));
}

#[test]
fn dot_const_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(116);
    let x = randn(&mut rng, &[7]);
    fd_check("dot_const", &[x], 1700, |_, v| v[0].dot_const(&[0.3, -1.2, 0.5, 2.0, -0.1, 0.0, 1.0]));
}

#[test]
fn softmax_cross_entropy_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(117);
    for trial in 0..4 {
        let (b, k) = (rng.gen_range(1..4), rng.gen_range(2..6));
        let targets: Vec<usize> = (0..b).map(|_| rng.gen_range(0..k)).collect();
        let x = randn(&mut rng, &[b, k]);
        let t = targets.clone();
        fd_check("softmax_xent", &[x], 1800 + trial, move |_, v| {
            Ok(v[0].softmax_cross_entropy(&t)?.0)
        });
    }
}

#[test]
fn composite_chain_gradient() {
    // Dense, batch norm, elu, pooling and the set mean chained end to end.
    let mut rng = ChaCha8Rng::seed_from_u64(118);
    let inputs = [
        distinct(&mut rng, &[3, 4, 4, 2]),
        randn(&mut rng, &[3, 3, 2, 3]),
        randn(&mut rng, &[3]),
        randn(&mut rng, &[3]),
        randn(&mut rng, &[3]),
        randn(&mut rng, &[4, 12]),
        randn(&mut rng, &[4]),
    ];
    fd_check("composite", &inputs, 1900, |_, v| {
        let conv = v[0].conv2d_same(v[1], v[2])?;
        let (normed, _, _) = conv.batch_norm(v[3], v[4], 1e-3)?;
        let pooled = normed.elu().maxpool2()?;
        let flat = pooled.reshape(&[3, 12])?;
        flat.dense(v[5], v[6])
    });
}
