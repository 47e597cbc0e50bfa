//! Reverse-mode autodiff over a flat tape.
//!
//! A [`Graph`] owns an append-only arena of nodes; [`Var`] is a copyable
//! handle (graph reference plus node id). Node ids grow in evaluation order,
//! so a single reverse sweep over ids is a valid topological order for
//! backpropagation. Forward values are computed eagerly when an op is
//! recorded; `backward` walks the tape once and returns per-node gradients.

use std::cell::RefCell;

use crate::error::{Error, Result};

use super::kernels;
use super::{Scalar, Tensor};

/// One recorded operation. Payloads hold whatever the backward pass needs
/// beyond parent values (argmax indices, normalized activations, softmax
/// probabilities).
enum Op<F: Scalar> {
    Leaf,
    /// Input data that never receives a gradient; backward skips every
    /// accumulation whose only consumers sit below const leaves.
    ConstLeaf,
    Elu { x: usize },
    Dense { x: usize, w: usize, b: usize },
    Conv2dSame { x: usize, k: usize, b: usize },
    Conv1dValid { x: usize, k: usize, b: usize },
    MaxPool2 { x: usize, argmax: Vec<u32> },
    BatchNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<F>, inv_std: Vec<F> },
    AffineChannels { x: usize, scale: Vec<F> },
    Concat { a: usize, b: usize, axis: usize },
    GatherRows { x: usize, indices: Vec<usize> },
    StackRows { xs: Vec<usize> },
    MeanSet { xs: Vec<usize> },
    Reshape { x: usize },
    MeanAxis1 { x: usize },
    MeanAll { x: usize },
    Add { a: usize, b: usize },
    DotConst { x: usize, w: Vec<F> },
    SoftmaxXent { logits: usize, targets: Vec<usize>, probs: Vec<F> },
}

impl<F: Scalar> Op<F> {
    fn for_each_input(&self, mut f: impl FnMut(usize)) {
        match self {
            Op::Leaf | Op::ConstLeaf => {}
            Op::Elu { x }
            | Op::MaxPool2 { x, .. }
            | Op::AffineChannels { x, .. }
            | Op::GatherRows { x, .. }
            | Op::Reshape { x }
            | Op::MeanAxis1 { x }
            | Op::MeanAll { x }
            | Op::DotConst { x, .. } => f(*x),
            Op::Dense { x, w, b } => {
                f(*x);
                f(*w);
                f(*b);
            }
            Op::Conv2dSame { x, k, b } | Op::Conv1dValid { x, k, b } => {
                f(*x);
                f(*k);
                f(*b);
            }
            Op::BatchNorm { x, gamma, beta, .. } => {
                f(*x);
                f(*gamma);
                f(*beta);
            }
            Op::Concat { a, b, .. } | Op::Add { a, b } => {
                f(*a);
                f(*b);
            }
            Op::StackRows { xs } | Op::MeanSet { xs } => {
                for &x in xs {
                    f(x);
                }
            }
            Op::SoftmaxXent { logits, .. } => f(*logits),
        }
    }
}

struct Node<F: Scalar> {
    value: Tensor<F>,
    op: Op<F>,
    /// Whether any gradient-tracked leaf feeds this node.
    needs_grad: bool,
}

/// Append-only computation tape.
pub struct Graph<F: Scalar> {
    nodes: RefCell<Vec<Node<F>>>,
}

/// Handle to a node in a [`Graph`]. Cheap to copy; all structural ops live
/// here as methods.
pub struct Var<'g, F: Scalar> {
    graph: &'g Graph<F>,
    id: usize,
}

impl<F: Scalar> Clone for Var<'_, F> {
    fn clone(&self) -> Self {
        *self
    }
}
impl<F: Scalar> Copy for Var<'_, F> {}

impl<F: Scalar> std::fmt::Debug for Var<'_, F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

/// Gradients produced by [`Graph::backward`]. Interior gradients are
/// consumed during the sweep; only leaves keep theirs.
pub struct GradBuffer<F: Scalar> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> GradBuffer<F> {
    /// Gradient of the loss with respect to `v`, if `v` is a leaf the loss
    /// reached.
    pub fn grad(&self, v: Var<'_, F>) -> Option<&[F]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var<'_, F>) -> Option<Vec<F>> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: RefCell::new(Vec::new()) }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Record an input tensor. Leaves keep their gradients after `backward`.
    pub fn leaf(&self, value: Tensor<F>) -> Var<'_, F> {
        self.push(value, Op::Leaf)
    }

    /// Record an input tensor that needs no gradient. Backward neither
    /// stores a gradient for it nor computes input gradients of ops whose
    /// tracked ancestors are all const; feeding large image batches this way
    /// removes the most expensive backward kernel of the first conv layer.
    pub fn const_leaf(&self, value: Tensor<F>) -> Var<'_, F> {
        self.push(value, Op::ConstLeaf)
    }

    fn push(&self, value: Tensor<F>, op: Op<F>) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        let needs_grad = match op {
            Op::Leaf => true,
            Op::ConstLeaf => false,
            ref op => {
                let mut any = false;
                op.for_each_input(|i| any |= nodes[i].needs_grad);
                any
            }
        };
        nodes.push(Node { value, op, needs_grad });
        Var { graph: self, id }
    }

    fn with_value<R>(&self, id: usize, f: impl FnOnce(&Tensor<F>) -> R) -> R {
        f(&self.nodes.borrow()[id].value)
    }

    /// Elementwise mean of same-shaped variables.
    pub fn mean_over_set<'g>(&'g self, xs: &[Var<'g, F>]) -> Result<Var<'g, F>> {
        if xs.is_empty() {
            return Err(Error::invalid("mean_over_set", "empty set"));
        }
        let (shape, mut data) = self.with_value(xs[0].id, |t| (t.shape().to_vec(), t.data().to_vec()));
        {
            let nodes = self.nodes.borrow();
            for v in &xs[1..] {
                let t = &nodes[v.id].value;
                if t.shape() != shape.as_slice() {
                    return Err(Error::shape("mean_over_set", format!("{shape:?}"), format!("{:?}", t.shape())));
                }
                for (d, &s) in data.iter_mut().zip(t.data()) {
                    *d = *d + s;
                }
            }
        }
        let inv = F::one() / F::from_f64(xs.len() as f64);
        for d in data.iter_mut() {
            *d = *d * inv;
        }
        let ids = xs.iter().map(|v| v.id).collect();
        Ok(self.push(Tensor::from_parts(shape, data), Op::MeanSet { xs: ids }))
    }

    /// Stack same-shaped variables along a new leading axis.
    pub fn stack_rows<'g>(&'g self, xs: &[Var<'g, F>]) -> Result<Var<'g, F>> {
        if xs.is_empty() {
            return Err(Error::invalid("stack_rows", "empty set"));
        }
        let mut shape;
        let mut data;
        {
            let nodes = self.nodes.borrow();
            let first = &nodes[xs[0].id].value;
            shape = first.shape().to_vec();
            data = Vec::with_capacity(first.numel() * xs.len());
            for v in xs {
                let t = &nodes[v.id].value;
                if t.shape() != shape.as_slice() {
                    return Err(Error::shape("stack_rows", format!("{shape:?}"), format!("{:?}", t.shape())));
                }
                data.extend_from_slice(t.data());
            }
        }
        shape.insert(0, xs.len());
        let ids = xs.iter().map(|v| v.id).collect();
        Ok(self.push(Tensor::from_parts(shape, data), Op::StackRows { xs: ids }))
    }

    /// Reverse sweep from a scalar loss. Returns gradients for every leaf
    /// that influences the loss; unreached leaves report `None`.
    pub fn backward(&self, loss: Var<'_, F>) -> Result<GradBuffer<F>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be a scalar, got shape {:?}", nodes[loss.id].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<F>>> = Vec::new();
        grads.resize_with(nodes.len(), || None);
        grads[loss.id] = Some(vec![F::one()]);
        for id in (0..=loss.id).rev() {
            if matches!(nodes[id].op, Op::Leaf | Op::ConstLeaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let wants = |i: usize| nodes[i].needs_grad;
            match &node.op {
                Op::Leaf | Op::ConstLeaf => unreachable!(),
                Op::Elu { x } => {
                    if !wants(*x) {
                        continue;
                    }
                    let y = node.value.data();
                    let dst = acc(&mut grads, *x, y.len());
                    for ((d, &gv), &yv) in dst.iter_mut().zip(&g).zip(y) {
                        let deriv = if yv > F::zero() { F::one() } else { yv + F::one() };
                        *d = *d + gv * deriv;
                    }
                }
                Op::Dense { x, w, b } => {
                    let xt = &nodes[*x].value;
                    let wt = &nodes[*w].value;
                    let (o, i) = (wt.shape()[0], wt.shape()[1]);
                    let bsz = xt.numel() / i;
                    let mut dx = vec![F::zero(); if wants(*x) { xt.numel() } else { 0 }];
                    let mut dw = vec![F::zero(); wt.numel()];
                    let mut db = vec![F::zero(); o];
                    kernels::dense_bwd(
                        xt.data(),
                        (bsz, i),
                        wt.data(),
                        o,
                        &g,
                        wants(*x).then(|| dx.as_mut_slice()),
                        &mut dw,
                        &mut db,
                    );
                    if wants(*x) {
                        add_into(acc(&mut grads, *x, dx.len()), &dx);
                    }
                    if wants(*w) {
                        add_into(acc(&mut grads, *w, dw.len()), &dw);
                    }
                    if wants(*b) {
                        add_into(acc(&mut grads, *b, db.len()), &db);
                    }
                }
                Op::Conv2dSame { x, k, b } => {
                    let xt = &nodes[*x].value;
                    let kt = &nodes[*k].value;
                    let dims = image_dims(xt);
                    let cout = kt.shape()[3];
                    let mut dx = vec![F::zero(); if wants(*x) { xt.numel() } else { 0 }];
                    let mut dk = vec![F::zero(); kt.numel()];
                    let mut db = vec![F::zero(); cout];
                    kernels::conv2d_same_bwd(
                        xt.data(),
                        dims,
                        kt.data(),
                        cout,
                        &g,
                        wants(*x).then(|| dx.as_mut_slice()),
                        &mut dk,
                        &mut db,
                    );
                    if wants(*x) {
                        add_into(acc(&mut grads, *x, dx.len()), &dx);
                    }
                    if wants(*k) {
                        add_into(acc(&mut grads, *k, dk.len()), &dk);
                    }
                    if wants(*b) {
                        add_into(acc(&mut grads, *b, db.len()), &db);
                    }
                }
                Op::Conv1dValid { x, k, b } => {
                    let xt = &nodes[*x].value;
                    let kt = &nodes[*k].value;
                    let dims = seq_dims(xt);
                    let f = kt.shape()[2];
                    let mut dx = vec![F::zero(); if wants(*x) { xt.numel() } else { 0 }];
                    let mut dk = vec![F::zero(); kt.numel()];
                    let mut db = vec![F::zero(); f];
                    kernels::conv1d_valid_bwd(
                        xt.data(),
                        dims,
                        kt.data(),
                        f,
                        &g,
                        wants(*x).then(|| dx.as_mut_slice()),
                        &mut dk,
                        &mut db,
                    );
                    if wants(*x) {
                        add_into(acc(&mut grads, *x, dx.len()), &dx);
                    }
                    if wants(*k) {
                        add_into(acc(&mut grads, *k, dk.len()), &dk);
                    }
                    if wants(*b) {
                        add_into(acc(&mut grads, *b, db.len()), &db);
                    }
                }
                Op::MaxPool2 { x, argmax } => {
                    if !wants(*x) {
                        continue;
                    }
                    let n = nodes[*x].value.numel();
                    let dst = acc(&mut grads, *x, n);
                    for (&src, &gv) in argmax.iter().zip(&g) {
                        dst[src as usize] = dst[src as usize] + gv;
                    }
                }
                Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
                    let c = inv_std.len();
                    let gt = &nodes[*gamma].value;
                    let mut dx = vec![F::zero(); xhat.len()];
                    let mut dgamma = vec![F::zero(); c];
                    let mut dbeta = vec![F::zero(); c];
                    kernels::batchnorm_train_bwd(c, gt.data(), xhat, inv_std, &g, &mut dx, &mut dgamma, &mut dbeta);
                    if wants(*x) {
                        add_into(acc(&mut grads, *x, dx.len()), &dx);
                    }
                    if wants(*gamma) {
                        add_into(acc(&mut grads, *gamma, c), &dgamma);
                    }
                    if wants(*beta) {
                        add_into(acc(&mut grads, *beta, c), &dbeta);
                    }
                }
                Op::AffineChannels { x, scale } => {
                    if !wants(*x) {
                        continue;
                    }
                    let c = scale.len();
                    let dst = acc(&mut grads, *x, g.len());
                    for (drow, grow) in dst.chunks_exact_mut(c).zip(g.chunks_exact(c)) {
                        for ci in 0..c {
                            drow[ci] = drow[ci] + grow[ci] * scale[ci];
                        }
                    }
                }
                Op::Concat { a, b, axis } => {
                    let (ash, bsh) = (nodes[*a].value.shape().to_vec(), nodes[*b].value.shape().to_vec());
                    let inner: usize = ash[axis + 1..].iter().product();
                    let outer: usize = ash[..*axis].iter().product();
                    let (astep, bstep) = (ash[*axis] * inner, bsh[*axis] * inner);
                    if wants(*a) {
                        let da = acc(&mut grads, *a, outer * astep);
                        for ou in 0..outer {
                            let src = &g[ou * (astep + bstep)..][..astep];
                            add_into(&mut da[ou * astep..][..astep], src);
                        }
                    }
                    if wants(*b) {
                        let db = acc(&mut grads, *b, outer * bstep);
                        for ou in 0..outer {
                            let src = &g[ou * (astep + bstep) + astep..][..bstep];
                            add_into(&mut db[ou * bstep..][..bstep], src);
                        }
                    }
                }
                Op::GatherRows { x, indices } => {
                    if !wants(*x) {
                        continue;
                    }
                    let xt = &nodes[*x].value;
                    let row = xt.numel() / xt.shape()[0];
                    let dst = acc(&mut grads, *x, xt.numel());
                    for (r, &src) in indices.iter().enumerate() {
                        add_into(&mut dst[src * row..][..row], &g[r * row..][..row]);
                    }
                }
                Op::StackRows { xs } => {
                    let row = node.value.numel() / xs.len();
                    for (j, &xid) in xs.iter().enumerate() {
                        if wants(xid) {
                            add_into(acc(&mut grads, xid, row), &g[j * row..][..row]);
                        }
                    }
                }
                Op::MeanSet { xs } => {
                    let inv = F::one() / F::from_f64(xs.len() as f64);
                    for &xid in xs {
                        if !wants(xid) {
                            continue;
                        }
                        let dst = acc(&mut grads, xid, g.len());
                        for (d, &gv) in dst.iter_mut().zip(&g) {
                            *d = *d + gv * inv;
                        }
                    }
                }
                Op::Reshape { x } => {
                    if wants(*x) {
                        add_into(acc(&mut grads, *x, g.len()), &g);
                    }
                }
                Op::MeanAxis1 { x } => {
                    if !wants(*x) {
                        continue;
                    }
                    let xsh = nodes[*x].value.shape().to_vec();
                    let (bsz, l, d) = (xsh[0], xsh[1], xsh[2]);
                    let inv = F::one() / F::from_f64(l as f64);
                    let dst = acc(&mut grads, *x, bsz * l * d);
                    for bi in 0..bsz {
                        let grow = &g[bi * d..][..d];
                        for li in 0..l {
                            let drow = &mut dst[(bi * l + li) * d..][..d];
                            for (dv, &gv) in drow.iter_mut().zip(grow) {
                                *dv = *dv + gv * inv;
                            }
                        }
                    }
                }
                Op::MeanAll { x } => {
                    if !wants(*x) {
                        continue;
                    }
                    let n = nodes[*x].value.numel();
                    let gv = g[0] / F::from_f64(n as f64);
                    let dst = acc(&mut grads, *x, n);
                    for d in dst.iter_mut() {
                        *d = *d + gv;
                    }
                }
                Op::Add { a, b } => {
                    if wants(*a) {
                        add_into(acc(&mut grads, *a, g.len()), &g);
                    }
                    if wants(*b) {
                        add_into(acc(&mut grads, *b, g.len()), &g);
                    }
                }
                Op::DotConst { x, w } => {
                    if !wants(*x) {
                        continue;
                    }
                    let gv = g[0];
                    let dst = acc(&mut grads, *x, w.len());
                    for (d, &wv) in dst.iter_mut().zip(w) {
                        *d = *d + gv * wv;
                    }
                }
                Op::SoftmaxXent { logits, targets, probs } => {
                    if !wants(*logits) {
                        continue;
                    }
                    let k = probs.len() / targets.len();
                    let dst = acc(&mut grads, *logits, probs.len());
                    for (bi, (&t, &gv)) in targets.iter().zip(&g).enumerate() {
                        let prow = &probs[bi * k..][..k];
                        let drow = &mut dst[bi * k..][..k];
                        for ki in 0..k {
                            let ind = if ki == t { F::one() } else { F::zero() };
                            drow[ki] = drow[ki] + gv * (prow[ki] - ind);
                        }
                    }
                }
            }
        }
        Ok(GradBuffer { grads })
    }
}

fn acc<F: Scalar>(grads: &mut [Option<Vec<F>>], id: usize, len: usize) -> &mut Vec<F> {
    grads[id].get_or_insert_with(|| vec![F::zero(); len])
}

fn add_into<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

/// View a rank 3 or 4 channels-last tensor as (batch, h, w, c).
fn image_dims<F: Scalar>(t: &Tensor<F>) -> (usize, usize, usize, usize) {
    let s = t.shape();
    match s.len() {
        3 => (1, s[0], s[1], s[2]),
        _ => (s[0], s[1], s[2], s[3]),
    }
}

/// View a rank 2 or 3 channels-last tensor as (batch, len, c).
fn seq_dims<F: Scalar>(t: &Tensor<F>) -> (usize, usize, usize) {
    let s = t.shape();
    match s.len() {
        2 => (1, s[0], s[1]),
        _ => (s[0], s[1], s[2]),
    }
}

impl<'g, F: Scalar> Var<'g, F> {
    pub fn id(self) -> usize {
        self.id
    }

    /// Clone of the node's forward value.
    pub fn value(self) -> Tensor<F> {
        self.graph.with_value(self.id, |t| t.clone())
    }

    pub fn shape(self) -> Vec<usize> {
        self.graph.with_value(self.id, |t| t.shape().to_vec())
    }

    pub fn numel(self) -> usize {
        self.graph.with_value(self.id, |t| t.numel())
    }

    /// Value of a single-element tensor.
    pub fn item(self) -> F {
        self.graph.with_value(self.id, |t| t.data()[0])
    }

    fn same_graph(self, other: Var<'g, F>, context: &str) -> Result<()> {
        if std::ptr::eq(self.graph, other.graph) {
            Ok(())
        } else {
            Err(Error::invalid(context, "operands recorded on different graphs"))
        }
    }

    /// Exponential linear unit, alpha = 1.
    pub fn elu(self) -> Var<'g, F> {
        let value = self.graph.with_value(self.id, |t| {
            let data = t
                .data()
                .iter()
                .map(|&v| if v > F::zero() { v } else { v.exp() - F::one() })
                .collect();
            Tensor::from_parts(t.shape().to_vec(), data)
        });
        self.graph.push(value, Op::Elu { x: self.id })
    }

    /// Affine layer. Input [i] or [batch, i]; weight [o, i]; bias [o].
    pub fn dense(self, w: Var<'g, F>, b: Var<'g, F>) -> Result<Var<'g, F>> {
        self.same_graph(w, "dense")?;
        self.same_graph(b, "dense")?;
        let value = {
            let nodes = self.graph.nodes.borrow();
            let xt = &nodes[self.id].value;
            let wt = &nodes[w.id].value;
            let bt = &nodes[b.id].value;
            if wt.rank() != 2 {
                return Err(Error::shape("dense weight", "[out, in]", format!("{:?}", wt.shape())));
            }
            let (o, i) = (wt.shape()[0], wt.shape()[1]);
            let (bsz, last, batched) = match xt.rank() {
                1 => (1, xt.shape()[0], false),
                2 => (xt.shape()[0], xt.shape()[1], true),
                _ => return Err(Error::shape("dense input", "[in] or [batch, in]", format!("{:?}", xt.shape()))),
            };
            if last != i {
                return Err(Error::shape("dense input", format!("last axis {i}"), format!("{:?}", xt.shape())));
            }
            if bt.shape() != [o] {
                return Err(Error::shape("dense bias", format!("[{o}]"), format!("{:?}", bt.shape())));
            }
            let mut y = vec![F::zero(); bsz * o];
            kernels::dense_fwd(xt.data(), (bsz, i), wt.data(), o, bt.data(), &mut y);
            let shape = if batched { vec![bsz, o] } else { vec![o] };
            Tensor::from_parts(shape, y)
        };
        Ok(self.graph.push(value, Op::Dense { x: self.id, w: w.id, b: b.id }))
    }

    /// 3x3 same-padded conv. Input [h, w, cin] or [batch, h, w, cin];
    /// kernel [3, 3, cin, cout]; bias [cout].
    pub fn conv2d_same(self, k: Var<'g, F>, b: Var<'g, F>) -> Result<Var<'g, F>> {
        self.same_graph(k, "conv2d_same")?;
        self.same_graph(b, "conv2d_same")?;
        let value = {
            let nodes = self.graph.nodes.borrow();
            let xt = &nodes[self.id].value;
            let kt = &nodes[k.id].value;
            let bt = &nodes[b.id].value;
            if xt.rank() != 3 && xt.rank() != 4 {
                return Err(Error::shape("conv2d_same input", "[h, w, c] or [b, h, w, c]", format!("{:?}", xt.shape())));
            }
            let dims = image_dims(xt);
            if kt.rank() != 4 || kt.shape()[0] != 3 || kt.shape()[1] != 3 || kt.shape()[2] != dims.3 {
                return Err(Error::shape(
                    "conv2d_same kernel",
                    format!("[3, 3, {}, cout]", dims.3),
                    format!("{:?}", kt.shape()),
                ));
            }
            let cout = kt.shape()[3];
            if bt.shape() != [cout] {
                return Err(Error::shape("conv2d_same bias", format!("[{cout}]"), format!("{:?}", bt.shape())));
            }
            let mut y = vec![F::zero(); dims.0 * dims.1 * dims.2 * cout];
            kernels::conv2d_same_fwd(xt.data(), dims, kt.data(), cout, bt.data(), &mut y);
            let mut shape = xt.shape().to_vec();
            *shape.last_mut().unwrap() = cout;
            Tensor::from_parts(shape, y)
        };
        Ok(self.graph.push(value, Op::Conv2dSame { x: self.id, k: k.id, b: b.id }))
    }

    /// Width 3 valid conv along the leading axis. Input [l, c] or
    /// [batch, l, c] with l >= 3; kernel [3, c, f]; bias [f].
    pub fn conv1d_valid(self, k: Var<'g, F>, b: Var<'g, F>) -> Result<Var<'g, F>> {
        self.same_graph(k, "conv1d_valid")?;
        self.same_graph(b, "conv1d_valid")?;
        let value = {
            let nodes = self.graph.nodes.borrow();
            let xt = &nodes[self.id].value;
            let kt = &nodes[k.id].value;
            let bt = &nodes[b.id].value;
            if xt.rank() != 2 && xt.rank() != 3 {
                return Err(Error::shape("conv1d_valid input", "[l, c] or [b, l, c]", format!("{:?}", xt.shape())));
            }
            let dims = seq_dims(xt);
            if dims.1 < 3 {
                return Err(Error::invalid(
                    "conv1d_valid",
                    format!("sequence length {} is shorter than the kernel", dims.1),
                ));
            }
            if kt.rank() != 3 || kt.shape()[0] != 3 || kt.shape()[1] != dims.2 {
                return Err(Error::shape(
                    "conv1d_valid kernel",
                    format!("[3, {}, f]", dims.2),
                    format!("{:?}", kt.shape()),
                ));
            }
            let f = kt.shape()[2];
            if bt.shape() != [f] {
                return Err(Error::shape("conv1d_valid bias", format!("[{f}]"), format!("{:?}", bt.shape())));
            }
            let mut y = vec![F::zero(); dims.0 * (dims.1 - 2) * f];
            kernels::conv1d_valid_fwd(xt.data(), dims, kt.data(), f, bt.data(), &mut y);
            let shape = if xt.rank() == 2 {
                vec![dims.1 - 2, f]
            } else {
                vec![dims.0, dims.1 - 2, f]
            };
            Tensor::from_parts(shape, y)
        };
        Ok(self.graph.push(value, Op::Conv1dValid { x: self.id, k: k.id, b: b.id }))
    }

    /// 2x2 stride 2 max pooling over [h, w, c] or [batch, h, w, c].
    pub fn maxpool2(self) -> Result<Var<'g, F>> {
        let (value, argmax) = {
            let nodes = self.graph.nodes.borrow();
            let xt = &nodes[self.id].value;
            if xt.rank() != 3 && xt.rank() != 4 {
                return Err(Error::shape("maxpool2 input", "[h, w, c] or [b, h, w, c]", format!("{:?}", xt.shape())));
            }
            let dims = image_dims(xt);
            if dims.1 < 2 || dims.2 < 2 {
                return Err(Error::invalid(
                    "maxpool2",
                    format!("spatial extent {}x{} is smaller than the window", dims.1, dims.2),
                ));
            }
            let (oh, ow) = (dims.1 / 2, dims.2 / 2);
            let mut y = vec![F::zero(); dims.0 * oh * ow * dims.3];
            let mut argmax = Vec::new();
            kernels::maxpool2_fwd(xt.data(), dims, &mut y, &mut argmax);
            let shape = if xt.rank() == 3 {
                vec![oh, ow, dims.3]
            } else {
                vec![dims.0, oh, ow, dims.3]
            };
            (Tensor::from_parts(shape, y), argmax)
        };
        Ok(self.graph.push(value, Op::MaxPool2 { x: self.id, argmax }))
    }

    /// Normalize over all but the last axis using batch statistics, then
    /// scale and shift. Returns the output plus the batch mean and
    /// population variance (detached, for running-stat updates).
    pub fn batch_norm(
        self,
        gamma: Var<'g, F>,
        beta: Var<'g, F>,
        epsilon: F,
    ) -> Result<(Var<'g, F>, Vec<F>, Vec<F>)> {
        self.same_graph(gamma, "batch_norm")?;
        self.same_graph(beta, "batch_norm")?;
        let (value, xhat, inv_std, mean, var) = {
            let nodes = self.graph.nodes.borrow();
            let xt = &nodes[self.id].value;
            let gt = &nodes[gamma.id].value;
            let bt = &nodes[beta.id].value;
            if xt.rank() < 2 {
                return Err(Error::shape("batch_norm input", "rank >= 2", format!("{:?}", xt.shape())));
            }
            let c = *xt.shape().last().unwrap();
            if gt.shape() != [c] || bt.shape() != [c] {
                return Err(Error::shape(
                    "batch_norm scale/shift",
                    format!("[{c}]"),
                    format!("{:?} / {:?}", gt.shape(), bt.shape()),
                ));
            }
            let mut y = vec![F::zero(); xt.numel()];
            let mut xhat = Vec::new();
            let mut inv_std = Vec::new();
            let (mean, var) =
                kernels::batchnorm_train_fwd(xt.data(), c, gt.data(), bt.data(), epsilon, &mut xhat, &mut inv_std, &mut y);
            (Tensor::from_parts(xt.shape().to_vec(), y), xhat, inv_std, mean, var)
        };
        let out = self.graph.push(
            value,
            Op::BatchNorm { x: self.id, gamma: gamma.id, beta: beta.id, xhat, inv_std },
        );
        Ok((out, mean, var))
    }

    /// Per-channel affine y[.., c] = x[.., c] * scale[c] + shift[c].
    /// Gradients flow to x only; scale and shift are treated as constants.
    pub fn affine_channels(self, scale: Vec<F>, shift: Vec<F>) -> Result<Var<'g, F>> {
        let value = {
            let nodes = self.graph.nodes.borrow();
            let xt = &nodes[self.id].value;
            let c = *xt.shape().last().unwrap();
            if scale.len() != c || shift.len() != c {
                return Err(Error::shape(
                    "affine_channels",
                    format!("[{c}]"),
                    format!("[{}] / [{}]", scale.len(), shift.len()),
                ));
            }
            let mut y = vec![F::zero(); xt.numel()];
            for (yrow, xrow) in y.chunks_exact_mut(c).zip(xt.data().chunks_exact(c)) {
                for ci in 0..c {
                    yrow[ci] = xrow[ci] * scale[ci] + shift[ci];
                }
            }
            Tensor::from_parts(xt.shape().to_vec(), y)
        };
        Ok(self.graph.push(value, Op::AffineChannels { x: self.id, scale }))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(self, other: Var<'g, F>, axis: usize) -> Result<Var<'g, F>> {
        self.same_graph(other, "concat")?;
        let value = {
            let nodes = self.graph.nodes.borrow();
            let at = &nodes[self.id].value;
            let bt = &nodes[other.id].value;
            if at.rank() != bt.rank() || axis >= at.rank() {
                return Err(Error::shape(
                    "concat",
                    format!("matching rank with axis {axis}"),
                    format!("{:?} / {:?}", at.shape(), bt.shape()),
                ));
            }
            for (d, (&ae, &be)) in at.shape().iter().zip(bt.shape()).enumerate() {
                if d != axis && ae != be {
                    return Err(Error::shape(
                        "concat",
                        format!("equal extents off axis {axis}"),
                        format!("{:?} / {:?}", at.shape(), bt.shape()),
                    ));
                }
            }
            let inner: usize = at.shape()[axis + 1..].iter().product();
            let outer: usize = at.shape()[..axis].iter().product();
            let astep = at.shape()[axis] * inner;
            let bstep = bt.shape()[axis] * inner;
            let mut data = Vec::with_capacity(at.numel() + bt.numel());
            for ou in 0..outer {
                data.extend_from_slice(&at.data()[ou * astep..][..astep]);
                data.extend_from_slice(&bt.data()[ou * bstep..][..bstep]);
            }
            let mut shape = at.shape().to_vec();
            shape[axis] += bt.shape()[axis];
            Tensor::from_parts(shape, data)
        };
        Ok(self.graph.push(value, Op::Concat { a: self.id, b: other.id, axis }))
    }

    /// Select rows (leading-axis slices) by index; duplicates allowed.
    pub fn gather_rows(self, indices: &[usize]) -> Result<Var<'g, F>> {
        let value = {
            let nodes = self.graph.nodes.borrow();
            let xt = &nodes[self.id].value;
            if xt.rank() < 1 {
                return Err(Error::shape("gather_rows input", "rank >= 1", "rank 0".to_string()));
            }
            let m = xt.shape()[0];
            if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
                return Err(Error::invalid("gather_rows", format!("index {bad} out of bounds for {m} rows")));
            }
            let row = xt.numel() / m;
            let mut data = Vec::with_capacity(indices.len() * row);
            for &i in indices {
                data.extend_from_slice(&xt.data()[i * row..][..row]);
            }
            let mut shape = xt.shape().to_vec();
            shape[0] = indices.len();
            Tensor::from_parts(shape, data)
        };
        Ok(self.graph.push(value, Op::GatherRows { x: self.id, indices: indices.to_vec() }))
    }

    /// Reinterpret the buffer with a new shape of equal element count.
    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g, F>> {
        let value = {
            let nodes = self.graph.nodes.borrow();
            let xt = &nodes[self.id].value;
            let n: usize = shape.iter().product();
            if n != xt.numel() || shape.contains(&0) {
                return Err(Error::shape(
                    "reshape",
                    format!("{} elements", xt.numel()),
                    format!("{shape:?}"),
                ));
            }
            Tensor::from_parts(shape.to_vec(), xt.data().to_vec())
        };
        Ok(self.graph.push(value, Op::Reshape { x: self.id }))
    }

    /// Mean over the middle axis of a rank 3 tensor: [b, l, d] -> [b, d].
    pub fn mean_axis1(self) -> Result<Var<'g, F>> {
        let value = {
            let nodes = self.graph.nodes.borrow();
            let xt = &nodes[self.id].value;
            if xt.rank() != 3 {
                return Err(Error::shape("mean_axis1 input", "[b, l, d]", format!("{:?}", xt.shape())));
            }
            let (bsz, l, d) = (xt.shape()[0], xt.shape()[1], xt.shape()[2]);
            let inv = F::one() / F::from_f64(l as f64);
            let mut data = vec![F::zero(); bsz * d];
            for bi in 0..bsz {
                let dst = &mut data[bi * d..][..d];
                for li in 0..l {
                    let src = &xt.data()[(bi * l + li) * d..][..d];
                    for (dv, &sv) in dst.iter_mut().zip(src) {
                        *dv = *dv + sv;
                    }
                }
                for dv in dst.iter_mut() {
                    *dv = *dv * inv;
                }
            }
            Tensor::from_parts(vec![bsz, d], data)
        };
        Ok(self.graph.push(value, Op::MeanAxis1 { x: self.id }))
    }

    /// Mean of all elements; returns a rank 0 scalar.
    pub fn mean_all(self) -> Var<'g, F> {
        let value = self.graph.with_value(self.id, |t| {
            let mut s = F::zero();
            for &v in t.data() {
                s = s + v;
            }
            Tensor::scalar(s / F::from_f64(t.numel() as f64))
        });
        self.graph.push(value, Op::MeanAll { x: self.id })
    }

    /// Elementwise sum of two same-shaped tensors.
    pub fn add(self, other: Var<'g, F>) -> Result<Var<'g, F>> {
        self.same_graph(other, "add")?;
        let value = {
            let nodes = self.graph.nodes.borrow();
            let at = &nodes[self.id].value;
            let bt = &nodes[other.id].value;
            if at.shape() != bt.shape() {
                return Err(Error::shape("add", format!("{:?}", at.shape()), format!("{:?}", bt.shape())));
            }
            let data = at.data().iter().zip(bt.data()).map(|(&a, &b)| a + b).collect();
            Tensor::from_parts(at.shape().to_vec(), data)
        };
        Ok(self.graph.push(value, Op::Add { a: self.id, b: other.id }))
    }

    /// Fixed-weight inner product, collapsing any tensor to a rank 0 scalar.
    pub fn dot_const(self, w: &[F]) -> Result<Var<'g, F>> {
        let value = {
            let nodes = self.graph.nodes.borrow();
            let xt = &nodes[self.id].value;
            if xt.numel() != w.len() {
                return Err(Error::shape("dot_const", format!("{} weights", xt.numel()), format!("{}", w.len())));
            }
            let mut s = F::zero();
            for (&x, &wv) in xt.data().iter().zip(w) {
                s = s + x * wv;
            }
            Tensor::scalar(s)
        };
        Ok(self.graph.push(value, Op::DotConst { x: self.id, w: w.to_vec() }))
    }

    /// Per-row softmax cross-entropy. Logits [k] or [b, k]; one target class
    /// per row. Returns the per-row losses plus detached probabilities.
    pub fn softmax_cross_entropy(self, targets: &[usize]) -> Result<(Var<'g, F>, Tensor<F>)> {
        let (losses, probs, ids) = {
            let nodes = self.graph.nodes.borrow();
            let xt = &nodes[self.id].value;
            let (bsz, k) = match xt.rank() {
                1 => (1, xt.shape()[0]),
                2 => (xt.shape()[0], xt.shape()[1]),
                _ => return Err(Error::shape("softmax logits", "[k] or [b, k]", format!("{:?}", xt.shape()))),
            };
            if targets.len() != bsz {
                return Err(Error::invalid(
                    "softmax_cross_entropy",
                    format!("{} targets for {bsz} rows", targets.len()),
                ));
            }
            if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
                return Err(Error::invalid("softmax_cross_entropy", format!("target {bad} out of range for {k} classes")));
            }
            let mut probs = Vec::new();
            let mut losses = vec![F::zero(); bsz];
            kernels::softmax_xent_fwd(xt.data(), k, targets, &mut probs, &mut losses);
            let probs_t = Tensor::from_parts(vec![bsz, k], probs.clone());
            (Tensor::from_parts(vec![bsz], losses), probs_t, (probs, targets.to_vec()))
        };
        let var = self.graph.push(
            losses,
            Op::SoftmaxXent { logits: self.id, targets: ids.1, probs: ids.0 },
        );
        Ok((var, probs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf1(g: &Graph<f64>, data: Vec<f64>) -> Var<'_, f64> {
        g.leaf(Tensor::from_vec(data))
    }

    #[test]
    fn elu_frozen_values() {
        // Independently computed: exp(-1) - 1.
        let g = Graph::new();
        let y = leaf1(&g, vec![-1.0, 0.0, 1.5]).elu();
        let v = y.value();
        assert!((v.data()[0] + 0.6321205588285577).abs() < 1e-16);
        assert_eq!(v.data()[1], 0.0);
        assert_eq!(v.data()[2], 1.5);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let g = Graph::new();
        let x = leaf1(&g, vec![1.0, 2.0]);
        assert!(matches!(g.backward(x), Err(crate::error::Error::InvalidArgument { .. })));
        let loss = x.mean_all();
        assert!(g.backward(loss).is_ok());
    }

    #[test]
    fn mean_all_gradient_is_uniform() {
        let g = Graph::new();
        let x = leaf1(&g, vec![1.0, 2.0, 3.0, 4.0]);
        let loss = x.mean_all();
        assert_eq!(loss.value().item().unwrap(), 2.5);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.grad(x).unwrap(), &[0.25; 4]);
    }

    #[test]
    fn reused_variable_accumulates_gradient() {
        // loss = mean(x + x): dx = 2/n each.
        let g = Graph::new();
        let x = leaf1(&g, vec![1.0, 2.0]);
        let loss = x.add(x).unwrap().mean_all();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.grad(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn unreached_leaf_has_no_gradient() {
        let g = Graph::new();
        let x = leaf1(&g, vec![1.0]);
        let unused = leaf1(&g, vec![5.0]);
        let loss = x.mean_all();
        let grads = g.backward(loss).unwrap();
        assert!(grads.grad(unused).is_none());
        assert!(grads.grad(x).is_some());
    }

    #[test]
    fn concat_splits_gradient_by_source() {
        let g = Graph::new();
        let a = leaf1(&g, vec![1.0, 2.0]);
        let b = leaf1(&g, vec![3.0]);
        let y = a.concat(b, 0).unwrap();
        assert_eq!(y.value().data(), &[1.0, 2.0, 3.0]);
        let loss = y.dot_const(&[1.0, 10.0, 100.0]).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.grad(a).unwrap(), &[1.0, 10.0]);
        assert_eq!(grads.grad(b).unwrap(), &[100.0]);
    }

    #[test]
    fn concat_on_last_axis_interleaves_rows() {
        let g = Graph::new();
        let a = g.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.leaf(Tensor::new(vec![2, 1], vec![9.0, 8.0]).unwrap());
        let y = a.concat(b, 1).unwrap();
        assert_eq!(y.shape(), vec![2, 3]);
        assert_eq!(y.value().data(), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
    }

    #[test]
    fn concat_rejects_mismatched_extents() {
        let g: Graph<f64> = Graph::new();
        let a = g.leaf(Tensor::zeros(vec![2, 2]));
        let b = g.leaf(Tensor::zeros(vec![3, 1]));
        assert!(a.concat(b, 1).is_err());
    }

    #[test]
    fn gather_rows_scatter_adds_duplicates() {
        let g = Graph::new();
        let x = g.leaf(Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let y = x.gather_rows(&[2, 0, 2]).unwrap();
        assert_eq!(y.value().data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let loss = y.dot_const(&[1.0, 1.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        let grads = g.backward(loss).unwrap();
        // Row 2 was taken twice, row 1 never.
        assert_eq!(grads.grad(x).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
        assert!(x.gather_rows(&[3]).is_err());
    }

    #[test]
    fn stack_and_mean_over_set() {
        let g = Graph::new();
        let a = leaf1(&g, vec![1.0, 5.0]);
        let b = leaf1(&g, vec![3.0, 7.0]);
        let stacked = g.stack_rows(&[a, b]).unwrap();
        assert_eq!(stacked.shape(), vec![2, 2]);
        let mean = g.mean_over_set(&[a, b]).unwrap();
        assert_eq!(mean.value().data(), &[2.0, 6.0]);
        let loss = mean.dot_const(&[1.0, 1.0]).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.grad(a).unwrap(), &[0.5, 0.5]);
        assert_eq!(grads.grad(b).unwrap(), &[0.5, 0.5]);
    }

    #[test]
    fn mean_axis1_averages_middle_axis() {
        let g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = x.mean_axis1().unwrap();
        assert_eq!(y.shape(), vec![1, 2]);
        assert_eq!(y.value().data(), &[2.0, 3.0]);
    }

    #[test]
    fn reshape_preserves_data_and_routes_gradient() {
        let g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2, 3], (0..6).map(f64::from).collect()).unwrap());
        let y = x.reshape(&[3, 2]).unwrap();
        assert_eq!(y.shape(), vec![3, 2]);
        assert_eq!(y.value().data(), x.value().data());
        assert!(x.reshape(&[4, 2]).is_err());
        let loss = y.mean_all();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.grad(x).unwrap().len(), 6);
    }

    #[test]
    fn softmax_targets_validated() {
        let g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap());
        assert!(x.softmax_cross_entropy(&[0]).is_err());
        assert!(x.softmax_cross_entropy(&[0, 3]).is_err());
        let (losses, probs) = x.softmax_cross_entropy(&[0, 2]).unwrap();
        assert_eq!(losses.shape(), vec![2]);
        assert_eq!(probs.shape(), &[2, 3]);
    }

    #[test]
    fn dense_shape_errors_name_the_operand() {
        let g: Graph<f64> = Graph::new();
        let x = g.leaf(Tensor::zeros(vec![4]));
        let w = g.leaf(Tensor::zeros(vec![3, 5]));
        let b = g.leaf(Tensor::zeros(vec![3]));
        let err = x.dense(w, b).unwrap_err();
        assert!(err.to_string().contains("dense input"), "{err}");
    }

    #[test]
    fn batch_norm_returns_batch_statistics() {
        let g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let gamma = leaf1(&g, vec![1.0, 1.0]);
        let beta = leaf1(&g, vec![0.0, 0.0]);
        let (y, mean, var) = x.batch_norm(gamma, beta, 0.0).unwrap();
        assert_eq!(mean, vec![2.0, 3.0]);
        assert_eq!(var, vec![1.0, 1.0]);
        assert_eq!(y.value().data(), &[-1.0, -1.0, 1.0, 1.0]);
    }

    #[test]
    fn affine_channels_applies_scale_then_shift() {
        let g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = x.affine_channels(vec![2.0, 0.5], vec![1.0, -1.0]).unwrap();
        assert_eq!(y.value().data(), &[3.0, 0.0, 7.0, 1.0]);
        let loss = y.dot_const(&[1.0; 4]).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.grad(x).unwrap(), &[2.0, 0.5, 2.0, 0.5]);
    }
}
