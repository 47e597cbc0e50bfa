//! Numeric kernels behind the graph ops.
//!
//! Layout conventions: channels last, row-major. Hot loops are written so the
//! innermost accumulation runs over a contiguous channel axis with one
//! independent chain per output element; this lets LLVM vectorize without
//! reassociating any sum, so results are identical to a naive nested-loop
//! reference evaluated in the same order.

use super::Scalar;

/// Column-panel width of the register-tiled matmul microkernel. An f32
/// accumulator row of this width fits in a few SIMD registers.
const GEMM_NB: usize = 32;

/// Register tile: two rows of C held in fixed-width accumulators across the
/// whole k loop, so the per-element partial sum is loaded and stored once per
/// call instead of once per k step. `NW` is the compile-time panel width; the
/// dynamic-width twin below covers ragged right edges.
#[inline]
fn gemm_panel<F: Scalar, const NW: usize>(
    a: &[F],
    a_stride: usize,
    m: usize,
    kk: usize,
    b: &[F],
    n: usize,
    j0: usize,
    c: &mut [F],
    c_stride: usize,
) {
    let mut i = 0;
    while i + 2 <= m {
        let a0 = &a[i * a_stride..][..kk];
        let a1 = &a[(i + 1) * a_stride..][..kk];
        let mut acc0 = [F::zero(); NW];
        let mut acc1 = [F::zero(); NW];
        acc0.copy_from_slice(&c[i * c_stride + j0..][..NW]);
        acc1.copy_from_slice(&c[(i + 1) * c_stride + j0..][..NW]);
        for kx in 0..kk {
            let brow = &b[kx * n + j0..][..NW];
            let v0 = a0[kx];
            let v1 = a1[kx];
            for j in 0..NW {
                acc0[j] = acc0[j] + v0 * brow[j];
            }
            for j in 0..NW {
                acc1[j] = acc1[j] + v1 * brow[j];
            }
        }
        c[i * c_stride + j0..][..NW].copy_from_slice(&acc0);
        c[(i + 1) * c_stride + j0..][..NW].copy_from_slice(&acc1);
        i += 2;
    }
    if i < m {
        let a0 = &a[i * a_stride..][..kk];
        let mut acc0 = [F::zero(); NW];
        acc0.copy_from_slice(&c[i * c_stride + j0..][..NW]);
        for kx in 0..kk {
            let brow = &b[kx * n + j0..][..NW];
            let v0 = a0[kx];
            for j in 0..NW {
                acc0[j] = acc0[j] + v0 * brow[j];
            }
        }
        c[i * c_stride + j0..][..NW].copy_from_slice(&acc0);
    }
}

#[inline]
fn gemm_panel_dyn<F: Scalar>(
    a: &[F],
    a_stride: usize,
    m: usize,
    kk: usize,
    b: &[F],
    n: usize,
    j0: usize,
    nw: usize,
    c: &mut [F],
    c_stride: usize,
) {
    for i in 0..m {
        let arow = &a[i * a_stride..][..kk];
        let mut acc = [F::zero(); GEMM_NB];
        acc[..nw].copy_from_slice(&c[i * c_stride + j0..][..nw]);
        for kx in 0..kk {
            let brow = &b[kx * n + j0..][..nw];
            let v = arow[kx];
            for j in 0..nw {
                acc[j] = acc[j] + v * brow[j];
            }
        }
        c[i * c_stride + j0..][..nw].copy_from_slice(&acc[..nw]);
    }
}

/// C[m, n] += A[m, kk] * B[kk, n]. Row i of A starts at a[i * a_stride] and
/// row i of C at c[i * c_stride]; B is contiguous row-major. Each output
/// element keeps a single accumulation chain walking k in ascending order,
/// so a sequence of calls that partitions k (resuming from the stored C)
/// reproduces a naive nested-loop sum bit for bit.
pub(crate) fn gemm_acc<F: Scalar>(
    a: &[F],
    a_stride: usize,
    m: usize,
    kk: usize,
    b: &[F],
    n: usize,
    c: &mut [F],
    c_stride: usize,
) {
    debug_assert!(b.len() >= kk * n);
    let mut j0 = 0;
    while j0 + GEMM_NB <= n {
        gemm_panel::<F, GEMM_NB>(a, a_stride, m, kk, b, n, j0, c, c_stride);
        j0 += GEMM_NB;
    }
    if j0 < n {
        gemm_panel_dyn(a, a_stride, m, kk, b, n, j0, n - j0, c, c_stride);
    }
}

/// C[ka, n] += A^T * B for row-major A [m, ka] and B [m, n], i.e. the sum of
/// per-row outer products. Rows are folded four at a time, which groups the
/// per-element sum (fine for gradient accumulation, which is tolerance
/// checked) and cuts traffic to C by 4x.
pub(crate) fn gemm_atb_acc<F: Scalar>(
    a: &[F],
    a_stride: usize,
    b: &[F],
    b_stride: usize,
    m: usize,
    ka: usize,
    n: usize,
    c: &mut [F],
) {
    debug_assert!(c.len() >= ka * n);
    let mut i = 0;
    while i + 4 <= m {
        let a0 = &a[i * a_stride..][..ka];
        let a1 = &a[(i + 1) * a_stride..][..ka];
        let a2 = &a[(i + 2) * a_stride..][..ka];
        let a3 = &a[(i + 3) * a_stride..][..ka];
        let b0 = &b[i * b_stride..][..n];
        let b1 = &b[(i + 1) * b_stride..][..n];
        let b2 = &b[(i + 2) * b_stride..][..n];
        let b3 = &b[(i + 3) * b_stride..][..n];
        for kx in 0..ka {
            let crow = &mut c[kx * n..][..n];
            let v0 = a0[kx];
            let v1 = a1[kx];
            let v2 = a2[kx];
            let v3 = a3[kx];
            for j in 0..n {
                crow[j] = crow[j] + (v0 * b0[j] + v1 * b1[j]) + (v2 * b2[j] + v3 * b3[j]);
            }
        }
        i += 4;
    }
    while i < m {
        let arow = &a[i * a_stride..][..ka];
        let brow = &b[i * b_stride..][..n];
        for kx in 0..ka {
            let crow = &mut c[kx * n..][..n];
            let v = arow[kx];
            for j in 0..n {
                crow[j] = crow[j] + v * brow[j];
            }
        }
        i += 1;
    }
}

/// Valid output range along one axis for a 3x3 "same" tap offset d in
/// {0, 1, 2}: output o reads input o + d - 1, so the range keeps it in
/// [0, len). Returns (o_start, o_end).
#[inline]
fn tap_range(d: usize, len: usize) -> (usize, usize) {
    (1usize.saturating_sub(d), (len + 1 - d).min(len))
}

/// 2D cross-correlation, 3x3 kernel, zero padding 1 ("same").
/// x: [b, h, w, cin], k: [3, 3, cin, cout], bias: [cout], y: [b, h, w, cout].
/// Per output element the accumulation order is bias, then (dy, dx, ci)
/// ascending: the bias is written first and each kernel tap then adds its
/// panel in (dy, dx) order, with the contiguous ci chain inside [`gemm_acc`].
pub fn conv2d_same_fwd<F: Scalar>(
    x: &[F],
    (b, h, w, cin): (usize, usize, usize, usize),
    k: &[F],
    cout: usize,
    bias: &[F],
    y: &mut [F],
) {
    debug_assert_eq!(x.len(), b * h * w * cin);
    debug_assert_eq!(k.len(), 9 * cin * cout);
    debug_assert_eq!(y.len(), b * h * w * cout);
    for yrow in y.chunks_exact_mut(cout) {
        yrow.copy_from_slice(bias);
    }
    for bi in 0..b {
        let xb = &x[bi * h * w * cin..][..h * w * cin];
        let yb = &mut y[bi * h * w * cout..][..h * w * cout];
        for dy in 0..3usize {
            let (oy0, oy1) = tap_range(dy, h);
            for dx in 0..3usize {
                let (ox0, ox1) = tap_range(dx, w);
                if ox0 >= ox1 {
                    continue;
                }
                let ktap = &k[(dy * 3 + dx) * cin * cout..][..cin * cout];
                for oy in oy0..oy1 {
                    let iy = oy + dy - 1;
                    let ix0 = ox0 + dx - 1;
                    gemm_acc(
                        &xb[(iy * w + ix0) * cin..],
                        cin,
                        ox1 - ox0,
                        cin,
                        ktap,
                        cout,
                        &mut yb[(oy * w + ox0) * cout..],
                        cout,
                    );
                }
            }
        }
    }
}

/// Backward of [`conv2d_same_fwd`]. Accumulates into dk and dbias, and into
/// dx when given; pass `None` when the input needs no gradient (for example
/// the image batch), which skips the most expensive part of the kernel.
pub fn conv2d_same_bwd<F: Scalar>(
    x: &[F],
    (b, h, w, cin): (usize, usize, usize, usize),
    k: &[F],
    cout: usize,
    g: &[F],
    mut dx: Option<&mut [F]>,
    dk: &mut [F],
    dbias: &mut [F],
) {
    for grow in g.chunks_exact(cout) {
        for (d, &gv) in dbias.iter_mut().zip(grow) {
            *d = *d + gv;
        }
    }
    // Transposed kernel [3, 3, cout, cin] so the dx panels multiply against
    // contiguous cin rows.
    let kt = dx.as_ref().map(|_| {
        let mut kt = vec![F::zero(); 9 * cout * cin];
        for tap in 0..9 {
            let src = &k[tap * cin * cout..][..cin * cout];
            let dst = &mut kt[tap * cout * cin..][..cout * cin];
            for ci in 0..cin {
                for co in 0..cout {
                    dst[co * cin + ci] = src[ci * cout + co];
                }
            }
        }
        kt
    });
    for bi in 0..b {
        let xb = &x[bi * h * w * cin..][..h * w * cin];
        let gb = &g[bi * h * w * cout..][..h * w * cout];
        let mut dxb = dx.as_deref_mut().map(|d| &mut d[bi * h * w * cin..][..h * w * cin]);
        for dy in 0..3usize {
            let (oy0, oy1) = tap_range(dy, h);
            for dx_ in 0..3usize {
                let (ox0, ox1) = tap_range(dx_, w);
                if ox0 >= ox1 {
                    continue;
                }
                let len = ox1 - ox0;
                let dktap = &mut dk[(dy * 3 + dx_) * cin * cout..][..cin * cout];
                let ktap = kt
                    .as_deref()
                    .map(|kt| &kt[(dy * 3 + dx_) * cout * cin..][..cout * cin]);
                for oy in oy0..oy1 {
                    let iy = oy + dy - 1;
                    let ix0 = ox0 + dx_ - 1;
                    let grows = &gb[(oy * w + ox0) * cout..];
                    // dk[tap] += x_rows^T g_rows over the valid window.
                    gemm_atb_acc(
                        &xb[(iy * w + ix0) * cin..],
                        cin,
                        grows,
                        cout,
                        len,
                        cin,
                        cout,
                        dktap,
                    );
                    // dx_rows += g_rows kt[tap].
                    if let (Some(dxb), Some(ktap)) = (dxb.as_deref_mut(), ktap) {
                        gemm_acc(
                            grows,
                            cout,
                            len,
                            cout,
                            ktap,
                            cin,
                            &mut dxb[(iy * w + ix0) * cin..],
                            cin,
                        );
                    }
                }
            }
        }
    }
}

/// 1D valid cross-correlation along the leading (class) axis, kernel size 3.
/// x: [b, l, c], k: [3, c, f], bias: [f], y: [b, l - 2, f].
pub fn conv1d_valid_fwd<F: Scalar>(
    x: &[F],
    (b, l, c): (usize, usize, usize),
    k: &[F],
    f: usize,
    bias: &[F],
    y: &mut [F],
) {
    let lo = l - 2;
    debug_assert_eq!(y.len(), b * lo * f);
    for bi in 0..b {
        let xb = &x[bi * l * c..][..l * c];
        let yb = &mut y[bi * lo * f..][..lo * f];
        for ol in 0..lo {
            let yrow = &mut yb[ol * f..][..f];
            yrow.copy_from_slice(bias);
            for d in 0..3usize {
                let xrow = &xb[(ol + d) * c..][..c];
                let ktap = &k[d * c * f..][..c * f];
                for ci in 0..c {
                    let v = xrow[ci];
                    let krow = &ktap[ci * f..][..f];
                    for (yo, &kv) in yrow.iter_mut().zip(krow) {
                        *yo = *yo + v * kv;
                    }
                }
            }
        }
    }
}

/// Backward of [`conv1d_valid_fwd`]. dx follows the same opt-out contract
/// as [`conv2d_same_bwd`].
pub fn conv1d_valid_bwd<F: Scalar>(
    x: &[F],
    (b, l, c): (usize, usize, usize),
    k: &[F],
    f: usize,
    g: &[F],
    mut dx: Option<&mut [F]>,
    dk: &mut [F],
    dbias: &mut [F],
) {
    let lo = l - 2;
    let kt = dx.as_ref().map(|_| {
        let mut kt = vec![F::zero(); 3 * f * c];
        for tap in 0..3 {
            let src = &k[tap * c * f..][..c * f];
            let dst = &mut kt[tap * f * c..][..f * c];
            for ci in 0..c {
                for fo in 0..f {
                    dst[fo * c + ci] = src[ci * f + fo];
                }
            }
        }
        kt
    });
    for bi in 0..b {
        let xb = &x[bi * l * c..][..l * c];
        let gb = &g[bi * lo * f..][..lo * f];
        let mut dxb = dx.as_deref_mut().map(|d| &mut d[bi * l * c..][..l * c]);
        for ol in 0..lo {
            let grow = &gb[ol * f..][..f];
            for (d, &gv) in dbias.iter_mut().zip(grow) {
                *d = *d + gv;
            }
            for d in 0..3usize {
                let xrow = &xb[(ol + d) * c..][..c];
                let dktap = &mut dk[d * c * f..][..c * f];
                if let (Some(dxb), Some(kt)) = (dxb.as_deref_mut(), kt.as_deref()) {
                    let dxrow = &mut dxb[(ol + d) * c..][..c];
                    let ktap = &kt[d * f * c..][..f * c];
                    for fo in 0..f {
                        let gv = grow[fo];
                        let ktrow = &ktap[fo * c..][..c];
                        for (dst, &kv) in dxrow.iter_mut().zip(ktrow) {
                            *dst = *dst + gv * kv;
                        }
                    }
                }
                for ci in 0..c {
                    let xv = xrow[ci];
                    let dkrow = &mut dktap[ci * f..][..f];
                    for (dst, &gv) in dkrow.iter_mut().zip(grow) {
                        *dst = *dst + xv * gv;
                    }
                }
            }
        }
    }
}

/// Affine map y = x W^T + bias. x: [b, i], w: [o, i], bias: [o], y: [b, o].
/// Uses a transposed weight copy so the GEMM walks the contiguous output
/// axis; per output element the order is bias then ascending input index.
pub fn dense_fwd<F: Scalar>(x: &[F], (b, i): (usize, usize), w: &[F], o: usize, bias: &[F], y: &mut [F]) {
    let mut wt = vec![F::zero(); i * o];
    for oo in 0..o {
        for ii in 0..i {
            wt[ii * o + oo] = w[oo * i + ii];
        }
    }
    for yrow in y.chunks_exact_mut(o) {
        yrow.copy_from_slice(bias);
    }
    gemm_acc(x, i, b, i, &wt, o, y, o);
}

/// Backward of [`dense_fwd`]. dx follows the same opt-out contract as
/// [`conv2d_same_bwd`].
pub fn dense_bwd<F: Scalar>(
    x: &[F],
    (b, i): (usize, usize),
    w: &[F],
    o: usize,
    g: &[F],
    dx: Option<&mut [F]>,
    dw: &mut [F],
    dbias: &mut [F],
) {
    for grow in g.chunks_exact(o) {
        for (d, &gv) in dbias.iter_mut().zip(grow) {
            *d = *d + gv;
        }
    }
    // dw[o, i] += g^T x; w is already [o, i] row-major so dx reuses it as
    // the GEMM panel directly.
    gemm_atb_acc(g, o, x, i, b, o, i, dw);
    if let Some(dx) = dx {
        gemm_acc(g, o, b, o, w, i, dx, i);
    }
}

/// 2x2 max pooling with stride 2; odd trailing row/column dropped.
/// Returns per-output flat argmax indices into x (first occurrence in
/// row-major order wins ties).
pub fn maxpool2_fwd<F: Scalar>(
    x: &[F],
    (b, h, w, c): (usize, usize, usize, usize),
    y: &mut [F],
    argmax: &mut Vec<u32>,
) {
    let (oh, ow) = (h / 2, w / 2);
    debug_assert_eq!(y.len(), b * oh * ow * c);
    argmax.clear();
    argmax.resize(b * oh * ow * c, 0);
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                for ci in 0..c {
                    let mut best = F::neg_infinity();
                    let mut best_at = 0u32;
                    for dy in 0..2usize {
                        for dx in 0..2usize {
                            let idx = ((bi * h + oy * 2 + dy) * w + ox * 2 + dx) * c + ci;
                            let v = x[idx];
                            if v > best {
                                best = v;
                                best_at = idx as u32;
                            }
                        }
                    }
                    let out = ((bi * oh + oy) * ow + ox) * c + ci;
                    y[out] = best;
                    argmax[out] = best_at;
                }
            }
        }
    }
}

/// Per-channel batch statistics and normalization (training mode).
/// x is viewed as [m, c] with m = numel / c; statistics use the population
/// variance. Returns (mean, var); fills xhat, inv_std and y.
pub fn batchnorm_train_fwd<F: Scalar>(
    x: &[F],
    c: usize,
    gamma: &[F],
    beta: &[F],
    epsilon: F,
    xhat: &mut Vec<F>,
    inv_std: &mut Vec<F>,
    y: &mut [F],
) -> (Vec<F>, Vec<F>) {
    let m = x.len() / c;
    let inv_m = F::one() / F::from_f64(m as f64);
    let mut mean = vec![F::zero(); c];
    for row in x.chunks_exact(c) {
        for (mc, &v) in mean.iter_mut().zip(row) {
            *mc = *mc + v;
        }
    }
    for mc in mean.iter_mut() {
        *mc = *mc * inv_m;
    }
    let mut var = vec![F::zero(); c];
    for row in x.chunks_exact(c) {
        for ((vc, &v), &mc) in var.iter_mut().zip(row).zip(&mean) {
            let d = v - mc;
            *vc = *vc + d * d;
        }
    }
    for vc in var.iter_mut() {
        *vc = *vc * inv_m;
    }
    inv_std.clear();
    inv_std.extend(var.iter().map(|&v| F::one() / (v + epsilon).sqrt()));
    xhat.clear();
    xhat.resize(x.len(), F::zero());
    for (xrow, hrow) in x.chunks_exact(c).zip(xhat.chunks_exact_mut(c)) {
        for ci in 0..c {
            hrow[ci] = (xrow[ci] - mean[ci]) * inv_std[ci];
        }
    }
    for (hrow, yrow) in xhat.chunks_exact(c).zip(y.chunks_exact_mut(c)) {
        for ci in 0..c {
            yrow[ci] = hrow[ci] * gamma[ci] + beta[ci];
        }
    }
    (mean, var)
}

/// Backward of [`batchnorm_train_fwd`].
pub fn batchnorm_train_bwd<F: Scalar>(
    c: usize,
    gamma: &[F],
    xhat: &[F],
    inv_std: &[F],
    g: &[F],
    dx: &mut [F],
    dgamma: &mut [F],
    dbeta: &mut [F],
) {
    let m = g.len() / c;
    let inv_m = F::one() / F::from_f64(m as f64);
    // Channel sums of ghat = g * gamma and ghat * xhat.
    let mut sum1 = vec![F::zero(); c];
    let mut sum2 = vec![F::zero(); c];
    for (grow, hrow) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
        for ci in 0..c {
            let ghat = grow[ci] * gamma[ci];
            sum1[ci] = sum1[ci] + ghat;
            sum2[ci] = sum2[ci] + ghat * hrow[ci];
            dgamma[ci] = dgamma[ci] + grow[ci] * hrow[ci];
            dbeta[ci] = dbeta[ci] + grow[ci];
        }
    }
    for ((grow, hrow), dxrow) in g
        .chunks_exact(c)
        .zip(xhat.chunks_exact(c))
        .zip(dx.chunks_exact_mut(c))
    {
        for ci in 0..c {
            let ghat = grow[ci] * gamma[ci];
            dxrow[ci] =
                dxrow[ci] + inv_std[ci] * (ghat - (sum1[ci] + hrow[ci] * sum2[ci]) * inv_m);
        }
    }
}

/// Numerically stable softmax + cross-entropy for a batch of logit rows.
/// Fills probs [b, k] and losses [b].
pub fn softmax_xent_fwd<F: Scalar>(
    logits: &[F],
    k: usize,
    targets: &[usize],
    probs: &mut Vec<F>,
    losses: &mut [F],
) {
    probs.clear();
    probs.resize(logits.len(), F::zero());
    for ((row, prow), (&t, loss)) in logits
        .chunks_exact(k)
        .zip(probs.chunks_exact_mut(k))
        .zip(targets.iter().zip(losses.iter_mut()))
    {
        let mut m = row[0];
        for &v in &row[1..] {
            if v > m {
                m = v;
            }
        }
        let mut z = F::zero();
        for (p, &v) in prow.iter_mut().zip(row) {
            *p = (v - m).exp();
            z = z + *p;
        }
        let inv_z = F::one() / z;
        for p in prow.iter_mut() {
            *p = *p * inv_z;
        }
        *loss = z.ln() - (row[t] - m);
    }
}
