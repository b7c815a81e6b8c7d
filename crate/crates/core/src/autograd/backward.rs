//! Vector-Jacobian products for every op.

use super::kernels::{axis_split, gemm_acc, transpose, ConvGeom};
use super::ops::{margin_target_grad, sigmoid};
use super::{accumulate, Op, Tape, Var};
use crate::par;
use crate::tensor::Element;

type Adj<E> = [Option<Vec<E>>];

fn elementwise<E: Element>(tape: &Tape<E>, adj: &mut Adj<E>, x: Var, g: &[E], f: impl Fn(E, E, E) -> E, y: &[E]) {
    if !tape.requires_grad(x) {
        return;
    }
    let xv = tape.value(x);
    let d = g.iter().zip(xv).zip(y).map(|((&g, &x), &y)| f(g, x, y)).collect();
    accumulate(tape, adj, x, d);
}

pub(super) fn propagate<E: Element>(tape: &Tape<E>, i: usize, g: &[E], adj: &mut Adj<E>) {
    let node = &tape.nodes[i];
    let y = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(tape, adj, *a, g.to_vec());
            accumulate(tape, adj, *b, g.to_vec());
        }
        Op::Sub(a, b) => {
            accumulate(tape, adj, *a, g.to_vec());
            accumulate(tape, adj, *b, g.iter().map(|&v| -v).collect());
        }
        Op::Mul(a, b) => {
            if tape.requires_grad(*a) {
                let d = g.iter().zip(tape.value(*b)).map(|(&g, &v)| g * v).collect();
                accumulate(tape, adj, *a, d);
            }
            if tape.requires_grad(*b) {
                let d = g.iter().zip(tape.value(*a)).map(|(&g, &v)| g * v).collect();
                accumulate(tape, adj, *b, d);
            }
        }
        Op::Scale(x, c) => {
            let c = *c;
            accumulate(tape, adj, *x, g.iter().map(|&v| v * c).collect());
        }
        Op::ScaleShift { x, w, b } => {
            let wv = tape.scalar(*w);
            accumulate(tape, adj, *x, g.iter().map(|&v| v * wv).collect());
            if tape.requires_grad(*w) {
                let d = g.iter().zip(tape.value(*x)).map(|(&g, &v)| g * v).sum();
                accumulate(tape, adj, *w, vec![d]);
            }
            accumulate(tape, adj, *b, vec![g.iter().copied().sum()]);
        }
        Op::ChannelScale { x, s } => {
            let inner: usize = tape.shape(*x)[2..].iter().product();
            let sv = tape.value(*s);
            if tape.requires_grad(*x) {
                let d = g
                    .chunks(inner)
                    .zip(sv)
                    .flat_map(|(gc, &sc)| gc.iter().map(move |&v| v * sc))
                    .collect();
                accumulate(tape, adj, *x, d);
            }
            if tape.requires_grad(*s) {
                let d = g
                    .chunks(inner)
                    .zip(tape.value(*x).chunks(inner))
                    .map(|(gc, xc)| gc.iter().zip(xc).map(|(&a, &b)| a * b).sum())
                    .collect();
                accumulate(tape, adj, *s, d);
            }
        }
        Op::Relu(x) => elementwise(tape, adj, *x, g, |g, x, _| if x > E::zero() { g } else { E::zero() }, y),
        Op::Sigmoid(x) => elementwise(
            tape,
            adj,
            *x,
            g,
            |g, x, _| {
                let s = sigmoid(x);
                g * s * (E::one() - s)
            },
            y,
        ),
        Op::Tanh(x) => elementwise(tape, adj, *x, g, |g, _, y| g * (E::one() - y * y), y),
        Op::Log(x) => elementwise(tape, adj, *x, g, |g, x, _| g / x, y),
        Op::Sqrt(x) => elementwise(tape, adj, *x, g, |g, _, y| g / (E::from_f64_lossy(2.0) * y), y),
        Op::ClampMin { x, min } => {
            let min = *min;
            elementwise(tape, adj, *x, g, |g, x, _| if x > min { g } else { E::zero() }, y)
        }
        Op::Reshape(x) => accumulate(tape, adj, *x, g.to_vec()),
        Op::SumAll(x) => {
            let n = tape.value(*x).len();
            accumulate(tape, adj, *x, vec![g[0]; n]);
        }
        Op::MeanAll(x) => {
            let n = tape.value(*x).len();
            accumulate(tape, adj, *x, vec![g[0] / E::from_f64_lossy(n as f64); n]);
        }
        Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
            if !tape.requires_grad(*x) {
                return;
            }
            let (outer, len, inner) = axis_split(tape.shape(*x), *axis);
            let scale = match node.op {
                Op::MeanAxis { .. } => E::one() / E::from_f64_lossy(len as f64),
                _ => E::one(),
            };
            let mut d = vec![E::zero(); outer * len * inner];
            for o in 0..outer {
                for l in 0..len {
                    for k in 0..inner {
                        d[(o * len + l) * inner + k] = g[o * inner + k] * scale;
                    }
                }
            }
            accumulate(tape, adj, *x, d);
        }
        Op::Softmax { x, axis } => {
            if !tape.requires_grad(*x) {
                return;
            }
            let (outer, len, inner) = axis_split(&node.shape, *axis);
            let mut d = vec![E::zero(); y.len()];
            for o in 0..outer {
                for k in 0..inner {
                    let idx = |l: usize| (o * len + l) * inner + k;
                    let dot: E = (0..len).map(|l| g[idx(l)] * y[idx(l)]).sum();
                    for l in 0..len {
                        d[idx(l)] = y[idx(l)] * (g[idx(l)] - dot);
                    }
                }
            }
            accumulate(tape, adj, *x, d);
        }
        Op::L2Normalize { x, axis, norms } => {
            if !tape.requires_grad(*x) {
                return;
            }
            let (outer, len, inner) = axis_split(&node.shape, *axis);
            let floor = E::from_f64_lossy(1e-12);
            let mut d = vec![E::zero(); y.len()];
            for o in 0..outer {
                for k in 0..inner {
                    let idx = |l: usize| (o * len + l) * inner + k;
                    let n = norms[o * inner + k];
                    if n <= floor {
                        for l in 0..len {
                            d[idx(l)] = g[idx(l)] / n;
                        }
                        continue;
                    }
                    let dot: E = (0..len).map(|l| g[idx(l)] * y[idx(l)]).sum();
                    for l in 0..len {
                        d[idx(l)] = (g[idx(l)] - y[idx(l)] * dot) / n;
                    }
                }
            }
            accumulate(tape, adj, *x, d);
        }
        Op::Concat { xs, axis } => {
            let (outer, total, inner) = axis_split(&node.shape, *axis);
            let mut offset = 0;
            for &v in xs {
                let len = tape.shape(v)[*axis];
                if tape.requires_grad(v) {
                    let mut d = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        d.extend_from_slice(&g[start..start + len * inner]);
                    }
                    accumulate(tape, adj, v, d);
                }
                offset += len;
            }
        }
        Op::Matmul(a, b) => {
            let (m, k) = (tape.shape(*a)[0], tape.shape(*a)[1]);
            let n = tape.shape(*b)[1];
            if tape.requires_grad(*a) {
                let bt = transpose(tape.value(*b), k, n);
                let mut d = vec![E::zero(); m * k];
                gemm_acc(g, &bt, &mut d, m, n, k);
                accumulate(tape, adj, *a, d);
            }
            if tape.requires_grad(*b) {
                let at = transpose(tape.value(*a), m, k);
                let mut d = vec![E::zero(); k * n];
                gemm_acc(&at, g, &mut d, k, m, n);
                accumulate(tape, adj, *b, d);
            }
        }
        Op::Linear { x, w, b } => {
            let (n, din) = (tape.shape(*x)[0], tape.shape(*x)[1]);
            let dout = tape.shape(*w)[0];
            if tape.requires_grad(*x) {
                let mut d = vec![E::zero(); n * din];
                gemm_acc(g, tape.value(*w), &mut d, n, dout, din);
                accumulate(tape, adj, *x, d);
            }
            if tape.requires_grad(*w) {
                let gt = transpose(g, n, dout);
                let mut d = vec![E::zero(); dout * din];
                gemm_acc(&gt, tape.value(*x), &mut d, dout, n, din);
                accumulate(tape, adj, *w, d);
            }
            if let Some(b) = b {
                if tape.requires_grad(*b) {
                    let mut d = vec![E::zero(); dout];
                    for row in g.chunks(dout) {
                        d.iter_mut().zip(row).for_each(|(a, &v)| *a = *a + v);
                    }
                    accumulate(tape, adj, *b, d);
                }
            }
        }
        Op::Conv2d { x, w, b, stride, pad } => conv2d_backward(tape, adj, g, &node.shape, *x, *w, *b, *stride, *pad),
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats,
        } => {
            let (n, c) = (node.shape[0], node.shape[1]);
            let hw = node.shape[2] * node.shape[3];
            let mut dgamma = vec![E::zero(); c];
            let mut dbeta = vec![E::zero(); c];
            for i in 0..n {
                for ch in 0..c {
                    let r = (i * c + ch) * hw..(i * c + ch + 1) * hw;
                    for (&gv, &xh) in g[r.clone()].iter().zip(&xhat[r]) {
                        dbeta[ch] = dbeta[ch] + gv;
                        dgamma[ch] = dgamma[ch] + gv * xh;
                    }
                }
            }
            if tape.requires_grad(*x) {
                let gam = tape.value(*gamma);
                let m = E::from_f64_lossy((n * hw) as f64);
                let mut d = vec![E::zero(); g.len()];
                for i in 0..n {
                    for ch in 0..c {
                        let r = (i * c + ch) * hw..(i * c + ch + 1) * hw;
                        let k = gam[ch] * inv_std[ch];
                        for ((dv, &gv), &xh) in d[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&xhat[r]) {
                            *dv = if *batch_stats {
                                k / m * (m * gv - dbeta[ch] - xh * dgamma[ch])
                            } else {
                                k * gv
                            };
                        }
                    }
                }
                accumulate(tape, adj, *x, d);
            }
            accumulate(tape, adj, *gamma, dgamma);
            accumulate(tape, adj, *beta, dbeta);
        }
        Op::GlobalAvgPool(x) => {
            let s = tape.shape(*x);
            let hw = s[2] * s[3];
            let inv = E::one() / E::from_f64_lossy(hw as f64);
            let d = g.iter().flat_map(|&v| std::iter::repeat_n(v * inv, hw)).collect();
            accumulate(tape, adj, *x, d);
        }
        Op::TimeWeightedSum { h, alpha } => {
            let s = tape.shape(*h);
            let (n, dd, t) = (s[0], s[1], s[2]);
            let av = tape.value(*alpha);
            if tape.requires_grad(*h) {
                let mut d = vec![E::zero(); n * dd * t];
                for i in 0..n {
                    for j in 0..dd {
                        let gv = g[i * dd + j];
                        for k in 0..t {
                            d[(i * dd + j) * t + k] = gv * av[i * t + k];
                        }
                    }
                }
                accumulate(tape, adj, *h, d);
            }
            if tape.requires_grad(*alpha) {
                let hv = tape.value(*h);
                let mut d = vec![E::zero(); n * t];
                for i in 0..n {
                    for j in 0..dd {
                        let gv = g[i * dd + j];
                        for k in 0..t {
                            d[i * t + k] = d[i * t + k] + gv * hv[(i * dd + j) * t + k];
                        }
                    }
                }
                accumulate(tape, adj, *alpha, d);
            }
        }
        Op::CrossEntropy { logits, labels, probs } => {
            let c = tape.shape(*logits)[1];
            let scale = g[0] / E::from_f64_lossy(labels.len() as f64);
            let mut d: Vec<E> = probs.iter().map(|&p| p * scale).collect();
            for (i, &l) in labels.iter().enumerate() {
                d[i * c + l] = d[i * c + l] - scale;
            }
            accumulate(tape, adj, *logits, d);
        }
        Op::AamMargin { cos, labels, margin } => {
            let c = tape.shape(*cos)[1];
            let cv = tape.value(*cos);
            let mut d = g.to_vec();
            for (i, &l) in labels.iter().enumerate() {
                let j = i * c + l;
                d[j] = d[j] * margin_target_grad(cv[j], *margin);
            }
            accumulate(tape, adj, *cos, d);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward<E: Element>(
    tape: &Tape<E>,
    adj: &mut Adj<E>,
    g: &[E],
    out_shape: &[usize],
    x: Var,
    w: Var,
    b: Option<Var>,
    stride: usize,
    pad: usize,
) {
    let sx = tape.shape(x);
    let sw = tape.shape(w);
    let (n, cout, k) = (sx[0], sw[0], sw[2]);
    let geom = ConvGeom::new(sx[1], sx[2], sx[3], k, stride, pad).expect("validated in forward");
    let p = out_shape[2] * out_shape[3];
    let q = geom.patch_len();
    let in_len = sx[1] * sx[2] * sx[3];
    let xv = tape.value(x);
    let wv = tape.value(w);

    if let Some(b) = b {
        if tape.requires_grad(b) {
            let mut d = vec![E::zero(); cout];
            for (idx, row) in g.chunks(p).enumerate() {
                let c = idx % cout;
                d[c] = d[c] + row.iter().copied().sum();
            }
            accumulate(tape, adj, b, d);
        }
    }
    if tape.requires_grad(w) {
        // Per-sample partials are summed in sample order for reproducibility.
        let partials = par::map_range(n, |i| {
            let xi = &xv[i * in_len..(i + 1) * in_len];
            let gi = &g[i * cout * p..(i + 1) * cout * p];
            let cols_t = if geom.is_pointwise() {
                transpose(xi, q, p)
            } else {
                geom.im2col_t(xi)
            };
            let mut dw = vec![E::zero(); cout * q];
            gemm_acc(gi, &cols_t, &mut dw, cout, p, q);
            dw
        });
        let mut dw = vec![E::zero(); cout * q];
        for part in partials {
            dw.iter_mut().zip(&part).for_each(|(a, &v)| *a = *a + v);
        }
        accumulate(tape, adj, w, dw);
    }
    if tape.requires_grad(x) {
        let wt = transpose(wv, cout, q);
        let mut dx = vec![E::zero(); n * in_len];
        par::for_each_chunk_mut(&mut dx, in_len, |i, dxi| {
            let gi = &g[i * cout * p..(i + 1) * cout * p];
            if geom.is_pointwise() {
                gemm_acc(&wt, gi, dxi, q, cout, p);
            } else {
                let mut dcols = vec![E::zero(); q * p];
                gemm_acc(&wt, gi, &mut dcols, q, cout, p);
                geom.col2im_acc(&dcols, dxi);
            }
        });
        accumulate(tape, adj, x, dx);
    }
}
