//! Forward definitions of the differentiable ops.

use super::kernels::{axis_split, gemm_acc, transpose, ConvGeom};
use super::{Op, Tape, Var};
use crate::error::{contract_err, shape_err, Result};
use crate::par;
use crate::tensor::{numel, Element};

/// Running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats<E> {
    pub mean: Vec<E>,
    pub var: Vec<E>,
    /// Number of batches folded into the running estimate. Zero means unseeded.
    pub num_batches: u64,
}

impl<E: Element> BnStats<E> {
    /// Unseeded stats; eval-mode use is an error until trained or seeded.
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![E::zero(); channels],
            var: vec![E::one(); channels],
            num_batches: 0,
        }
    }

    /// Explicitly seeds the stats; seeding counts as one tracked batch.
    pub fn seeded(mean: Vec<E>, var: Vec<E>) -> Self {
        Self {
            mean,
            var,
            num_batches: 1,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn is_ready(&self) -> bool {
        self.num_batches > 0
    }

    /// Forgets the running estimate so the next updates rebuild it from scratch.
    pub fn reset(&mut self) {
        self.mean.iter_mut().for_each(|v| *v = E::zero());
        self.var.iter_mut().for_each(|v| *v = E::one());
        self.num_batches = 0;
    }

    /// Folds one batch in. `momentum = None` keeps a cumulative average.
    pub fn update(&mut self, batch_mean: &[E], batch_var_unbiased: &[E], momentum: Option<E>) {
        let mom = match momentum {
            Some(m) if self.num_batches > 0 => m,
            Some(_) => E::one(),
            None => E::one() / E::from_f64_lossy((self.num_batches + 1) as f64),
        };
        let keep = E::one() - mom;
        for c in 0..self.mean.len() {
            self.mean[c] = keep * self.mean[c] + mom * batch_mean[c];
            self.var[c] = keep * self.var[c] + mom * batch_var_unbiased[c];
        }
        self.num_batches += 1;
    }
}

/// Per-channel batch mean and unbiased variance from a train-mode forward.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchMoments<E> {
    pub mean: Vec<E>,
    pub var_unbiased: Vec<E>,
}

fn same_shape<E: Element>(tape: &Tape<E>, a: Var, b: Var, op: &str) -> Result<Vec<usize>> {
    if tape.shape(a) != tape.shape(b) {
        return Err(shape_err!(
            "{op}: shapes {:?} and {:?} differ",
            tape.shape(a),
            tape.shape(b)
        ));
    }
    Ok(tape.shape(a).to_vec())
}

fn check_axis(shape: &[usize], axis: usize, op: &str) -> Result<()> {
    if axis >= shape.len() {
        return Err(shape_err!("{op}: axis {axis} out of range for {shape:?}"));
    }
    Ok(())
}

impl<E: Element> Tape<E> {
    fn unary(&mut self, x: Var, f: impl Fn(E) -> E, op: Op<E>) -> Var {
        let value = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x);
        self.push(shape, value, rg, op)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(E, E) -> E, op: Op<E>, name: &str) -> Result<Var> {
        let shape = same_shape(self, a, b, name)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(shape, value, rg, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    /// Elementwise product of equal-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, x: Var, c: E) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    /// `w·x + b` with one-element tensors `w` and `b`.
    pub fn scale_shift(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        if self.shape(w) != [1] || self.shape(b) != [1] {
            return Err(shape_err!("scale_shift: w and b must have shape [1]"));
        }
        let (wv, bv) = (self.scalar(w), self.scalar(b));
        let value = self.value(x).iter().map(|&v| wv * v + bv).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x) || self.requires_grad(w) || self.requires_grad(b);
        Ok(self.push(shape, value, rg, Op::ScaleShift { x, w, b }))
    }

    /// Multiplies every channel map of `x[N,C,..]` by `s[N,C]`.
    pub fn channel_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() < 2 || self.shape(s) != &xs[..2] {
            return Err(shape_err!(
                "channel_scale: scale {:?} does not match leading dims of {:?}",
                self.shape(s),
                xs
            ));
        }
        let shape = xs.to_vec();
        let inner: usize = shape[2..].iter().product();
        let sv = self.value(s);
        let value = self
            .value(x)
            .chunks(inner)
            .zip(sv)
            .flat_map(|(chunk, &sc)| chunk.iter().map(move |&v| v * sc))
            .collect();
        let rg = self.requires_grad(x) || self.requires_grad(s);
        Ok(self.push(shape, value, rg, Op::ChannelScale { x, s }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > E::zero() { v } else { E::zero() }, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    /// Natural log; non-positive inputs are a contract violation.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.value(x).iter().any(|&v| v <= E::zero()) {
            return Err(contract_err!("log of a non-positive value"));
        }
        Ok(self.unary(x, |v| v.ln(), Op::Log(x)))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if self.value(x).iter().any(|&v| v < E::zero()) {
            return Err(contract_err!("sqrt of a negative value"));
        }
        Ok(self.unary(x, |v| v.sqrt(), Op::Sqrt(x)))
    }

    /// `max(x, min)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, x: Var, min: E) -> Var {
        self.unary(x, |v| if v > min { v } else { min }, Op::ClampMin { x, min })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() || shape.contains(&0) {
            return Err(shape_err!("cannot reshape {:?} to {shape:?}", self.shape(x)));
        }
        let value = self.value(x).to_vec();
        let rg = self.requires_grad(x);
        Ok(self.push(shape.to_vec(), value, rg, Op::Reshape(x)))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let rg = self.requires_grad(x);
        self.push(vec![1], vec![s], rg, Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = E::from_f64_lossy(self.value(x).len() as f64);
        let s: E = self.value(x).iter().copied().sum();
        let rg = self.requires_grad(x);
        self.push(vec![1], vec![s / n], rg, Op::MeanAll(x))
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        check_axis(self.shape(x), axis, "reduce")?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis);
        let xv = self.value(x);
        let mut out = vec![E::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let row = &xv[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc = *acc + v;
                }
            }
        }
        if mean {
            let n = E::from_f64_lossy(len as f64);
            out.iter_mut().for_each(|v| *v = *v / n);
        }
        let mut oshape = shape.clone();
        oshape.remove(axis);
        if oshape.is_empty() {
            oshape.push(1);
        }
        let rg = self.requires_grad(x);
        let op = if mean {
            Op::MeanAxis { x, axis }
        } else {
            Op::SumAxis { x, axis }
        };
        Ok(self.push(oshape, out, rg, op))
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    /// Averages over `axis`, removing it.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        check_axis(self.shape(x), axis, "softmax")?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis);
        let xv = self.value(x);
        let mut out = vec![E::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let m = (0..len).map(|l| xv[idx(l)]).fold(E::neg_infinity(), E::max);
                let mut z = E::zero();
                for l in 0..len {
                    let e = (xv[idx(l)] - m).exp();
                    out[idx(l)] = e;
                    z = z + e;
                }
                for l in 0..len {
                    out[idx(l)] = out[idx(l)] / z;
                }
            }
        }
        let rg = self.requires_grad(x);
        Ok(self.push(shape, out, rg, Op::Softmax { x, axis }))
    }

    /// Divides each fiber along `axis` by its Euclidean norm (floored at 1e-12).
    pub fn l2_normalize(&mut self, x: Var, axis: usize) -> Result<Var> {
        check_axis(self.shape(x), axis, "l2_normalize")?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis);
        let xv = self.value(x);
        let floor = E::from_f64_lossy(1e-12);
        let mut out = vec![E::zero(); xv.len()];
        let mut norms = vec![E::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let ss: E = (0..len).map(|l| xv[idx(l)] * xv[idx(l)]).sum();
                let n = ss.sqrt().max(floor);
                norms[o * inner + i] = n;
                for l in 0..len {
                    out[idx(l)] = xv[idx(l)] / n;
                }
            }
        }
        let rg = self.requires_grad(x);
        Ok(self.push(shape, out, rg, Op::L2Normalize { x, axis, norms }))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(shape_err!("concat of zero tensors"));
        };
        let base = self.shape(first).to_vec();
        check_axis(&base, axis, "concat")?;
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != base.len() || s.iter().enumerate().any(|(d, &e)| d != axis && e != base[d]) {
                return Err(shape_err!("concat: {:?} incompatible with {:?}", s, base));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis];
                out.extend_from_slice(&self.value(v)[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = xs.iter().any(|&v| self.requires_grad(v));
        Ok(self.push(shape, out, rg, Op::Concat { xs: xs.to_vec(), axis }))
    }

    /// Matrix product `a[M,K]·b[K,N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err!("matmul: {:?} x {:?}", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![E::zero(); m * n];
        gemm_acc(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(vec![m, n], out, rg, Op::Matmul(a, b)))
    }

    /// `x[N,Din]·wᵀ + b` with `w[Dout,Din]`, `b[Dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(shape_err!("linear: input {:?} vs weight {:?}", sx, sw));
        }
        let (n, din, dout) = (sx[0], sx[1], sw[0]);
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(shape_err!("linear: bias {:?} vs {dout} outputs", self.shape(b)));
            }
        }
        let wt = transpose(self.value(w), dout, din);
        let mut out = vec![E::zero(); n * dout];
        if let Some(b) = b {
            let bv = self.value(b);
            out.chunks_mut(dout).for_each(|row| row.copy_from_slice(bv));
        }
        gemm_acc(self.value(x), &wt, &mut out, n, din, dout);
        let rg = self.requires_grad(x) || self.requires_grad(w) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(vec![n, dout], out, rg, Op::Linear { x, w, b }))
    }

    /// 2-D convolution of `x[N,Cin,H,W]` with `w[Cout,Cin,k,k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != sw[3] {
            return Err(shape_err!("conv2d: input {:?} vs weight {:?}", sx, sw));
        }
        let k = sw[2];
        if !(k == 1 || k == 3) || pad != k / 2 || !(stride == 1 || stride == 2) {
            return Err(shape_err!("conv2d: unsupported k={k} pad={pad} stride={stride}"));
        }
        let (n, cout) = (sx[0], sw[0]);
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(shape_err!("conv2d: bias {:?} vs {cout} channels", self.shape(b)));
            }
        }
        let g = ConvGeom::new(sx[1], sx[2], sx[3], k, stride, pad)
            .ok_or_else(|| shape_err!("conv2d: input {:?} smaller than kernel", sx))?;
        let p = g.out_len();
        let in_len = sx[1] * sx[2] * sx[3];
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = b.map(|b| self.value(b));
        let mut out = vec![E::zero(); n * cout * p];
        par::for_each_chunk_mut(&mut out, cout * p, |i, dst| {
            if let Some(bv) = bv {
                for (c, row) in dst.chunks_mut(p).enumerate() {
                    row.iter_mut().for_each(|v| *v = bv[c]);
                }
            }
            let xi = &xv[i * in_len..(i + 1) * in_len];
            if g.is_pointwise() {
                gemm_acc(wv, xi, dst, cout, g.patch_len(), p);
            } else {
                let cols = g.im2col(xi);
                gemm_acc(wv, &cols, dst, cout, g.patch_len(), p);
            }
        });
        let rg = self.requires_grad(x) || self.requires_grad(w) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(vec![n, cout, g.ho, g.wo], out, rg, Op::Conv2d { x, w, b, stride, pad }))
    }

    /// Per-channel batch normalization of `x[N,C,H,W]`, `γ·(x − μ)/sqrt(σ² + eps) + β`.
    ///
    /// With `batch_stats` the batch mean and biased variance are used and the
    /// batch moments are returned so the caller can fold them into running
    /// stats. Otherwise `stats` is used and must be ready.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &BnStats<E>,
        batch_stats: bool,
        eps: E,
    ) -> Result<(Var, Option<BatchMoments<E>>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(shape_err!("batch_norm expects [N,C,H,W], got {shape:?}"));
        }
        let (n, c) = (shape[0], shape[1]);
        let hw = shape[2] * shape[3];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || stats.channels() != c {
            return Err(shape_err!("batch_norm: parameters do not match {c} channels"));
        }
        let m = n * hw;
        let xv = self.value(x);
        let (mean, inv_std, moments) = if batch_stats {
            if m < 2 {
                return Err(contract_err!(
                    "batch_norm train mode needs at least 2 values per channel"
                ));
            }
            let mf = E::from_f64_lossy(m as f64);
            let mut mean = vec![E::zero(); c];
            let mut var = vec![E::zero(); c];
            for ch in 0..c {
                let mut s = E::zero();
                for i in 0..n {
                    s = s + xv[(i * c + ch) * hw..(i * c + ch + 1) * hw].iter().copied().sum();
                }
                let mu = s / mf;
                let mut ss = E::zero();
                for i in 0..n {
                    for &v in &xv[(i * c + ch) * hw..(i * c + ch + 1) * hw] {
                        ss = ss + (v - mu) * (v - mu);
                    }
                }
                mean[ch] = mu;
                var[ch] = ss / mf;
            }
            let unbiased = var
                .iter()
                .map(|&v| v * mf / E::from_f64_lossy((m - 1) as f64))
                .collect();
            let inv: Vec<E> = var.iter().map(|&v| E::one() / (v + eps).sqrt()).collect();
            let moments = BatchMoments {
                mean: mean.clone(),
                var_unbiased: unbiased,
            };
            (mean, inv, Some(moments))
        } else {
            if !stats.is_ready() {
                return Err(contract_err!("batch_norm eval mode with unseeded running stats"));
            }
            let inv = stats.var.iter().map(|&v| E::one() / (v + eps).sqrt()).collect();
            (stats.mean.clone(), inv, None)
        };
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let mut xhat = vec![E::zero(); xv.len()];
        let mut out = vec![E::zero(); xv.len()];
        for i in 0..n {
            for ch in 0..c {
                let r = (i * c + ch) * hw..(i * c + ch + 1) * hw;
                for ((xh, o), &v) in xhat[r.clone()].iter_mut().zip(&mut out[r.clone()]).zip(&xv[r]) {
                    *xh = (v - mean[ch]) * inv_std[ch];
                    *o = gv[ch] * *xh + bv[ch];
                }
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(gamma) || self.requires_grad(beta);
        let y = self.push(
            shape,
            out,
            rg,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
        );
        Ok((y, moments))
    }

    /// Mean over the trailing spatial dims: `x[N,C,H,W] → [N,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(shape_err!("global_avg_pool expects [N,C,H,W], got {shape:?}"));
        }
        let hw = shape[2] * shape[3];
        let denom = E::from_f64_lossy(hw as f64);
        let out = self
            .value(x)
            .chunks(hw)
            .map(|ch| ch.iter().copied().sum::<E>() / denom)
            .collect();
        let rg = self.requires_grad(x);
        Ok(self.push(vec![shape[0], shape[1]], out, rg, Op::GlobalAvgPool(x)))
    }

    /// `y[n,d] = Σ_t h[n,d,t]·alpha[n,t]`.
    pub fn time_weighted_sum(&mut self, h: Var, alpha: Var) -> Result<Var> {
        let sh = self.shape(h).to_vec();
        if sh.len() != 3 || self.shape(alpha) != [sh[0], sh[2]] {
            return Err(shape_err!(
                "time_weighted_sum: h {:?} vs alpha {:?}",
                sh,
                self.shape(alpha)
            ));
        }
        let (n, d, t) = (sh[0], sh[1], sh[2]);
        let hv = self.value(h);
        let av = self.value(alpha);
        let mut out = vec![E::zero(); n * d];
        for i in 0..n {
            let a = &av[i * t..(i + 1) * t];
            for j in 0..d {
                let row = &hv[(i * d + j) * t..(i * d + j + 1) * t];
                out[i * d + j] = row.iter().zip(a).map(|(&x, &w)| x * w).sum();
            }
        }
        let rg = self.requires_grad(h) || self.requires_grad(alpha);
        Ok(self.push(vec![n, d], out, rg, Op::TimeWeightedSum { h, alpha }))
    }

    /// Mean softmax cross-entropy of `logits[N,C]` against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() {
            return Err(shape_err!("cross_entropy: logits {:?} vs {} labels", s, labels.len()));
        }
        let (n, c) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(contract_err!("label {bad} out of range for {c} classes"));
        }
        let lv = self.value(logits);
        let mut probs = vec![E::zero(); n * c];
        let mut total = E::zero();
        for i in 0..n {
            let row = &lv[i * c..(i + 1) * c];
            let m = row.iter().copied().fold(E::neg_infinity(), E::max);
            let z: E = row.iter().map(|&v| (v - m).exp()).sum();
            let lse = m + z.ln();
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
            total = total + (lse - row[labels[i]]);
        }
        let loss = total / E::from_f64_lossy(n as f64);
        let rg = self.requires_grad(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            rg,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Replaces each row's target cosine by `cos(θ + m)`, or by `cos θ − m·sin m`
    /// once `θ > π − m`. Non-target entries pass through.
    pub fn aam_margin(&mut self, cos: Var, labels: &[usize], margin: E) -> Result<Var> {
        let s = self.shape(cos).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(shape_err!("aam_margin: cosines {:?} vs {} labels", s, labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= s[1]) {
            return Err(contract_err!("label {bad} out of range for {} classes", s[1]));
        }
        let mut out = self.value(cos).to_vec();
        for (i, &l) in labels.iter().enumerate() {
            let v = &mut out[i * s[1] + l];
            *v = margin_target(*v, margin);
        }
        let rg = self.requires_grad(cos);
        Ok(self.push(
            s,
            out,
            rg,
            Op::AamMargin {
                cos,
                labels: labels.to_vec(),
                margin,
            },
        ))
    }
}

pub(crate) fn sigmoid<E: Element>(v: E) -> E {
    if v >= E::zero() {
        E::one() / (E::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (E::one() + e)
    }
}

pub(crate) fn margin_target<E: Element>(c: E, m: E) -> E {
    let c = c.max(-E::one()).min(E::one());
    if c >= -m.cos() {
        let sin = (E::one() - c * c).max(E::zero()).sqrt();
        c * m.cos() - sin * m.sin()
    } else {
        c - m * m.sin()
    }
}

pub(crate) fn margin_target_grad<E: Element>(c: E, m: E) -> E {
    if c.abs() > E::one() {
        return E::zero();
    }
    if c >= -m.cos() {
        let sin = (E::one() - c * c).max(E::from_f64_lossy(1e-12)).sqrt();
        m.cos() + c * m.sin() / sin
    } else {
        E::one()
    }
}
