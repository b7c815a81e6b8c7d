//! Training objectives: additive-angular-margin softmax for speaker
//! classification, and the generalized end-to-end (GE2E) centroid loss for
//! adaptation batches of `P` speakers × `M` utterances.
//!
//! Both normalize embeddings internally, so they depend on directions only.

use crate::autograd::{Tape, Var};
use crate::error::{contract_err, shape_err, Error, Result};
use crate::tensor::{Element, Tensor};

/// Classification head for AAM-Softmax. `weight` is `[classes, dim]`; rows
/// are normalized on every use.
#[derive(Debug, Clone, Copy)]
pub struct AamHead {
    pub weight: Var,
    pub margin: f64,
    pub scale: f64,
}

impl AamHead {
    pub fn new(weight: Var, margin: f64, scale: f64) -> Result<Self> {
        if !(0.0..=0.5).contains(&margin) {
            return Err(Error::Config(format!("margin {margin} outside [0, 0.5]")));
        }
        if !(scale > 0.0) {
            return Err(Error::Config(format!("scale {scale} must be positive")));
        }
        Ok(Self { weight, margin, scale })
    }
}

/// Mean AAM-Softmax loss of `embeddings[N,D]`.
pub fn aam_softmax_loss<E: Element>(
    tape: &mut Tape<E>,
    embeddings: Var,
    labels: &[usize],
    head: &AamHead,
) -> Result<Var> {
    let en = tape.l2_normalize(embeddings, 1)?;
    let wn = tape.l2_normalize(head.weight, 1)?;
    let cos = tape.linear(en, wn, None)?;
    let adj = tape.aam_margin(cos, labels, E::from_f64_lossy(head.margin))?;
    let logits = tape.scale(adj, E::from_f64_lossy(head.scale));
    tape.cross_entropy(logits, labels)
}

/// Learned similarity scale and bias of the GE2E loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ge2eParams {
    pub w: f64,
    pub b: f64,
}

/// Lower bound enforced on `w`.
pub const GE2E_MIN_W: f64 = 1e-6;

impl Default for Ge2eParams {
    fn default() -> Self {
        Self { w: 10.0, b: -5.0 }
    }
}

impl Ge2eParams {
    /// Re-imposes `w > 0` after an optimizer step.
    pub fn clamp(&mut self) {
        self.w = self.w.max(GE2E_MIN_W);
    }
}

/// Softmax-variant GE2E loss of `embeddings[P,M,D]`, speakers along axis 0.
/// `w` and `b` are one-element tape nodes.
pub fn ge2e_loss<E: Element>(tape: &mut Tape<E>, embeddings: Var, w: Var, b: Var) -> Result<Var> {
    let s = tape.shape(embeddings).to_vec();
    if s.len() != 3 {
        return Err(shape_err!("ge2e_loss expects [P,M,D], got {s:?}"));
    }
    let (p, m, d) = (s[0], s[1], s[2]);
    if m < 2 {
        return Err(contract_err!(
            "ge2e_loss needs at least 2 utterances per speaker, got {m}"
        ));
    }
    if p < 2 {
        return Err(contract_err!("ge2e_loss needs at least 2 speakers, got {p}"));
    }
    let n = p * m;
    let flat = tape.reshape(embeddings, &[n, d])?;
    let e = tape.l2_normalize(flat, 1)?;

    let inv_m = E::from_f64_lossy(1.0 / m as f64);
    let avg = tape.constant(Tensor::from_fn(vec![p, n], |i| {
        if (i % n) / m == i / n {
            inv_m
        } else {
            E::zero()
        }
    }));
    let own = Tensor::from_fn(vec![n, p], |i| if (i / p) / m == i % p { E::one() } else { E::zero() });
    let other = tape.constant(Tensor::from_fn(vec![n, p], |i| E::one() - own.data()[i]));
    let own = tape.constant(own);

    let centroids = tape.matmul(avg, e)?;
    let cn = tape.l2_normalize(centroids, 1)?;
    let cross = tape.linear(e, cn, None)?;

    // Own centroid without the utterance itself: (M·c_j − e_ji) / (M − 1).
    let own_c = tape.matmul(own, centroids)?;
    let own_c = tape.scale(own_c, E::from_f64_lossy(m as f64 / (m - 1) as f64));
    let e_part = tape.scale(e, E::from_f64_lossy(1.0 / (m - 1) as f64));
    let excl = tape.sub(own_c, e_part)?;
    let excl = tape.l2_normalize(excl, 1)?;
    let dots = tape.mul(e, excl)?;
    let self_cos = tape.sum_axis(dots, 1)?;
    let self_cos = tape.reshape(self_cos, &[n, 1])?;
    let ones = tape.constant(Tensor::full(vec![1, p], E::one()));
    let self_cos = tape.matmul(self_cos, ones)?;

    let keep = tape.mul(cross, other)?;
    let put = tape.mul(self_cos, own)?;
    let sim = tape.add(keep, put)?;
    let w = tape.clamp_min(w, E::from_f64_lossy(GE2E_MIN_W));
    let logits = tape.scale_shift(sim, w, b)?;
    let labels: Vec<usize> = (0..n).map(|i| i / m).collect();
    tape.cross_entropy(logits, &labels)
}

/// Margin for `epoch` (0-based) under a linear warm-up from 0 to `target`
/// across the first `ramp_fraction` of `total_epochs`. A zero fraction disables the ramp.
pub fn margin_at(epoch: usize, total_epochs: usize, target: f64, ramp_fraction: f64) -> f64 {
    let ramp = ramp_fraction * total_epochs as f64;
    if ramp <= 0.0 {
        return target;
    }
    target * (epoch as f64 / ramp).min(1.0)
}
