//! Independent reference implementations used as test oracles.

/// Brute-force EER: every threshold in the sorted unique scores plus `+∞` is
/// evaluated by direct counting (`O(n²)`), then the first sign change of
/// `FAR − FRR` is linearly interpolated.
pub fn eer_oracle(targets: &[f64], nontargets: &[f64]) -> f64 {
    let mut thresholds: Vec<f64> = targets.iter().chain(nontargets).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.push(f64::INFINITY);
    let points: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&t| {
            let fa = nontargets.iter().filter(|&&s| s >= t).count() as f64 / nontargets.len() as f64;
            let fr = targets.iter().filter(|&&s| s < t).count() as f64 / targets.len() as f64;
            (fa, fr)
        })
        .collect();
    for k in 1..points.len() {
        let (fa, fr) = points[k];
        if fa - fr > 0.0 {
            continue;
        }
        if fa == fr {
            return fa;
        }
        let (pa, pr) = points[k - 1];
        let (d0, d1) = (pa - pr, fa - fr);
        let lambda = d0 / (d0 - d1);
        return pa + lambda * (fa - pa);
    }
    unreachable!("FAR − FRR is −1 at +∞")
}

/// Squeeze-and-excitation on one `[C, H, W]` sample, written as plain loops:
/// channel means, `relu(W1·z + b1)`, `sigmoid(W2·h + b2)`, channel rescale.
pub fn se_scalar_oracle(x: &[f64], c: usize, hw: usize, w1: &[f64], b1: &[f64], w2: &[f64], b2: &[f64]) -> Vec<f64> {
    let hidden = b1.len();
    let mut z = vec![0.0; c];
    for ch in 0..c {
        let mut acc = 0.0;
        for i in 0..hw {
            acc += x[ch * hw + i];
        }
        z[ch] = acc / hw as f64;
    }
    let mut h = vec![0.0; hidden];
    for j in 0..hidden {
        let mut acc = b1[j];
        for ch in 0..c {
            acc += w1[j * c + ch] * z[ch];
        }
        h[j] = if acc > 0.0 { acc } else { 0.0 };
    }
    let mut out = vec![0.0; c * hw];
    for ch in 0..c {
        let mut acc = b2[ch];
        for j in 0..hidden {
            acc += w2[ch * hidden + j] * h[j];
        }
        let s = 1.0 / (1.0 + (-acc).exp());
        for i in 0..hw {
            out[ch * hw + i] = s * x[ch * hw + i];
        }
    }
    out
}
