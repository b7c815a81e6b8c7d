mod common;

use common::oracles::se_scalar_oracle;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sebn_core::adapters::refresh_layers;
use sebn_core::autograd::{BnStats, Tape};
use sebn_core::model::{asp_pool, se_forward, AspParams, ModelConfig, SeBlock, SpeakerNet};
use sebn_core::tensor::Tensor;

fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn se_out(x: &Tensor<f64>, w1: Vec<f64>, b1: Vec<f64>, w2: Vec<f64>, b2: Vec<f64>) -> Vec<f64> {
    let (c, h) = (x.shape()[1], b1.len());
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let se = SeBlock {
        w1: tape.constant(t(&[h, c], w1)),
        b1: tape.constant(t(&[h], b1)),
        w2: tape.constant(t(&[c, h], w2)),
        b2: tape.constant(t(&[c], b2)),
    };
    let y = se_forward(&mut tape, xv, &se).unwrap();
    tape.value(y).to_vec()
}

#[test]
fn se_with_zero_weights_halves_the_input() {
    let x = Tensor::from_fn(vec![1, 2, 2, 2], |i| i as f64 - 3.5);
    let y = se_out(&x, vec![0.0; 2], vec![0.0], vec![0.0; 2], vec![0.0; 2]);
    for (a, b) in x.data().iter().zip(&y) {
        assert_eq!(*b, 0.5 * a);
    }
}

#[test]
fn se_with_saturated_gate_is_identity() {
    let x = Tensor::from_fn(vec![1, 2, 2, 2], |i| (i as f64 * 1.3).sin());
    let y = se_out(&x, vec![0.0; 2], vec![0.0], vec![0.0; 2], vec![100.0; 2]);
    for (a, b) in x.data().iter().zip(&y) {
        assert!((a - b).abs() <= 1e-6 * a.abs());
    }
}

#[test]
fn se_matches_scalar_loops() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let mut draw = |n: usize| (0..n).map(|_| r.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    let (c, h, hw) = (4, 2, 6);
    let x = draw(c * hw);
    let (w1, b1, w2, b2) = (draw(h * c), draw(h), draw(c * h), draw(c));
    let got = se_out(
        &t(&[1, c, 2, 3], x.clone()),
        w1.clone(),
        b1.clone(),
        w2.clone(),
        b2.clone(),
    );
    let want = se_scalar_oracle(&x, c, hw, &w1, &b1, &w2, &b2);
    for (a, b) in got.iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
}

fn asp_out(h: Tensor<f64>, attn_w: Vec<f64>) -> Vec<f64> {
    let d = h.shape()[1];
    let hidden = attn_w.len() / d;
    let mut tape = Tape::new();
    let hv = tape.constant(h);
    let p = AspParams {
        attn_w: tape.constant(t(&[hidden, d, 1, 1], attn_w)),
        attn_b: tape.constant(t(&[hidden], vec![0.1; hidden])),
        score_w: tape.constant(t(&[1, hidden, 1, 1], (0..hidden).map(|i| 0.5 - i as f64).collect())),
    };
    let y = asp_pool(&mut tape, hv, &p).unwrap();
    tape.value(y).to_vec()
}

#[test]
fn asp_of_constant_frames() {
    // Any attention over identical frames gives the frame and a clamped variance.
    let h = Tensor::from_fn(vec![1, 2, 5], |i| if i < 5 { 1.5 } else { -0.25 });
    let y = asp_out(h, vec![0.3, -0.7, 0.2, 0.9]);
    assert!((y[0] - 1.5).abs() < 1e-12 && (y[1] + 0.25).abs() < 1e-12);
    for sd in &y[2..] {
        assert!((sd - 1e-5f64.sqrt()).abs() < 1e-12);
    }
}

#[test]
fn asp_with_zero_attention_is_plain_statistics() {
    let frames = [1.0, 2.0, 4.0, 7.0];
    let h = t(&[1, 1, 4], frames.to_vec());
    let y = asp_out(h, vec![0.0, 0.0]);
    let mean = frames.iter().sum::<f64>() / 4.0;
    let var = frames.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
    assert!((y[0] - mean).abs() < 1e-12);
    assert!((y[1] - var.sqrt()).abs() < 1e-12);
}

#[test]
fn batch_norm_standardizes_then_applies_affine() {
    let mut r = ChaCha8Rng::seed_from_u64(8);
    let x = Tensor::from_fn(vec![6, 2, 4, 5], |_| 3.0 + 2.0 * r.random_range(-1.0..1.0));
    let per = 6 * 4 * 5;
    for (gamma, beta) in [(1.0, 0.0), (2.0, 3.0)] {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let g = tape.constant(t(&[2], vec![gamma; 2]));
        let b = tape.constant(t(&[2], vec![beta; 2]));
        let (y, _) = tape.batch_norm(xv, g, b, &BnStats::new(2), true, 1e-5).unwrap();
        let y = tape.value(y);
        for ch in 0..2 {
            let vals: Vec<f64> = (0..6)
                .flat_map(|n| y[(n * 2 + ch) * 20..(n * 2 + ch + 1) * 20].to_vec())
                .collect();
            assert_eq!(vals.len(), per);
            let m = vals.iter().sum::<f64>() / per as f64;
            let v = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / per as f64;
            assert!((m - beta).abs() < 1e-3, "mean {m}");
            assert!((v - gamma * gamma).abs() < 1e-3 * gamma * gamma, "var {v}");
        }
    }
}

fn small_net() -> SpeakerNet {
    SpeakerNet::new(ModelConfig {
        channels: [4, 4, 8, 8],
        blocks_per_group: [1, 1, 1, 1],
        reduction: 2,
        mel_bins: 8,
        embedding_dim: 3,
        num_classes: 0,
        use_se: true,
        asp_hidden: 3,
        bn_eps: 1e-5,
        bn_momentum: 0.1,
    })
    .unwrap()
}

fn batches(scale: f64) -> Vec<Tensor<f64>> {
    let mut r = ChaCha8Rng::seed_from_u64(21);
    (0..3)
        .map(|_| Tensor::from_fn(vec![4, 1, 8, 12], |_| scale * (0.5 + r.random_range(-1.0..1.0))))
        .collect()
}

#[test]
fn refresh_tracks_an_input_gain() {
    let net = small_net();
    let layers: Vec<String> = net.bn_layers().into_iter().map(|(l, _)| l).collect();
    let mut base = net.init_params::<f64>(1);
    refresh_layers(&net, &mut base, &layers, &batches(1.0)).unwrap();
    let mut again = base.clone();
    refresh_layers(&net, &mut again, &layers, &batches(1.0)).unwrap();
    assert_eq!(
        base.bn_stats("stem.bn"),
        again.bn_stats("stem.bn"),
        "refresh is not cumulative across calls"
    );

    let gain = 2.5;
    let mut loud = base.clone();
    refresh_layers(&net, &mut loud, &layers, &batches(gain)).unwrap();
    let (a, b) = (base.bn_stats("stem.bn").unwrap(), loud.bn_stats("stem.bn").unwrap());
    for c in 0..a.mean.len() {
        assert!((b.mean[c] - gain * a.mean[c]).abs() < 1e-9 * (1.0 + a.mean[c].abs()));
        assert!((b.var[c] - gain * gain * a.var[c]).abs() < 1e-9 * a.var[c]);
    }
    // Past the stem the gain is normalized away.
    for (layer, _) in net.bn_layers().into_iter().skip(1) {
        let (a, b) = (base.bn_stats(&layer).unwrap(), loud.bn_stats(&layer).unwrap());
        for c in 0..a.mean.len() {
            assert!(
                (a.mean[c] - b.mean[c]).abs() < 1e-3 * (1.0 + a.mean[c].abs()),
                "{layer}"
            );
        }
    }
}
