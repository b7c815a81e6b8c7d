//! Finite-difference checks for every differentiable op and the composite
//! blocks, in `f64`. Shared by the gradient suite and the acceptance target.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sebn_core::autograd::{grad_check_many, BnStats, Tape, Var};
use sebn_core::losses::{aam_softmax_loss, ge2e_loss, AamHead};
use sebn_core::model::{asp_pool, se_forward, AspParams, BnPlan, Bound, Forward, ModelConfig, SeBlock, SpeakerNet};
use sebn_core::tensor::Tensor;
use sebn_core::Result;

pub const TOL: f64 = 1e-4;
const EPS: f64 = 1e-6;

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero, for ops with a kink or pole there.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(lo..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(0.2..2.0))
}

/// Reduces a non-scalar output to a scalar with fixed random weights, so
/// every output coordinate contributes a distinct amount.
fn probe(t: &mut Tape<f64>, y: Var) -> Result<Var> {
    let shape = t.shape(y).to_vec();
    let w = Tensor::from_fn(shape, |i| ((i as f64 + 1.0) * 0.73).sin());
    let c = t.constant(w);
    let z = t.mul(y, c)?;
    Ok(t.sum_all(z))
}

pub type Check = Box<dyn Fn() -> f64>;

fn check<F>(inputs: Vec<Tensor<f64>>, f: F) -> Check
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static,
{
    Box::new(move || grad_check_many(|t, v| f(t, v).and_then(|y| probe(t, y)), &inputs, EPS).expect("check runs"))
}

pub fn op_checks() -> Vec<(&'static str, Check)> {
    let mut r = ChaCha8Rng::seed_from_u64(11);
    let r = &mut r;
    let s = [2, 3];
    vec![
        (
            "add",
            check(vec![rand_tensor(r, &s), rand_tensor(r, &s)], |t, v| t.add(v[0], v[1])),
        ),
        (
            "sub",
            check(vec![rand_tensor(r, &s), rand_tensor(r, &s)], |t, v| t.sub(v[0], v[1])),
        ),
        (
            "mul",
            check(vec![rand_tensor(r, &s), rand_tensor(r, &s)], |t, v| t.mul(v[0], v[1])),
        ),
        ("scale", check(vec![rand_tensor(r, &s)], |t, v| Ok(t.scale(v[0], -1.7)))),
        (
            "scale_shift",
            check(
                vec![rand_tensor(r, &s), rand_tensor(r, &[1]), rand_tensor(r, &[1])],
                |t, v| t.scale_shift(v[0], v[1], v[2]),
            ),
        ),
        (
            "channel_scale",
            check(vec![rand_tensor(r, &[2, 3, 2, 2]), rand_tensor(r, &[2, 3])], |t, v| {
                t.channel_scale(v[0], v[1])
            }),
        ),
        (
            "relu",
            check(vec![away_from_zero(r, &[3, 4], 0.05)], |t, v| Ok(t.relu(v[0]))),
        ),
        ("sigmoid", check(vec![rand_tensor(r, &s)], |t, v| Ok(t.sigmoid(v[0])))),
        ("tanh", check(vec![rand_tensor(r, &s)], |t, v| Ok(t.tanh(v[0])))),
        ("log", check(vec![positive(r, &s)], |t, v| t.log(v[0]))),
        ("sqrt", check(vec![positive(r, &s)], |t, v| t.sqrt(v[0]))),
        (
            "clamp_min",
            check(
                vec![away_from_zero(r, &[3, 4], 0.05)],
                |t, v| Ok(t.clamp_min(v[0], 0.0)),
            ),
        ),
        (
            "reshape",
            check(vec![rand_tensor(r, &[2, 6])], |t, v| t.reshape(v[0], &[3, 4])),
        ),
        ("sum_all", check(vec![rand_tensor(r, &s)], |t, v| Ok(t.sum_all(v[0])))),
        ("mean_all", check(vec![rand_tensor(r, &s)], |t, v| Ok(t.mean_all(v[0])))),
        (
            "sum_axis",
            check(vec![rand_tensor(r, &[2, 3, 4])], |t, v| t.sum_axis(v[0], 1)),
        ),
        (
            "mean_axis",
            check(vec![rand_tensor(r, &[2, 3, 4])], |t, v| t.mean_axis(v[0], 2)),
        ),
        (
            "softmax",
            check(vec![rand_tensor(r, &[3, 4])], |t, v| t.softmax(v[0], 1)),
        ),
        (
            "softmax_axis0",
            check(vec![rand_tensor(r, &[3, 4])], |t, v| t.softmax(v[0], 0)),
        ),
        (
            "l2_normalize",
            check(vec![rand_tensor(r, &[3, 4])], |t, v| t.l2_normalize(v[0], 1)),
        ),
        (
            "concat",
            check(vec![rand_tensor(r, &[2, 3, 2]), rand_tensor(r, &[2, 1, 2])], |t, v| {
                t.concat(&[v[0], v[1]], 1)
            }),
        ),
        (
            "matmul",
            check(vec![rand_tensor(r, &[3, 4]), rand_tensor(r, &[4, 2])], |t, v| {
                t.matmul(v[0], v[1])
            }),
        ),
        (
            "linear",
            check(
                vec![rand_tensor(r, &[3, 4]), rand_tensor(r, &[2, 4]), rand_tensor(r, &[2])],
                |t, v| t.linear(v[0], v[1], Some(v[2])),
            ),
        ),
        (
            "linear_no_bias",
            check(vec![rand_tensor(r, &[3, 4]), rand_tensor(r, &[2, 4])], |t, v| {
                t.linear(v[0], v[1], None)
            }),
        ),
        (
            "conv2d_3x3",
            check(
                vec![
                    rand_tensor(r, &[2, 2, 5, 4]),
                    rand_tensor(r, &[3, 2, 3, 3]),
                    rand_tensor(r, &[3]),
                ],
                |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1),
            ),
        ),
        (
            "conv2d_stride2",
            check(
                vec![rand_tensor(r, &[2, 2, 6, 5]), rand_tensor(r, &[2, 2, 3, 3])],
                |t, v| t.conv2d(v[0], v[1], None, 2, 1),
            ),
        ),
        (
            "conv2d_1x1_stride2",
            check(
                vec![rand_tensor(r, &[1, 3, 4, 4]), rand_tensor(r, &[2, 3, 1, 1])],
                |t, v| t.conv2d(v[0], v[1], None, 2, 0),
            ),
        ),
        (
            "batch_norm_train",
            check(
                vec![rand_tensor(r, &[3, 2, 2, 3]), positive(r, &[2]), rand_tensor(r, &[2])],
                |t, v| {
                    let st = BnStats::new(2);
                    Ok(t.batch_norm(v[0], v[1], v[2], &st, true, 1e-5)?.0)
                },
            ),
        ),
        (
            "batch_norm_eval",
            check(
                vec![rand_tensor(r, &[2, 2, 2, 3]), positive(r, &[2]), rand_tensor(r, &[2])],
                |t, v| {
                    let st = BnStats::seeded(vec![0.1, -0.2], vec![0.5, 2.0]);
                    Ok(t.batch_norm(v[0], v[1], v[2], &st, false, 1e-5)?.0)
                },
            ),
        ),
        (
            "global_avg_pool",
            check(vec![rand_tensor(r, &[2, 3, 2, 3])], |t, v| t.global_avg_pool(v[0])),
        ),
        (
            "time_weighted_sum",
            check(vec![rand_tensor(r, &[2, 3, 4]), rand_tensor(r, &[2, 4])], |t, v| {
                t.time_weighted_sum(v[0], v[1])
            }),
        ),
        (
            "cross_entropy",
            check(vec![rand_tensor(r, &[3, 4])], |t, v| t.cross_entropy(v[0], &[0, 3, 1])),
        ),
        (
            "aam_margin",
            check(
                vec![Tensor::from_fn(vec![3, 4], |i| ((i as f64) * 0.37).sin() * 0.9)],
                |t, v| t.aam_margin(v[0], &[1, 0, 3], 0.2),
            ),
        ),
    ]
}

pub fn composite_checks() -> Vec<(&'static str, Check)> {
    let mut r = ChaCha8Rng::seed_from_u64(12);
    let r = &mut r;
    let (c, red) = (4, 2);
    vec![
        (
            "se_block",
            check(
                vec![
                    rand_tensor(r, &[2, c, 3, 3]),
                    rand_tensor(r, &[c / red, c]),
                    rand_tensor(r, &[c / red]),
                    rand_tensor(r, &[c, c / red]),
                    rand_tensor(r, &[c]),
                ],
                |t, v| {
                    let se = SeBlock {
                        w1: v[1],
                        b1: v[2],
                        w2: v[3],
                        b2: v[4],
                    };
                    se_forward(t, v[0], &se)
                },
            ),
        ),
        (
            "asp",
            check(
                vec![
                    rand_tensor(r, &[2, 3, 5]),
                    rand_tensor(r, &[4, 3, 1, 1]),
                    rand_tensor(r, &[4]),
                    rand_tensor(r, &[1, 4, 1, 1]),
                ],
                |t, v| {
                    let p = AspParams {
                        attn_w: v[1],
                        attn_b: v[2],
                        score_w: v[3],
                    };
                    asp_pool(t, v[0], &p)
                },
            ),
        ),
        ("aam_softmax_loss", {
            let inputs = vec![rand_tensor(r, &[4, 5]), rand_tensor(r, &[3, 5])];
            Box::new(move || {
                // The scale of 30 inflates the loss relative to its smallest partials,
                // so the default step is dominated by cancellation.
                let f = |t: &mut Tape<f64>, v: &[Var]| {
                    let head = AamHead::new(v[1], 0.2, 30.0)?;
                    aam_softmax_loss(t, v[0], &[0, 2, 1, 2], &head)
                };
                grad_check_many(f, &inputs, 1e-4).unwrap()
            })
        }),
        ("ge2e_loss", {
            let inputs = vec![rand_tensor(r, &[3, 3, 4]), Tensor::scalar(10.0), Tensor::scalar(-5.0)];
            Box::new(move || {
                // d/db is identically zero; a wider step keeps roundoff below the error floor.
                grad_check_many(|t, v| ge2e_loss(t, v[0], v[1], v[2]), &inputs, 1e-4).unwrap()
            })
        }),
        ("resnet_se_backbone", Box::new(backbone_check)),
    ]
}

/// Stem, one ResNetSE block per group (with the shortcut projections) and the
/// pooling head, all in train-mode BN.
fn backbone_check() -> f64 {
    let cfg = ModelConfig {
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
    };
    let net = SpeakerNet::new(cfg).unwrap();
    let store = net.init_params::<f64>(21);
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut inputs = vec![Tensor::from_fn(vec![2, 1, 8, 16], |i| {
        ((i * 37 % 53) as f64 - 26.0) / 13.0
    })];
    inputs.extend(store.iter().map(|(_, t)| t.clone()));
    let plan = BnPlan::train();
    grad_check_many(
        |t, v| {
            let vars = Bound::from_pairs(names.iter().cloned().zip(v[1..].iter().copied()));
            let mut f = Forward::new(t, &store, &vars, &plan, 1e-5);
            let y = net.forward(&mut f, v[0])?;
            probe(t, y)
        },
        &inputs,
        EPS,
    )
    .unwrap()
}
