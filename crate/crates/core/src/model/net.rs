//! ResNetSE speaker-embedding network.
//!
//! Layout, for input features `[N, 1, F, T]`:
//!
//! ```text
//! stem      3×3 conv → BN → ReLU
//! group1-4  ResNetSE blocks, first block of groups 2-4 has stride 2
//! pool      attentive statistics pooling over time (frequency folded into channels)
//! embed     fully connected projection, no activation
//! ```
//!
//! Each block computes `relu(SE(bn2(conv2(relu(bn1(conv1(x)))))) + shortcut(x))`;
//! the SE block rescales the residual branch before the skip addition.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::config::ModelConfig;
use super::store::{Bound, ParameterStore};
use crate::autograd::{BatchMoments, BnStats, Tape, Var};
use crate::error::{contract_err, shape_err, Result};
use crate::par;
use crate::rng::SeedStream;
use crate::tensor::{Element, Tensor};

/// Variance floor inside attentive statistics pooling.
pub const ASP_EPS: f64 = 1e-5;

/// Shortest utterance, in frames, that [`SpeakerNet::embed`] accepts.
pub const MIN_FRAMES: usize = 16;

/// Tag recorded in checkpoints for where SE sits in each block.
pub const SE_PLACEMENT: &str = "residual-branch-before-add";

/// How a batch-norm layer normalizes during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; optionally folded into the running stats afterwards.
    Train { update_stats: bool },
    /// Running statistics.
    Eval,
}

/// Per-layer batch-norm behavior for one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BnPlan {
    default: BnMode,
    overrides: BTreeMap<String, BnMode>,
}

impl BnPlan {
    pub fn uniform(mode: BnMode) -> Self {
        Self {
            default: mode,
            overrides: BTreeMap::new(),
        }
    }

    pub fn train() -> Self {
        Self::uniform(BnMode::Train { update_stats: true })
    }

    pub fn eval() -> Self {
        Self::uniform(BnMode::Eval)
    }

    pub fn with(mut self, layer: impl Into<String>, mode: BnMode) -> Self {
        self.overrides.insert(layer.into(), mode);
        self
    }

    pub fn mode(&self, layer: &str) -> BnMode {
        self.overrides.get(layer).copied().unwrap_or(self.default)
    }
}

pub fn block_prefix(group: usize, block: usize) -> String {
    format!("group{}.block{}", group + 1, block + 1)
}

/// Tape handles of one SE block's parameters.
#[derive(Debug, Clone, Copy)]
pub struct SeBlock {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl SeBlock {
    /// Parameters of an SE block on `c` channels with reduction `r`: `2c²/r + c/r + c`.
    pub fn param_count(c: usize, r: usize) -> usize {
        2 * c * c / r + c / r + c
    }
}

/// Squeeze-and-excitation: `x · sigmoid(W2·relu(W1·GAP(x) + b1) + b2)` per channel.
pub fn se_forward<E: Element>(tape: &mut Tape<E>, x: Var, se: &SeBlock) -> Result<Var> {
    let z = tape.global_avg_pool(x)?;
    let h = tape.linear(z, se.w1, Some(se.b1))?;
    let h = tape.relu(h);
    let s = tape.linear(h, se.w2, Some(se.b2))?;
    let s = tape.sigmoid(s);
    tape.channel_scale(x, s)
}

/// Handles of the attentive-statistics-pooling parameters.
#[derive(Debug, Clone, Copy)]
pub struct AspParams {
    /// `[H, D, 1, 1]`
    pub attn_w: Var,
    /// `[H]`
    pub attn_b: Var,
    /// `[1, H, 1, 1]`
    pub score_w: Var,
}

/// Attentive statistics pooling of `h[N,D,T]` into `[N, 2D]` (weighted mean ‖ weighted std).
pub fn asp_pool<E: Element>(tape: &mut Tape<E>, h: Var, p: &AspParams) -> Result<Var> {
    let s = tape.shape(h).to_vec();
    if s.len() != 3 {
        return Err(shape_err!("asp_pool expects [N,D,T], got {s:?}"));
    }
    let (n, d, t) = (s[0], s[1], s[2]);
    if t < 2 {
        return Err(contract_err!("asp_pool needs at least 2 frames, got {t}"));
    }
    let h4 = tape.reshape(h, &[n, d, t, 1])?;
    let a = tape.conv2d(h4, p.attn_w, Some(p.attn_b), 1, 0)?;
    let a = tape.tanh(a);
    let e = tape.conv2d(a, p.score_w, None, 1, 0)?;
    let e = tape.reshape(e, &[n, t])?;
    let alpha = tape.softmax(e, 1)?;
    let mu = tape.time_weighted_sum(h, alpha)?;
    let h2 = tape.mul(h, h)?;
    let m2 = tape.time_weighted_sum(h2, alpha)?;
    let mu2 = tape.mul(mu, mu)?;
    let var = tape.sub(m2, mu2)?;
    let var = tape.clamp_min(var, E::from_f64_lossy(ASP_EPS));
    let sd = tape.sqrt(var)?;
    tape.concat(&[mu, sd], 1)
}

/// State threaded through one forward pass.
pub struct Forward<'a, E> {
    pub tape: &'a mut Tape<E>,
    store: &'a ParameterStore<E>,
    vars: &'a Bound,
    plan: &'a BnPlan,
    eps: E,
    /// Batch moments of layers whose plan asks for a stats update.
    pub updates: Vec<(String, BatchMoments<E>)>,
}

impl<'a, E: Element> Forward<'a, E> {
    pub fn new(
        tape: &'a mut Tape<E>,
        store: &'a ParameterStore<E>,
        vars: &'a Bound,
        plan: &'a BnPlan,
        eps: f64,
    ) -> Self {
        Self {
            tape,
            store,
            vars,
            plan,
            eps: E::from_f64_lossy(eps),
            updates: Vec::new(),
        }
    }

    pub fn param(&self, name: &str) -> Result<Var> {
        self.vars.get(name)
    }

    fn conv(&mut self, x: Var, name: &str, stride: usize) -> Result<Var> {
        let w = self.param(&format!("{name}.weight"))?;
        let pad = self.tape.shape(w)[2] / 2;
        self.tape.conv2d(x, w, None, stride, pad)
    }

    fn bn(&mut self, x: Var, layer: &str) -> Result<Var> {
        let gamma = self.param(&format!("{layer}.gamma"))?;
        let beta = self.param(&format!("{layer}.beta"))?;
        let stats = self
            .store
            .bn_stats(layer)
            .ok_or_else(|| contract_err!("missing running stats for {layer}"))?;
        let mode = self.plan.mode(layer);
        let batch = matches!(mode, BnMode::Train { .. });
        let (y, moments) = self.tape.batch_norm(x, gamma, beta, stats, batch, self.eps)?;
        if let (BnMode::Train { update_stats: true }, Some(m)) = (mode, moments) {
            self.updates.push((layer.to_string(), m));
        }
        Ok(y)
    }

    fn se(&mut self, prefix: &str) -> Result<SeBlock> {
        Ok(SeBlock {
            w1: self.param(&format!("{prefix}.se.w1"))?,
            b1: self.param(&format!("{prefix}.se.b1"))?,
            w2: self.param(&format!("{prefix}.se.w2"))?,
            b2: self.param(&format!("{prefix}.se.b2"))?,
        })
    }
}

/// The speaker-embedding network. Parameters live in a [`ParameterStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerNet {
    cfg: ModelConfig,
}

struct BlockSpec {
    prefix: String,
    cin: usize,
    cout: usize,
    stride: usize,
}

impl BlockSpec {
    fn has_downsample(&self) -> bool {
        self.stride != 1 || self.cin != self.cout
    }
}

impl SpeakerNet {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn blocks(&self) -> Vec<BlockSpec> {
        let mut out = Vec::new();
        let mut cin = self.cfg.channels[0];
        for g in 0..4 {
            let cout = self.cfg.channels[g];
            for b in 0..self.cfg.blocks_per_group[g] {
                let stride = if b == 0 { ModelConfig::group_stride(g) } else { 1 };
                out.push(BlockSpec {
                    prefix: block_prefix(g, b),
                    cin,
                    cout,
                    stride,
                });
                cin = cout;
            }
        }
        out
    }

    /// Every parameter name and shape, in forward order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let c = &self.cfg;
        let mut v: Vec<(String, Vec<usize>)> = Vec::new();
        let bn = |v: &mut Vec<(String, Vec<usize>)>, layer: &str, ch: usize| {
            v.push((format!("{layer}.gamma"), vec![ch]));
            v.push((format!("{layer}.beta"), vec![ch]));
        };
        v.push(("stem.conv.weight".into(), vec![c.channels[0], 1, 3, 3]));
        bn(&mut v, "stem.bn", c.channels[0]);
        for blk in self.blocks() {
            let p = &blk.prefix;
            v.push((format!("{p}.conv1.weight"), vec![blk.cout, blk.cin, 3, 3]));
            bn(&mut v, &format!("{p}.bn1"), blk.cout);
            v.push((format!("{p}.conv2.weight"), vec![blk.cout, blk.cout, 3, 3]));
            bn(&mut v, &format!("{p}.bn2"), blk.cout);
            if c.use_se {
                let hid = blk.cout / c.reduction;
                v.push((format!("{p}.se.w1"), vec![hid, blk.cout]));
                v.push((format!("{p}.se.b1"), vec![hid]));
                v.push((format!("{p}.se.w2"), vec![blk.cout, hid]));
                v.push((format!("{p}.se.b2"), vec![blk.cout]));
            }
            if blk.has_downsample() {
                v.push((format!("{p}.downsample.conv.weight"), vec![blk.cout, blk.cin, 1, 1]));
                bn(&mut v, &format!("{p}.downsample.bn"), blk.cout);
            }
        }
        let d = c.pooled_dim();
        v.push(("asp.attn.weight".into(), vec![c.asp_hidden, d, 1, 1]));
        v.push(("asp.attn.bias".into(), vec![c.asp_hidden]));
        v.push(("asp.score.weight".into(), vec![1, c.asp_hidden, 1, 1]));
        v.push(("embed.weight".into(), vec![c.embedding_dim, 2 * d]));
        v.push(("embed.bias".into(), vec![c.embedding_dim]));
        if c.num_classes > 0 {
            v.push(("head.weight".into(), vec![c.num_classes, c.embedding_dim]));
        }
        v
    }

    /// Batch-norm layer names and channel counts.
    pub fn bn_layers(&self) -> Vec<(String, usize)> {
        let mut v = vec![("stem.bn".to_string(), self.cfg.channels[0])];
        for blk in self.blocks() {
            v.push((format!("{}.bn1", blk.prefix), blk.cout));
            v.push((format!("{}.bn2", blk.prefix), blk.cout));
            if blk.has_downsample() {
                v.push((format!("{}.downsample.bn", blk.prefix), blk.cout));
            }
        }
        v
    }

    /// Fresh parameters: He-uniform weights, zero biases, `γ = 1`, `β = 0`,
    /// unseeded running stats. All parameters start trainable.
    pub fn init_params<E: Element>(&self, seed: u64) -> ParameterStore<E> {
        let root = SeedStream::new(seed).split("init");
        let mut store = ParameterStore::new();
        for (name, shape) in self.param_shapes() {
            let t = if name.ends_with(".gamma") {
                Tensor::full(shape, E::one())
            } else if name.ends_with(".beta")
                || name.ends_with(".bias")
                || name.ends_with(".b1")
                || name.ends_with(".b2")
            {
                Tensor::zeros(shape)
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                let mut rng = root.split(&name).rng();
                Tensor::from_fn(shape, |_| E::from_f64_lossy(dist.sample(&mut rng)))
            };
            store
                .insert(name, t.with_requires_grad(true))
                .expect("generated names are unique");
        }
        for (layer, ch) in self.bn_layers() {
            store
                .insert_bn(layer, BnStats::new(ch))
                .expect("generated names are unique");
        }
        store
    }

    /// Checks that `store` holds exactly this architecture's parameters.
    pub fn check_store<E: Element>(&self, store: &ParameterStore<E>) -> Result<()> {
        let shapes = self.param_shapes();
        if store.len() != shapes.len() {
            return Err(contract_err!(
                "store has {} parameters, model expects {}",
                store.len(),
                shapes.len()
            ));
        }
        for (name, shape) in &shapes {
            let t = store.require(name)?;
            if t.shape() != shape.as_slice() {
                return Err(shape_err!("{name}: stored {:?}, expected {shape:?}", t.shape()));
            }
        }
        for (layer, ch) in self.bn_layers() {
            match store.bn_stats(&layer) {
                Some(s) if s.channels() == ch => {}
                _ => return Err(contract_err!("missing or mismatched running stats for {layer}")),
            }
        }
        Ok(())
    }

    fn block_forward<E: Element>(&self, f: &mut Forward<'_, E>, x: Var, blk: &BlockSpec) -> Result<Var> {
        let p = &blk.prefix;
        let out = f.conv(x, &format!("{p}.conv1"), blk.stride)?;
        let out = f.bn(out, &format!("{p}.bn1"))?;
        let out = f.tape.relu(out);
        let out = f.conv(out, &format!("{p}.conv2"), 1)?;
        let mut out = f.bn(out, &format!("{p}.bn2"))?;
        if self.cfg.use_se {
            let se = f.se(p)?;
            out = se_forward(f.tape, out, &se)?;
        }
        let short = if blk.has_downsample() {
            let s = f.conv(x, &format!("{p}.downsample.conv"), blk.stride)?;
            f.bn(s, &format!("{p}.downsample.bn"))?
        } else {
            x
        };
        let sum = f.tape.add(out, short)?;
        Ok(f.tape.relu(sum))
    }

    /// `[N,1,F,T] → [N, C4, F/8, T']`.
    pub fn backbone_forward<E: Element>(&self, f: &mut Forward<'_, E>, x: Var) -> Result<Var> {
        let s = f.tape.shape(x).to_vec();
        if s.len() != 4 || s[1] != 1 {
            return Err(shape_err!("backbone expects [N,1,F,T], got {s:?}"));
        }
        if !s[2].is_multiple_of(8) {
            return Err(shape_err!("frequency extent {} not divisible by 8", s[2]));
        }
        if s[2] != self.cfg.mel_bins {
            return Err(shape_err!(
                "input has {} bins, model expects {}",
                s[2],
                self.cfg.mel_bins
            ));
        }
        let out = f.conv(x, "stem.conv", 1)?;
        let out = f.bn(out, "stem.bn")?;
        let mut out = f.tape.relu(out);
        for blk in self.blocks() {
            out = self.block_forward(f, out, &blk)?;
        }
        Ok(out)
    }

    /// `[N,1,F,T] → [N, embedding_dim]`.
    pub fn forward<E: Element>(&self, f: &mut Forward<'_, E>, x: Var) -> Result<Var> {
        let h = self.backbone_forward(f, x)?;
        let s = f.tape.shape(h).to_vec();
        let (n, t) = (s[0], s[3]);
        let h = f.tape.reshape(h, &[n, s[1] * s[2], t])?;
        let asp = AspParams {
            attn_w: f.param("asp.attn.weight")?,
            attn_b: f.param("asp.attn.bias")?,
            score_w: f.param("asp.score.weight")?,
        };
        let pooled = asp_pool(f.tape, h, &asp)?;
        let w = f.param("embed.weight")?;
        let b = f.param("embed.bias")?;
        f.tape.linear(pooled, w, Some(b))
    }

    /// Eval-mode embedding of one utterance `[F, T]`.
    pub fn embed<E: Element>(&self, store: &ParameterStore<E>, feats: &Tensor<E>) -> Result<Vec<E>> {
        let s = feats.shape();
        if s.len() != 2 {
            return Err(shape_err!("utterance features must be [F,T], got {s:?}"));
        }
        if s[1] < MIN_FRAMES {
            return Err(contract_err!(
                "utterance has {} frames, need at least {MIN_FRAMES}",
                s[1]
            ));
        }
        let mut tape = Tape::new();
        let vars = store.bind_frozen(&mut tape);
        let plan = BnPlan::eval();
        let x = tape.constant(feats.clone().reshape(vec![1, 1, s[0], s[1]])?);
        let mut f = Forward::new(&mut tape, store, &vars, &plan, self.cfg.bn_eps);
        let y = self.forward(&mut f, x)?;
        Ok(tape.value(y).to_vec())
    }

    /// Eval-mode embeddings of many utterances, in input order.
    pub fn embed_all<E: Element>(&self, store: &ParameterStore<E>, utts: &[&Tensor<E>]) -> Result<Vec<Vec<E>>> {
        par::map_slice(utts, |u| self.embed(store, u)).into_iter().collect()
    }
}

/// Draws a random crop start in `[0, len - crop]`.
pub fn crop_start(rng: &mut impl Rng, len: usize, crop: usize) -> usize {
    if len <= crop {
        0
    } else {
        rng.random_range(0..=len - crop)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::grad_check_many;
    use crate::model::names::{is_bn_adapter_param, is_se_param};

    fn micro() -> ModelConfig {
        ModelConfig {
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
        }
    }

    #[test]
    fn large_config_counts() {
        let net = SpeakerNet::new(ModelConfig::full()).unwrap();
        let store = net.init_params::<f32>(0);
        let per_group: Vec<usize> = (1..=4)
            .map(|g| store.count(|n| is_se_param(n) && n.starts_with(&format!("group{g}."))))
            .collect();
        assert_eq!(per_group, vec![876, 4384, 25440, 50016]);
        assert_eq!(store.count(is_se_param), 80_716);
        assert_eq!(store.count(is_bn_adapter_param), 7_552);
        let total = store.total_count();
        assert!((6_500_000..=9_500_000).contains(&total), "{total}");
        let ratio = (80_716 + 7_552) as f64 / total as f64;
        assert!(ratio <= 0.015, "{ratio}");
    }

    #[test]
    fn se_formula_matches_shapes() {
        for (c, r) in [(32, 8), (64, 8), (16, 4)] {
            let by_shape = 2 * c * (c / r) + c / r + c;
            assert_eq!(SeBlock::param_count(c, r), by_shape);
        }
    }

    #[test]
    fn init_is_deterministic_and_checked() {
        let net = SpeakerNet::new(ModelConfig::tiny()).unwrap();
        let a = net.init_params::<f32>(3);
        let b = net.init_params::<f32>(3);
        let c = net.init_params::<f32>(4);
        assert_eq!(a, b);
        assert_ne!(a, c);
        net.check_store(&a).unwrap();
        let other = SpeakerNet::new(micro()).unwrap();
        assert!(other.check_store(&a).is_err());
    }

    #[test]
    fn forward_shapes_and_stat_updates() {
        let net = SpeakerNet::new(ModelConfig::tiny()).unwrap();
        let store = net.init_params::<f32>(1);
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let x = Tensor::from_fn(vec![2, 1, 24, 20], |i| ((i * 37 % 101) as f32 / 50.0) - 1.0);
        let x = tape.constant(x);
        let plan = BnPlan::train();
        let mut f = Forward::new(&mut tape, &store, &vars, &plan, 1e-5);
        let h = net.backbone_forward(&mut f, x).unwrap();
        assert_eq!(f.tape.shape(h), &[2, 64, 3, 3]);
        let y = net.forward(&mut f, x).unwrap();
        assert_eq!(f.tape.shape(y), &[2, 64]);
        assert_eq!(f.updates.len(), 2 * net.bn_layers().len());
    }

    #[test]
    fn embed_requires_seeded_stats_and_min_frames() {
        let net = SpeakerNet::new(ModelConfig::tiny()).unwrap();
        let mut store = net.init_params::<f32>(1);
        let u = Tensor::from_fn(vec![24, 40], |i| (i as f32 * 0.01).sin());
        assert!(net.embed(&store, &u).is_err());
        store.seed_bn_stats();
        assert_eq!(net.embed(&store, &u).unwrap().len(), 64);
        let short = Tensor::from_fn(vec![24, 8], |_| 0.0);
        assert!(net.embed(&store, &short).is_err());
        let all = net.embed_all(&store, &[&u, &u]).unwrap();
        assert_eq!(all[0], all[1]);
    }

    #[test]
    fn eval_embedding_ignores_batch_composition() {
        let net = SpeakerNet::new(ModelConfig::tiny()).unwrap();
        let mut store = net.init_params::<f64>(2);
        store.seed_bn_stats();
        let u = Tensor::from_fn(vec![24, 32], |i| (i as f64 * 0.013).cos());
        let v = Tensor::from_fn(vec![24, 32], |i| (i as f64 * 0.029).sin());
        let alone = net.embed(&store, &u).unwrap();
        let mut tape = Tape::new();
        let vars = store.bind_frozen(&mut tape);
        let mut both = u.data().to_vec();
        both.extend_from_slice(v.data());
        let x = tape.constant(Tensor::new(vec![2, 1, 24, 32], both).unwrap());
        let plan = BnPlan::eval();
        let mut f = Forward::new(&mut tape, &store, &vars, &plan, 1e-5);
        let y = net.forward(&mut f, x).unwrap();
        for (a, b) in alone.iter().zip(&tape.value(y)[..64]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn se_block_gradients() {
        let x = Tensor::from_fn(vec![2, 4, 3, 2], |i| ((i * 7 % 11) as f64 - 5.0) / 4.0);
        let w1 = Tensor::from_fn(vec![2, 4], |i| (i as f64 * 0.7).sin());
        let b1 = Tensor::new(vec![2], vec![0.1, -0.2]).unwrap();
        let w2 = Tensor::from_fn(vec![4, 2], |i| (i as f64 * 1.3).cos());
        let b2 = Tensor::from_fn(vec![4], |i| i as f64 * 0.05);
        let probe = Tensor::from_fn(vec![2, 4, 3, 2], |i| ((i * 5 % 13) as f64) / 13.0);
        let err = grad_check_many(
            |t, v| {
                let se = SeBlock {
                    w1: v[1],
                    b1: v[2],
                    w2: v[3],
                    b2: v[4],
                };
                let y = se_forward(t, v[0], &se)?;
                let p = t.constant(probe.clone());
                let z = t.mul(y, p)?;
                Ok(t.sum_all(z))
            },
            &[x, w1, b1, w2, b2],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn asp_gradients() {
        let h = Tensor::from_fn(vec![2, 3, 5], |i| ((i * 7 % 17) as f64 - 8.0) / 5.0);
        let aw = Tensor::from_fn(vec![2, 3, 1, 1], |i| (i as f64 * 0.9).sin());
        let ab = Tensor::new(vec![2], vec![0.05, -0.1]).unwrap();
        let sw = Tensor::new(vec![1, 2, 1, 1], vec![0.7, -1.1]).unwrap();
        let probe = Tensor::from_fn(vec![2, 6], |i| (i as f64 * 0.37).cos());
        let err = grad_check_many(
            |t, v| {
                let p = AspParams {
                    attn_w: v[1],
                    attn_b: v[2],
                    score_w: v[3],
                };
                let y = asp_pool(t, v[0], &p)?;
                let c = t.constant(probe.clone());
                let z = t.mul(y, c)?;
                Ok(t.sum_all(z))
            },
            &[h, aw, ab, sw],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn whole_network_gradients() {
        let net = SpeakerNet::new(micro()).unwrap();
        let store = net.init_params::<f64>(5);
        let names: Vec<String> = store.names().map(str::to_string).collect();
        let mut inputs: Vec<Tensor<f64>> = vec![Tensor::from_fn(vec![3, 1, 8, 12], |i| {
            ((i * 29 % 47) as f64 - 23.0) / 12.0
        })];
        inputs.extend(store.iter().map(|(_, t)| t.clone()));
        let probe = Tensor::from_fn(vec![3, 3], |i| (i as f64 * 0.61).sin());
        let plan = BnPlan::train();
        let err = grad_check_many(
            |t, v| {
                let vars = Bound::from_pairs(names.iter().cloned().zip(v[1..].iter().copied()));
                let mut f = Forward::new(t, &store, &vars, &plan, 1e-5);
                let y = net.forward(&mut f, v[0])?;
                let c = t.constant(probe.clone());
                let z = t.mul(y, c)?;
                Ok(t.sum_all(z))
            },
            &inputs,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
