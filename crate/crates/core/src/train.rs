//! Training loops: AAM-Softmax (or GE2E) pretraining on the source split,
//! and GE2E adaptation of a pretrained store under an [`AdaptPolicy`].

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::adapters::{align_bn_stats, apply_policy, bn_stats_refresh, refresh_layers, AdaptMode, AdaptPolicy};
use crate::autograd::{Tape, Var};
use crate::config::{ExperimentConfig, PretrainLoss};
use crate::corpus::{Corpus, Split};
use crate::error::{contract_err, Result};
use crate::eval::{cross_pair_trials, enroll, score_trials, Enrollment, TrialList};
use crate::losses::{aam_softmax_loss, ge2e_loss, margin_at, AamHead, Ge2eParams};
use crate::model::net::crop_start;
use crate::model::{BnPlan, Forward, ParameterStore, SpeakerNet};
use crate::optim::{warmup_lr, Adam};
use crate::rng::SeedStream;

/// Utterance indices, with the (speakers, per-speaker) shape for GE2E batches.
type Batch = (Vec<usize>, Option<(usize, usize)>);
use crate::tensor::Tensor;

/// Batches used to re-estimate BN statistics after training.
const REFRESH_BATCHES: usize = 16;

/// One optimizer step's record.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub margin: f64,
}

#[derive(Debug, Clone)]
pub struct Pretrained {
    pub net: SpeakerNet,
    pub store: ParameterStore<f32>,
    pub log: Vec<StepLog>,
}

#[derive(Debug, Clone)]
pub struct Adapted {
    pub store: ParameterStore<f32>,
    pub ge2e: Ge2eParams,
    pub log: Vec<StepLog>,
}

/// `[N,1,F,crop]` batch of random crops of the given utterances.
pub fn crop_batch(corpus: &Corpus, idx: &[usize], crop: usize, rng: &mut impl Rng) -> Result<Tensor<f32>> {
    let bins = corpus.mel_bins;
    let mut data = Vec::with_capacity(idx.len() * bins * crop);
    for &i in idx {
        let u = &corpus.utterances[i];
        let t = u.frames();
        if t < crop {
            return Err(contract_err!("utterance {} has {t} frames, crop needs {crop}", u.id));
        }
        let s = crop_start(rng, t, crop);
        for row in u.features.data().chunks(t) {
            data.extend_from_slice(&row[s..s + crop]);
        }
    }
    Tensor::new(vec![idx.len(), 1, bins, crop], data)
}

fn check_bins(net: &SpeakerNet, corpus: &Corpus) -> Result<()> {
    if corpus.mel_bins != net.config().mel_bins {
        return Err(contract_err!(
            "corpus has {} bins but the model expects {}",
            corpus.mel_bins,
            net.config().mel_bins
        ));
    }
    Ok(())
}

/// Deterministic crop batches drawn from `idx` for statistics re-estimation.
fn refresh_batches(
    corpus: &Corpus,
    idx: &[usize],
    batch: usize,
    crop: usize,
    stream: SeedStream,
) -> Result<Vec<Tensor<f32>>> {
    let mut rng = stream.rng();
    let mut order = idx.to_vec();
    order.shuffle(&mut rng);
    let batch = batch.min(order.len());
    order
        .chunks(batch)
        .filter(|c| c.len() == batch)
        .take(REFRESH_BATCHES)
        .map(|c| crop_batch(corpus, c, crop, &mut rng))
        .collect()
}

struct Ge2eBatch {
    idx: Vec<usize>,
    speakers: usize,
    per_speaker: usize,
}

/// Epoch of `P × M` batches: speakers are shuffled and chunked, each
/// speaker contributes `M` of its utterances (fewer if all speakers in the chunk have fewer).
fn ge2e_epoch(groups: &IndexMap<&str, Vec<usize>>, p: usize, m: usize, rng: &mut impl Rng) -> Result<Vec<Ge2eBatch>> {
    let p = p.min(groups.len());
    if p < 2 {
        return Err(contract_err!("GE2E needs at least 2 speakers, have {}", groups.len()));
    }
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.shuffle(rng);
    let mut out = Vec::new();
    for chunk in order.chunks(p).filter(|c| c.len() == p) {
        let mut picks = Vec::with_capacity(p);
        for &g in chunk {
            let (spk, utts) = groups.get_index(g).expect("index in range");
            if utts.len() < 2 {
                return Err(contract_err!(
                    "speaker {spk} has {} adaptation utterances, need at least 2",
                    utts.len()
                ));
            }
            let mut u = utts.clone();
            u.shuffle(rng);
            picks.push(u);
        }
        let per = picks.iter().map(Vec::len).min().unwrap_or(0).min(m);
        out.push(Ge2eBatch {
            idx: picks.iter().flat_map(|u| u[..per].iter().copied()).collect(),
            speakers: p,
            per_speaker: per,
        });
    }
    Ok(out)
}

fn ensure_finite(loss: f64, epoch: usize, step: usize) -> Result<()> {
    if !loss.is_finite() {
        return Err(contract_err!(
            "training diverged: non-finite loss at epoch {epoch}, step {step}"
        ));
    }
    Ok(())
}

/// Trains a fresh network on the corpus's `pretrain` split. Class count is
/// the number of pretraining speakers.
pub fn pretrain(cfg: &ExperimentConfig, corpus: &Corpus) -> Result<Pretrained> {
    let groups = corpus.by_speaker(|u| u.split == Split::Pretrain);
    if groups.len() < 2 {
        return Err(contract_err!(
            "pretraining needs at least 2 speakers, corpus has {}",
            groups.len()
        ));
    }
    let labels: IndexMap<&str, usize> = groups.keys().enumerate().map(|(i, &s)| (s, i)).collect();
    let net = SpeakerNet::new(cfg.model.clone().with_classes(groups.len()))?;
    check_bins(&net, corpus)?;
    let mut store = net.init_params::<f32>(cfg.seed);
    let all: Vec<usize> = corpus.indices(Split::Pretrain);
    let root = SeedStream::new(cfg.seed).split("pretrain");
    let tc = &cfg.train;
    let mut adam = Adam::new(tc.beta1, tc.beta2);
    let mut ge2e = Ge2eParams {
        w: cfg.loss.ge2e_w_init,
        b: cfg.loss.ge2e_b_init,
    };
    let plan = BnPlan::train();
    let momentum = Some(cfg.model.bn_momentum as f32);

    let per_epoch = match cfg.loss.name {
        PretrainLoss::Aam => all.len() / tc.batch_size.min(all.len()),
        PretrainLoss::Ge2e => groups.len() / cfg.adapt.speakers_per_batch.min(groups.len()),
    };
    let total = per_epoch * tc.epochs;
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 0..tc.epochs {
        let mut rng = root.split_index(epoch as u64).rng();
        let margin = margin_at(epoch, tc.epochs, cfg.loss.margin, cfg.loss.margin_ramp);
        let batches: Vec<Batch> = match cfg.loss.name {
            PretrainLoss::Aam => {
                let mut order = all.clone();
                order.shuffle(&mut rng);
                let b = tc.batch_size.min(order.len());
                order
                    .chunks(b)
                    .filter(|c| c.len() == b)
                    .map(|c| (c.to_vec(), None))
                    .collect()
            }
            PretrainLoss::Ge2e => ge2e_epoch(
                &groups,
                cfg.adapt.speakers_per_batch,
                cfg.adapt.utts_per_speaker,
                &mut rng,
            )?
            .into_iter()
            .map(|b| (b.idx, Some((b.speakers, b.per_speaker))))
            .collect(),
        };
        for (idx, shape) in batches {
            let x = crop_batch(corpus, &idx, tc.crop_frames, &mut rng)?;
            let lr = warmup_lr(step, total, tc.lr, tc.warmup);
            let mut tape = Tape::new();
            let vars = store.bind(&mut tape);
            let xv = tape.constant(x);
            let w = tape.leaf(Tensor::scalar(ge2e.w as f32), true);
            let b = tape.leaf(Tensor::scalar(ge2e.b as f32), true);
            let mut f = Forward::new(&mut tape, &store, &vars, &plan, cfg.model.bn_eps);
            let emb = net.forward(&mut f, xv)?;
            let updates = std::mem::take(&mut f.updates);
            let loss = match shape {
                None => {
                    let y: Vec<usize> = idx
                        .iter()
                        .map(|&i| labels[corpus.utterances[i].speaker.as_str()])
                        .collect();
                    let head = AamHead::new(vars.get("head.weight")?, margin, cfg.loss.scale)?;
                    aam_softmax_loss(&mut tape, emb, &y, &head)?
                }
                Some((p, m)) => {
                    let d = net.config().embedding_dim;
                    let e = tape.reshape(emb, &[p, m, d])?;
                    ge2e_loss(&mut tape, e, w, b)?
                }
            };
            let value = f64::from(tape.scalar(loss));
            ensure_finite(value, epoch, step)?;
            tape.backward(loss)?;
            store.accumulate_grads(&tape, &vars)?;
            let (gw, gb) = scalar_grads(&tape, w, b);
            adam.step(
                &mut store,
                &mut [("ge2e.w", &mut ge2e.w, gw), ("ge2e.b", &mut ge2e.b, gb)],
                lr,
            );
            ge2e.clamp();
            store.zero_grads();
            store.apply_bn_updates(&updates, momentum)?;
            log.push(StepLog {
                epoch,
                step,
                loss: value,
                lr,
                margin,
            });
            step += 1;
        }
        if let Some(last) = log.last() {
            log::info!("pretrain epoch {epoch}: loss {:.4} (margin {margin:.3})", last.loss);
        }
    }
    let layers: Vec<String> = net.bn_layers().into_iter().map(|(l, _)| l).collect();
    let batches = refresh_batches(corpus, &all, tc.batch_size, tc.crop_frames, root.split("bn-refresh"))?;
    refresh_layers(&net, &mut store, &layers, &batches)?;
    Ok(Pretrained { net, store, log })
}

fn scalar_grads(tape: &Tape<f32>, w: Var, b: Var) -> (f64, f64) {
    let g = |v| tape.grad(v).map_or(0.0, |g: &[f32]| f64::from(g[0]));
    (g(w), g(b))
}

/// Adapts `store` with GE2E batches drawn from the corpus's `dev` split.
pub fn adapt(
    cfg: &ExperimentConfig,
    net: &SpeakerNet,
    store: &ParameterStore<f32>,
    policy: &AdaptPolicy,
    corpus: &Corpus,
) -> Result<Adapted> {
    check_bins(net, corpus)?;
    let mut store = store.clone();
    apply_policy(net, &mut store, policy)?;
    let groups = corpus.by_speaker(|u| u.split == Split::Dev);
    let dev = corpus.indices(Split::Dev);
    let ac = &cfg.adapt;
    let root = SeedStream::new(cfg.seed).split("adapt").split(policy.mode.as_str());
    let plan = policy.bn_plan(net);
    let momentum = Some(cfg.model.bn_momentum as f32);
    let stat_batches = if policy.bn_stats_refresh {
        refresh_batches(
            corpus,
            &dev,
            cfg.train.batch_size,
            cfg.train.crop_frames,
            root.split("bn-refresh"),
        )?
    } else {
        Vec::new()
    };
    if !stat_batches.is_empty() {
        align_bn_stats(net, &mut store, policy, &stat_batches)?;
    }
    let mut adam = Adam::new(cfg.train.beta1, cfg.train.beta2);
    let mut ge2e = Ge2eParams {
        w: cfg.loss.ge2e_w_init,
        b: cfg.loss.ge2e_b_init,
    };
    let per_epoch = groups.len() / ac.speakers_per_batch.min(groups.len()).max(1);
    let total = per_epoch * ac.epochs;
    let base_lr = if policy.mode == AdaptMode::FineTune {
        ac.lr
    } else {
        ac.adapter_lr
    };
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 0..ac.epochs {
        let mut rng = root.split_index(epoch as u64).rng();
        for batch in ge2e_epoch(&groups, ac.speakers_per_batch, ac.utts_per_speaker, &mut rng)? {
            let x = crop_batch(corpus, &batch.idx, cfg.train.crop_frames, &mut rng)?;
            let lr = warmup_lr(step, total, base_lr, cfg.train.warmup);
            let mut tape = Tape::new();
            let vars = store.bind(&mut tape);
            let xv = tape.constant(x);
            let w = tape.leaf(Tensor::scalar(ge2e.w as f32), true);
            let b = tape.leaf(Tensor::scalar(ge2e.b as f32), true);
            let mut f = Forward::new(&mut tape, &store, &vars, &plan, cfg.model.bn_eps);
            let emb = net.forward(&mut f, xv)?;
            let updates = std::mem::take(&mut f.updates);
            let e = tape.reshape(emb, &[batch.speakers, batch.per_speaker, net.config().embedding_dim])?;
            let loss = ge2e_loss(&mut tape, e, w, b)?;
            let value = f64::from(tape.scalar(loss));
            ensure_finite(value, epoch, step)?;
            tape.backward(loss)?;
            store.accumulate_grads(&tape, &vars)?;
            let (gw, gb) = scalar_grads(&tape, w, b);
            adam.step(
                &mut store,
                &mut [("ge2e.w", &mut ge2e.w, gw), ("ge2e.b", &mut ge2e.b, gb)],
                lr,
            );
            ge2e.clamp();
            store.zero_grads();
            store.apply_bn_updates(&updates, momentum)?;
            log.push(StepLog {
                epoch,
                step,
                loss: value,
                lr,
                margin: 0.0,
            });
            step += 1;
        }
        if let Some(last) = log.last() {
            log::info!("adapt {} epoch {epoch}: loss {:.4}", policy.mode, last.loss);
        }
    }
    if !stat_batches.is_empty() {
        bn_stats_refresh(net, &mut store, policy, &stat_batches)?;
    }
    Ok(Adapted { store, ge2e, log })
}

/// Eval-mode embeddings (as `f64`) of the given utterances, keyed by id.
pub fn embed_utterances(
    net: &SpeakerNet,
    store: &ParameterStore<f32>,
    corpus: &Corpus,
    idx: &[usize],
) -> Result<IndexMap<String, Vec<f64>>> {
    let feats: Vec<&Tensor<f32>> = idx.iter().map(|&i| &corpus.utterances[i].features).collect();
    let embs = net.embed_all(store, &feats)?;
    Ok(idx
        .iter()
        .zip(embs)
        .map(|(&i, e)| (corpus.utterances[i].id.clone(), e.into_iter().map(f64::from).collect()))
        .collect())
}

/// Enrolls every dev speaker and scores enroll × test trials.
/// `trials` replaces the generated cross-pairing when given.
pub fn evaluate(
    net: &SpeakerNet,
    store: &ParameterStore<f32>,
    corpus: &Corpus,
    trials: Option<&TrialList>,
) -> Result<(TrialList, f64)> {
    let dev = corpus.by_speaker(|u| u.split == Split::Dev);
    let test = corpus.indices(Split::Test);
    if dev.is_empty() || test.is_empty() {
        return Err(contract_err!("evaluation needs dev and test utterances"));
    }
    let mut needed: Vec<usize> = dev.values().flatten().copied().collect();
    needed.extend_from_slice(&test);
    let emb = embed_utterances(net, store, corpus, &needed)?;
    let mut enrollments: IndexMap<String, Enrollment> = IndexMap::new();
    for (spk, utts) in &dev {
        let vs: Vec<Vec<f64>> = utts.iter().map(|&i| emb[&corpus.utterances[i].id].clone()).collect();
        enrollments.insert(spk.to_string(), enroll(spk, &vs)?);
    }
    let list = match trials {
        Some(t) => t.clone(),
        None => {
            let speakers: Vec<&str> = dev.keys().copied().collect();
            let tests: Vec<(&str, &str)> = test
                .iter()
                .map(|&i| (corpus.utterances[i].id.as_str(), corpus.utterances[i].speaker.as_str()))
                .collect();
            cross_pair_trials(&speakers, &tests)
        }
    };
    list.check_both_classes()?;
    let scored = score_trials(&list, &enrollments, &emb)?;
    let eer = scored.eer()?;
    Ok((scored, eer))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{frozen_drift_check, GroupMask};
    use crate::corpus::{assign_low_resource_split, gen_corpus, make_low_resource_split, DomainSpec};
    use crate::model::ModelConfig;

    fn small_cfg() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::with_seed(3);
        cfg.model = ModelConfig {
            channels: [4, 8, 8, 8],
            blocks_per_group: [1, 1, 1, 1],
            reduction: 4,
            mel_bins: 16,
            embedding_dim: 8,
            num_classes: 0,
            use_se: true,
            asp_hidden: 4,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        };
        cfg.train.epochs = 2;
        cfg.train.batch_size = 8;
        cfg.train.crop_frames = 24;
        cfg.adapt.epochs = 2;
        cfg.adapt.speakers_per_batch = 3;
        cfg
    }

    #[test]
    fn pretrain_and_adapt_small() {
        let cfg = small_cfg();
        let src = gen_corpus(1, 4, 6, &DomainSpec::preset("source", 16).unwrap(), 16).unwrap();
        let pre = pretrain(&cfg, &src).unwrap();
        assert_eq!(pre.log.len(), 2 * 3);
        assert!(pre.log.iter().all(|s| s.loss.is_finite()));
        assert_eq!(pre.log[0].margin, 0.0);
        let again = pretrain(&cfg, &src).unwrap();
        assert_eq!(again.store, pre.store);

        let mut tgt = gen_corpus(1, 4, 12, &DomainSpec::preset("ent", 16).unwrap(), 16).unwrap();
        let split = make_low_resource_split(&tgt, 4, 0).unwrap();
        assign_low_resource_split(&mut tgt, &split);
        let (_, before) = evaluate(&pre.net, &pre.store, &tgt, None).unwrap();
        assert!((0.0..=1.0).contains(&before));

        for mode in [AdaptMode::Se, AdaptMode::Bn, AdaptMode::SeBn] {
            let policy = AdaptPolicy::new(mode, GroupMask::ALL, true).unwrap();
            let out = adapt(&cfg, &pre.net, &pre.store, &policy, &tgt).unwrap();
            assert_eq!(frozen_drift_check(&pre.store, &out.store).unwrap(), 0.0, "{mode}");
            assert!(out.ge2e.w > 0.0);
        }
        let ft = AdaptPolicy::new(AdaptMode::FineTune, GroupMask::ALL, true).unwrap();
        let out = adapt(&cfg, &pre.net, &pre.store, &ft, &tgt).unwrap();
        let moved = pre.store.get("stem.conv.weight").unwrap() != out.store.get("stem.conv.weight").unwrap();
        assert!(moved);
    }

    #[test]
    fn corpus_model_mismatch_is_rejected() {
        let cfg = small_cfg();
        let src = gen_corpus(1, 3, 3, &DomainSpec::preset("source", 24).unwrap(), 24).unwrap();
        assert!(pretrain(&cfg, &src).is_err());
    }
}
