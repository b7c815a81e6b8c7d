//! Command implementations shared by the CLI and the experiment harness.

use std::fs;
use std::path::{Path, PathBuf};

use crate::adapters::{frozen_drift_check, AdaptMode, AdaptPolicy, GroupMask};
use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::corpus::{
    assign_low_resource_split, gen_corpus, make_low_resource_split, read_corpus, write_corpus, Corpus, DomainSpec,
    Split, SOURCE_DOMAIN,
};
use crate::error::{contract_err, Error, Result};
use crate::eval::{write_results, ResultRow, TrialList};
use crate::model::names::group_of;
use crate::model::{ModelConfig, SpeakerNet};
use crate::train::{self, StepLog};

/// Builds one corpus holding every requested domain. The source domain is
/// tagged `pretrain`; each target domain gets a low-resource dev/test split
/// over all of its speakers.
pub fn generate(seed: u64, domains: &[String], speakers: usize, utts: usize, bins: usize) -> Result<Corpus> {
    if domains.is_empty() {
        return Err(contract_err!("no domains requested"));
    }
    let mut out = Corpus {
        mel_bins: bins,
        utterances: Vec::new(),
    };
    for name in domains {
        let spec = DomainSpec::preset(name, bins)?;
        let mut c = gen_corpus(seed, speakers, utts, &spec, bins)?;
        if name != SOURCE_DOMAIN {
            let split = make_low_resource_split(&c, speakers, seed)?;
            assign_low_resource_split(&mut c, &split);
        }
        out.extend(c)?;
    }
    Ok(out)
}

pub fn gen_data(
    out: &Path,
    seed: u64,
    domains: &[String],
    speakers: usize,
    utts: usize,
    bins: usize,
) -> Result<Corpus> {
    let corpus = generate(seed, domains, speakers, utts, bins)?;
    write_corpus(out, &corpus)?;
    Ok(corpus)
}

/// `<ckpt>.loss.csv` next to a checkpoint.
pub fn loss_log_path(ckpt: &Path) -> PathBuf {
    let mut name = ckpt.file_name().unwrap_or_default().to_os_string();
    name.push(".loss.csv");
    ckpt.with_file_name(name)
}

pub fn write_loss_log(path: &Path, log: &[StepLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "step", "loss", "lr", "margin"])?;
    for s in log {
        w.write_record([
            s.epoch.to_string(),
            s.step.to_string(),
            format!("{:.6}", s.loss),
            format!("{:e}", s.lr),
            format!("{:.4}", s.margin),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn pretrain_cmd(cfg: &ExperimentConfig, data: &Path, out: &Path) -> Result<train::Pretrained> {
    cfg.validate()?;
    let corpus = read_corpus(data)?;
    let pre = train::pretrain(cfg, &corpus)?;
    Checkpoint::new(pre.net.config().clone(), pre.store.clone()).save(out)?;
    write_loss_log(&loss_log_path(out), &pre.log)?;
    Ok(pre)
}

/// The single target domain of `corpus`, or the named one.
pub fn select_target(corpus: &Corpus, domain: Option<&str>) -> Result<Corpus> {
    let targets = target_domains(corpus);
    let name = match domain {
        Some(d) if targets.iter().any(|t| t == d) => d.to_string(),
        Some(d) => return Err(contract_err!("domain {d:?} has no dev/test split in this corpus")),
        None if targets.len() == 1 => targets[0].clone(),
        None => {
            return Err(contract_err!(
                "corpus holds target domains {targets:?}; choose one with --domain"
            ))
        }
    };
    Ok(corpus.domain(&name))
}

/// Domains with at least one dev utterance, in corpus order.
pub fn target_domains(corpus: &Corpus) -> Vec<String> {
    corpus
        .domains()
        .into_iter()
        .filter(|d| {
            corpus
                .utterances
                .iter()
                .any(|u| u.domain == *d && u.split == Split::Dev)
        })
        .map(str::to_string)
        .collect()
}

pub struct AdaptOutput {
    pub adapted: train::Adapted,
    pub policy: AdaptPolicy,
    pub trainable: usize,
}

/// Adapts a checkpoint on one target domain. The network shape comes from
/// the checkpoint; `cfg` supplies training settings and the default policy.
pub fn adapt_cmd(
    cfg: &ExperimentConfig,
    ckpt: &Path,
    data: &Path,
    domain: Option<&str>,
    out: &Path,
) -> Result<AdaptOutput> {
    let base = Checkpoint::load(ckpt)?;
    let mut cfg = cfg.clone();
    cfg.model = base.model.clone();
    cfg.validate()?;
    let net = SpeakerNet::new(base.model.clone())?;
    let corpus = select_target(&read_corpus(data)?, domain)?;
    let policy = cfg.adapt.policy()?;
    let adapted = train::adapt(&cfg, &net, &base.params, &policy, &corpus)?;
    let trainable = adapted.store.trainable_count();
    Checkpoint::new(base.model, adapted.store.clone()).save(out)?;
    write_loss_log(&loss_log_path(out), &adapted.log)?;
    Ok(AdaptOutput {
        adapted,
        policy,
        trainable,
    })
}

pub enum TrialSource<'a> {
    /// Cross-pair every dev speaker with every test utterance, optionally
    /// saving the list.
    Make(Option<&'a Path>),
    Load(&'a Path),
}

/// Scores one or more target domains and writes one CSV row per domain.
pub fn evaluate_cmd(
    ckpt: &Path,
    data: &Path,
    trials: TrialSource<'_>,
    domain: Option<&str>,
    method: &str,
    seed: u64,
    out_csv: &Path,
) -> Result<Vec<ResultRow>> {
    let ck = Checkpoint::load(ckpt)?;
    let net = SpeakerNet::new(ck.model.clone())?;
    let corpus = read_corpus(data)?;
    let domains = match domain {
        Some(d) => vec![d.to_string()],
        None => target_domains(&corpus),
    };
    if domains.is_empty() {
        return Err(contract_err!("corpus has no dev/test split to evaluate"));
    }
    let loaded = match trials {
        TrialSource::Load(p) => {
            if domains.len() > 1 {
                return Err(contract_err!("a trial file covers one domain; choose it with --domain"));
            }
            Some(TrialList::read(p)?)
        }
        TrialSource::Make(_) => None,
    };
    let mut rows = Vec::new();
    let mut made = Vec::new();
    for d in &domains {
        let sub = select_target(&corpus, Some(d))?;
        let (scored, eer) = train::evaluate(&net, &ck.params, &sub, loaded.as_ref())?;
        rows.push(ResultRow {
            method: method.to_string(),
            n_params: ck.params.trainable_count(),
            domain: d.clone(),
            n_speakers: sub.by_speaker(|u| u.split == Split::Dev).len(),
            seed,
            eer,
        });
        made.extend(scored.trials.into_iter().map(|mut t| {
            t.score = None;
            t
        }));
    }
    if let TrialSource::Make(Some(p)) = trials {
        TrialList { trials: made }.write(p)?;
    }
    write_results(out_csv, &rows)?;
    Ok(rows)
}

/// Which parameters `count-params` counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CountFilter {
    Se,
    Bn,
    SeBn,
    All,
}

impl std::str::FromStr for CountFilter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "se" => Ok(Self::Se),
            "bn" => Ok(Self::Bn),
            "se_bn" => Ok(Self::SeBn),
            "all" => Ok(Self::All),
            _ => Err(Error::Config(format!(
                "unknown filter {s:?} (expected se, bn, se_bn or all)"
            ))),
        }
    }
}

/// Per-group and total parameter counts, without allocating the network.
/// Rows are `G1`..`G4` followed by `total`; `other` collects parameters
/// outside the residual groups when the filter is `all`.
pub fn count_params(model: &ModelConfig, filter: CountFilter, groups: GroupMask) -> Result<Vec<(String, usize)>> {
    let net = SpeakerNet::new(model.clone())?;
    let policy = match filter {
        CountFilter::Se => Some(AdaptPolicy::new(AdaptMode::Se, groups, false)?),
        CountFilter::Bn => Some(AdaptPolicy::new(AdaptMode::Bn, groups, false)?),
        CountFilter::SeBn => Some(AdaptPolicy::new(AdaptMode::SeBn, groups, false)?),
        CountFilter::All => None,
    };
    let mut per_group = [0usize; 4];
    let mut other = 0;
    for (name, shape) in net.param_shapes() {
        let n: usize = shape.iter().product();
        let counted = match &policy {
            Some(p) => p.selects(&name),
            None => group_of(&name).is_none_or(|g| groups.contains(g)),
        };
        if !counted {
            continue;
        }
        match group_of(&name) {
            Some(g) => per_group[g - 1] += n,
            None => other += n,
        }
    }
    let mut rows: Vec<(String, usize)> = (0..4).map(|g| (format!("G{}", g + 1), per_group[g])).collect();
    if filter == CountFilter::All {
        rows.push(("other".to_string(), other));
    }
    let total = per_group.iter().sum::<usize>() + other;
    rows.push(("total".to_string(), total));
    Ok(rows)
}

/// Shape of the multi-seed adaptation experiment.
#[derive(Debug, Clone)]
pub struct TrendPlan {
    pub seeds: Vec<u64>,
    pub domains: Vec<String>,
    pub source_speakers: usize,
    pub source_utts: usize,
    pub target_speakers: usize,
    pub target_utts: usize,
    pub modes: Vec<AdaptMode>,
}

/// Result rows of a trend run plus, per mode, the largest frozen-parameter
/// drift seen over all of its adaptation runs.
#[derive(Debug, Clone, Default)]
pub struct TrendOutput {
    pub rows: Vec<ResultRow>,
    pub drift: Vec<(AdaptMode, f64)>,
}

/// For every seed: pretrain on the source domain, then per target domain
/// evaluate the pretrained model and every adaptation mode. Rows use the
/// method names `pretrain`, `fine_tune`, `se`, `bn`, `se_bn`.
pub fn run_trend(cfg: &ExperimentConfig, plan: &TrendPlan) -> Result<TrendOutput> {
    let mut rows = Vec::new();
    let mut drift: Vec<(AdaptMode, f64)> = plan.modes.iter().map(|&m| (m, 0.0)).collect();
    for &seed in &plan.seeds {
        let mut cfg = cfg.clone();
        cfg.seed = seed;
        let bins = cfg.model.mel_bins;
        let source = gen_corpus(
            seed,
            plan.source_speakers,
            plan.source_utts,
            &DomainSpec::preset(SOURCE_DOMAIN, bins)?,
            bins,
        )?;
        let pre = train::pretrain(&cfg, &source)?;
        drop(source);
        for d in &plan.domains {
            let mut tgt = gen_corpus(
                seed,
                plan.target_speakers,
                plan.target_utts,
                &DomainSpec::preset(d, bins)?,
                bins,
            )?;
            let split = make_low_resource_split(&tgt, cfg.data.split_speakers, seed)?;
            assign_low_resource_split(&mut tgt, &split);
            let row = |method: &str, n_params: usize, eer: f64| ResultRow {
                method: method.to_string(),
                n_params,
                domain: d.clone(),
                n_speakers: cfg.data.split_speakers,
                seed,
                eer,
            };
            let (_, eer) = train::evaluate(&pre.net, &pre.store, &tgt, None)?;
            log::info!("seed {seed} {d} pretrain: {:.3}%", 100.0 * eer);
            rows.push(row("pretrain", pre.store.total_count(), eer));
            for &mode in &plan.modes {
                let mut c = cfg.clone();
                c.adapt.mode = mode;
                let policy = c.adapt.policy()?;
                let out = train::adapt(&c, &pre.net, &pre.store, &policy, &tgt)?;
                let d = frozen_drift_check(&pre.store, &out.store)?;
                if let Some(slot) = drift.iter_mut().find(|(m, _)| *m == mode) {
                    slot.1 = slot.1.max(d);
                }
                let (_, eer) = train::evaluate(&pre.net, &out.store, &tgt, None)?;
                log::info!("seed {seed} {d} {mode}: {:.3}%", 100.0 * eer);
                rows.push(row(mode.as_str(), out.store.trainable_count(), eer));
            }
        }
    }
    Ok(TrendOutput { rows, drift })
}

/// Median EER over seeds for one method on one domain.
pub fn median_eer(rows: &[ResultRow], method: &str, domain: &str) -> Option<f64> {
    let mut v: Vec<f64> = rows
        .iter()
        .filter(|r| r.method == method && r.domain == domain)
        .map(|r| r.eer)
        .collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Creates the parent directory of an output path if needed.
pub fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(p)?;
    }
    Ok(())
}
