//! `sebn`: corpus generation, pretraining, adaptation, evaluation and
//! parameter counting.
//!
//! Failures exit with status 1 (2 for usage errors) and print one line to
//! stderr: `error: <kind>: <message>`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sebn_core::adapters::{AdaptMode, GroupMask};
use sebn_core::config::{ExperimentConfig, SEED_ENV};
use sebn_core::corpus::{SOURCE_DOMAIN, TARGET_DOMAINS};
use sebn_core::model::ModelConfig;
use sebn_core::pipeline::{self, CountFilter, TrialSource};
use sebn_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "sebn",
    version,
    about = "SE/BN adapter experiments on a synthetic speaker corpus"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic multi-domain corpus.
    GenData(GenData),
    /// Train a fresh model on the corpus's pretrain split.
    Pretrain(Pretrain),
    /// Adapt a pretrained checkpoint to one target domain.
    Adapt(Adapt),
    /// Score enroll/test trials and write EER rows.
    Evaluate(Evaluate),
    /// Count parameters selected by an adapter filter.
    CountParams(CountParams),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated domain names.
    #[arg(long, value_delimiter = ',', default_values_t = default_domains())]
    domains: Vec<String>,
    #[arg(long, default_value_t = 200)]
    speakers: usize,
    #[arg(long, default_value_t = 20)]
    utts: usize,
    /// Feature bins per frame.
    #[arg(long, default_value_t = 24)]
    bins: usize,
}

fn default_domains() -> Vec<String> {
    std::iter::once(SOURCE_DOMAIN)
        .chain(TARGET_DOMAINS)
        .map(str::to_string)
        .collect()
}

#[derive(Args)]
struct Pretrain {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out_ckpt: PathBuf,
}

#[derive(Args)]
struct Adapt {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Overrides `adapt.mode`: fine_tune, se, bn or se_bn.
    #[arg(long)]
    mode: Option<AdaptMode>,
    /// Overrides `adapt.groups`, e.g. `all`, `G1-G4`, `1,3`.
    #[arg(long)]
    groups: Option<GroupMask>,
    /// Target domain; required when the corpus holds several.
    #[arg(long)]
    domain: Option<String>,
    #[arg(long)]
    out_ckpt: PathBuf,
}

#[derive(Args)]
#[command(group = clap::ArgGroup::new("trial-source").required(true).args(["trials", "make_trials"]))]
struct Evaluate {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Trial file to score.
    #[arg(long)]
    trials: Option<PathBuf>,
    /// Cross-pair dev speakers with test utterances; optionally save the list to PATH.
    #[arg(long, value_name = "PATH", num_args = 0..=1)]
    make_trials: Option<Option<PathBuf>>,
    /// Evaluate one domain instead of every target domain.
    #[arg(long)]
    domain: Option<String>,
    /// Value of the `method` column; defaults to the checkpoint file stem.
    #[arg(long)]
    method: Option<String>,
    /// Value of the `seed` column; defaults to the SEBN_SEED variable, else 0.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_csv: PathBuf,
}

#[derive(Args)]
struct CountParams {
    /// Config whose `model.*` keys describe the network; the full-scale model when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// se, bn, se_bn or all.
    #[arg(long, default_value = "all")]
    filter: CountFilter,
    #[arg(long, default_value = "all")]
    groups: GroupMask,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("error: usage: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData(a) => {
            let c = pipeline::gen_data(&a.out, a.seed, &a.domains, a.speakers, a.utts, a.bins)?;
            println!("wrote {} utterances to {}", c.utterances.len(), a.out.display());
        }
        Cmd::Pretrain(a) => {
            let cfg = ExperimentConfig::load(&a.config)?;
            pipeline::ensure_parent(&a.out_ckpt)?;
            let pre = pipeline::pretrain_cmd(&cfg, &a.data, &a.out_ckpt)?;
            let (first, last) = (pre.log.first(), pre.log.last());
            if let (Some(f), Some(l)) = (first, last) {
                println!("loss {:.4} -> {:.4} over {} steps", f.loss, l.loss, pre.log.len());
            }
            println!("wrote {}", a.out_ckpt.display());
        }
        Cmd::Adapt(a) => {
            let mut cfg = ExperimentConfig::load(&a.config)?;
            if let Some(m) = a.mode {
                cfg.adapt.mode = m;
            }
            if let Some(g) = a.groups {
                cfg.adapt.groups = g;
            }
            pipeline::ensure_parent(&a.out_ckpt)?;
            let out = pipeline::adapt_cmd(&cfg, &a.ckpt, &a.data, a.domain.as_deref(), &a.out_ckpt)?;
            println!(
                "mode {} groups {}: trainable parameters {}",
                out.policy.mode, out.policy.groups, out.trainable
            );
            println!("wrote {}", a.out_ckpt.display());
        }
        Cmd::Evaluate(a) => {
            let seed = match a.seed {
                Some(s) => s,
                None => env_seed()?,
            };
            let method = a.method.unwrap_or_else(|| stem(&a.ckpt));
            let source = match (&a.trials, &a.make_trials) {
                (Some(p), _) => TrialSource::Load(p),
                (None, Some(p)) => TrialSource::Make(p.as_deref()),
                (None, None) => unreachable!("clap requires one trial source"),
            };
            pipeline::ensure_parent(&a.out_csv)?;
            let rows =
                pipeline::evaluate_cmd(&a.ckpt, &a.data, source, a.domain.as_deref(), &method, seed, &a.out_csv)?;
            for r in rows {
                println!("{} {} EER {:.3}%", r.method, r.domain, 100.0 * r.eer);
            }
        }
        Cmd::CountParams(a) => {
            let model = match &a.config {
                Some(p) => {
                    let text = std::fs::read_to_string(p)?;
                    ExperimentConfig::parse(&text, Some("0"))?.model
                }
                None => ModelConfig::full(),
            };
            for (label, n) in pipeline::count_params(&model, a.filter, a.groups)? {
                println!("{label}\t{n}");
            }
        }
    }
    Ok(())
}

fn env_seed() -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map_or_else(|| "model".to_string(), |s| s.to_string_lossy().into_owned())
}
