//! End-to-end acceptance suite. Every criterion runs at its stated tolerance
//! and prints one PASS/FAIL line; the test fails if any criterion fails.
//!
//! The adaptation trend experiment dominates the runtime (about 15 minutes on
//! one core).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod common;

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use common::grad_suite::{composite_checks, op_checks, TOL};
use common::oracles::eer_oracle;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sebn_core::adapters::{AdaptMode, GroupMask};
use sebn_core::autograd::Tape;
use sebn_core::config::ExperimentConfig;
use sebn_core::corpus::DomainSpec;
use sebn_core::eval::eer;
use sebn_core::losses::{aam_softmax_loss, ge2e_loss, AamHead};
use sebn_core::model::ModelConfig;
use sebn_core::pipeline::{
    adapt_cmd, count_params, evaluate_cmd, gen_data, median_eer, pretrain_cmd, run_trend, CountFilter, TrendOutput,
    TrendPlan, TrialSource,
};
use sebn_core::tensor::Tensor;

struct Report {
    lines: Vec<(String, bool, String)>,
}

impl Report {
    fn record(&mut self, name: &str, pass: bool, detail: String) {
        println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        self.lines.push((name.to_string(), pass, detail));
    }
}

fn criterion_counts(r: &mut Report) {
    let start = Instant::now();
    let full = ModelConfig::full();
    let rows = |f| count_params(&full, f, GroupMask::ALL).unwrap();
    let find = |rows: &[(String, usize)], label: &str| rows.iter().find(|(l, _)| l == label).map(|(_, n)| *n).unwrap();
    let se = rows(CountFilter::Se);
    let bn = find(&rows(CountFilter::Bn), "total");
    let se_bn = find(&rows(CountFilter::SeBn), "total");
    let full = find(&rows(CountFilter::All), "total");
    let groups: Vec<usize> = ["G1", "G2", "G3", "G4"].iter().map(|g| find(&se, g)).collect();
    let se_total = find(&se, "total");
    let elapsed = start.elapsed();

    let kilo = |n: usize| (n as f64 / 100.0).round() / 10.0;
    let ratio = se_bn as f64 / full as f64;
    let pass = groups == [876, 4384, 25440, 50016]
        && se_total == 80716
        && bn == 7552
        && se_bn == 88268
        && [
            kilo(876),
            kilo(4384),
            kilo(25440),
            kilo(50016),
            kilo(80716),
            kilo(7552),
            kilo(88268),
        ] == [0.9, 4.4, 25.4, 50.0, 80.7, 7.6, 88.3]
        && (6_500_000..=9_500_000).contains(&full)
        && ratio <= 0.015
        && elapsed < Duration::from_secs(1);
    r.record(
        "1 parameter counts",
        pass,
        format!(
            "SE {groups:?} = {se_total}, BN {bn}, SE/BN {se_bn}, full {full}, ratio {:.3}%, {elapsed:?}",
            100.0 * ratio
        ),
    );
}

fn criterion_gradients(r: &mut Report) {
    let start = Instant::now();
    let mut worst = (String::new(), 0.0f64);
    let mut all_below = true;
    for (name, check) in op_checks().into_iter().chain(composite_checks()) {
        let err = check();
        all_below &= err < TOL;
        if !(err <= worst.1) {
            worst = (name.to_string(), err);
        }
    }
    let elapsed = start.elapsed();
    r.record(
        "2 gradient suite",
        all_below && elapsed < Duration::from_secs(120),
        format!("worst relative error {:.2e} ({}), {elapsed:?}", worst.1, worst.0),
    );
}

/// Scores on a `k / 1024` grid: small ranges force ties, and `x³ + x` is
/// exact there, so the transformed list keeps the same order and ties.
fn random_list(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let n = rng.random_range(2..=50);
    let n_target = rng.random_range(1..n);
    let range = if rng.random_bool(0.5) { 8 } else { 1024 };
    let mut draw = |k: usize| {
        (0..k)
            .map(|_| f64::from(rng.random_range(-range..=range)) / 1024.0)
            .collect::<Vec<_>>()
    };
    let targets = draw(n_target);
    let nontargets = draw(n - n_target);
    (targets, nontargets)
}

fn criterion_eer(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst_oracle = 0.0f64;
    let mut worst_monotone = 0.0f64;
    for _ in 0..1000 {
        let (t, n) = random_list(&mut rng);
        let got = eer(&t, &n).unwrap();
        worst_oracle = worst_oracle.max((got - eer_oracle(&t, &n)).abs());
        let g = |v: &[f64]| v.iter().map(|x| x * x * x + x).collect::<Vec<_>>();
        worst_monotone = worst_monotone.max((got - eer(&g(&t), &g(&n)).unwrap()).abs());
    }
    r.record(
        "4 EER oracle",
        worst_oracle < 1e-9 && worst_monotone < 1e-9,
        format!(
            "max |eer - oracle| {worst_oracle:.1e}, max monotone-transform change {worst_monotone:.1e} over 1000 lists"
        ),
    );
}

fn criterion_losses(r: &mut Report) {
    let ge2e = |shape: [usize; 3], data: Vec<f64>, w: f64, b: f64| {
        let mut t = Tape::new();
        let e = t.constant(Tensor::new(shape.to_vec(), data).unwrap());
        let w = t.constant(Tensor::scalar(w));
        let b = t.constant(Tensor::scalar(b));
        let l = ge2e_loss(&mut t, e, w, b).unwrap();
        t.scalar(l)
    };
    let orth = ge2e([2, 2, 2], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0], 1.0, 0.0);
    let orth_err = (orth - (1.0 + (-1.0f64).exp()).ln()).abs();
    let uniform = ge2e([2, 2, 3], [0.3, -0.4, 0.5].repeat(4), 10.0, -5.0);
    let uniform_err = (uniform - 2f64.ln()).abs();

    let emb = Tensor::from_fn(vec![3, 4], |i| ((i as f64 + 0.5) * 1.7).sin());
    let weight = Tensor::from_fn(vec![5, 4], |i| ((i as f64 + 0.3) * 0.9).cos());
    let labels = [4, 0, 2];
    let scale = 30.0;
    let mut t = Tape::new();
    let e = t.constant(emb.clone());
    let w = t.constant(weight.clone());
    let aam = aam_softmax_loss(&mut t, e, &labels, &AamHead::new(w, 0.0, scale).unwrap()).unwrap();
    let aam = t.scalar(aam);
    // Plain cross-entropy on scaled cosines, written out directly.
    let unit = |v: &[f64]| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect::<Vec<_>>()
    };
    let mut ce = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let ei = unit(&emb.data()[i * 4..(i + 1) * 4]);
        let logits: Vec<f64> = (0..5)
            .map(|c| {
                scale
                    * unit(&weight.data()[c * 4..(c + 1) * 4])
                        .iter()
                        .zip(&ei)
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
            })
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        ce += lse - logits[label];
    }
    let aam_err = (aam - ce / labels.len() as f64).abs();
    r.record(
        "6 loss spot values",
        orth_err <= 1e-6 && uniform_err <= 1e-6 && aam_err <= 1e-6,
        format!("GE2E orthogonal err {orth_err:.1e}, uniform err {uniform_err:.1e}, AAM(m=0) vs CE err {aam_err:.1e}"),
    );
}

const DETERMINISM_CONFIG: &str = "\
model.preset = tiny
train.epochs = 2
train.batch_size = 16
adapt.epochs = 1
adapt.speakers_per_batch = 4
adapt.utts_per_speaker = 3
";

/// Runs every pipeline command into `dir`, returning the produced files.
fn run_pipeline(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let cfg = ExperimentConfig::parse(DETERMINISM_CONFIG, Some("11")).unwrap();
    let data = dir.join("data");
    let domains = vec!["source".to_string(), "ent".to_string()];
    gen_data(&data, 11, &domains, 8, 12, cfg.model.mel_bins).unwrap();
    let pre = dir.join("pre.ckpt");
    pretrain_cmd(&cfg, &data, &pre).unwrap();
    let mut outputs = vec![pre.clone()];
    for mode in [AdaptMode::Se, AdaptMode::Bn, AdaptMode::SeBn, AdaptMode::FineTune] {
        let mut c = cfg.clone();
        c.adapt.mode = mode;
        let ckpt = dir.join(format!("{}.ckpt", mode.as_str()));
        adapt_cmd(&c, &pre, &data, None, &ckpt).unwrap();
        outputs.push(ckpt);
    }
    let trials = dir.join("trials.txt");
    let results = dir.join("results.csv");
    evaluate_cmd(
        &pre,
        &data,
        TrialSource::Make(Some(&trials)),
        None,
        "pretrain",
        11,
        &results,
    )
    .unwrap();
    let adapted = dir.join("se_bn.ckpt");
    let results2 = dir.join("results_se_bn.csv");
    evaluate_cmd(
        &adapted,
        &data,
        TrialSource::Load(&trials),
        None,
        "se_bn",
        11,
        &results2,
    )
    .unwrap();
    outputs.extend([trials, results, results2]);

    let mut files: Vec<(String, Vec<u8>)> = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(p) = stack.pop() {
        for entry in fs::read_dir(&p).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                files.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    files.sort();
    assert!(outputs.iter().all(|o| o.exists()));
    files
}

fn criterion_determinism(r: &mut Report) {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let fa = run_pipeline(a.path());
    let fb = run_pipeline(b.path());
    let names = |f: &[(String, Vec<u8>)]| f.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>();
    let differing: Vec<&str> = fa
        .iter()
        .zip(&fb)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    let csvs = fa.iter().filter(|(n, _)| n.ends_with(".csv")).count();
    let ckpts = fa.iter().filter(|(n, _)| n.ends_with(".ckpt")).count();
    r.record(
        "7 determinism",
        names(&fa) == names(&fb) && differing.is_empty(),
        format!(
            "{} files ({ckpts} checkpoints, {csvs} CSVs) from two runs, differing: {differing:?}",
            fa.len()
        ),
    );
}

fn trend_experiment() -> (TrendOutput, Duration, Vec<String>) {
    let mut cfg = ExperimentConfig::with_seed(1);
    cfg.train.epochs = 20;
    cfg.data.split_speakers = 50;
    let bins = cfg.model.mel_bins;
    let mut domains: Vec<String> = ["ent", "int", "live", "sing"].iter().map(|d| d.to_string()).collect();
    domains.sort_by(|a, b| {
        let s = |d: &str| DomainSpec::preset(d, bins).unwrap().severity();
        s(a).total_cmp(&s(b))
    });
    let plan = TrendPlan {
        seeds: vec![1, 2, 3],
        domains: domains.clone(),
        source_speakers: 100,
        source_utts: 12,
        target_speakers: 50,
        target_utts: 15,
        modes: vec![AdaptMode::Se, AdaptMode::Bn, AdaptMode::SeBn, AdaptMode::FineTune],
    };
    let start = Instant::now();
    let out = run_trend(&cfg, &plan).unwrap();
    (out, start.elapsed(), domains)
}

fn criterion_freeze(r: &mut Report, trend: &TrendOutput) {
    let adapters = [AdaptMode::Se, AdaptMode::Bn, AdaptMode::SeBn];
    let drifts: Vec<(AdaptMode, f64)> = trend
        .drift
        .iter()
        .filter(|(m, _)| adapters.contains(m))
        .copied()
        .collect();
    r.record(
        "3 freeze contract",
        drifts.len() == adapters.len() && drifts.iter().all(|(_, d)| *d == 0.0),
        format!(
            "max frozen drift over all runs: {}",
            drifts
                .iter()
                .map(|(m, d)| format!("{m} {d:e}"))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    );
}

fn criterion_trend(r: &mut Report, trend: &TrendOutput, elapsed: Duration, domains: &[String]) {
    let pct = |m: &str, d: &str| 100.0 * median_eer(&trend.rows, m, d).unwrap();
    let (mut a, mut b, mut c) = (true, true, true);
    let mut detail = Vec::new();
    for d in domains {
        let (pre, se, bn, se_bn, ft) = (
            pct("pretrain", d),
            pct("se", d),
            pct("bn", d),
            pct("se_bn", d),
            pct("fine_tune", d),
        );
        a &= se_bn <= 0.9 * pre;
        b &= se_bn <= se.min(bn) + 0.5;
        c &= se_bn <= ft + 0.5;
        detail.push(format!(
            "{d}: pre {pre:.2} se {se:.2} bn {bn:.2} se_bn {se_bn:.2} ft {ft:.2}"
        ));
    }
    println!("  median EER % over 3 seeds, 50-speaker split");
    for line in &detail {
        println!("    {line}");
    }
    let fast = elapsed <= Duration::from_secs(30 * 60);
    r.record(
        "5 adaptation trend",
        a && b && c && fast,
        format!("(a) {a} (b) {b} (c) {c}, {:.1} min", elapsed.as_secs_f64() / 60.0),
    );

    let pre: Vec<f64> = domains.iter().map(|d| pct("pretrain", d)).collect();
    r.record(
        "  shift monotonicity",
        pre.windows(2).all(|w| w[0] <= w[1]),
        format!(
            "pretrained median EER by severity: {}",
            domains
                .iter()
                .zip(&pre)
                .map(|(d, e)| format!("{d} {e:.2}"))
                .collect::<Vec<_>>()
                .join(" ≤ ")
        ),
    );
}

#[test]
fn acceptance_criteria() {
    let mut r = Report { lines: Vec::new() };
    criterion_counts(&mut r);
    criterion_gradients(&mut r);
    criterion_eer(&mut r);
    criterion_losses(&mut r);
    criterion_determinism(&mut r);
    let (trend, elapsed, domains) = trend_experiment();
    criterion_freeze(&mut r, &trend);
    criterion_trend(&mut r, &trend, elapsed, &domains);

    println!("\nsummary");
    for (name, pass, _) in &r.lines {
        println!("{} {name}", if *pass { "PASS" } else { "FAIL" });
    }
    let failed: Vec<&str> = r.lines.iter().filter(|l| !l.1).map(|l| l.0.as_str()).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
