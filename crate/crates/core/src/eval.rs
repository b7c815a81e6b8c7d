//! Speaker-verification evaluation: enrollment by embedding averaging,
//! enroll × test cross-paired trials, cosine scoring and equal error rate.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{contract_err, Error, Result};
use crate::par;

/// Cosine similarity in `[-1, 1]`; zero vectors score 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

pub fn l2_normalized(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter().map(|x| x / n).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Enrollment {
    pub speaker: String,
    /// Unit-norm speaker model.
    pub vector: Vec<f64>,
}

/// Normalizes each embedding, averages, and re-normalizes.
pub fn enroll(speaker: &str, embeddings: &[Vec<f64>]) -> Result<Enrollment> {
    let first = embeddings
        .first()
        .ok_or_else(|| contract_err!("no enrollment utterances for {speaker}"))?;
    let mut acc = vec![0.0; first.len()];
    for e in embeddings {
        if e.len() != acc.len() {
            return Err(contract_err!("embedding dimensions differ within {speaker}"));
        }
        for (a, v) in acc.iter_mut().zip(l2_normalized(e)) {
            *a += v;
        }
    }
    Ok(Enrollment {
        speaker: speaker.to_string(),
        vector: l2_normalized(&acc),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub speaker: String,
    pub utterance: String,
    pub target: bool,
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrialList {
    pub trials: Vec<Trial>,
}

/// One trial per (enrolled speaker, test utterance) pair, speaker-major.
/// `tests` holds `(utterance id, true speaker)`.
pub fn cross_pair_trials(speakers: &[&str], tests: &[(&str, &str)]) -> TrialList {
    let trials = speakers
        .iter()
        .flat_map(|&s| {
            tests.iter().map(move |&(u, owner)| Trial {
                speaker: s.to_string(),
                utterance: u.to_string(),
                target: owner == s,
                score: None,
            })
        })
        .collect();
    TrialList { trials }
}

/// Fills every trial's score with the cosine between speaker model and test embedding.
pub fn score_trials(
    trials: &TrialList,
    enrollments: &IndexMap<String, Enrollment>,
    embeddings: &IndexMap<String, Vec<f64>>,
) -> Result<TrialList> {
    let scored = par::map_slice(&trials.trials, |t| {
        let e = enrollments
            .get(&t.speaker)
            .ok_or_else(|| contract_err!("trial references unknown speaker {}", t.speaker))?;
        let x = embeddings
            .get(&t.utterance)
            .ok_or_else(|| contract_err!("trial references unknown utterance {}", t.utterance))?;
        Ok(Trial {
            score: Some(cosine(&e.vector, x)),
            ..t.clone()
        })
    });
    Ok(TrialList {
        trials: scored.into_iter().collect::<Result<_>>()?,
    })
}

impl TrialList {
    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn n_targets(&self) -> usize {
        self.trials.iter().filter(|t| t.target).count()
    }

    /// Splits scores into (targets, nontargets).
    pub fn scores(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tar = Vec::new();
        let mut non = Vec::new();
        for t in &self.trials {
            let s = t
                .score
                .ok_or_else(|| contract_err!("trial {} {} is unscored", t.speaker, t.utterance))?;
            if t.target {
                tar.push(s);
            } else {
                non.push(s);
            }
        }
        Ok((tar, non))
    }

    pub fn eer(&self) -> Result<f64> {
        let (tar, non) = self.scores()?;
        eer(&tar, &non)
    }

    /// Text form: `<speaker> <utterance> <0|1>[ <score>]` per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.trials {
            let _ = write!(out, "{} {} {}", t.speaker, t.utterance, u8::from(t.target));
            if let Some(s) = t.score {
                let _ = write!(out, " {s}");
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut trials = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.is_empty() {
                continue;
            }
            let bad = |what: &str| Error::Format(format!("trial line {}: {what}", n + 1));
            if !(3..=4).contains(&f.len()) {
                return Err(bad("expected 3 or 4 fields"));
            }
            let target = match f[2] {
                "1" => true,
                "0" => false,
                _ => return Err(bad("label must be 0 or 1")),
            };
            let score = f
                .get(3)
                .map(|s| s.parse::<f64>().map_err(|_| bad("bad score")))
                .transpose()?;
            trials.push(Trial {
                speaker: f[0].to_string(),
                utterance: f[1].to_string(),
                target,
                score,
            });
        }
        Ok(Self { trials })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// Errors unless both labels are present.
    pub fn check_both_classes(&self) -> Result<()> {
        let nt = self.n_targets();
        if nt == 0 || nt == self.len() {
            return Err(contract_err!(
                "trial list needs both target and nontarget trials ({nt} of {} are targets)",
                self.len()
            ));
        }
        Ok(())
    }
}

/// Equal error rate. Thresholds sweep the sorted unique scores plus `+∞`;
/// `FAR(t)` is the fraction of nontargets `≥ t`, `FRR(t)` the fraction of
/// targets `< t`. The result is the point where the piecewise-linear path
/// through consecutive `(FAR, FRR)` operating points crosses `FAR = FRR`.
pub fn eer(targets: &[f64], nontargets: &[f64]) -> Result<f64> {
    if targets.is_empty() || nontargets.is_empty() {
        return Err(contract_err!(
            "EER needs both classes ({} targets, {} nontargets)",
            targets.len(),
            nontargets.len()
        ));
    }
    if targets.iter().chain(nontargets).any(|s| !s.is_finite()) {
        return Err(contract_err!("non-finite score"));
    }
    let mut tar = targets.to_vec();
    let mut non = nontargets.to_vec();
    tar.sort_by(f64::total_cmp);
    non.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = tar.iter().chain(&non).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.push(f64::INFINITY);

    let (nt, nn) = (tar.len() as f64, non.len() as f64);
    // Both lists are sorted, so the counts advance monotonically.
    let (mut below_t, mut below_n) = (0usize, 0usize);
    let mut prev: Option<(f64, f64)> = None;
    for &t in &thresholds {
        while below_t < tar.len() && tar[below_t] < t {
            below_t += 1;
        }
        while below_n < non.len() && non[below_n] < t {
            below_n += 1;
        }
        let far = (non.len() - below_n) as f64 / nn;
        let frr = below_t as f64 / nt;
        let d = far - frr;
        if d <= 0.0 {
            return Ok(match prev {
                _ if d == 0.0 => far,
                Some((pfar, pd)) => {
                    let lambda = pd / (pd - d);
                    pfar + lambda * (far - pfar)
                }
                None => far,
            });
        }
        prev = Some((far, d));
    }
    unreachable!("the +inf threshold always has FAR = 0 and FRR = 1")
}

/// One line of the results table.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub method: String,
    pub n_params: usize,
    pub domain: String,
    pub n_speakers: usize,
    pub seed: u64,
    /// Fraction in `[0, 1]`; written as a percentage with three decimals.
    pub eer: f64,
}

pub const RESULTS_HEADER: [&str; 6] = ["method", "n_params", "domain", "n_speakers", "seed", "eer"];

pub fn write_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(RESULTS_HEADER)?;
    for r in rows {
        w.write_record([
            r.method.clone(),
            r.n_params.to_string(),
            r.domain.clone(),
            r.n_speakers.to_string(),
            r.seed.to_string(),
            format!("{:.3}", 100.0 * r.eer),
        ])?;
    }
    w.flush()?;
    Ok(())
}
