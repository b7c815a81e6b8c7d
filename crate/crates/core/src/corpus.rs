//! Deterministic synthetic multi-domain speaker corpus.
//!
//! Each speaker is a latent vector `v ∈ R^16`. Frames of an utterance are
//! `x_t = A·v + n_t`, with a seed-derived mixing matrix `A ∈ R^{F×16}` and
//! AR(1) noise `n_t`. A [`DomainSpec`] then distorts the frames:
//! per-bin tilt, `tanh` compression, tremolo gain and additive white noise.
//!
//! All draws come from [`SeedStream`] paths, so any utterance can be rebuilt
//! from `(seed, domain, speaker, utterance)` alone.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{contract_err, Error, Result};
use crate::par;
use crate::rng::SeedStream;
use crate::tensor::Tensor;

pub const LATENT_DIM: usize = 16;
pub const MIN_FRAMES: usize = 100;
pub const MAX_FRAMES: usize = 200;
pub const AR_RHO: f64 = 0.9;
pub const AR_STD: f64 = 0.3;
/// Per-bin standard deviation of the speaker component `A·v`.
pub const SPEAKER_SCALE: f64 = 0.4;

const FEAT_MAGIC: &[u8; 4] = b"SBFT";
const MANIFEST: &str = "manifest.tsv";

/// Acoustic condition applied on top of the speaker process.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSpec {
    pub name: String,
    /// Per-bin gain.
    pub tilt: Vec<f64>,
    pub noise_std: f64,
    /// `α` in `tanh(α·x)/α`; 0 passes frames through.
    pub compress: f64,
    /// Cycles per frame; 0 disables tremolo.
    pub tremolo_rate: f64,
    pub tremolo_depth: f64,
}

/// Target domains in increasing severity.
pub const TARGET_DOMAINS: [&str; 4] = ["live", "int", "ent", "sing"];
pub const SOURCE_DOMAIN: &str = "source";

fn linear_tilt(bins: usize, gain: f64, slope: f64) -> Vec<f64> {
    let denom = bins.saturating_sub(1).max(1) as f64;
    (0..bins)
        .map(|f| gain * (1.0 + slope * (f as f64 / denom - 0.5)))
        .collect()
}

impl DomainSpec {
    /// No distortion at all.
    pub fn identity(name: &str, bins: usize) -> Self {
        Self {
            name: name.to_string(),
            tilt: vec![1.0; bins],
            noise_std: 0.0,
            compress: 0.0,
            tremolo_rate: 0.0,
            tremolo_depth: 0.0,
        }
    }

    /// Named preset: `source` or one of [`TARGET_DOMAINS`].
    pub fn preset(name: &str, bins: usize) -> Result<Self> {
        let (gain, slope, noise, compress, rate, depth) = match name {
            "source" => (1.0, 0.0, 0.05, 0.0, 0.0, 0.0),
            "live" => (1.3, 0.3, 0.15, 0.1, 0.0, 0.0),
            "int" => (1.8, -1.2, 0.9, 0.3, 0.0, 0.0),
            "ent" => (3.0, 1.2, 1.5, 0.5, 0.0, 0.0),
            "sing" => (3.5, -1.5, 2.4, 0.7, 0.05, 0.5),
            _ => return Err(Error::Config(format!("unknown domain {name:?}"))),
        };
        Ok(Self {
            name: name.to_string(),
            tilt: linear_tilt(bins, gain, slope),
            noise_std: noise,
            compress,
            tremolo_rate: rate,
            tremolo_depth: depth,
        })
    }

    /// Scalar severity used to order domains.
    pub fn severity(&self) -> f64 {
        let tilt_dev = self.tilt.iter().map(|g| (g - 1.0).abs()).sum::<f64>() / self.tilt.len().max(1) as f64;
        self.noise_std + self.compress + self.tremolo_depth + tilt_dev
    }

    /// Distorts `x` (`[F,T]` row-major) in place.
    pub fn apply(&self, x: &mut [f64], frames: usize, rng: &mut impl Rng) {
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        for (f, row) in x.chunks_mut(frames).enumerate() {
            for (t, v) in row.iter_mut().enumerate() {
                let mut y = *v * self.tilt[f];
                if self.compress > 0.0 {
                    y = (self.compress * y).tanh() / self.compress;
                }
                if self.tremolo_depth > 0.0 && self.tremolo_rate > 0.0 {
                    let arg = std::f64::consts::TAU * self.tremolo_rate * t as f64 + phase;
                    y *= 1.0 + self.tremolo_depth * arg.sin();
                }
                *v = y;
            }
        }
        if self.noise_std > 0.0 {
            for v in x.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v += self.noise_std * z;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Pretrain,
    Dev,
    Test,
    /// Target-domain utterance not selected into dev or test.
    Unused,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Pretrain => "pretrain",
            Split::Dev => "dev",
            Split::Test => "test",
            Split::Unused => "unused",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Split::Pretrain),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            "unused" => Ok(Split::Unused),
            _ => Err(Error::Format(format!("unknown split tag {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub speaker: String,
    pub domain: String,
    pub split: Split,
    /// `[F, T]`
    pub features: Tensor<f32>,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.features.shape()[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub mel_bins: usize,
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    /// Speaker ids in first-appearance order.
    pub fn speakers(&self) -> Vec<&str> {
        let mut seen = indexmap::IndexSet::new();
        for u in &self.utterances {
            seen.insert(u.speaker.as_str());
        }
        seen.into_iter().collect()
    }

    /// Utterance indices grouped by speaker, in first-appearance order.
    pub fn by_speaker(&self, filter: impl Fn(&Utterance) -> bool) -> indexmap::IndexMap<&str, Vec<usize>> {
        let mut m: indexmap::IndexMap<&str, Vec<usize>> = indexmap::IndexMap::new();
        for (i, u) in self.utterances.iter().enumerate() {
            if filter(u) {
                m.entry(u.speaker.as_str()).or_default().push(i);
            }
        }
        m
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.utterances.len())
            .filter(|&i| self.utterances[i].split == split)
            .collect()
    }

    pub fn domains(&self) -> Vec<&str> {
        let mut seen = indexmap::IndexSet::new();
        for u in &self.utterances {
            seen.insert(u.domain.as_str());
        }
        seen.into_iter().collect()
    }

    /// Utterances of one domain, as a standalone corpus.
    pub fn domain(&self, name: &str) -> Corpus {
        Corpus {
            mel_bins: self.mel_bins,
            utterances: self.utterances.iter().filter(|u| u.domain == name).cloned().collect(),
        }
    }

    pub fn extend(&mut self, other: Corpus) -> Result<()> {
        if other.mel_bins != self.mel_bins {
            return Err(contract_err!(
                "cannot merge corpora with {} and {} bins",
                self.mel_bins,
                other.mel_bins
            ));
        }
        self.utterances.extend(other.utterances);
        Ok(())
    }
}

/// Seed-derived mixing matrix `A`, `[F, 16]` row-major, shared by every
/// domain generated from the same seed.
pub fn mixing_matrix(seed: u64, bins: usize) -> Vec<f64> {
    let mut rng = SeedStream::new(seed).split("mixing").rng();
    let scale = SPEAKER_SCALE / (LATENT_DIM as f64).sqrt();
    (0..bins * LATENT_DIM)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            scale * z
        })
        .collect()
}

pub fn speaker_latent(stream: SeedStream) -> Vec<f64> {
    let mut rng = stream.rng();
    (0..LATENT_DIM).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Undistorted frames `A·v + n_t`, `[F, T]` row-major.
pub fn base_frames(mixing: &[f64], latent: &[f64], frames: usize, rng: &mut impl Rng) -> Vec<f64> {
    let bins = mixing.len() / LATENT_DIM;
    let innov = AR_STD;
    let stationary = AR_STD / (1.0 - AR_RHO * AR_RHO).sqrt();
    let mut x = vec![0.0; bins * frames];
    for f in 0..bins {
        let mean: f64 = mixing[f * LATENT_DIM..(f + 1) * LATENT_DIM]
            .iter()
            .zip(latent)
            .map(|(a, v)| a * v)
            .sum();
        let z: f64 = StandardNormal.sample(rng);
        let mut n = stationary * z;
        for t in 0..frames {
            if t > 0 {
                let z: f64 = StandardNormal.sample(rng);
                n = AR_RHO * n + innov * z;
            }
            x[f * frames + t] = mean + n;
        }
    }
    x
}

fn speaker_id(domain: &str, s: usize) -> String {
    format!("{domain}-spk{s:04}")
}

/// Generates `n_speakers × utts_per_speaker` utterances of one domain.
/// Utterances of the source domain are tagged `pretrain`, all others `unused`
/// until [`assign_low_resource_split`] tags them.
pub fn gen_corpus(
    seed: u64,
    n_speakers: usize,
    utts_per_speaker: usize,
    domain: &DomainSpec,
    bins: usize,
) -> Result<Corpus> {
    if n_speakers < 2 {
        return Err(contract_err!("corpus needs at least 2 speakers, got {n_speakers}"));
    }
    if utts_per_speaker == 0 {
        return Err(contract_err!("corpus needs at least 1 utterance per speaker"));
    }
    if domain.tilt.len() != bins {
        return Err(contract_err!(
            "domain tilt has {} bins, corpus has {bins}",
            domain.tilt.len()
        ));
    }
    let mixing = mixing_matrix(seed, bins);
    let root = SeedStream::new(seed).split("domain").split(&domain.name);
    let latents: Vec<Vec<f64>> = (0..n_speakers)
        .map(|s| speaker_latent(root.split("speaker").split_index(s as u64)))
        .collect();
    let split = if domain.name == SOURCE_DOMAIN {
        Split::Pretrain
    } else {
        Split::Unused
    };
    let utterances = par::map_range(n_speakers * utts_per_speaker, |k| {
        let (s, u) = (k / utts_per_speaker, k % utts_per_speaker);
        let stream = root.split("utt").split_index(k as u64);
        let mut rng = stream.rng();
        let frames = rng.random_range(MIN_FRAMES..=MAX_FRAMES);
        let mut x = base_frames(&mixing, &latents[s], frames, &mut rng);
        domain.apply(&mut x, frames, &mut stream.split("domain").rng());
        let speaker = speaker_id(&domain.name, s);
        Utterance {
            id: format!("{speaker}-utt{u:03}"),
            speaker,
            domain: domain.name.clone(),
            split,
            features: Tensor::new(vec![bins, frames], x.iter().map(|&v| v as f32).collect())
                .expect("generated shape is consistent"),
        }
    });
    Ok(Corpus {
        mel_bins: bins,
        utterances,
    })
}

/// Dev and test utterance indices of a closed-set low-resource split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LowResourceSplit {
    pub dev: Vec<usize>,
    pub test: Vec<usize>,
}

/// Picks `n_speakers` speakers; each gets up to 5 dev utterances and 5–10
/// disjoint test utterances.
pub fn make_low_resource_split(corpus: &Corpus, n_speakers: usize, seed: u64) -> Result<LowResourceSplit> {
    let groups = corpus.by_speaker(|_| true);
    if groups.len() < n_speakers {
        return Err(contract_err!(
            "split needs {n_speakers} speakers, corpus has {}",
            groups.len()
        ));
    }
    if n_speakers < 2 {
        return Err(contract_err!("split needs at least 2 speakers"));
    }
    let stream = SeedStream::new(seed).split("low-resource");
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.shuffle(&mut stream.split("speakers").rng());
    let mut chosen: Vec<usize> = order[..n_speakers].to_vec();
    chosen.sort_unstable();
    let mut out = LowResourceSplit {
        dev: Vec::new(),
        test: Vec::new(),
    };
    for g in chosen {
        let (spk, utts) = groups.get_index(g).expect("index in range");
        if utts.len() < 7 {
            return Err(contract_err!(
                "speaker {spk} has {} utterances, need at least 7",
                utts.len()
            ));
        }
        let mut rng = stream.split(spk).rng();
        let mut utts = utts.clone();
        utts.shuffle(&mut rng);
        let n_dev = 5.min(utts.len() - 5);
        let n_test = rng.random_range(5..=10.min(utts.len() - n_dev));
        out.dev.extend_from_slice(&utts[..n_dev]);
        out.test.extend_from_slice(&utts[n_dev..n_dev + n_test]);
    }
    Ok(out)
}

/// Tags the corpus with a low-resource split; everything else becomes `unused`.
pub fn assign_low_resource_split(corpus: &mut Corpus, split: &LowResourceSplit) {
    for u in &mut corpus.utterances {
        u.split = Split::Unused;
    }
    for &i in &split.dev {
        corpus.utterances[i].split = Split::Dev;
    }
    for &i in &split.test {
        corpus.utterances[i].split = Split::Test;
    }
}

pub fn write_features(path: &Path, x: &Tensor<f32>) -> Result<()> {
    let s = x.shape();
    if s.len() != 2 {
        return Err(contract_err!("feature matrix must be [F,T], got {s:?}"));
    }
    let dim = |v: usize| u16::try_from(v).map_err(|_| contract_err!("extent {v} does not fit in 16 bits"));
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(FEAT_MAGIC)?;
    w.write_u16::<LittleEndian>(dim(s[0])?)?;
    w.write_u16::<LittleEndian>(dim(s[1])?)?;
    for &v in x.data() {
        w.write_f32::<LittleEndian>(v)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<Tensor<f32>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != FEAT_MAGIC {
        return Err(Error::Format(format!("{}: bad feature magic", path.display())));
    }
    let f = r.read_u16::<LittleEndian>()? as usize;
    let t = r.read_u16::<LittleEndian>()? as usize;
    let mut data = vec![0f32; f * t];
    r.read_f32_into::<LittleEndian>(&mut data)?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format(format!(
            "{}: trailing bytes after features",
            path.display()
        )));
    }
    Tensor::new(vec![f, t], data).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Writes `manifest.tsv` and one `feats/<id>.sbft` file per utterance.
pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    fs::create_dir_all(dir.join("feats"))?;
    let mut w = csv::WriterBuilder::new()
        .delimiter(b'\t')
        .from_path(dir.join(MANIFEST))?;
    w.write_record(["id", "speaker", "domain", "split", "path", "frames"])?;
    for u in &corpus.utterances {
        let rel = format!("feats/{}.sbft", u.id);
        write_features(&dir.join(&rel), &u.features)?;
        w.write_record([
            u.id.as_str(),
            u.speaker.as_str(),
            u.domain.as_str(),
            u.split.as_str(),
            rel.as_str(),
            &u.frames().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let mut r = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .from_path(dir.join(MANIFEST))?;
    let mut utterances = Vec::new();
    let mut bins = None;
    let mut ids = std::collections::HashSet::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != 6 {
            return Err(Error::Format(format!(
                "manifest record has {} fields, expected 6",
                rec.len()
            )));
        }
        let features = read_features(&dir.join(&rec[4]))?;
        let frames: usize = rec[5]
            .parse()
            .map_err(|_| Error::Format(format!("bad frame count {:?}", &rec[5])))?;
        if features.shape()[1] != frames {
            return Err(Error::Format(format!(
                "{}: manifest says {frames} frames, file has {}",
                &rec[0],
                features.shape()[1]
            )));
        }
        let f = features.shape()[0];
        if *bins.get_or_insert(f) != f {
            return Err(Error::Format(format!(
                "{}: {f} bins differs from the rest of the corpus",
                &rec[0]
            )));
        }
        if !ids.insert(rec[0].to_string()) {
            return Err(Error::Format(format!("duplicate utterance id {}", &rec[0])));
        }
        utterances.push(Utterance {
            id: rec[0].to_string(),
            speaker: rec[1].to_string(),
            domain: rec[2].to_string(),
            split: rec[3].parse()?,
            features,
        });
    }
    let mel_bins = bins.ok_or_else(|| Error::Format("empty manifest".into()))?;
    Ok(Corpus { mel_bins, utterances })
}
