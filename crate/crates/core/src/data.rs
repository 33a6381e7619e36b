//! Synthetic multi-domain speaker corpus.
//!
//! Each speaker is a latent vector `s ~ N(0, speaker_scale^2 I)`. Each domain
//! `g` owns a shift `mu_g ~ N(0, domain_shift_scale^2 I)` and a mixing matrix
//! `A_g = I + domain_transform_scale * G` with standard Gaussian `G`. A frame
//! of an utterance is `A_g s + mu_g + c_u + noise_scale * eps`, where `c_u` is
//! a per-utterance channel offset drawn with `session_scale`.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::encoder::Segment;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

const CORPUS_FORMAT: &str = "mdssl-corpus";
const CORPUS_VERSION: u32 = 1;

const GENRES: [&str; 11] = [
    "interview",
    "entertainment",
    "singing",
    "drama",
    "movie",
    "vlog",
    "live_broadcast",
    "speech",
    "recitation",
    "advertisement",
    "play",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub num_speakers: usize,
    pub num_domains: usize,
    /// Domains each speaker appears in; `None` means all of them.
    #[serde(default)]
    pub domains_per_speaker: Option<usize>,
    pub utterances_per_speaker_per_domain: usize,
    /// Inclusive frame-count range of a raw utterance.
    pub frames_per_utterance: (usize, usize),
    pub feature_dim: usize,
    /// Number of speakers held out for evaluation.
    pub eval_speakers: usize,
    pub speaker_scale: f64,
    pub domain_shift_scale: f64,
    pub domain_transform_scale: f64,
    #[serde(default)]
    pub session_scale: f64,
    pub noise_scale: f64,
    pub rng_seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            num_speakers: 50,
            num_domains: 6,
            domains_per_speaker: None,
            utterances_per_speaker_per_domain: 8,
            frames_per_utterance: (10, 40),
            feature_dim: 8,
            eval_speakers: 10,
            speaker_scale: 1.0,
            domain_shift_scale: 1.0,
            domain_transform_scale: 0.3,
            session_scale: 0.3,
            noise_scale: 3.0,
            rng_seed: 20_240_601,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::InvalidConfig(format!("corpus spec `{field}` {why}")));
        if self.num_speakers == 0 {
            return bad("num_speakers", "must be at least 1");
        }
        if self.num_domains == 0 {
            return bad("num_domains", "must be at least 1");
        }
        if let Some(k) = self.domains_per_speaker {
            if k == 0 || k > self.num_domains {
                return bad("domains_per_speaker", "must lie in 1..=num_domains");
            }
        }
        if self.utterances_per_speaker_per_domain == 0 {
            return bad("utterances_per_speaker_per_domain", "must be at least 1");
        }
        let (lo, hi) = self.frames_per_utterance;
        if lo == 0 || hi < lo {
            return bad("frames_per_utterance", "must be a non-empty range of positive counts");
        }
        if self.feature_dim == 0 {
            return bad("feature_dim", "must be at least 1");
        }
        if self.eval_speakers >= self.num_speakers {
            return bad("eval_speakers", "must leave at least one dev speaker");
        }
        for (name, v) in [
            ("speaker_scale", self.speaker_scale),
            ("domain_shift_scale", self.domain_shift_scale),
            ("domain_transform_scale", self.domain_transform_scale),
            ("session_scale", self.session_scale),
            ("noise_scale", self.noise_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(name, "must be a finite non-negative number");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Dev,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: usize,
    pub speaker_id: usize,
    pub domain_id: usize,
    /// One frame per row.
    pub frames: Matrix,
}

impl Utterance {
    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }

    /// The whole utterance as one segment.
    pub fn as_segment(&self) -> Segment {
        Segment { frames: self.frames.clone(), utterance_id: self.id, domain_id: self.domain_id }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub domain_names: Vec<String>,
    /// Split tag per speaker id.
    pub speaker_split: Vec<Split>,
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn split_of(&self, speaker: usize) -> Split {
        self.speaker_split[speaker]
    }

    pub fn utterances_in(&self, split: Split) -> Vec<Utterance> {
        self.utterances.iter().filter(|u| self.split_of(u.speaker_id) == split).cloned().collect()
    }

    pub fn num_domains(&self) -> usize {
        self.domain_names.len()
    }
}

/// Latent generative parameters, exposed for statistical tests.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub speakers: Vec<Vec<f64>>,
    pub domain_shift: Vec<Vec<f64>>,
    /// Row-major `feature_dim x feature_dim` mixing matrix per domain.
    pub domain_mixing: Vec<Matrix>,
}

fn gaussian_vec<R: Rng + ?Sized>(rng: &mut R, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

pub fn generate(spec: &CorpusSpec) -> Result<Corpus> {
    generate_with_truth(spec).map(|(c, _)| c)
}

pub fn generate_with_truth(spec: &CorpusSpec) -> Result<(Corpus, GroundTruth)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let dim = spec.feature_dim;

    let mut domain_shift = Vec::with_capacity(spec.num_domains);
    let mut domain_mixing = Vec::with_capacity(spec.num_domains);
    for _ in 0..spec.num_domains {
        domain_shift.push(gaussian_vec(&mut rng, dim, spec.domain_shift_scale));
        let mut a = gaussian_vec(&mut rng, dim * dim, spec.domain_transform_scale);
        for i in 0..dim {
            a[i * dim + i] += 1.0;
        }
        domain_mixing.push(Matrix::new(dim, dim, a)?);
    }
    let speakers: Vec<Vec<f64>> =
        (0..spec.num_speakers).map(|_| gaussian_vec(&mut rng, dim, spec.speaker_scale)).collect();

    let eval_start = spec.num_speakers - spec.eval_speakers;
    let speaker_split = (0..spec.num_speakers)
        .map(|s| if s >= eval_start { Split::Eval } else { Split::Dev })
        .collect();

    let (lo, hi) = spec.frames_per_utterance;
    let mut utterances = Vec::new();
    for (spk, s) in speakers.iter().enumerate() {
        let mut domains: Vec<usize> = (0..spec.num_domains).collect();
        if let Some(k) = spec.domains_per_speaker {
            domains.shuffle(&mut rng);
            domains.truncate(k);
            domains.sort_unstable();
        }
        for &g in &domains {
            let a = &domain_mixing[g];
            let centre: Vec<f64> = (0..dim)
                .map(|i| crate::numerics::dot(a.row(i), s) + domain_shift[g][i])
                .collect();
            for _ in 0..spec.utterances_per_speaker_per_domain {
                let len = rng.random_range(lo..=hi);
                let channel = gaussian_vec(&mut rng, dim, spec.session_scale);
                let mut data = Vec::with_capacity(len * dim);
                for _ in 0..len {
                    for i in 0..dim {
                        let eps: f64 = StandardNormal.sample(&mut rng);
                        data.push(centre[i] + channel[i] + spec.noise_scale * eps);
                    }
                }
                utterances.push(Utterance {
                    id: utterances.len(),
                    speaker_id: spk,
                    domain_id: g,
                    frames: Matrix::new(len, dim, data)?,
                });
            }
        }
    }
    let domain_names = (0..spec.num_domains)
        .map(|g| match (GENRES.get(g), g / GENRES.len()) {
            (Some(name), _) => name.to_string(),
            (None, round) => format!("{}_{round}", GENRES[g % GENRES.len()]),
        })
        .collect();
    let corpus = Corpus { spec: spec.clone(), domain_names, speaker_split, utterances };
    Ok((corpus, GroundTruth { speakers, domain_shift, domain_mixing }))
}

/// Splices short utterances of the same speaker and domain, greedily and in
/// input order, until each spliced result reaches `min_frames`.
///
/// Utterances already at least `min_frames` long pass through unchanged.
/// A spliced utterance is emitted at the position of the piece that completes
/// it and keeps the id of its first piece. Incomplete leftovers are dropped.
pub fn combine_short(utts: &[Utterance], min_frames: usize) -> Vec<Utterance> {
    let mut pending: HashMap<(usize, usize), Utterance> = HashMap::new();
    let mut out = Vec::with_capacity(utts.len());
    for u in utts {
        if u.len() >= min_frames {
            out.push(u.clone());
            continue;
        }
        let key = (u.speaker_id, u.domain_id);
        let merged = match pending.remove(&key) {
            Some(mut acc) => {
                acc.frames = acc.frames.vstack(&u.frames).expect("same feature dim within a corpus");
                acc
            }
            None => u.clone(),
        };
        if merged.len() >= min_frames {
            out.push(merged);
        } else {
            pending.insert(key, merged);
        }
    }
    out
}

/// Half-open frame span `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start < other.end && other.start < self.end
    }
}

/// Picks two non-overlapping contiguous spans of at least `min_len` frames.
///
/// A cut point splits the utterance into two regions; each view is a random
/// sub-span of one region, and which region feeds the query view is random.
pub fn sample_spans<R: Rng + ?Sized>(frames: usize, min_len: usize, rng: &mut R) -> Option<(Span, Span)> {
    if min_len == 0 || frames < 2 * min_len {
        return None;
    }
    let cut = rng.random_range(min_len..=frames - min_len);
    let mut pick = |lo: usize, hi: usize| {
        let len = rng.random_range(min_len..=hi - lo);
        let start = rng.random_range(lo..=hi - len);
        Span { start, end: start + len }
    };
    let first = pick(0, cut);
    let second = pick(cut, frames);
    if rng.random_bool(0.5) {
        Some((second, first))
    } else {
        Some((first, second))
    }
}

/// Draws the two views of one utterance.
pub fn sample_views<R: Rng + ?Sized>(u: &Utterance, min_len: usize, rng: &mut R) -> Result<(Segment, Segment)> {
    let (a, b) = sample_spans(u.len(), min_len, rng).ok_or(Error::TooShort {
        id: u.id,
        frames: u.len(),
        needed: 2 * min_len.max(1),
    })?;
    let cut = |s: Span| Segment {
        frames: u.frames.slice_rows(s.start, s.end),
        utterance_id: u.id,
        domain_id: u.domain_id,
    };
    Ok((cut(a), cut(b)))
}

/// Feature-level augmentation: one random gain for the whole segment, then
/// additive Gaussian noise per frame.
pub fn augment<R: Rng + ?Sized>(s: &Segment, gain_range: (f64, f64), noise_scale: f64, rng: &mut R) -> Result<Segment> {
    let (lo, hi) = gain_range;
    if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
        return Err(Error::InvalidConfig(format!("gain range must be positive, got ({lo}, {hi})")));
    }
    if !(noise_scale >= 0.0 && noise_scale.is_finite()) {
        return Err(Error::InvalidConfig(format!("noise scale must be non-negative, got {noise_scale}")));
    }
    let gain = if lo == hi { lo } else { rng.random_range(lo..hi) };
    let mut frames = s.frames.clone();
    frames.map_in_place(|v| v * gain);
    if noise_scale > 0.0 {
        let noisy: Vec<f64> = frames
            .data()
            .iter()
            .map(|v| {
                let z: f64 = StandardNormal.sample(rng);
                v + noise_scale * z
            })
            .collect();
        frames = Matrix::new(frames.rows(), frames.cols(), noisy)?;
    }
    Ok(Segment { frames, utterance_id: s.utterance_id, domain_id: s.domain_id })
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    spec: CorpusSpec,
    domain_names: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: usize,
    speaker: usize,
    domain: usize,
    split: Split,
    frames: Vec<Vec<f64>>,
}

/// Header line of a corpus file; enough to regenerate the corpus.
pub fn corpus_header_line(corpus: &Corpus) -> String {
    let header = Header {
        format: CORPUS_FORMAT.into(),
        version: CORPUS_VERSION,
        spec: corpus.spec.clone(),
        domain_names: corpus.domain_names.clone(),
    };
    serde_json::to_string(&header).expect("header serializes")
}

/// JSON-lines corpus: one header line, then one line per utterance.
pub fn write_corpus(corpus: &Corpus) -> String {
    let mut out = corpus_header_line(corpus);
    out.push('\n');
    for u in &corpus.utterances {
        let rec = Record {
            id: u.id,
            speaker: u.speaker_id,
            domain: u.domain_id,
            split: corpus.split_of(u.speaker_id),
            frames: u.frames.row_iter().map(<[f64]>::to_vec).collect(),
        };
        let _ = writeln!(out, "{}", serde_json::to_string(&rec).expect("record serializes"));
    }
    out
}

fn parse_header(line: &str) -> Result<Header> {
    let header: Header = serde_json::from_str(line).map_err(|e| Error::Parse(format!("corpus header: {e}")))?;
    if header.format != CORPUS_FORMAT || header.version != CORPUS_VERSION {
        return Err(Error::Parse(format!("unsupported corpus format {} v{}", header.format, header.version)));
    }
    header.spec.validate()?;
    Ok(header)
}

/// Spec stored in a corpus file header.
pub fn read_corpus_spec(text: &str) -> Result<CorpusSpec> {
    let first = text.lines().next().ok_or_else(|| Error::Parse("empty corpus file".into()))?;
    Ok(parse_header(first)?.spec)
}

pub fn read_corpus(text: &str) -> Result<Corpus> {
    let mut lines = text.lines();
    let header = parse_header(lines.next().ok_or_else(|| Error::Parse("empty corpus file".into()))?)?;
    let mut speaker_split = vec![Split::Dev; header.spec.num_speakers];
    let mut utterances = Vec::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: Record =
            serde_json::from_str(line).map_err(|e| Error::Parse(format!("corpus record {}: {e}", n + 1)))?;
        if rec.speaker >= header.spec.num_speakers || rec.domain >= header.spec.num_domains {
            return Err(Error::Parse(format!("corpus record {} out of range", n + 1)));
        }
        speaker_split[rec.speaker] = rec.split;
        utterances.push(Utterance {
            id: rec.id,
            speaker_id: rec.speaker,
            domain_id: rec.domain,
            frames: Matrix::from_rows(&rec.frames)?,
        });
    }
    Ok(Corpus { spec: header.spec, domain_names: header.domain_names, speaker_split, utterances })
}

/// Per-domain utterance groups in ascending domain order.
pub fn group_by_domain(utts: &[Utterance]) -> BTreeMap<usize, Vec<usize>> {
    let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, u) in utts.iter().enumerate() {
        map.entry(u.domain_id).or_default().push(i);
    }
    map
}
