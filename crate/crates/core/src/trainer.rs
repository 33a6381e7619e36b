//! The adaptation loop: batch, encode, loss, backprop into the query
//! encoder, SGD, momentum update of the key encoder, bank maintenance.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::batching::{build_batch, BatchConfig, BatchItem, MiniBatch, SamplingMode};
use crate::data::{augment, combine_short, generate, Corpus, CorpusSpec, Split, Utterance};
use crate::encoder::{accumulate_encode_grad, encode, momentum_update, Activation, EncoderDims, EncoderParams};
use crate::error::{Error, Result};
use crate::losses::{combined_loss, contrastive_loss, LossConfig, LossValue};
use crate::membank::{BankNegatives, MemoryBank};
use crate::numerics::Vector;

/// The ablation ladder, from plain contrastive adaptation to the full
/// multi-domain recipe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    SslSd,
    SslSdMoco,
    Idns,
    IdnsMoco,
    FullMd,
}

impl Preset {
    pub const ALL: [Preset; 5] = [Preset::SslSd, Preset::SslSdMoco, Preset::Idns, Preset::IdnsMoco, Preset::FullMd];

    pub fn name(self) -> &'static str {
        match self {
            Preset::SslSd => "ssl_sd",
            Preset::SslSdMoco => "ssl_sd_moco",
            Preset::Idns => "idns",
            Preset::IdnsMoco => "idns_moco",
            Preset::FullMd => "full_md",
        }
    }

    /// Overrides the switches that define the preset; temperature, lambda,
    /// loss form and the in-domain bank policy come from `base`.
    pub fn loss_config(self, base: &LossConfig) -> LossConfig {
        let (mode, bank, coral) = match self {
            Preset::SslSd => (SamplingMode::SingleDomain, false, false),
            Preset::SslSdMoco => (SamplingMode::SingleDomain, true, false),
            Preset::Idns => (SamplingMode::InDomain, false, false),
            Preset::IdnsMoco => (SamplingMode::InDomain, true, false),
            Preset::FullMd => (SamplingMode::InDomain, true, true),
        };
        let bank_negatives = match mode {
            SamplingMode::SingleDomain => BankNegatives::All,
            SamplingMode::InDomain => base.bank_negatives,
        };
        LossConfig { sampling_mode: mode, use_bank: bank, use_coral: coral, bank_negatives, ..base.clone() }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown preset `{s}`")))
    }
}

/// Optional supervised-contrastive warm start on a single-domain source
/// corpus: the positive of each anchor is another utterance of the same
/// speaker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WarmStart {
    pub source: CorpusSpec,
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for WarmStart {
    fn default() -> Self {
        Self {
            source: CorpusSpec {
                num_speakers: 200,
                num_domains: 1,
                utterances_per_speaker_per_domain: 6,
                eval_speakers: 0,
                domain_shift_scale: 0.0,
                domain_transform_scale: 0.0,
                rng_seed: 7,
                ..CorpusSpec::default()
            },
            steps: 300,
            learning_rate: 0.05,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    /// Key-encoder momentum.
    pub momentum: f64,
    pub bank_capacity: usize,
    pub rng_seed: u64,
    /// Checkpoint interval in steps; 0 disables.
    pub checkpoint_every: usize,
    /// Interim evaluation interval in steps; 0 disables.
    pub eval_every: usize,
    /// Short utterances are spliced up to this many frames before sampling.
    pub min_frames: usize,
    /// Batches prepared ahead of the consuming step.
    pub prefetch: usize,
    pub init_scale: f64,
    pub encoder: EncoderDims,
    pub batch: BatchConfig,
    pub loss: LossConfig,
    #[serde(default)]
    pub warm_start: Option<WarmStart>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            learning_rate: 0.05,
            momentum: 0.999,
            bank_capacity: 512,
            rng_seed: 1,
            checkpoint_every: 0,
            eval_every: 0,
            min_frames: 20,
            prefetch: 16,
            init_scale: 1.0,
            encoder: EncoderDims::default(),
            batch: BatchConfig::default(),
            loss: LossConfig::default(),
            warm_start: None,
        }
    }
}

impl TrainConfig {
    pub fn with_preset(mut self, preset: Preset) -> Self {
        self.loss = preset.loss_config(&self.loss);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("train `learning_rate` must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("train `momentum` must lie in [0, 1)");
        }
        if self.loss.use_bank && self.bank_capacity == 0 {
            return bad("train `bank_capacity` must be positive when the bank is enabled");
        }
        if self.min_frames < 2 * self.batch.segment_min_len {
            return bad("train `min_frames` must allow two views of `segment_min_len` frames");
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return bad("train `init_scale` must be positive");
        }
        if self.loss.sampling_mode == SamplingMode::InDomain && !self.loss.use_bank && self.batch.min_per_domain < 2 {
            return bad("in-domain sampling without a bank needs `min_per_domain` of at least 2");
        }
        if let Some(w) = &self.warm_start {
            w.source.validate()?;
            if w.batch_size < 2 {
                return bad("warm start `batch_size` must be at least 2");
            }
        }
        self.batch.validate()?;
        self.loss.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub total: f64,
    pub contrastive: f64,
    pub coral: f64,
    pub bank_fill: usize,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "step,total,cl,coral,bank_fill,grad_norm";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.records {
            let _ = writeln!(out, "{},{},{},{},{},{}", r.step, r.total, r.contrastive, r.coral, r.bank_fill, r.grad_norm);
        }
        out
    }

    pub fn last(&self) -> Option<&StepRecord> {
        self.records.last()
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub theta: EncoderParams,
    pub theta_k: EncoderParams,
    pub bank: MemoryBank,
    pub step: usize,
}

impl TrainState {
    /// Key encoder starts as an exact copy of the query encoder.
    pub fn new(theta: EncoderParams, bank_capacity: usize) -> Self {
        let dim = theta.dims().embed;
        Self { theta_k: theta.clone(), theta, bank: MemoryBank::new(bank_capacity, dim), step: 0 }
    }
}

/// Loss and query-encoder gradient for one batch, without touching state.
#[derive(Debug, Clone)]
pub struct StepGradient {
    pub value: LossValue,
    pub grad: EncoderParams,
    /// Key embeddings, as they would be enqueued in MoCo mode.
    pub keys: Vec<Vector>,
}

/// Evaluates the combined loss on `batch` and backpropagates it into the
/// query encoder.
///
/// With the bank enabled, keys come from the key encoder and are treated as
/// constants; otherwise both views go through the query encoder and both
/// carry gradient. Bank negatives are only used once the bank holds at least
/// one batch worth of entries.
pub fn loss_and_gradient(state: &TrainState, batch: &MiniBatch, cfg: &TrainConfig) -> Result<StepGradient> {
    let moco = cfg.loss.use_bank;
    let queries = batch.items.par_iter().map(|it| encode(&state.theta, &it.query)).collect::<Result<Vec<_>>>()?;
    let key_encoder = if moco { &state.theta_k } else { &state.theta };
    let keys = batch.items.par_iter().map(|it| encode(key_encoder, &it.key)).collect::<Result<Vec<_>>>()?;
    let domains = batch.domains();
    let bank = (moco && state.bank.len() >= batch.len()).then_some(&state.bank);

    let out = combined_loss(&queries, &keys, &domains, &cfg.loss, bank)?;
    let v = out.value;
    if !(v.total.is_finite() && v.contrastive.is_finite() && v.coral.is_finite()) {
        return Err(Error::NonFinite(format!(
            "step {}: total {} contrastive {} coral {}",
            state.step, v.total, v.contrastive, v.coral
        )));
    }
    let grad = backprop(&state.theta, &batch.items, &out.grad_queries, (!moco).then_some(&out.grad_keys[..]))?;
    Ok(StepGradient { value: v, grad, keys })
}

/// One optimisation step: gradient, SGD on the query encoder, momentum
/// update of the key encoder, then bank maintenance in MoCo mode.
pub fn train_step(state: &mut TrainState, batch: &MiniBatch, cfg: &TrainConfig) -> Result<StepRecord> {
    let StepGradient { value: v, grad, keys } = loss_and_gradient(state, batch, cfg)?;
    let grad_norm = grad.l2_norm();
    if !grad_norm.is_finite() {
        return Err(Error::NonFinite(format!("step {}: gradient norm", state.step)));
    }
    state.theta.axpy(-cfg.learning_rate, &grad)?;
    momentum_update(&mut state.theta_k, &state.theta, cfg.momentum)?;
    if cfg.loss.use_bank {
        state.bank.enqueue(keys.into_iter().zip(batch.domains()))?;
    }
    let record = StepRecord {
        step: state.step,
        total: v.total,
        contrastive: v.contrastive,
        coral: v.coral,
        bank_fill: state.bank.len(),
        grad_norm,
    };
    state.step += 1;
    Ok(record)
}

/// Sums per-item encoder gradients; chunks are reduced in a fixed order so
/// the result does not depend on thread scheduling.
fn backprop(
    theta: &EncoderParams,
    items: &[BatchItem],
    grad_queries: &[Vec<f64>],
    grad_keys: Option<&[Vec<f64>]>,
) -> Result<EncoderParams> {
    let partials = items
        .par_iter()
        .enumerate()
        .map(|(i, it)| {
            let mut g = EncoderParams::zeros(theta.dims(), theta.activation())?;
            accumulate_encode_grad(theta, &it.query, &grad_queries[i], &mut g)?;
            if let Some(gk) = grad_keys {
                accumulate_encode_grad(theta, &it.key, &gk[i], &mut g)?;
            }
            Ok(g)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = EncoderParams::zeros(theta.dims(), theta.activation())?;
    for g in &partials {
        total.axpy(1.0, g)?;
    }
    Ok(total)
}

/// Hooks for periodic side effects during `run_with`.
pub trait TrainObserver {
    fn on_checkpoint(&mut self, _step: usize, _params: &EncoderParams) -> Result<()> {
        Ok(())
    }

    fn on_eval(&mut self, _step: usize, _params: &EncoderParams) -> Result<()> {
        Ok(())
    }
}

pub struct NoopObserver;

impl TrainObserver for NoopObserver {}

/// Batch `step` is drawn from its own RNG stream, so preparing batches ahead
/// of time, in any order, yields the same batches.
fn batch_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + step as u64);
    rng
}

fn init_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    rng
}

/// Initial query-encoder parameters for `cfg`, warm-started if configured.
pub fn initial_params(cfg: &TrainConfig, input_dim: usize) -> Result<EncoderParams> {
    let dims = EncoderDims { input: input_dim, ..cfg.encoder };
    let mut theta = EncoderParams::random(dims, Activation::Tanh, &mut init_rng(cfg.rng_seed))?;
    if cfg.init_scale != 1.0 {
        theta.as_flat_mut().iter_mut().for_each(|v| *v *= cfg.init_scale);
    }
    if let Some(w) = &cfg.warm_start {
        theta = warm_start(theta, w, cfg)?;
    }
    Ok(theta)
}

pub fn run(cfg: &TrainConfig, corpus: &Corpus) -> Result<(EncoderParams, TrainLog)> {
    run_with(cfg, corpus, &mut NoopObserver)
}

pub fn run_with(cfg: &TrainConfig, corpus: &Corpus, observer: &mut dyn TrainObserver) -> Result<(EncoderParams, TrainLog)> {
    cfg.validate()?;
    if cfg.encoder.input != corpus.spec.feature_dim {
        return Err(Error::InvalidConfig(format!(
            "encoder input dim {} does not match corpus feature dim {}",
            cfg.encoder.input, corpus.spec.feature_dim
        )));
    }
    let theta = initial_params(cfg, corpus.spec.feature_dim)?;
    let mut state = TrainState::new(theta, cfg.bank_capacity);
    let mut log = TrainLog::default();
    if cfg.steps == 0 {
        return Ok((state.theta, log));
    }
    let pool = combine_short(&corpus.utterances_in(Split::Dev), cfg.min_frames);
    if pool.is_empty() {
        return Err(Error::InvalidConfig("corpus dev split is empty".into()));
    }
    // pre-flight: surfaces infeasible batch settings before any compute
    build_batch(&pool, &cfg.batch, &mut batch_rng(cfg.rng_seed, 0))?;

    let chunk = cfg.prefetch.max(1);
    let mut start = 0;
    while start < cfg.steps {
        let end = (start + chunk).min(cfg.steps);
        let batches = (start..end)
            .into_par_iter()
            .map(|k| build_batch(&pool, &cfg.batch, &mut batch_rng(cfg.rng_seed, k)))
            .collect::<Result<Vec<_>>>()?;
        for batch in &batches {
            log.records.push(train_step(&mut state, batch, cfg)?);
            let done = state.step;
            if cfg.checkpoint_every > 0 && done.is_multiple_of(cfg.checkpoint_every) {
                observer.on_checkpoint(done, &state.theta)?;
            }
            if cfg.eval_every > 0 && done.is_multiple_of(cfg.eval_every) {
                observer.on_eval(done, &state.theta)?;
            }
        }
        start = end;
    }
    Ok((state.theta, log))
}

/// Supervised-contrastive pretraining on a generated single-domain corpus.
fn warm_start(mut theta: EncoderParams, w: &WarmStart, cfg: &TrainConfig) -> Result<EncoderParams> {
    let source = generate(&w.source)?;
    if source.spec.feature_dim != theta.dims().input {
        return Err(Error::InvalidConfig("warm start source feature dim differs from the encoder input".into()));
    }
    let mut by_speaker: Vec<Vec<&Utterance>> = vec![Vec::new(); source.spec.num_speakers];
    for u in &source.utterances {
        by_speaker[u.speaker_id].push(u);
    }
    let speakers: Vec<usize> = (0..by_speaker.len()).filter(|&s| by_speaker[s].len() >= 2).collect();
    if speakers.len() < w.batch_size {
        return Err(Error::InvalidConfig("warm start corpus has too few speakers for its batch size".into()));
    }
    let loss_cfg = LossConfig {
        sampling_mode: SamplingMode::SingleDomain,
        use_bank: false,
        use_coral: false,
        ..cfg.loss.clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(w.source.rng_seed ^ cfg.rng_seed);
    rng.set_stream(u64::MAX);
    for _ in 0..w.steps {
        let chosen: Vec<usize> = speakers.choose_multiple(&mut rng, w.batch_size).copied().collect();
        let mut items = Vec::with_capacity(chosen.len());
        for &s in &chosen {
            let pair: Vec<&&Utterance> = by_speaker[s].choose_multiple(&mut rng, 2).collect();
            let q = augment(&pair[0].as_segment(), cfg.batch.gain_range, cfg.batch.augment_noise, &mut rng)?;
            let k = augment(&pair[1].as_segment(), cfg.batch.gain_range, cfg.batch.augment_noise, &mut rng)?;
            items.push(BatchItem { query: q, key: k, utterance_id: pair[0].id, domain_id: 0 });
        }
        let queries: Vec<Vector> = items.iter().map(|it| encode(&theta, &it.query)).collect::<Result<_>>()?;
        let keys: Vec<Vector> = items.iter().map(|it| encode(&theta, &it.key)).collect::<Result<_>>()?;
        let out = contrastive_loss(&queries, &keys, &vec![0; items.len()], &loss_cfg, None)?;
        let grad = backprop(&theta, &items, &out.grad_queries, Some(&out.grad_keys))?;
        theta.axpy(-w.learning_rate, &grad)?;
    }
    Ok(theta)
}
