//! Mini-batch assembly and the in-domain negative partition.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment, group_by_domain, sample_views, Utterance};
use crate::encoder::Segment;
use crate::error::{Error, Result};

/// Which in-batch items may serve as negatives for an anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// Every other item in the batch.
    SingleDomain,
    /// Only other items from the anchor's domain.
    InDomain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchConfig {
    pub batch_size: usize,
    pub min_per_domain: usize,
    /// Minimum frames per view.
    pub segment_min_len: usize,
    pub gain_range: (f64, f64),
    pub augment_noise: f64,
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self { batch_size: 48, min_per_domain: 2, segment_min_len: 8, gain_range: (0.8, 1.25), augment_noise: 0.3 }
    }
}

impl BatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig("batch `batch_size` must be at least 2".into()));
        }
        if self.min_per_domain < 1 || self.min_per_domain > self.batch_size {
            return Err(Error::InvalidConfig("batch `min_per_domain` must lie in 1..=batch_size".into()));
        }
        if self.segment_min_len == 0 {
            return Err(Error::InvalidConfig("batch `segment_min_len` must be at least 1".into()));
        }
        let (lo, hi) = self.gain_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::InvalidConfig("batch `gain_range` must be positive and ordered".into()));
        }
        if !(self.augment_noise >= 0.0 && self.augment_noise.is_finite()) {
            return Err(Error::InvalidConfig("batch `augment_noise` must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    pub query: Segment,
    pub key: Segment,
    pub utterance_id: usize,
    pub domain_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiniBatch {
    pub items: Vec<BatchItem>,
    /// Domain id to the indices of its items, ascending.
    pub partition: BTreeMap<usize, Vec<usize>>,
}

impl MiniBatch {
    pub fn from_items(items: Vec<BatchItem>) -> Self {
        let domains: Vec<usize> = items.iter().map(|it| it.domain_id).collect();
        Self { partition: partition_by_domain(&domains), items }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn domains(&self) -> Vec<usize> {
        self.items.iter().map(|it| it.domain_id).collect()
    }
}

pub fn partition_by_domain(domains: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &d) in domains.iter().enumerate() {
        map.entry(d).or_default().push(i);
    }
    map
}

/// Negative indices for `anchor` among items tagged with `domains`.
pub fn negative_indices(domains: &[usize], anchor: usize, mode: SamplingMode) -> Vec<usize> {
    (0..domains.len())
        .filter(|&j| j != anchor)
        .filter(|&j| mode == SamplingMode::SingleDomain || domains[j] == domains[anchor])
        .collect()
}

pub fn negatives_for(batch: &MiniBatch, anchor: usize, mode: SamplingMode) -> Vec<usize> {
    match mode {
        SamplingMode::SingleDomain => (0..batch.len()).filter(|&j| j != anchor).collect(),
        SamplingMode::InDomain => batch.partition[&batch.items[anchor].domain_id]
            .iter()
            .copied()
            .filter(|&j| j != anchor)
            .collect(),
    }
}

/// Samples a domain-stratified batch without replacement.
///
/// Represented domains are chosen at random among those with enough
/// eligible utterances; each gets `min_per_domain` items and the remaining
/// slots are spread at random over them.
pub fn build_batch<R: Rng + ?Sized>(pool: &[Utterance], cfg: &BatchConfig, rng: &mut R) -> Result<MiniBatch> {
    cfg.validate()?;
    let eligible: Vec<Utterance> =
        pool.iter().filter(|u| u.len() >= 2 * cfg.segment_min_len).cloned().collect();
    let by_domain = group_by_domain(&eligible);
    let mut domains: Vec<usize> = by_domain
        .iter()
        .filter(|(_, idx)| idx.len() >= cfg.min_per_domain)
        .map(|(&d, _)| d)
        .collect();
    if domains.is_empty() {
        return Err(Error::InfeasibleBatch(format!(
            "no domain has {} utterances of at least {} frames",
            cfg.min_per_domain,
            2 * cfg.segment_min_len
        )));
    }
    domains.shuffle(rng);
    domains.truncate(cfg.batch_size / cfg.min_per_domain);
    let capacity: usize = domains.iter().map(|d| by_domain[d].len()).sum();
    if capacity < cfg.batch_size {
        return Err(Error::InfeasibleBatch(format!(
            "batch of {} needs more utterances than the {capacity} available in the sampled domains",
            cfg.batch_size
        )));
    }

    let mut counts: BTreeMap<usize, usize> = domains.iter().map(|&d| (d, cfg.min_per_domain)).collect();
    let mut remaining = cfg.batch_size - cfg.min_per_domain * domains.len();
    while remaining > 0 {
        let open: Vec<usize> = domains.iter().copied().filter(|d| counts[d] < by_domain[d].len()).collect();
        let &d = open.choose(rng).expect("capacity checked above");
        *counts.get_mut(&d).expect("domain present") += 1;
        remaining -= 1;
    }

    let mut chosen: Vec<usize> = Vec::with_capacity(cfg.batch_size);
    for (d, n) in &counts {
        let mut idx = by_domain[d].clone();
        idx.shuffle(rng);
        chosen.extend_from_slice(&idx[..*n]);
    }
    chosen.shuffle(rng);

    let items = chosen
        .into_iter()
        .map(|i| {
            let u = &eligible[i];
            let (q, k) = sample_views(u, cfg.segment_min_len, rng)?;
            Ok(BatchItem {
                query: augment(&q, cfg.gain_range, cfg.augment_noise, rng)?,
                key: augment(&k, cfg.gain_range, cfg.augment_noise, rng)?,
                utterance_id: u.id,
                domain_id: u.domain_id,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MiniBatch::from_items(items))
}
