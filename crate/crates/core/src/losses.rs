//! Contrastive, CORAL and combined adaptation objectives with analytic
//! gradients with respect to the embedding vectors.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::batching::{negative_indices, SamplingMode};
use crate::error::{Error, Result};
use crate::membank::{BankNegatives, MemoryBank};
use crate::numerics::{cosine, cosine_with_grad, covariance, frobenius_sq, Matrix, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossForm {
    /// `-log` of the positive's softmax probability.
    #[default]
    Infonce,
    /// The bare probability ratio, averaged. Minimizing it pushes positives
    /// apart; kept for inspection only.
    Verbatim,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub tau: f64,
    pub lambda: f64,
    pub sampling_mode: SamplingMode,
    pub use_bank: bool,
    pub bank_negatives: BankNegatives,
    pub use_coral: bool,
    #[serde(default)]
    pub loss_form: LossForm,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            lambda: 1.0,
            sampling_mode: SamplingMode::InDomain,
            use_bank: true,
            bank_negatives: BankNegatives::InDomain,
            use_coral: true,
            loss_form: LossForm::Infonce,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidConfig(format!("loss `tau` must be positive, got {}", self.tau)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!("loss `lambda` must be non-negative, got {}", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub contrastive: f64,
    pub coral: f64,
}

/// Temperature-scaled similarity `exp(cos(x, y) / tau)`.
pub fn sim(x: &[f64], y: &[f64], tau: f64) -> Result<f64> {
    Ok((cosine(x, y)? / tau).exp())
}

#[derive(Debug, Clone)]
pub struct ContrastiveOutput {
    pub loss: f64,
    pub grad_queries: Vec<Vec<f64>>,
    pub grad_keys: Vec<Vec<f64>>,
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn check_dims(vs: &[Vector], dim: usize, what: &str) -> Result<()> {
    match vs.iter().position(|v| v.len() != dim) {
        Some(i) => Err(Error::Shape(format!("{what} {i} has length {}, expected {dim}", vs[i].len()))),
        None => Ok(()),
    }
}

/// Contrastive loss of each query against its own key (positive) and the
/// negatives selected by `cfg`: other in-batch keys under
/// `cfg.sampling_mode`, plus bank entries when `cfg.use_bank` and a bank is
/// supplied. The positive is part of the denominator.
///
/// Bank entries are constants: no gradient is returned for them.
pub fn contrastive_loss(
    queries: &[Vector],
    keys: &[Vector],
    domains: &[usize],
    cfg: &LossConfig,
    bank: Option<&MemoryBank>,
) -> Result<ContrastiveOutput> {
    cfg.validate()?;
    let n = queries.len();
    if keys.len() != n || domains.len() != n {
        return Err(Error::Shape(format!(
            "{n} queries, {} keys, {} domain tags",
            keys.len(),
            domains.len()
        )));
    }
    if n < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: n });
    }
    let dim = queries[0].len();
    check_dims(queries, dim, "query")?;
    check_dims(keys, dim, "key")?;
    let bank = bank.filter(|_| cfg.use_bank);
    if let Some(b) = bank {
        if b.dim() != dim {
            return Err(Error::Shape(format!("bank dim {} vs embedding dim {dim}", b.dim())));
        }
    }

    let inv_n = 1.0 / n as f64;
    let inv_tau = 1.0 / cfg.tau;
    let mut loss = 0.0;
    let mut grad_q = vec![vec![0.0; dim]; n];
    let mut grad_k = vec![vec![0.0; dim]; n];

    for i in 0..n {
        let in_batch = negative_indices(domains, i, cfg.sampling_mode);
        let from_bank = bank.map(|b| b.negatives(domains[i], cfg.bank_negatives)).unwrap_or_default();
        if in_batch.is_empty() && from_bank.is_empty() {
            return Err(Error::InfeasibleAnchor(i));
        }

        // logit 0 is the positive, then in-batch keys, then bank entries
        let mut logits = Vec::with_capacity(1 + in_batch.len() + from_bank.len());
        let mut dq = Vec::with_capacity(logits.capacity());
        let mut dk = Vec::with_capacity(1 + in_batch.len());
        for &j in std::iter::once(&i).chain(&in_batch) {
            let (c, gq, gk) = cosine_with_grad(&queries[i], &keys[j])?;
            logits.push(c * inv_tau);
            dq.push(gq);
            dk.push(gk);
        }
        for b in &from_bank {
            let (c, gq, _) = cosine_with_grad(&queries[i], b)?;
            logits.push(c * inv_tau);
            dq.push(gq);
        }

        let lse = log_sum_exp(&logits);
        let probs: Vec<f64> = logits.iter().map(|l| (l - lse).exp()).collect();
        // d(loss_i)/d(logit_t)
        let dlogit: Vec<f64> = match cfg.loss_form {
            LossForm::Infonce => {
                loss += lse - logits[0];
                probs.iter().enumerate().map(|(t, p)| if t == 0 { p - 1.0 } else { *p }).collect()
            }
            LossForm::Verbatim => {
                let p0 = probs[0];
                loss += p0;
                probs.iter().enumerate().map(|(t, p)| if t == 0 { p0 * (1.0 - p0) } else { -p0 * p }).collect()
            }
        };

        let key_targets = std::iter::once(i).chain(in_batch.iter().copied());
        for (t, j) in key_targets.enumerate() {
            let w = dlogit[t] * inv_tau * inv_n;
            for (g, d) in grad_k[j].iter_mut().zip(&dk[t]) {
                *g += w * d;
            }
        }
        for (t, dqt) in dq.iter().enumerate() {
            let w = dlogit[t] * inv_tau * inv_n;
            for (g, d) in grad_q[i].iter_mut().zip(dqt) {
                *g += w * d;
            }
        }
    }
    Ok(ContrastiveOutput { loss: loss * inv_n, grad_queries: grad_q, grad_keys: grad_k })
}

#[derive(Debug, Clone)]
pub struct CoralOutput {
    pub loss: f64,
    pub grads: Vec<Vec<f64>>,
    /// Domains with at least two embeddings.
    pub domains_used: usize,
    /// Set when fewer than two domains qualified and the loss was forced to 0.
    pub degenerate: bool,
}

/// Mean squared Frobenius distance between per-domain covariances over all
/// unordered domain pairs, scaled by `1 / (4 d^2)`.
///
/// Domains with fewer than two embeddings are left out.
pub fn coral_loss(embeddings: &[Vector], domains: &[usize], dim: usize) -> Result<CoralOutput> {
    if domains.len() != embeddings.len() {
        return Err(Error::Shape(format!("{} embeddings, {} domain tags", embeddings.len(), domains.len())));
    }
    check_dims(embeddings, dim, "embedding")?;
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &d) in domains.iter().enumerate() {
        groups.entry(d).or_default().push(i);
    }
    groups.retain(|_, idx| idx.len() >= 2);
    let k = groups.len();
    let mut grads = vec![vec![0.0; dim]; embeddings.len()];
    if k < 2 {
        return Ok(CoralOutput { loss: 0.0, grads, domains_used: k, degenerate: true });
    }

    let members: Vec<&Vec<usize>> = groups.values().collect();
    let mut covs = Vec::with_capacity(k);
    let mut means = Vec::with_capacity(k);
    for idx in &members {
        let rows: Vec<&[f64]> = idx.iter().map(|&i| embeddings[i].as_slice()).collect();
        let m = Matrix::from_rows(&rows)?;
        means.push(crate::numerics::column_mean(&m));
        covs.push(covariance(&m)?);
    }

    let scale = 2.0 / (k as f64 * (k as f64 - 1.0)) / (4.0 * (dim * dim) as f64);
    let mut loss = 0.0;
    for a in 0..k {
        for b in a + 1..k {
            loss += frobenius_sq(&covs[a].sub(&covs[b])?);
        }
    }
    loss *= scale;

    for (g, idx) in members.iter().enumerate() {
        // dL/dC_g, symmetric
        let mut dc = vec![0.0; dim * dim];
        for h in (0..k).filter(|&h| h != g) {
            for ((acc, x), y) in dc.iter_mut().zip(covs[g].data()).zip(covs[h].data()) {
                *acc += 2.0 * scale * (x - y);
            }
        }
        let factor = 2.0 / (idx.len() as f64 - 1.0);
        for &i in idx.iter() {
            let centred: Vec<f64> = embeddings[i].iter().zip(&means[g]).map(|(x, m)| x - m).collect();
            for r in 0..dim {
                grads[i][r] = factor * crate::numerics::dot(&dc[r * dim..(r + 1) * dim], &centred);
            }
        }
    }
    Ok(CoralOutput { loss, grads, domains_used: k, degenerate: false })
}

#[derive(Debug, Clone)]
pub struct CombinedOutput {
    pub value: LossValue,
    pub grad_queries: Vec<Vec<f64>>,
    pub grad_keys: Vec<Vec<f64>>,
    pub coral_degenerate: bool,
}

/// `contrastive + lambda * coral`, with CORAL taken over both views of every
/// item grouped by domain.
pub fn combined_loss(
    queries: &[Vector],
    keys: &[Vector],
    domains: &[usize],
    cfg: &LossConfig,
    bank: Option<&MemoryBank>,
) -> Result<CombinedOutput> {
    let cl = contrastive_loss(queries, keys, domains, cfg, bank)?;
    let mut grad_q = cl.grad_queries;
    let mut grad_k = cl.grad_keys;
    let n = queries.len();
    let (coral, degenerate) = if cfg.use_coral {
        let dim = queries[0].len();
        let all: Vec<Vector> = queries.iter().chain(keys).cloned().collect();
        let tags: Vec<usize> = domains.iter().chain(domains).copied().collect();
        let co = coral_loss(&all, &tags, dim)?;
        for (g, c) in grad_q.iter_mut().zip(&co.grads[..n]).chain(grad_k.iter_mut().zip(&co.grads[n..])) {
            for (a, b) in g.iter_mut().zip(c) {
                *a += cfg.lambda * b;
            }
        }
        (co.loss, co.degenerate)
    } else {
        (0.0, false)
    };
    let value = LossValue { total: cl.loss + cfg.lambda * coral, contrastive: cl.loss, coral };
    Ok(CombinedOutput { value, grad_queries: grad_q, grad_keys: grad_k, coral_degenerate: degenerate })
}
