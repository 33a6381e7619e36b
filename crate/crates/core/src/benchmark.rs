//! Reruns the ablation ladder over several seeds and tabulates pooled
//! verification metrics per preset.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Corpus, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalConfig, TrialMode};
use crate::trainer::{run, Preset, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub seeds: Vec<u64>,
    pub presets: Vec<Preset>,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            seeds: (1..=5).collect(),
            presets: Preset::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkRun {
    pub preset: Preset,
    pub seed: u64,
    pub eer_percent: f64,
    pub min_dcf: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PresetSummary {
    pub preset: Preset,
    pub median_eer_percent: f64,
    pub median_min_dcf: f64,
    pub mean_eer_percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkReport {
    pub runs: Vec<BenchmarkRun>,
    pub summary: Vec<PresetSummary>,
    /// `(EER_sd - EER_md) / EER_sd` on median EERs, when both presets ran.
    pub relative_improvement: Option<f64>,
}

/// Fewest seeds a benchmark may use; medians over fewer runs are too noisy.
pub const MIN_SEEDS: usize = 5;

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.len() < MIN_SEEDS {
            return Err(Error::InvalidConfig(format!("benchmark needs at least {MIN_SEEDS} `seeds`")));
        }
        if self.presets.is_empty() {
            return Err(Error::InvalidConfig("benchmark needs at least one preset".into()));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return Err(Error::InvalidConfig("benchmark `seeds` must be distinct".into()));
        }
        for &p in &self.presets {
            self.train.clone().with_preset(p).validate()?;
        }
        self.eval.validate()
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn relative_improvement(eer_baseline: f64, eer_new: f64) -> f64 {
    (eer_baseline - eer_new) / eer_baseline
}

/// Trains and evaluates every (preset, seed) pair. Runs are independent and
/// execute in parallel; results are ordered by preset, then seed.
pub fn run_benchmark(cfg: &BenchmarkConfig, corpus: &Corpus) -> Result<BenchmarkReport> {
    if corpus.num_domains() < 2 {
        return Err(Error::InvalidConfig("benchmark needs a corpus with at least two domains".into()));
    }
    cfg.validate()?;
    let eval_utts = corpus.utterances_in(Split::Eval);
    let jobs: Vec<(Preset, u64)> =
        cfg.presets.iter().flat_map(|&p| cfg.seeds.iter().map(move |&s| (p, s))).collect();
    let runs = jobs
        .par_iter()
        .map(|&(preset, seed)| {
            let train = TrainConfig { rng_seed: seed, ..cfg.train.clone() }.with_preset(preset);
            let (params, log) = run(&train, corpus)?;
            let report = evaluate(&params, &eval_utts, &cfg.eval, TrialMode::Pooled)?;
            Ok(BenchmarkRun {
                preset,
                seed,
                eer_percent: report.eer_percent,
                min_dcf: report.min_dcf,
                initial_loss: log.records.first().map_or(f64::NAN, |r| r.total),
                final_loss: log.last().map_or(f64::NAN, |r| r.total),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let summary: Vec<PresetSummary> = cfg
        .presets
        .iter()
        .map(|&preset| {
            let eers: Vec<f64> = runs.iter().filter(|r| r.preset == preset).map(|r| r.eer_percent).collect();
            let dcfs: Vec<f64> = runs.iter().filter(|r| r.preset == preset).map(|r| r.min_dcf).collect();
            PresetSummary {
                preset,
                median_eer_percent: median(&eers),
                median_min_dcf: median(&dcfs),
                mean_eer_percent: eers.iter().sum::<f64>() / eers.len() as f64,
            }
        })
        .collect();
    let find = |p: Preset| summary.iter().find(|s| s.preset == p).map(|s| s.median_eer_percent);
    let relative_improvement = match (find(Preset::SslSd), find(Preset::FullMd)) {
        (Some(sd), Some(md)) => Some(relative_improvement(sd, md)),
        _ => None,
    };
    Ok(BenchmarkReport { runs, summary, relative_improvement })
}

impl BenchmarkReport {
    pub fn median_eer(&self, preset: Preset) -> Option<f64> {
        self.summary.iter().find(|s| s.preset == preset).map(|s| s.median_eer_percent)
    }

    pub fn runs_csv(&self) -> String {
        let mut out = String::from("preset,seed,eer_percent,min_dcf,initial_loss,final_loss\n");
        for r in &self.runs {
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.6},{:.10},{:.10}",
                r.preset, r.seed, r.eer_percent, r.min_dcf, r.initial_loss, r.final_loss
            );
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("preset,median_eer_percent,median_min_dcf,mean_eer_percent\n");
        for s in &self.summary {
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{:.6}",
                s.preset, s.median_eer_percent, s.median_min_dcf, s.mean_eer_percent
            );
        }
        if let Some(r) = self.relative_improvement {
            let _ = writeln!(out, "# relative_improvement_full_md_vs_ssl_sd,{r:.6}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_and_improvement() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
        assert!((relative_improvement(12.73, 11.54) - 0.093_479_968_578_161_8).abs() < 1e-12);
    }
}
