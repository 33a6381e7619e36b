//! Verification trials, cosine scoring, EER, normalized minDCF, the
//! enrollment-domain by test-domain EER matrix, and a PCA projection export.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Utterance;
use crate::encoder::{encode, EncoderParams, Segment};
use crate::error::{Error, Result};
use crate::numerics::{column_mean, cosine, covariance, symmetric_eigen, Matrix, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialMode {
    /// Every domain in the evaluation split, one pooled score list.
    Pooled,
    /// The `top_k_domains` most populated domains, grouped per domain pair.
    Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Frames spliced into each enrollment.
    pub enroll_frames: usize,
    pub top_k_domains: usize,
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { enroll_frames: 80, top_k_domains: 6, p_target: 0.05, c_miss: 1.0, c_fa: 1.0 }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.enroll_frames == 0 || self.top_k_domains == 0 {
            return Err(Error::InvalidConfig("eval `enroll_frames` and `top_k_domains` must be positive".into()));
        }
        if !(self.p_target > 0.0 && self.p_target < 1.0) {
            return Err(Error::InvalidConfig("eval `p_target` must lie in (0, 1)".into()));
        }
        if !(self.c_miss > 0.0 && self.c_fa > 0.0) {
            return Err(Error::InvalidConfig("eval costs must be positive".into()));
        }
        Ok(())
    }
}

/// Spliced enrollment audio for one speaker in one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Enrollment {
    pub speaker: usize,
    pub domain: usize,
    pub utterance_ids: Vec<usize>,
    pub frames: Matrix,
}

impl Enrollment {
    pub fn label(&self) -> String {
        format!("enr_s{}_d{}", self.speaker, self.domain)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialPlan {
    pub enrollments: Vec<Enrollment>,
    pub tests: Vec<Utterance>,
    /// Domains included, in the order used for matrix rows and columns.
    pub domains: Vec<usize>,
    /// Speaker-domain cells dropped for lack of enrollment frames.
    pub skipped_cells: usize,
}

impl TrialPlan {
    pub fn num_trials(&self) -> usize {
        self.enrollments.len() * self.tests.len()
    }
}

/// Domains ranked by speaker count, then utterance count, then id.
pub fn most_populated_domains(utts: &[Utterance], k: usize) -> Vec<usize> {
    let mut speakers: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for u in utts {
        speakers.entry(u.domain_id).or_default().insert(u.speaker_id);
        *counts.entry(u.domain_id).or_default() += 1;
    }
    let mut domains: Vec<usize> = speakers.keys().copied().collect();
    domains.sort_by(|a, b| {
        speakers[b].len().cmp(&speakers[a].len()).then(counts[b].cmp(&counts[a])).then(a.cmp(b))
    });
    domains.truncate(k);
    domains
}

/// Splits each speaker-domain cell into an enrollment (leading utterances
/// spliced to at least `enroll_frames`) and test utterances (the rest).
/// Every enrollment is paired with every test.
pub fn build_trials(eval_utts: &[Utterance], cfg: &EvalConfig, mode: TrialMode) -> Result<TrialPlan> {
    cfg.validate()?;
    if eval_utts.is_empty() {
        return Err(Error::InvalidConfig("evaluation split is empty".into()));
    }
    let mut domains = match mode {
        TrialMode::Pooled => most_populated_domains(eval_utts, usize::MAX),
        TrialMode::Matrix => most_populated_domains(eval_utts, cfg.top_k_domains),
    };
    if mode == TrialMode::Pooled {
        domains.sort_unstable();
    }
    let keep: BTreeSet<usize> = domains.iter().copied().collect();

    let mut cells: BTreeMap<(usize, usize), Vec<&Utterance>> = BTreeMap::new();
    for u in eval_utts.iter().filter(|u| keep.contains(&u.domain_id)) {
        cells.entry((u.speaker_id, u.domain_id)).or_default().push(u);
    }

    let mut enrollments = Vec::new();
    let mut tests = Vec::new();
    let mut skipped_cells = 0;
    for ((speaker, domain), utts) in cells {
        let mut taken = 0;
        let mut frames: Option<Matrix> = None;
        while taken < utts.len() && frames.as_ref().map_or(0, Matrix::rows) < cfg.enroll_frames {
            let next = &utts[taken].frames;
            frames = Some(match frames {
                Some(f) => f.vstack(next)?,
                None => next.clone(),
            });
            taken += 1;
        }
        match frames {
            Some(f) if f.rows() >= cfg.enroll_frames => {
                enrollments.push(Enrollment {
                    speaker,
                    domain,
                    utterance_ids: utts[..taken].iter().map(|u| u.id).collect(),
                    frames: f,
                });
                tests.extend(utts[taken..].iter().map(|&u| u.clone()));
            }
            _ => skipped_cells += 1,
        }
    }
    Ok(TrialPlan { enrollments, tests, domains, skipped_cells })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreRecord {
    pub score: f64,
    pub is_target: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Trial {
    /// Index into `TrialPlan::enrollments`.
    pub enroll: usize,
    /// Index into `TrialPlan::tests`.
    pub test: usize,
    pub enroll_domain: usize,
    pub test_domain: usize,
    pub is_target: bool,
    pub score: f64,
}

impl Trial {
    pub fn record(&self) -> ScoreRecord {
        ScoreRecord { score: self.score, is_target: self.is_target }
    }
}

#[derive(Debug, Clone)]
pub struct ScoredTrials {
    pub enroll_embeddings: Vec<Vector>,
    pub test_embeddings: Vec<Vector>,
    pub trials: Vec<Trial>,
}

/// Embeds every enrollment and test once, then scores the full cross by
/// cosine similarity.
pub fn score_trials(plan: &TrialPlan, params: &EncoderParams) -> Result<ScoredTrials> {
    let enroll_embeddings = plan
        .enrollments
        .par_iter()
        .map(|e| encode(params, &Segment { frames: e.frames.clone(), utterance_id: e.utterance_ids[0], domain_id: e.domain }))
        .collect::<Result<Vec<_>>>()?;
    let test_embeddings =
        plan.tests.par_iter().map(|u| encode(params, &u.as_segment())).collect::<Result<Vec<_>>>()?;
    let mut trials = Vec::with_capacity(plan.num_trials());
    for (ei, e) in plan.enrollments.iter().enumerate() {
        for (ti, t) in plan.tests.iter().enumerate() {
            trials.push(Trial {
                enroll: ei,
                test: ti,
                enroll_domain: e.domain,
                test_domain: t.domain_id,
                is_target: e.speaker == t.speaker_id,
                score: cosine(&enroll_embeddings[ei], &test_embeddings[ti])?,
            });
        }
    }
    Ok(ScoredTrials { enroll_embeddings, test_embeddings, trials })
}

/// Operating points `(p_miss, p_fa)` for a threshold below every score and
/// then just above each distinct score, in ascending order. A trial is
/// accepted when its score is at least the threshold.
fn operating_points(scores: &[ScoreRecord]) -> Result<Vec<(f64, f64)>> {
    let n_tar = scores.iter().filter(|s| s.is_target).count();
    let n_non = scores.len() - n_tar;
    if n_tar == 0 || n_non == 0 {
        return Err(Error::UndefinedMetric(format!("{n_tar} target and {n_non} nontarget scores")));
    }
    if let Some(s) = scores.iter().find(|s| !s.score.is_finite()) {
        return Err(Error::NonFinite(format!("score {}", s.score)));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.score.total_cmp(&b.score));
    let (nt, nn) = (n_tar as f64, n_non as f64);
    let mut points = Vec::with_capacity(sorted.len() + 1);
    let (mut misses, mut rejected_non) = (0usize, 0usize);
    points.push((0.0, 1.0));
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i].score;
        while i < sorted.len() && sorted[i].score == s {
            if sorted[i].is_target {
                misses += 1;
            } else {
                rejected_non += 1;
            }
            i += 1;
        }
        points.push((misses as f64 / nt, (n_non - rejected_non) as f64 / nn));
    }
    Ok(points)
}

/// Equal error rate in percent, linearly interpolated between the two
/// operating points that bracket `p_miss == p_fa`.
pub fn eer(scores: &[ScoreRecord]) -> Result<f64> {
    let points = operating_points(scores)?;
    let mut prev = points[0];
    for &(pm, pf) in &points {
        let d = pf - pm;
        if d <= 0.0 {
            let d_prev = prev.1 - prev.0;
            let rate = if d_prev <= 0.0 {
                pm
            } else {
                let alpha = d_prev / (d_prev - d);
                prev.0 + alpha * (pm - prev.0)
            };
            return Ok(100.0 * rate);
        }
        prev = (pm, pf);
    }
    unreachable!("the last operating point has p_miss = 1 and p_fa = 0")
}

/// Minimum detection cost over all thresholds, normalized by the cost of the
/// better trivial system, `min(c_miss * p_target, c_fa * (1 - p_target))`.
pub fn min_dcf(scores: &[ScoreRecord], p_target: f64, c_miss: f64, c_fa: f64) -> Result<f64> {
    let points = operating_points(scores)?;
    let norm = (c_miss * p_target).min(c_fa * (1.0 - p_target));
    let best = points
        .iter()
        .map(|&(pm, pf)| c_miss * pm * p_target + c_fa * pf * (1.0 - p_target))
        .fold(f64::INFINITY, f64::min);
    Ok(best / norm)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DomainMatrix {
    /// Row and column domains, in order.
    pub domains: Vec<usize>,
    /// `cells[r][c]` is the EER (%) for enrollment domain `domains[r]` and
    /// test domain `domains[c]`; the final column pools every test domain.
    /// `None` marks a cell without both trial classes.
    pub cells: Vec<Vec<Option<f64>>>,
}

impl DomainMatrix {
    pub fn pooled(&self, row: usize) -> Option<f64> {
        self.cells[row].last().copied().flatten()
    }

    pub fn to_csv(&self, names: &[String]) -> String {
        let name = |d: usize| names.get(d).cloned().unwrap_or_else(|| d.to_string());
        let mut out = String::from("enroll");
        for &d in &self.domains {
            let _ = write!(out, ",{}", name(d));
        }
        out.push_str(",all\n");
        for (r, &d) in self.domains.iter().enumerate() {
            out.push_str(&name(d));
            for cell in &self.cells[r] {
                match cell {
                    Some(v) => {
                        let _ = write!(out, ",{v:.4}");
                    }
                    None => out.push_str(",NA"),
                }
            }
            out.push('\n');
        }
        out
    }
}

fn cell_eer(records: &[ScoreRecord]) -> Option<f64> {
    eer(records).ok()
}

/// EER grid over `domains` x (`domains` + pooled column).
pub fn domain_matrix(trials: &[Trial], domains: &[usize]) -> DomainMatrix {
    let cells = domains
        .par_iter()
        .map(|&g| {
            let row: Vec<&Trial> = trials.iter().filter(|t| t.enroll_domain == g).collect();
            let mut cells: Vec<Option<f64>> = domains
                .iter()
                .map(|&h| {
                    let recs: Vec<ScoreRecord> =
                        row.iter().filter(|t| t.test_domain == h).map(|t| t.record()).collect();
                    cell_eer(&recs)
                })
                .collect();
            let pooled: Vec<ScoreRecord> =
                row.iter().filter(|t| domains.contains(&t.test_domain)).map(|t| t.record()).collect();
            cells.push(cell_eer(&pooled));
            cells
        })
        .collect();
    DomainMatrix { domains: domains.to_vec(), cells }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedPoint {
    pub x: f64,
    pub y: f64,
    pub speaker: usize,
    pub domain: usize,
}

/// Projects embeddings onto their top two principal components.
///
/// Each component is signed so that its largest-magnitude loading is
/// positive.
pub fn project_2d(embeddings: &[Vector], speakers: &[usize], domains: &[usize]) -> Result<Vec<ProjectedPoint>> {
    if embeddings.len() < 3 {
        return Err(Error::InsufficientSamples { needed: 3, got: embeddings.len() });
    }
    if speakers.len() != embeddings.len() || domains.len() != embeddings.len() {
        return Err(Error::Shape("labels must match embeddings".into()));
    }
    let m = Matrix::from_rows(embeddings)?;
    let mean = column_mean(&m);
    let (_, vectors) = symmetric_eigen(&covariance(&m)?)?;
    let mut axes: Vec<Vec<f64>> = vectors.into_iter().take(2).collect();
    while axes.len() < 2 {
        axes.push(vec![0.0; m.cols()]);
    }
    for axis in &mut axes {
        let lead = axis
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |best, (i, v)| if v.abs() > best.1.abs() { (i, *v) } else { best });
        if lead.1 < 0.0 {
            axis.iter_mut().for_each(|v| *v = -*v);
        }
    }
    Ok(m
        .row_iter()
        .zip(speakers.iter().zip(domains))
        .map(|(row, (&speaker, &domain))| {
            let centred: Vec<f64> = row.iter().zip(&mean).map(|(x, m)| x - m).collect();
            ProjectedPoint {
                x: crate::numerics::dot(&axes[0], &centred),
                y: crate::numerics::dot(&axes[1], &centred),
                speaker,
                domain,
            }
        })
        .collect())
}

/// Pooled metrics plus, in matrix mode, the domain grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub mode: TrialMode,
    pub eer_percent: f64,
    pub min_dcf: f64,
    pub target_trials: usize,
    pub nontarget_trials: usize,
    pub skipped_cells: usize,
    pub matrix: Option<DomainMatrix>,
}

impl EvalReport {
    pub fn metrics_csv(&self) -> String {
        format!(
            "mode,eer_percent,min_dcf,target_trials,nontarget_trials,skipped_cells\n{},{:.6},{:.6},{},{},{}\n",
            match self.mode {
                TrialMode::Pooled => "pooled",
                TrialMode::Matrix => "matrix",
            },
            self.eer_percent,
            self.min_dcf,
            self.target_trials,
            self.nontarget_trials,
            self.skipped_cells
        )
    }
}

pub fn evaluate(params: &EncoderParams, eval_utts: &[Utterance], cfg: &EvalConfig, mode: TrialMode) -> Result<EvalReport> {
    let plan = build_trials(eval_utts, cfg, mode)?;
    let scored = score_trials(&plan, params)?;
    report_from(&plan, &scored, cfg, mode)
}

pub fn report_from(plan: &TrialPlan, scored: &ScoredTrials, cfg: &EvalConfig, mode: TrialMode) -> Result<EvalReport> {
    let records: Vec<ScoreRecord> = scored.trials.iter().map(Trial::record).collect();
    let target_trials = records.iter().filter(|r| r.is_target).count();
    Ok(EvalReport {
        mode,
        eer_percent: eer(&records)?,
        min_dcf: min_dcf(&records, cfg.p_target, cfg.c_miss, cfg.c_fa)?,
        target_trials,
        nontarget_trials: records.len() - target_trials,
        skipped_cells: plan.skipped_cells,
        matrix: (mode == TrialMode::Matrix).then(|| domain_matrix(&scored.trials, &plan.domains)),
    })
}

/// One line per trial: enrollment label, test utterance id, label, domains,
/// score.
pub fn trials_csv(plan: &TrialPlan, scored: &ScoredTrials) -> String {
    let mut out = String::from("enroll_id,test_id,label,enroll_domain,test_domain,score\n");
    for t in &scored.trials {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:.12}",
            plan.enrollments[t.enroll].label(),
            plan.tests[t.test].id,
            if t.is_target { "target" } else { "nontarget" },
            t.enroll_domain,
            t.test_domain,
            t.score
        );
    }
    out
}

pub fn projection_csv(points: &[ProjectedPoint]) -> String {
    let mut out = String::from("x,y,speaker,domain\n");
    for p in points {
        let _ = writeln!(out, "{:.10},{:.10},{},{}", p.x, p.y, p.speaker, p.domain);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn recs(targets: &[f64], nontargets: &[f64]) -> Vec<ScoreRecord> {
        targets
            .iter()
            .map(|&s| ScoreRecord { score: s, is_target: true })
            .chain(nontargets.iter().map(|&s| ScoreRecord { score: s, is_target: false }))
            .collect()
    }

    fn utt(id: usize, spk: usize, dom: usize, len: usize) -> Utterance {
        Utterance { id, speaker_id: spk, domain_id: dom, frames: Matrix::new(len, 1, vec![1.0; len]).unwrap() }
    }

    #[test]
    fn eer_extremes() {
        assert_eq!(eer(&recs(&[0.9, 0.8], &[0.1, 0.2])).unwrap(), 0.0);
        assert_eq!(eer(&recs(&[0.1, 0.2], &[0.8, 0.9])).unwrap(), 100.0);
        assert!(matches!(eer(&recs(&[0.1], &[])), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn eer_interpolates_single_overlap() {
        // one target below one nontarget out of two each: crossing at 50%
        let e = eer(&recs(&[0.3, 0.9], &[0.1, 0.5])).unwrap();
        assert!((e - 50.0).abs() < 1e-12, "{e}");
    }

    #[test]
    fn flipping_labels_of_symmetric_set() {
        let r = recs(&[0.2, 0.6, 0.7, 0.9], &[0.1, 0.3, 0.4, 0.8]);
        let flipped: Vec<ScoreRecord> = r.iter().map(|s| ScoreRecord { is_target: !s.is_target, ..*s }).collect();
        assert!((eer(&r).unwrap() + eer(&flipped).unwrap() - 100.0).abs() < 1e-12);
    }

    #[test]
    fn min_dcf_cases() {
        assert_eq!(min_dcf(&recs(&[0.9, 0.8], &[0.1, 0.2]), 0.05, 1.0, 1.0).unwrap(), 0.0);
        // everything tied: reject-all costs p_target, which is the normalizer
        let tied = recs(&[0.5; 3], &[0.5; 4]);
        assert!((min_dcf(&tied, 0.05, 1.0, 1.0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn trials_single_speaker() {
        let utts: Vec<Utterance> = (0..4).map(|i| utt(i, 0, 0, 40)).collect();
        let cfg = EvalConfig { enroll_frames: 80, ..EvalConfig::default() };
        let plan = build_trials(&utts, &cfg, TrialMode::Pooled).unwrap();
        assert_eq!(plan.enrollments.len(), 1);
        assert_eq!(plan.tests.len(), 2);
        let dummy = EncoderParams::from_flat(
            crate::encoder::EncoderDims { input: 1, hidden: 1, embed: 1 },
            crate::encoder::Activation::Identity,
            vec![1.0, 0.0, 1.0, 0.0],
        )
        .unwrap();
        let scored = score_trials(&plan, &dummy).unwrap();
        assert_eq!(scored.trials.iter().filter(|t| t.is_target).count(), 2);
        assert_eq!(scored.trials.iter().filter(|t| !t.is_target).count(), 0);
    }

    #[test]
    fn trials_two_speakers_full_cross() {
        let utts = vec![utt(0, 0, 0, 80), utt(1, 0, 0, 30), utt(2, 1, 0, 80), utt(3, 1, 0, 30)];
        let plan = build_trials(&utts, &EvalConfig::default(), TrialMode::Pooled).unwrap();
        assert_eq!(plan.num_trials(), 4);
        let targets = plan
            .enrollments
            .iter()
            .flat_map(|e| plan.tests.iter().map(move |t| e.speaker == t.speaker_id))
            .filter(|&b| b)
            .count();
        assert_eq!(targets, 2);
    }

    #[test]
    fn short_cells_are_skipped() {
        let utts = vec![utt(0, 0, 0, 30), utt(1, 1, 0, 90), utt(2, 1, 0, 10)];
        let plan = build_trials(&utts, &EvalConfig::default(), TrialMode::Pooled).unwrap();
        assert_eq!(plan.skipped_cells, 1);
        assert_eq!(plan.enrollments.len(), 1);
        assert!(build_trials(&[], &EvalConfig::default(), TrialMode::Pooled).is_err());
    }

    #[test]
    fn matrix_mode_keeps_top_domains() {
        let mut utts = Vec::new();
        let mut id = 0;
        for (dom, speakers) in [(0, 3), (1, 1), (2, 2)] {
            for spk in 0..speakers {
                utts.push(utt(id, spk, dom, 100));
                id += 1;
            }
        }
        assert_eq!(most_populated_domains(&utts, 2), vec![0, 2]);
        let cfg = EvalConfig { top_k_domains: 2, ..EvalConfig::default() };
        let plan = build_trials(&utts, &cfg, TrialMode::Matrix).unwrap();
        assert_eq!(plan.domains, vec![0, 2]);
        assert!(plan.enrollments.iter().all(|e| e.domain != 1));
    }

    #[test]
    fn matrix_shape_and_pooled_column() {
        let mk = |e: usize, t: usize, tgt: bool, s: f64| Trial {
            enroll: 0,
            test: 0,
            enroll_domain: e,
            test_domain: t,
            is_target: tgt,
            score: s,
        };
        let trials = vec![
            mk(0, 0, true, 0.9),
            mk(0, 0, false, 0.1),
            mk(0, 1, true, 0.3),
            mk(0, 1, false, 0.5),
            mk(1, 1, true, 0.8),
        ];
        let m = domain_matrix(&trials, &[0, 1]);
        assert_eq!(m.cells.len(), 2);
        assert!(m.cells.iter().all(|r| r.len() == 3));
        assert_eq!(m.cells[0][0], Some(0.0));
        assert_eq!(m.cells[1][1], None);
        let row0: Vec<ScoreRecord> = trials[..4].iter().map(Trial::record).collect();
        assert_eq!(m.pooled(0), Some(eer(&row0).unwrap()));
        let csv = m.to_csv(&["a".into(), "b".into()]);
        assert_eq!(csv.lines().next().unwrap(), "enroll,a,b,all");
        assert!(csv.contains("NA"));
    }

    #[test]
    fn projection_cases() {
        let same: Vec<Vector> = (0..4).map(|_| Vector::new(vec![1.0, 2.0, 3.0]).unwrap()).collect();
        let pts = project_2d(&same, &[0; 4], &[0; 4]).unwrap();
        assert!(pts.iter().all(|p| p.x == 0.0 && p.y == 0.0));

        let flat = [[1.0, 0.5], [-1.0, 0.2], [0.3, -0.9], [-0.3, 0.2]];
        let vs: Vec<Vector> = flat.iter().map(|r| Vector::new(r.to_vec()).unwrap()).collect();
        let pts = project_2d(&vs, &[0; 4], &[0; 4]).unwrap();
        // orthogonal map of centred data: pairwise distances survive
        for i in 0..4 {
            for j in 0..4 {
                let d0 = ((flat[i][0] - flat[j][0]).powi(2) + (flat[i][1] - flat[j][1]).powi(2)).sqrt();
                let d1 = ((pts[i].x - pts[j].x).powi(2) + (pts[i].y - pts[j].y).powi(2)).sqrt();
                assert!((d0 - d1).abs() < 1e-12);
            }
        }
        assert!(project_2d(&vs[..2], &[0; 2], &[0; 2]).is_err());
    }
}
