//! Brute-force reference implementations used as test oracles. Written for
//! clarity, not speed; they share no code with the library.

#![allow(dead_code)]

/// `(p_miss, p_fa)` at threshold `t`; a trial is accepted when score >= t.
fn rates_at(scores: &[(f64, bool)], t: f64) -> (f64, f64) {
    let nt = scores.iter().filter(|s| s.1).count() as f64;
    let nn = scores.iter().filter(|s| !s.1).count() as f64;
    let miss = scores.iter().filter(|s| s.1 && s.0 < t).count() as f64;
    let fa = scores.iter().filter(|s| !s.1 && s.0 >= t).count() as f64;
    (miss / nt, fa / nn)
}

/// Thresholds below all scores, at every midpoint between consecutive
/// distinct scores, and above all scores.
fn midpoint_thresholds(scores: &[(f64, bool)]) -> Vec<f64> {
    let mut distinct: Vec<f64> = scores.iter().map(|s| s.0).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let mut ts = vec![f64::NEG_INFINITY];
    ts.extend(distinct.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    ts.push(f64::INFINITY);
    ts
}

/// EER in percent: the ROC polyline through every midpoint threshold,
/// intersected with the line `p_miss == p_fa`.
pub fn brute_eer(scores: &[(f64, bool)]) -> f64 {
    let pts: Vec<(f64, f64)> = midpoint_thresholds(scores).into_iter().map(|t| rates_at(scores, t)).collect();
    for w in pts.windows(2) {
        let ((m0, f0), (m1, f1)) = (w[0], w[1]);
        if f1 <= m1 {
            if f0 <= m0 {
                return 100.0 * m0;
            }
            // intersection of segment (m0,f0)-(m1,f1) with f = m
            let (dm, df) = (m1 - m0, f1 - f0);
            let s = (m0 - f0) / (df - dm);
            return 100.0 * (m0 + s * dm);
        }
    }
    panic!("no crossing");
}

pub fn brute_min_dcf(scores: &[(f64, bool)], p: f64, c_miss: f64, c_fa: f64) -> f64 {
    let best = midpoint_thresholds(scores)
        .into_iter()
        .map(|t| {
            let (pm, pf) = rates_at(scores, t);
            c_miss * p * pm + c_fa * (1.0 - p) * pf
        })
        .fold(f64::INFINITY, f64::min);
    best / (c_miss * p).min(c_fa * (1.0 - p))
}

/// Unbiased covariance by the textbook double loop.
pub fn brute_covariance(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = rows.len();
    let d = rows[0].len();
    let mut mean = vec![0.0; d];
    for r in rows {
        for j in 0..d {
            mean[j] += r[j] / n as f64;
        }
    }
    let mut c = vec![vec![0.0; d]; d];
    for a in 0..d {
        for b in 0..d {
            let mut s = 0.0;
            for r in rows {
                s += (r[a] - mean[a]) * (r[b] - mean[b]);
            }
            c[a][b] = s / (n as f64 - 1.0);
        }
    }
    c
}

/// Leading eigenpair of a symmetric positive semi-definite matrix by power
/// iteration.
pub fn power_iteration(m: &[Vec<f64>], iters: usize) -> (f64, Vec<f64>) {
    let d = m.len();
    let mut v: Vec<f64> = (0..d).map(|i| 1.0 + i as f64 * 0.01).collect();
    let mut lambda = 0.0;
    for _ in 0..iters {
        let w: Vec<f64> = (0..d).map(|i| (0..d).map(|j| m[i][j] * v[j]).sum()).collect();
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        lambda = norm;
        v = w.into_iter().map(|x| x / norm).collect();
    }
    (lambda, v)
}
