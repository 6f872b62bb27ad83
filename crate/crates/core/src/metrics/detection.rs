//! Detection metrics over target/nontarget score lists: EER, minDCF and the
//! log-likelihood-ratio cost with its PAV-calibrated minimum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default target prior for the detection cost.
pub const P_TARGET: f64 = 0.01;

fn check(targets: &[f64], nontargets: &[f64]) -> Result<()> {
    if targets.is_empty() || nontargets.is_empty() {
        return Err(Error::Input(format!(
            "need both classes, got {} target and {} nontarget scores",
            targets.len(),
            nontargets.len()
        )));
    }
    if targets.iter().chain(nontargets).any(|s| !s.is_finite()) {
        return Err(Error::Input("scores must be finite".into()));
    }
    Ok(())
}

/// One point of the detection tradeoff: accept iff `score > threshold`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub p_miss: f64,
    pub p_fa: f64,
}

/// Operating points at `-inf`, every midpoint between adjacent distinct
/// scores, and `+inf`, in increasing threshold order.
pub fn operating_points(targets: &[f64], nontargets: &[f64]) -> Result<Vec<OperatingPoint>> {
    check(targets, nontargets)?;
    let mut all: Vec<(f64, bool)> =
        targets.iter().map(|&s| (s, true)).chain(nontargets.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (nt, nn) = (targets.len() as f64, nontargets.len() as f64);
    let mut misses = 0usize;
    let mut fas = nontargets.len();
    let mut pts = vec![OperatingPoint { threshold: f64::NEG_INFINITY, p_miss: 0.0, p_fa: 1.0 }];
    let mut i = 0;
    while i < all.len() {
        let s = all[i].0;
        while i < all.len() && all[i].0 == s {
            if all[i].1 {
                misses += 1;
            } else {
                fas -= 1;
            }
            i += 1;
        }
        let threshold = if i < all.len() { 0.5 * (s + all[i].0) } else { f64::INFINITY };
        pts.push(OperatingPoint { threshold, p_miss: misses as f64 / nt, p_fa: fas as f64 / nn });
    }
    Ok(pts)
}

/// Equal error rate in percent and the threshold where it occurs.
pub fn eer(targets: &[f64], nontargets: &[f64]) -> Result<(f64, f64)> {
    let pts = operating_points(targets, nontargets)?;
    Ok(eer_from_points(&pts))
}

/// Crossing of `p_miss` and `p_fa` along the piecewise-linear tradeoff curve.
pub fn eer_from_points(pts: &[OperatingPoint]) -> (f64, f64) {
    for w in pts.windows(2) {
        let (a, b) = (w[0], w[1]);
        let da = a.p_miss - a.p_fa;
        let db = b.p_miss - b.p_fa;
        if da == 0.0 {
            return (100.0 * a.p_fa, a.threshold);
        }
        if da < 0.0 && db >= 0.0 {
            let t = da / (da - db);
            let rate = a.p_fa + t * (b.p_fa - a.p_fa);
            let threshold = if a.threshold.is_finite() && b.threshold.is_finite() {
                a.threshold + t * (b.threshold - a.threshold)
            } else if t < 0.5 {
                a.threshold
            } else {
                b.threshold
            };
            return (100.0 * rate, threshold);
        }
    }
    let last = pts[pts.len() - 1];
    (100.0 * last.p_fa, last.threshold)
}

/// Normalized detection cost at one operating point.
pub fn normalized_dcf(pt: &OperatingPoint, p_target: f64, c_miss: f64, c_fa: f64) -> f64 {
    let norm = (c_miss * p_target).min(c_fa * (1.0 - p_target));
    (c_miss * p_target * pt.p_miss + c_fa * (1.0 - p_target) * pt.p_fa) / norm
}

/// Minimum normalized detection cost over all operating points.
pub fn min_dcf(targets: &[f64], nontargets: &[f64], p_target: f64, c_miss: f64, c_fa: f64) -> Result<f64> {
    if !(p_target > 0.0 && p_target < 1.0) || !(c_miss > 0.0) || !(c_fa > 0.0) {
        return Err(Error::Parameter(format!("invalid cost model ({p_target}, {c_miss}, {c_fa})")));
    }
    let pts = operating_points(targets, nontargets)?;
    Ok(pts.iter().map(|p| normalized_dcf(p, p_target, c_miss, c_fa)).fold(f64::INFINITY, f64::min))
}

/// `log2(1 + e^x)` without overflow.
fn log2_1p_exp(x: f64) -> f64 {
    let ln = if x > 0.0 { x + (-x).exp().ln_1p() } else { x.exp().ln_1p() };
    ln / std::f64::consts::LN_2
}

/// Cllr of scores read as natural-log likelihood ratios.
pub fn cllr_act(targets: &[f64], nontargets: &[f64]) -> Result<f64> {
    check(targets, nontargets)?;
    Ok(cllr_of(targets, nontargets))
}

fn cllr_of(targets: &[f64], nontargets: &[f64]) -> f64 {
    let t = targets.iter().map(|&s| log2_1p_exp(-s)).sum::<f64>() / targets.len() as f64;
    let n = nontargets.iter().map(|&s| log2_1p_exp(s)).sum::<f64>() / nontargets.len() as f64;
    0.5 * (t + n)
}

/// Weighted isotonic (non-decreasing) regression by pool-adjacent-violators.
pub fn pav(values: &[f64], weights: &[f64]) -> Vec<f64> {
    assert_eq!(values.len(), weights.len(), "one weight per value");
    // blocks of (weighted mean, weight, count)
    let mut blocks: Vec<(f64, f64, usize)> = Vec::with_capacity(values.len());
    for (&v, &w) in values.iter().zip(weights) {
        blocks.push((v, w, 1));
        while blocks.len() > 1 {
            let n = blocks.len();
            let (b, a) = (blocks[n - 1], blocks[n - 2]);
            if a.0 <= b.0 {
                break;
            }
            let w = a.1 + b.1;
            blocks[n - 2] = ((a.0 * a.1 + b.0 * b.1) / w, w, a.2 + b.2);
            blocks.pop();
        }
    }
    blocks.into_iter().flat_map(|(m, _, c)| std::iter::repeat_n(m, c)).collect()
}

/// Optimally calibrated LLRs: PAV posteriors over score-sorted labels, tied
/// scores pooled first, converted to LLRs by removing the empirical prior.
/// Returns `(target_llrs, nontarget_llrs)`; may contain infinities.
pub fn pav_llrs(targets: &[f64], nontargets: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    check(targets, nontargets)?;
    let mut all: Vec<(f64, bool)> =
        targets.iter().map(|&s| (s, true)).chain(nontargets.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut vals = Vec::new();
    let mut wts = Vec::new();
    let mut groups = Vec::new();
    let mut i = 0;
    while i < all.len() {
        let s = all[i].0;
        let start = i;
        let mut hits = 0usize;
        while i < all.len() && all[i].0 == s {
            hits += usize::from(all[i].1);
            i += 1;
        }
        let n = (i - start) as f64;
        vals.push(hits as f64 / n);
        wts.push(n);
        groups.push(start..i);
    }
    let post = pav(&vals, &wts);
    let prior = (targets.len() as f64 / nontargets.len() as f64).ln();
    let (mut tl, mut nl) = (Vec::new(), Vec::new());
    for (g, q) in groups.into_iter().zip(post) {
        let llr = q.ln() - (1.0 - q).ln() - prior;
        for k in g {
            if all[k].1 {
                tl.push(llr);
            } else {
                nl.push(llr);
            }
        }
    }
    Ok((tl, nl))
}

/// `(cllr_act, cllr_min)`.
pub fn cllr(targets: &[f64], nontargets: &[f64]) -> Result<(f64, f64)> {
    let act = cllr_act(targets, nontargets)?;
    let (tl, nl) = pav_llrs(targets, nontargets)?;
    Ok((act, cllr_of(&tl, &nl)))
}
