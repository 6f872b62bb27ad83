//! Condition table with detection metrics and character error rates, as JSON
//! and as a plain-text table.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::detection::{cllr, eer, min_dcf, P_TARGET};
use crate::metrics::trials::TrialScoreSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub condition: String,
    pub eer_pct: f64,
    pub min_dcf: f64,
    pub cllr_min: f64,
    pub cllr_act: f64,
    pub n_target: usize,
    pub n_nontarget: usize,
}

impl MetricReport {
    pub fn compute(condition: &str, scores: &TrialScoreSet) -> Result<Self> {
        let (t, n) = scores.split();
        let (eer_pct, _) = eer(&t, &n)?;
        let (cllr_act, cllr_min) = cllr(&t, &n)?;
        Ok(Self {
            condition: condition.to_string(),
            eer_pct,
            min_dcf: min_dcf(&t, &n, P_TARGET, 1.0, 1.0)?,
            cllr_min,
            cllr_act,
            n_target: t.len(),
            n_nontarget: n.len(),
        })
    }
}

/// Published full-scale values, carried in the legend for context only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub condition: String,
    pub eer_pct: f64,
    pub min_dcf: f64,
    pub cllr_min: Option<f64>,
    pub cllr_act: Option<f64>,
}

pub fn reference_rows() -> Vec<ReferenceRow> {
    vec![
        ReferenceRow { condition: "Target/Target".into(), eer_pct: 1.50, min_dcf: 0.32, cllr_min: Some(0.07), cllr_act: Some(0.71) },
        ReferenceRow { condition: "Target/Our".into(), eer_pct: 10.83, min_dcf: 0.46, cllr_min: Some(0.34), cllr_act: Some(42.22) },
        ReferenceRow { condition: "Target/GhostVec".into(), eer_pct: 52.27, min_dcf: 1.00, cllr_min: None, cllr_act: None },
    ]
}

/// Full-scale character error rates (baseline recognizer, modified embedding).
pub const REFERENCE_CER: [(&str, f64); 2] = [("Target", 9.80), ("Our", 15.42)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub rows: Vec<MetricReport>,
    pub cer_pct: BTreeMap<String, f64>,
    pub legend: Vec<ReferenceRow>,
    pub reference_cer_pct: BTreeMap<String, f64>,
    /// Free-form scalar facts (gates, success rates) included verbatim.
    pub extras: BTreeMap<String, f64>,
}

impl ReportBundle {
    pub fn row(&self, condition: &str) -> Option<&MetricReport> {
        self.rows.iter().find(|r| r.condition == condition)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Input(format!("report json: {e}")))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<18} {:>8} {:>8} {:>9} {:>9} {:>7} {:>9}", "condition", "EER%", "minDCF", "Cllr_min", "Cllr_act", "#tgt", "#nontgt");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<18} {:>8.2} {:>8.3} {:>9.3} {:>9.3} {:>7} {:>9}",
                r.condition, r.eer_pct, r.min_dcf, r.cllr_min, r.cllr_act, r.n_target, r.n_nontarget
            );
        }
        if !self.cer_pct.is_empty() {
            let _ = writeln!(s, "\n{:<18} {:>8}", "synthesis", "CER%");
            for (k, v) in &self.cer_pct {
                let _ = writeln!(s, "{k:<18} {v:>8.2}");
            }
        }
        if !self.extras.is_empty() {
            let _ = writeln!(s);
            for (k, v) in &self.extras {
                let _ = writeln!(s, "{k}: {v:.4}");
            }
        }
        let _ = writeln!(s, "\nfull-scale reference values (context only):");
        for r in &self.legend {
            let c = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.2}"));
            let _ = writeln!(
                s,
                "  {:<16} EER {:>6.2}  minDCF {:>5.2}  Cllr_min {:>5}  Cllr_act {:>6}",
                r.condition, r.eer_pct, r.min_dcf, c(r.cllr_min), c(r.cllr_act)
            );
        }
        for (k, v) in &self.reference_cer_pct {
            let _ = writeln!(s, "  CER {k:<12} {v:.2}");
        }
        s
    }
}

/// One row per named score set, in the order given.
pub fn build_report(
    scoresets: &[(String, TrialScoreSet)],
    cers: &BTreeMap<String, f64>,
    extras: BTreeMap<String, f64>,
) -> Result<ReportBundle> {
    if scoresets.is_empty() {
        return Err(Error::Input("no score sets to report".into()));
    }
    let rows = scoresets.iter().map(|(name, s)| MetricReport::compute(name, s)).collect::<Result<Vec<_>>>()?;
    Ok(ReportBundle {
        rows,
        cer_pct: cers.clone(),
        legend: reference_rows(),
        reference_cer_pct: REFERENCE_CER.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        extras,
    })
}
