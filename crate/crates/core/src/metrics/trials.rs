//! Verification trials, cosine scoring and their TSV files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::cosine_similarity;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrialLabel {
    Target,
    Nontarget,
}

impl TrialLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Target => "target",
            Self::Nontarget => "nontarget",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "target" => Some(Self::Target),
            "nontarget" => Some(Self::Nontarget),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trial {
    pub enroll_id: String,
    pub test_id: String,
    pub label: TrialLabel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredTrial {
    pub trial: Trial,
    /// Higher means more likely the same speaker.
    pub score: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrialScoreSet {
    pub trials: Vec<ScoredTrial>,
}

impl TrialScoreSet {
    pub fn split(&self) -> (Vec<f64>, Vec<f64>) {
        let mut t = Vec::new();
        let mut n = Vec::new();
        for s in &self.trials {
            match s.trial.label {
                TrialLabel::Target => t.push(s.score),
                TrialLabel::Nontarget => n.push(s.score),
            }
        }
        (t, n)
    }

    /// Trial file plus a score column.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for t in &self.trials {
            let _ = writeln!(s, "{}\t{}\t{}\t{:.9}", t.trial.enroll_id, t.trial.test_id, t.trial.label.as_str(), t.score);
        }
        s
    }

    pub fn from_tsv(text: &str, origin: &Path) -> Result<Self> {
        let mut trials = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
            let f: Vec<&str> = line.split('\t').collect();
            let bad = |m: &str| Error::format(origin, format!("line {}: {m}", n + 1));
            if f.len() != 4 {
                return Err(bad("expected enroll, test, label, score"));
            }
            let label = TrialLabel::parse(f[2]).ok_or_else(|| bad("label must be target or nontarget"))?;
            let score: f64 = f[3].parse().map_err(|_| bad("unparseable score"))?;
            trials.push(ScoredTrial {
                trial: Trial { enroll_id: f[0].into(), test_id: f[1].into(), label },
                score,
            });
        }
        Ok(Self { trials })
    }
}

pub fn format_trials(trials: &[Trial]) -> String {
    trials.iter().map(|t| format!("{}\t{}\t{}\n", t.enroll_id, t.test_id, t.label.as_str())).collect()
}

pub fn parse_trials(text: &str, origin: &Path) -> Result<Vec<Trial>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(n, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            let label = f.get(2).and_then(|s| TrialLabel::parse(s));
            match (f.len(), label) {
                (3, Some(label)) => Ok(Trial { enroll_id: f[0].into(), test_id: f[1].into(), label }),
                _ => Err(Error::format(origin, format!("line {}: expected enroll, test, target|nontarget", n + 1))),
            }
        })
        .collect()
}

/// Cosine score of every trial. Each enroll id's embedding is the mean of
/// its enrollment utterance embeddings.
pub fn score_trials(
    enroll: &BTreeMap<String, Vec<Vec<f64>>>,
    test: &BTreeMap<String, Vec<f64>>,
    trials: &[Trial],
) -> Result<TrialScoreSet> {
    let mut means: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (id, utts) in enroll {
        let first = utts.first().ok_or_else(|| Error::Input(format!("enroll id {id} has no utterances")))?;
        let mut m = vec![0.0; first.len()];
        for u in utts {
            if u.len() != m.len() {
                return Err(Error::Shape(format!("enroll id {id} mixes embedding sizes")));
            }
            m.iter_mut().zip(u).for_each(|(a, b)| *a += b);
        }
        let n = utts.len() as f64;
        m.iter_mut().for_each(|a| *a /= n);
        means.insert(id.as_str(), m);
    }
    let mut out = Vec::with_capacity(trials.len());
    for t in trials {
        let e = means.get(t.enroll_id.as_str()).ok_or_else(|| Error::Input(format!("unknown enroll id {}", t.enroll_id)))?;
        let x = test.get(&t.test_id).ok_or_else(|| Error::Input(format!("unknown test id {}", t.test_id)))?;
        if x.len() != e.len() {
            return Err(Error::Shape(format!("trial {} vs {}: embedding sizes differ", t.enroll_id, t.test_id)));
        }
        out.push(ScoredTrial { trial: t.clone(), score: cosine_similarity(e, x) });
    }
    Ok(TrialScoreSet { trials: out })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_ids_are_errors() {
        let enroll = BTreeMap::from([("a".to_string(), vec![vec![1.0, 0.0]])]);
        let test = BTreeMap::from([("x".to_string(), vec![1.0, 0.0])]);
        let t = |e: &str, x: &str| Trial { enroll_id: e.into(), test_id: x.into(), label: TrialLabel::Target };
        assert!(score_trials(&enroll, &test, &[t("b", "x")]).is_err());
        assert!(score_trials(&enroll, &test, &[t("a", "y")]).is_err());
        assert_eq!(score_trials(&enroll, &test, &[t("a", "x")]).unwrap().trials[0].score, 1.0);
    }

    #[test]
    fn tsv_round_trips() {
        let set = TrialScoreSet {
            trials: vec![ScoredTrial {
                trial: Trial { enroll_id: "a".into(), test_id: "b".into(), label: TrialLabel::Nontarget },
                score: 0.25,
            }],
        };
        assert_eq!(TrialScoreSet::from_tsv(&set.to_tsv(), Path::new("s")).unwrap(), set);
        let trials: Vec<Trial> = set.trials.iter().map(|s| s.trial.clone()).collect();
        assert_eq!(parse_trials(&format_trials(&trials), Path::new("t")).unwrap(), trials);
        assert!(parse_trials("a\tb\tmaybe\n", Path::new("t")).is_err());
    }
}
