use crate::error::{Error, Result};

/// Levenshtein distance over characters.
pub fn edit_distance(a: &[char], b: &[char]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, &ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Character error rate in percent: edits / reference length * 100.
pub fn cer(hypothesis: &str, reference: &str) -> Result<f64> {
    let r: Vec<char> = reference.chars().collect();
    if r.is_empty() {
        return Err(Error::Parameter("empty reference".into()));
    }
    let h: Vec<char> = hypothesis.chars().collect();
    Ok(edit_distance(&h, &r) as f64 / r.len() as f64 * 100.0)
}

/// Corpus-level CER: total edits over total reference characters.
pub fn corpus_cer<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<f64> {
    let (mut edits, mut chars) = (0usize, 0usize);
    for (h, r) in pairs {
        let rc: Vec<char> = r.chars().collect();
        if rc.is_empty() {
            return Err(Error::Parameter("empty reference".into()));
        }
        edits += edit_distance(&h.chars().collect::<Vec<_>>(), &rc);
        chars += rc.len();
    }
    if chars == 0 {
        return Err(Error::Parameter("no references".into()));
    }
    Ok(edits as f64 / chars as f64 * 100.0)
}
