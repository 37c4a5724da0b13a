use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};

/// Share of tokens a language must strictly exceed to be detected.
pub const DETECT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Detected {
    Lang(usize),
    Mixed,
}

/// Exact detector over disjoint vocabularies: language `l` iff more than
/// half of the tokens belong to `l`.
pub fn detect_language(tokens: &[u32], vocab: &Vocabulary) -> Detected {
    if tokens.is_empty() {
        return Detected::Mixed;
    }
    let mut counts = vec![0usize; vocab.num_languages()];
    for &t in tokens {
        if let Some(l) = vocab.owner(t) {
            counts[l] += 1;
        }
    }
    counts
        .iter()
        .position(|&c| c as f64 > DETECT_THRESHOLD * tokens.len() as f64)
        .map_or(Detected::Mixed, Detected::Lang)
}

/// Fraction of hypotheses not detected as `target`; `Mixed` counts as off.
pub fn otr(hypotheses: &[Vec<u32>], target: usize, vocab: &Vocabulary) -> f64 {
    if hypotheses.is_empty() {
        return 0.0;
    }
    let off = hypotheses
        .iter()
        .filter(|h| detect_language(h, vocab) != Detected::Lang(target))
        .count();
    off as f64 / hypotheses.len() as f64
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Corpus 4-gram BLEU in [0, 100]. Clipped n-gram matches are pooled over
/// the corpus. For n >= 2 a zero match count is smoothed to
/// `1 / (total + 1)`; unigrams are never smoothed. Brevity penalty
/// `exp(1 - r / c)` applies when the hypotheses are shorter in total.
pub fn bleu<T: Eq + Hash>(hypotheses: &[Vec<T>], references: &[Vec<T>]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::dim(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if hypotheses.is_empty() {
        return Err(Error::contract("BLEU of an empty corpus"));
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rf) in hypotheses.iter().zip(references) {
        c += h.len();
        r += rf.len();
        for n in 1..=4 {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(rf, n);
            total[n - 1] += h.len().saturating_sub(n - 1);
            matched[n - 1] += hc
                .iter()
                .map(|(g, &k)| k.min(rc.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
        }
    }
    if c == 0 || matched[0] == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..4 {
        let p = if n > 0 && matched[n] == 0 {
            1.0 / (total[n] as f64 + 1.0)
        } else {
            matched[n] as f64 / total[n] as f64
        };
        log_sum += p.ln();
    }
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    Ok(100.0 * bp * (log_sum / 4.0).exp())
}

/// [`bleu`] over whitespace-separated strings.
pub fn bleu_text(hypotheses: &[&str], references: &[&str]) -> Result<f64> {
    let split = |xs: &[&str]| -> Vec<Vec<String>> {
        xs.iter()
            .map(|s| s.split_whitespace().map(str::to_string).collect())
            .collect()
    };
    bleu(&split(hypotheses), &split(references))
}
