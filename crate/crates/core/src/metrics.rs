//! Word error rate, partial-result word latency and token emission delay.

use serde::{Deserialize, Serialize};

use crate::decoder::{PartialTrace, TimedHypothesis};
use crate::error::{Error, Result};

/// Reference word with its time span in milliseconds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordSpan {
    pub word: String,
    pub start_ms: u64,
    pub end_ms: u64,
}

pub type WordAlignment = Vec<WordSpan>;

/// Text of a token id; every synthetic token is one word.
pub fn word_of(token: usize) -> String {
    format!("w{token}")
}

pub fn validate_alignment(al: &[WordSpan]) -> Result<()> {
    for (i, w) in al.iter().enumerate() {
        if w.end_ms <= w.start_ms {
            return Err(Error::Invalid(format!("word {i} has an empty span")));
        }
        if i > 0 && al[i - 1].end_ms > w.start_ms {
            return Err(Error::Invalid(format!("word {i} overlaps its predecessor")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WerStats {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_len: usize,
}

impl WerStats {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    /// Error count over reference length; an empty reference counts as
    /// length one.
    pub fn wer(&self) -> f64 {
        self.errors() as f64 / self.ref_len.max(1) as f64
    }

    pub fn merge(&self, other: &WerStats) -> WerStats {
        WerStats {
            substitutions: self.substitutions + other.substitutions,
            deletions: self.deletions + other.deletions,
            insertions: self.insertions + other.insertions,
            ref_len: self.ref_len + other.ref_len,
        }
    }

    pub fn zero() -> WerStats {
        WerStats { substitutions: 0, deletions: 0, insertions: 0, ref_len: 0 }
    }
}

/// One step of an edit alignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Edit {
    Match(usize, usize),
    Substitute(usize, usize),
    Delete(usize),
    Insert(usize),
}

/// Minimum-edit alignment of `hyp` against `reference`. Ties prefer
/// match/substitution, then deletion, then insertion.
pub fn edit_alignment<T: PartialEq>(reference: &[T], hyp: &[T]) -> Vec<Edit> {
    let (n, m) = (reference.len(), hyp.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            d[i * w + j] = sub.min(d[(i - 1) * w + j] + 1).min(d[i * w + j - 1] + 1);
        }
    }
    let mut out = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hyp[j - 1];
            if d[i * w + j] == d[(i - 1) * w + j - 1] + usize::from(!same) {
                out.push(if same { Edit::Match(i - 1, j - 1) } else { Edit::Substitute(i - 1, j - 1) });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[i * w + j] == d[(i - 1) * w + j] + 1 {
            out.push(Edit::Delete(i - 1));
            i -= 1;
        } else {
            out.push(Edit::Insert(j - 1));
            j -= 1;
        }
    }
    out.reverse();
    out
}

pub fn wer<T: PartialEq>(reference: &[T], hyp: &[T]) -> WerStats {
    let mut s = WerStats { ref_len: reference.len(), ..WerStats::zero() };
    for e in edit_alignment(reference, hyp) {
        match e {
            Edit::Match(..) => {}
            Edit::Substitute(..) => s.substitutions += 1,
            Edit::Delete(_) => s.deletions += 1,
            Edit::Insert(_) => s.insertions += 1,
        }
    }
    s
}

/// Hypothesis position matched to each reference position, if any.
fn matched_positions<T: PartialEq>(reference: &[T], hyp: &[T]) -> Vec<Option<usize>> {
    let mut out = vec![None; reference.len()];
    for e in edit_alignment(reference, hyp) {
        if let Edit::Match(i, j) = e {
            out[i] = Some(j);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FirstSeenRule {
    /// The word's hypothesis prefix must be unchanged in every later
    /// snapshot.
    StablePrefix,
    /// Earliest snapshot containing the prefix, even if later revised.
    FirstAppearance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    /// Mean over matched words; `None` when every word was deleted.
    pub prwl_ms: Option<f64>,
    /// Per reference word; `None` for words missing from the final result.
    pub word_delays_ms: Vec<Option<f64>>,
    pub deleted_words: usize,
    /// Words reported before they finished (negative delay).
    pub early_words: usize,
    pub mean_emission_delay_ms: Option<f64>,
}

/// Partial-result word latency. A reference word is located in the final
/// snapshot by edit alignment; it counts as seen at the earliest snapshot
/// whose hypothesis already carries the final hypothesis up to and including
/// that word.
pub fn prwl(alignment: &[WordSpan], trace: &PartialTrace, rule: FirstSeenRule) -> Result<LatencyReport> {
    let snaps = &trace.snapshots;
    let Some(last) = snaps.last() else {
        return Err(Error::Invalid("partial trace is empty".into()));
    };
    let reference: Vec<&str> = alignment.iter().map(|w| w.word.as_str()).collect();
    let words = |tokens: &[usize]| tokens.iter().map(|&t| word_of(t)).collect::<Vec<_>>();
    let final_words = words(&last.tokens);
    let final_refs: Vec<&str> = final_words.iter().map(String::as_str).collect();
    let positions = matched_positions(&reference, &final_refs);

    let has_prefix = |k: usize, j: usize| {
        let toks = &snaps[k].tokens;
        toks.len() > j && toks[..=j] == last.tokens[..=j]
    };
    let mut delays = Vec::with_capacity(alignment.len());
    for (span, pos) in alignment.iter().zip(&positions) {
        let Some(j) = *pos else {
            delays.push(None);
            continue;
        };
        let seen = match rule {
            FirstSeenRule::FirstAppearance => (0..snaps.len()).find(|&k| has_prefix(k, j)),
            FirstSeenRule::StablePrefix => {
                let mut first = snaps.len() - 1;
                for k in (0..snaps.len()).rev() {
                    if !has_prefix(k, j) {
                        break;
                    }
                    first = k;
                }
                Some(first)
            }
        };
        let k = seen.expect("final snapshot carries its own prefix");
        delays.push(Some(snaps[k].audio_ms as f64 - span.end_ms as f64));
    }
    let matched: Vec<f64> = delays.iter().flatten().copied().collect();
    Ok(LatencyReport {
        prwl_ms: mean(&matched),
        deleted_words: delays.iter().filter(|d| d.is_none()).count(),
        early_words: matched.iter().filter(|d| **d < 0.0).count(),
        word_delays_ms: delays,
        mean_emission_delay_ms: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmissionDelay {
    /// Per reference token; `None` when the token is not matched.
    pub per_token_ms: Vec<Option<f64>>,
    pub mean_ms: Option<f64>,
}

/// Emission time minus reference end time for every reference token that
/// the edit alignment matches to a hypothesis token.
pub fn emission_delay(alignment: &[WordSpan], hyp: &TimedHypothesis) -> Result<EmissionDelay> {
    if hyp.emit_audio_ms.len() != hyp.tokens.len() {
        return Err(Error::Invalid("hypothesis emission times do not match its tokens".into()));
    }
    let reference: Vec<&str> = alignment.iter().map(|w| w.word.as_str()).collect();
    let words: Vec<String> = hyp.tokens.iter().map(|&t| word_of(t)).collect();
    let hyp_refs: Vec<&str> = words.iter().map(String::as_str).collect();
    let per_token_ms: Vec<Option<f64>> = matched_positions(&reference, &hyp_refs)
        .iter()
        .zip(alignment)
        .map(|(pos, span)| pos.map(|j| hyp.emit_audio_ms[j] as f64 - span.end_ms as f64))
        .collect();
    let matched: Vec<f64> = per_token_ms.iter().flatten().copied().collect();
    Ok(EmissionDelay { mean_ms: mean(&matched), per_token_ms })
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Pools word-level delays of many utterances into one mean.
pub fn pooled_mean<'a>(delays: impl IntoIterator<Item = &'a Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = delays.into_iter().flatten().copied().collect();
    mean(&v)
}
