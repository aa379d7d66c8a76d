//! Corpus-level BLEU with multi-reference clipping and brevity penalty.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use super::MetricsError;

pub const MAX_ORDER: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub brevity_penalty: f64,
    /// Modified n-gram precisions `p_1..p_4`.
    pub precisions: [f64; MAX_ORDER],
    pub candidate_length: usize,
    pub effective_reference_length: usize,
}

impl BleuReport {
    /// BLEU-`k` for `k` in `1..=4`.
    pub fn bleu(&self, k: usize) -> f64 {
        [self.bleu1, self.bleu2, self.bleu3, self.bleu4][k - 1]
    }
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Length of the reference closest to `len`; ties go to the shorter one.
fn closest_ref_len<T>(len: usize, refs: &[Vec<T>]) -> usize {
    refs.iter()
        .map(|r| r.len())
        .min_by_key(|&r| (r.abs_diff(len), r))
        .expect("non-empty references")
}

/// Corpus BLEU over aligned candidates and reference lists.
///
/// Matches are clipped per sentence to the maximum count of that n-gram in
/// any single reference, then summed over the corpus before dividing. No
/// smoothing: a zero precision zeroes every BLEU-k that includes it.
pub fn corpus_bleu<T: Eq + Hash>(
    candidates: &[Vec<T>],
    references: &[Vec<Vec<T>>],
) -> Result<BleuReport, MetricsError> {
    if candidates.is_empty() {
        return Err(MetricsError::Bleu("empty candidate list".into()));
    }
    if candidates.len() != references.len() {
        return Err(MetricsError::Bleu(format!(
            "{} candidates but {} reference lists",
            candidates.len(),
            references.len()
        )));
    }
    if let Some(i) = references.iter().position(Vec::is_empty) {
        return Err(MetricsError::Bleu(format!(
            "candidate {i} has no references"
        )));
    }

    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    let (mut c, mut r) = (0usize, 0usize);
    for (cand, refs) in candidates.iter().zip(references) {
        c += cand.len();
        r += closest_ref_len(cand.len(), refs);
        for n in 1..=MAX_ORDER {
            let cand_counts = ngram_counts(cand, n);
            let mut max_ref: HashMap<&[T], usize> = HashMap::new();
            for rf in refs {
                for (g, k) in ngram_counts(rf, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(k);
                }
            }
            for (g, k) in cand_counts {
                matches[n - 1] += k.min(max_ref.get(g).copied().unwrap_or(0));
                totals[n - 1] += k;
            }
        }
    }

    let precisions = std::array::from_fn(|i| {
        if totals[i] == 0 {
            0.0
        } else {
            matches[i] as f64 / totals[i] as f64
        }
    });
    let brevity_penalty = if c == 0 {
        0.0
    } else if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    let bleu_k = |k: usize| -> f64 {
        let ps: &[f64] = &precisions[..k];
        if ps.contains(&0.0) {
            return 0.0;
        }
        brevity_penalty * (ps.iter().map(|p| p.ln()).sum::<f64>() / k as f64).exp()
    };
    Ok(BleuReport {
        bleu1: bleu_k(1),
        bleu2: bleu_k(2),
        bleu3: bleu_k(3),
        bleu4: bleu_k(4),
        brevity_penalty,
        precisions,
        candidate_length: c,
        effective_reference_length: r,
    })
}
