//! Corpus-level BLEU on token ids: modified n-gram precision (n = 1..4)
//! with per-pair clipping, geometric mean via the mean of logs, and the
//! corpus brevity penalty `min(1, exp(1 - ref_len/cand_len))`.
//!
//! Orders the candidate corpus is too short to populate (zero n-gram
//! total) drop out of the geometric mean, so a perfect two-token corpus
//! still scores 100. Zero-match handling at populated orders is strict by
//! default (any zero precision gives BLEU 0); exponential smoothing
//! instead halves the effective precision per affected order, for tiny
//! corpora.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub const MAX_NGRAM: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Smoothing {
    None,
    Exp,
}

impl Smoothing {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Smoothing::None),
            "exp" => Ok(Smoothing::Exp),
            other => Err(Error::config(format!(
                "unknown BLEU smoothing '{other}' (none | exp)"
            ))),
        }
    }
}

impl std::fmt::Display for Smoothing {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Smoothing::None => write!(f, "none"),
            Smoothing::Exp => write!(f, "exp"),
        }
    }
}

fn ngram_counts(tokens: &[usize], n: usize) -> HashMap<&[usize], u64> {
    let mut counts: HashMap<&[usize], u64> = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped matches and candidate total for one candidate/reference pair at
/// one n-gram order.
pub fn ngram_stats(candidate: &[usize], reference: &[usize], n: usize) -> (u64, u64) {
    let cand = ngram_counts(candidate, n);
    let refr = ngram_counts(reference, n);
    let mut matched = 0;
    let mut total = 0;
    for (gram, &c) in &cand {
        total += c;
        matched += c.min(refr.get(gram).copied().unwrap_or(0));
    }
    (matched, total)
}

/// Corpus brevity penalty.
pub fn brevity_penalty(cand_len: u64, ref_len: u64) -> f64 {
    if cand_len == 0 {
        return 0.0;
    }
    if cand_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    }
}

/// BLEU in [0, 100]. Candidates and references pair up by index; the
/// corpus must be non-empty and equally sized on both sides.
pub fn corpus_bleu(
    candidates: &[Vec<usize>],
    references: &[Vec<usize>],
    smoothing: Smoothing,
) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::config("corpus_bleu on an empty corpus"));
    }
    if candidates.len() != references.len() {
        return Err(Error::config(format!(
            "{} candidates vs {} references",
            candidates.len(),
            references.len()
        )));
    }
    let mut matched = [0u64; MAX_NGRAM];
    let mut total = [0u64; MAX_NGRAM];
    let mut cand_len = 0u64;
    let mut ref_len = 0u64;
    for (cand, refr) in candidates.iter().zip(references) {
        cand_len += cand.len() as u64;
        ref_len += refr.len() as u64;
        for n in 1..=MAX_NGRAM {
            let (m, t) = ngram_stats(cand, refr, n);
            matched[n - 1] += m;
            total[n - 1] += t;
        }
    }
    let mut log_sum = 0.0;
    let mut smooth = 1.0f64;
    for n in 0..MAX_NGRAM {
        let p = if matched[n] > 0 {
            matched[n] as f64 / total[n] as f64
        } else {
            match smoothing {
                Smoothing::None => return Ok(0.0),
                Smoothing::Exp => {
                    smooth *= 2.0;
                    1.0 / (smooth * total[n].max(1) as f64)
                }
            }
        };
        log_sum += p.ln();
    }
    let precision = (log_sum / MAX_NGRAM as f64).exp();
    Ok(100.0 * brevity_penalty(cand_len, ref_len) * precision)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_corpus_scores_exactly_100() {
        let c = vec![vec![5, 6, 7, 8, 9], vec![4, 4, 5]];
        assert_eq!(corpus_bleu(&c, &c, Smoothing::None).unwrap(), 100.0);
        assert_eq!(corpus_bleu(&c, &c, Smoothing::Exp).unwrap(), 100.0);
    }

    #[test]
    fn clipped_unigram_example() {
        // candidate "the"x7 vs "the cat is on the mat": clipped unigram 2/7
        // (ids: the=10, cat=11, is=12, on=13, mat=14)
        let cand = vec![10usize; 7];
        let refr = vec![10, 11, 12, 13, 10, 14];
        let (matched, total) = ngram_stats(&cand, &refr, 1);
        assert_eq!((matched, total), (2, 7));
    }

    #[test]
    fn brevity_penalty_closed_form() {
        // candidate half the reference length: BP = e^(1-2)
        let bp = brevity_penalty(10, 20);
        assert!((bp - (-1.0f64).exp()).abs() < 1e-12);
        assert_eq!(brevity_penalty(20, 20), 1.0);
        assert_eq!(brevity_penalty(25, 20), 1.0);
    }

    #[test]
    fn brevity_penalty_scales_the_score() {
        // perfect prefix half as long: precisions 1, BLEU = 100 * e^-1
        let refr = vec![vec![5, 6, 7, 8, 9, 10, 11, 12]];
        let cand = vec![vec![5, 6, 7, 8]];
        let bleu = corpus_bleu(&cand, &refr, Smoothing::None).unwrap();
        assert!((bleu - 100.0 * (1.0f64 - 2.0).exp()).abs() < 1e-9, "{bleu}");
    }

    #[test]
    fn permutation_invariant_over_corpus_order() {
        let cands = vec![vec![5, 6, 7], vec![8, 9], vec![4, 5, 6, 7]];
        let refs = vec![vec![5, 6, 8], vec![8, 9], vec![4, 5, 7, 7]];
        let a = corpus_bleu(&cands, &refs, Smoothing::Exp).unwrap();
        let cands_r: Vec<_> = cands.iter().rev().cloned().collect();
        let refs_r: Vec<_> = refs.iter().rev().cloned().collect();
        let b = corpus_bleu(&cands_r, &refs_r, Smoothing::Exp).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_precision_is_strict_zero_without_smoothing() {
        // no 4-gram can match a 3-token reference pair
        let cands = vec![vec![5, 6, 7]];
        let refs = vec![vec![5, 6, 8]];
        assert_eq!(corpus_bleu(&cands, &refs, Smoothing::None).unwrap(), 0.0);
        let smoothed = corpus_bleu(&cands, &refs, Smoothing::Exp).unwrap();
        assert!(smoothed > 0.0 && smoothed < 100.0);
    }

    #[test]
    fn exp_smoothing_halves_per_missing_order() {
        // unigrams match, everything above is empty (single-token pairs)
        let cands = vec![vec![5]];
        let refs = vec![vec![5]];
        let bleu = corpus_bleu(&cands, &refs, Smoothing::Exp).unwrap();
        // p = [1, 1/2, 1/4, 1/8] with totals clamped to 1
        let want = 100.0 * ((0.5f64.ln() + 0.25f64.ln() + 0.125f64.ln()) / 4.0).exp();
        assert!((bleu - want).abs() < 1e-9, "{bleu} vs {want}");
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(corpus_bleu(&[], &[], Smoothing::None).is_err());
        let cands = vec![vec![5]];
        assert!(corpus_bleu(&cands, &[], Smoothing::None).is_err());
    }
}
