//! Decoding-based evaluation: corpus BLEU, token and sequence accuracy,
//! overall and bucketed by source length.

use crate::bleu::{corpus_bleu, Smoothing};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tasks::SequencePair;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    Beam(usize),
}

impl DecodeMode {
    /// Parse `greedy` or `beam:<width>`.
    pub fn parse(s: &str) -> Result<Self> {
        if s == "greedy" {
            return Ok(DecodeMode::Greedy);
        }
        if let Some(w) = s.strip_prefix("beam:") {
            let width: usize = w
                .parse()
                .map_err(|_| Error::config(format!("bad beam width in '{s}'")))?;
            if width == 0 {
                return Err(Error::config("beam width must be >= 1"));
            }
            return Ok(DecodeMode::Beam(width));
        }
        Err(Error::config(format!(
            "unknown decode mode '{s}' (greedy | beam:<width>)"
        )))
    }
}

impl std::fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DecodeMode::Greedy => write!(f, "greedy"),
            DecodeMode::Beam(w) => write!(f, "beam:{w}"),
        }
    }
}

/// Decode a full corpus; offsets are 0 at inference. The per-pair length
/// budget is twice the source length plus a margin, clamped so the
/// position table cannot overflow.
pub fn decode_corpus(model: &Model<f32>, pairs: &[SequencePair], mode: DecodeMode) -> Result<Vec<Vec<usize>>> {
    let max_pos = model.config().max_position;
    let mut out = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let budget = (pair.src.len() * 2 + 8).min(max_pos.saturating_sub(2));
        let tokens = match mode {
            DecodeMode::Greedy => model.greedy_decode(&pair.src, budget)?,
            DecodeMode::Beam(w) => model.beam_decode(&pair.src, w, budget)?,
        };
        out.push(tokens);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct BucketRow {
    pub lo: usize,
    pub hi: usize,
    pub count: usize,
    pub bleu: f64,
    pub token_acc: f64,
    pub seq_acc: f64,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub corpus_bleu: f64,
    pub token_accuracy: f64,
    pub sequence_accuracy: f64,
    pub count: usize,
    pub buckets: Vec<BucketRow>,
    pub smoothing: Smoothing,
    pub metadata: Vec<(String, String)>,
}

fn token_matches(cand: &[usize], refr: &[usize]) -> usize {
    cand.iter().zip(refr).filter(|(c, r)| c == r).count()
}

fn accuracy_metrics(cands: &[&Vec<usize>], refs: &[&Vec<usize>]) -> (f64, f64) {
    let mut match_tokens = 0usize;
    let mut total_tokens = 0usize;
    let mut exact = 0usize;
    for (c, r) in cands.iter().zip(refs) {
        match_tokens += token_matches(c, r);
        total_tokens += r.len();
        if c == r {
            exact += 1;
        }
    }
    let token_acc = if total_tokens == 0 {
        0.0
    } else {
        match_tokens as f64 / total_tokens as f64
    };
    let seq_acc = if cands.is_empty() {
        0.0
    } else {
        exact as f64 / cands.len() as f64
    };
    (token_acc, seq_acc)
}

/// Build the report from already-decoded candidates. Buckets partition the
/// corpus by source length with inclusive bounds `[k*w+1, (k+1)*w]`; empty
/// buckets are omitted, so bucket counts sum to the corpus size.
pub fn report_from(
    candidates: &[Vec<usize>],
    pairs: &[SequencePair],
    bucket_width: usize,
    smoothing: Smoothing,
    metadata: Vec<(String, String)>,
) -> Result<EvalReport> {
    if candidates.len() != pairs.len() {
        return Err(Error::config(format!(
            "{} candidates vs {} pairs",
            candidates.len(),
            pairs.len()
        )));
    }
    if pairs.is_empty() {
        return Err(Error::config("evaluation corpus is empty"));
    }
    let bucket_width = bucket_width.max(1);
    let refs: Vec<Vec<usize>> = pairs.iter().map(|p| p.tgt.clone()).collect();
    let overall_bleu = corpus_bleu(candidates, &refs, smoothing)?;
    let all_c: Vec<&Vec<usize>> = candidates.iter().collect();
    let all_r: Vec<&Vec<usize>> = refs.iter().collect();
    let (token_acc, seq_acc) = accuracy_metrics(&all_c, &all_r);

    let max_bucket = pairs
        .iter()
        .map(|p| (p.src.len().max(1) - 1) / bucket_width)
        .max()
        .unwrap();
    let mut buckets = Vec::new();
    for b in 0..=max_bucket {
        let members: Vec<usize> = (0..pairs.len())
            .filter(|&i| (pairs[i].src.len().max(1) - 1) / bucket_width == b)
            .collect();
        if members.is_empty() {
            continue;
        }
        let bc: Vec<Vec<usize>> = members.iter().map(|&i| candidates[i].clone()).collect();
        let br: Vec<Vec<usize>> = members.iter().map(|&i| refs[i].clone()).collect();
        let bleu = corpus_bleu(&bc, &br, smoothing)?;
        let bcr: Vec<&Vec<usize>> = bc.iter().collect();
        let brr: Vec<&Vec<usize>> = br.iter().collect();
        let (ta, sa) = accuracy_metrics(&bcr, &brr);
        buckets.push(BucketRow {
            lo: b * bucket_width + 1,
            hi: (b + 1) * bucket_width,
            count: members.len(),
            bleu,
            token_acc: ta,
            seq_acc: sa,
        });
    }
    Ok(EvalReport {
        corpus_bleu: overall_bleu,
        token_accuracy: token_acc,
        sequence_accuracy: seq_acc,
        count: pairs.len(),
        buckets,
        smoothing,
        metadata,
    })
}

/// Decode then report.
pub fn evaluate(
    model: &Model<f32>,
    pairs: &[SequencePair],
    mode: DecodeMode,
    bucket_width: usize,
    smoothing: Smoothing,
    mut metadata: Vec<(String, String)>,
) -> Result<EvalReport> {
    metadata.insert(0, ("decode".into(), mode.to_string()));
    metadata.insert(1, ("scheme".into(), model.config().scheme.to_string()));
    let candidates = decode_corpus(model, pairs, mode)?;
    report_from(&candidates, pairs, bucket_width, smoothing, metadata)
}

/// One summary header line, a column header, then one row per bucket.
pub fn report_to_csv(report: &EvalReport) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "# overall count={} bleu={:.6} token_acc={:.6} seq_acc={:.6} smoothing={}",
        report.count,
        report.corpus_bleu,
        report.token_accuracy,
        report.sequence_accuracy,
        report.smoothing
    ));
    for (k, v) in &report.metadata {
        s.push_str(&format!(" {k}={v}"));
    }
    s.push('\n');
    s.push_str("bucket_lo,bucket_hi,count,bleu,token_acc,seq_acc\n");
    for b in &report.buckets {
        s.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6}\n",
            b.lo, b.hi, b.count, b.bleu, b.token_acc, b.seq_acc
        ));
    }
    s
}
