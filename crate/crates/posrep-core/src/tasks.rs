//! Synthetic sequence-pair generators and the two derived data regimes:
//! length-filtered training corpora (extrapolation) and sentence
//! concatenation with a separator token (interpolation), plus the
//! swapped-order probe input.
//!
//! Token ids 0..4 are reserved (pad/bos/eos/sep); content ids start at 4.
//! Content tokens are Zipf-distributed so frequency-bucketed analyses have
//! populated rare-token cells.

use std::fmt;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{NUM_SPECIAL, SEP_ID};
use crate::rng::Pcg32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Copy,
    Reverse,
    /// Elementwise relabeling through a fixed seed-derived permutation of
    /// the content vocabulary; the headline task, since it forces the
    /// model to attend by relative offset instead of routing identities.
    MappedCopy,
}

impl TaskKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "reverse" => Ok(TaskKind::Reverse),
            "mapped-copy" => Ok(TaskKind::MappedCopy),
            other => Err(Error::config(format!(
                "unknown task kind '{other}' (copy | reverse | mapped-copy)"
            ))),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskKind::Copy => write!(f, "copy"),
            TaskKind::Reverse => write!(f, "reverse"),
            TaskKind::MappedCopy => write!(f, "mapped-copy"),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub vocab_size: usize,
    pub length_range: (usize, usize),
    pub zipf_exponent: f64,
    pub seed: u64,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= NUM_SPECIAL {
            return Err(Error::config(format!(
                "vocab_size {} leaves no content tokens past the {} specials",
                self.vocab_size, NUM_SPECIAL
            )));
        }
        let (lo, hi) = self.length_range;
        if lo < 1 || hi < lo {
            return Err(Error::config(format!("bad length range [{lo}, {hi}]")));
        }
        Ok(())
    }

    pub fn content_vocab(&self) -> usize {
        self.vocab_size - NUM_SPECIAL
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequencePair {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
    /// Indices of separator tokens in `src`, present only for
    /// concatenated pairs.
    pub boundaries: Option<Vec<usize>>,
}

impl SequencePair {
    pub fn plain(src: Vec<usize>, tgt: Vec<usize>) -> Self {
        SequencePair {
            src,
            tgt,
            boundaries: None,
        }
    }
}

/// Cumulative Zipf distribution over ranks 1..=n: p(rank) ∝ rank^-s.
fn zipf_cdf(n: usize, s: f64) -> Vec<f64> {
    let mut cdf = Vec::with_capacity(n);
    let mut total = 0.0;
    for r in 1..=n {
        total += (r as f64).powf(-s);
        cdf.push(total);
    }
    for v in &mut cdf {
        *v /= total;
    }
    cdf
}

fn sample_zipf(rng: &mut Pcg32, cdf: &[f64]) -> usize {
    let u = rng.uniform_f64();
    // first rank whose cumulative mass exceeds u
    match cdf.binary_search_by(|c| c.partial_cmp(&u).unwrap()) {
        Ok(i) | Err(i) => i.min(cdf.len() - 1)
    }
}

/// Fixed vocabulary permutation for mapped-copy, a pure function of the
/// task seed (stream `task-permutation`).
pub fn derive_permutation(spec: &TaskSpec) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..spec.content_vocab()).collect();
    let mut rng = Pcg32::for_purpose(spec.seed, "task-permutation");
    rng.shuffle(&mut perm);
    perm
}

/// Draw one pair: a Zipf-skewed source of uniform random length and the
/// task-defined target. Pure function of (spec, rng state).
pub fn gen_pair(spec: &TaskSpec, rng: &mut Pcg32) -> Result<SequencePair> {
    spec.validate()?;
    let cdf = zipf_cdf(spec.content_vocab(), spec.zipf_exponent);
    let perm = derive_permutation(spec);
    Ok(gen_pair_with(spec, rng, &cdf, &perm))
}

fn gen_pair_with(
    spec: &TaskSpec,
    rng: &mut Pcg32,
    cdf: &[f64],
    perm: &[usize],
) -> SequencePair {
    let (lo, hi) = spec.length_range;
    let len = lo + rng.uniform_below((hi - lo + 1) as u32) as usize;
    let src: Vec<usize> = (0..len)
        .map(|_| NUM_SPECIAL + sample_zipf(rng, cdf))
        .collect();
    let tgt = match spec.kind {
        TaskKind::Copy => src.clone(),
        TaskKind::Reverse => src.iter().rev().copied().collect(),
        TaskKind::MappedCopy => src
            .iter()
            .map(|&t| NUM_SPECIAL + perm[t - NUM_SPECIAL])
            .collect(),
    };
    SequencePair::plain(src, tgt)
}

/// Generate `n` pairs from the stream named `purpose` of the spec seed
/// (`corpus/train`, `corpus/valid`, ... by convention).
pub fn gen_corpus(spec: &TaskSpec, n: usize, purpose: &str) -> Result<Vec<SequencePair>> {
    spec.validate()?;
    let cdf = zipf_cdf(spec.content_vocab(), spec.zipf_exponent);
    let perm = derive_permutation(spec);
    let mut rng = Pcg32::for_purpose(spec.seed, purpose);
    Ok((0..n)
        .map(|_| gen_pair_with(spec, &mut rng, &cdf, &perm))
        .collect())
}

/// Training-side length filter: drop any pair whose source or target
/// exceeds `l_train` tokens (boundary inclusive: length == l_train stays).
/// Validation and test splits are never filtered.
pub fn make_extrapolate_split(
    train: &[SequencePair],
    l_train: usize,
) -> Result<Vec<SequencePair>> {
    let kept: Vec<SequencePair> = train
        .iter()
        .filter(|p| p.src.len() <= l_train && p.tgt.len() <= l_train)
        .cloned()
        .collect();
    if kept.is_empty() {
        return Err(Error::config(format!(
            "length filter at {l_train} left an empty training set"
        )));
    }
    Ok(kept)
}

/// Merge consecutive groups of `n_concat` pairs with a separator token on
/// both sides; a trailing group smaller than `n_concat` is dropped.
pub fn make_interpolate_dataset(
    pairs: &[SequencePair],
    n_concat: usize,
    sep_id: usize,
) -> Result<Vec<SequencePair>> {
    if n_concat < 2 {
        return Err(Error::config("n_concat must be >= 2"));
    }
    let mut out = Vec::with_capacity(pairs.len() / n_concat);
    for group in pairs.chunks(n_concat) {
        if group.len() < n_concat {
            break;
        }
        let mut src = Vec::new();
        let mut tgt = Vec::new();
        let mut boundaries = Vec::with_capacity(n_concat - 1);
        for (i, pair) in group.iter().enumerate() {
            if i > 0 {
                boundaries.push(src.len());
                src.push(sep_id);
                tgt.push(sep_id);
            }
            src.extend_from_slice(&pair.src);
            tgt.extend_from_slice(&pair.tgt);
        }
        out.push(SequencePair {
            src,
            tgt,
            boundaries: Some(boundaries),
        });
    }
    Ok(out)
}

/// Split a token sequence on the separator id.
pub fn split_segments(tokens: &[usize], sep_id: usize) -> Vec<Vec<usize>> {
    let mut segments = vec![Vec::new()];
    for &t in tokens {
        if t == sep_id {
            segments.push(Vec::new());
        } else {
            segments.last_mut().unwrap().push(t);
        }
    }
    segments
}

fn join_segments(segments: &[Vec<usize>], sep_id: usize) -> (Vec<usize>, Vec<usize>) {
    let mut tokens = Vec::new();
    let mut boundaries = Vec::new();
    for (i, seg) in segments.iter().enumerate() {
        if i > 0 {
            boundaries.push(tokens.len());
            tokens.push(sep_id);
        }
        tokens.extend_from_slice(seg);
    }
    (tokens, boundaries)
}

/// Move the first sentence of a concatenated pair to the end, on both the
/// source and the target side, preserving separator placement. Errors on
/// pairs that are not concatenations of at least two sentences.
pub fn swap_first_to_end(pair: &SequencePair, sep_id: usize) -> Result<SequencePair> {
    if pair.boundaries.as_ref().map_or(true, |b| b.is_empty()) {
        return Err(Error::config(
            "swap_first_to_end needs a concatenated pair with >= 2 sentences".to_string(),
        ));
    }
    let mut src_segs = split_segments(&pair.src, sep_id);
    let mut tgt_segs = split_segments(&pair.tgt, sep_id);
    src_segs.rotate_left(1);
    tgt_segs.rotate_left(1);
    let (src, boundaries) = join_segments(&src_segs, sep_id);
    let (tgt, _) = join_segments(&tgt_segs, sep_id);
    Ok(SequencePair {
        src,
        tgt,
        boundaries: Some(boundaries),
    })
}

/// Occurrences of every token id on the target side of a corpus
/// (separators and specials included at their slots; content analyses
/// index past them).
pub fn token_frequencies(pairs: &[SequencePair], vocab: usize) -> Vec<u64> {
    let mut counts = vec![0u64; vocab];
    for p in pairs {
        for &t in &p.tgt {
            if t < vocab {
                counts[t] += 1;
            }
        }
    }
    counts
}

// ---------------------------------------------------------------------
// Corpus files: `#`-prefixed key=value header lines carrying the spec,
// then one pair per line, `src-ids <TAB> tgt-ids`, space-separated decimal.
// ---------------------------------------------------------------------

pub fn corpus_to_string(spec: &TaskSpec, split: &str, pairs: &[SequencePair]) -> String {
    let mut s = String::new();
    s.push_str(&format!("# kind={}\n", spec.kind));
    s.push_str(&format!("# vocab_size={}\n", spec.vocab_size));
    s.push_str(&format!("# length_min={}\n", spec.length_range.0));
    s.push_str(&format!("# length_max={}\n", spec.length_range.1));
    s.push_str(&format!("# zipf_exponent={}\n", spec.zipf_exponent));
    s.push_str(&format!("# seed={}\n", spec.seed));
    s.push_str(&format!("# split={split}\n"));
    for p in pairs {
        let src: Vec<String> = p.src.iter().map(|t| t.to_string()).collect();
        let tgt: Vec<String> = p.tgt.iter().map(|t| t.to_string()).collect();
        s.push_str(&src.join(" "));
        s.push('\t');
        s.push_str(&tgt.join(" "));
        s.push('\n');
    }
    s
}

pub fn write_corpus(
    path: &Path,
    spec: &TaskSpec,
    split: &str,
    pairs: &[SequencePair],
) -> Result<()> {
    fs::write(path, corpus_to_string(spec, split, pairs))
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub struct CorpusFile {
    pub spec: TaskSpec,
    pub split: String,
    pub pairs: Vec<SequencePair>,
}

pub fn read_corpus(path: &Path) -> Result<CorpusFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_corpus(&text).map_err(|e| match e {
        Error::Format(msg) => Error::format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn parse_corpus(text: &str) -> Result<CorpusFile> {
    let mut kind = None;
    let mut vocab_size = None;
    let mut length_min = None;
    let mut length_max = None;
    let mut zipf = None;
    let mut seed = None;
    let mut split = String::from("unknown");
    let mut pairs = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        if let Some(header) = line.strip_prefix('#') {
            let header = header.trim();
            let Some((k, v)) = header.split_once('=') else {
                continue;
            };
            match k {
                "kind" => kind = Some(TaskKind::parse(v)?),
                "vocab_size" => vocab_size = parse_num(v, ln)?.into(),
                "length_min" => length_min = parse_num(v, ln)?.into(),
                "length_max" => length_max = parse_num(v, ln)?.into(),
                "zipf_exponent" => {
                    zipf = Some(v.parse::<f64>().map_err(|_| {
                        Error::format(format!("line {}: bad zipf_exponent '{v}'", ln + 1))
                    })?)
                }
                "seed" => {
                    seed = Some(v.parse::<u64>().map_err(|_| {
                        Error::format(format!("line {}: bad seed '{v}'", ln + 1))
                    })?)
                }
                "split" => split = v.to_string(),
                _ => {}
            }
            continue;
        }
        let (src, tgt) = line
            .split_once('\t')
            .ok_or_else(|| Error::format(format!("line {}: missing tab", ln + 1)))?;
        let parse_ids = |s: &str| -> Result<Vec<usize>> {
            s.split_whitespace()
                .map(|t| {
                    t.parse::<usize>()
                        .map_err(|_| Error::format(format!("line {}: bad token '{t}'", ln + 1)))
                })
                .collect()
        };
        let src = parse_ids(src)?;
        let tgt = parse_ids(tgt)?;
        let bounds: Vec<usize> = src
            .iter()
            .enumerate()
            .filter(|&(_, &t)| t == SEP_ID)
            .map(|(i, _)| i)
            .collect();
        pairs.push(SequencePair {
            src,
            tgt,
            boundaries: if bounds.is_empty() { None } else { Some(bounds) },
        });
    }
    let spec = TaskSpec {
        kind: kind.ok_or_else(|| Error::format("corpus header missing kind".to_string()))?,
        vocab_size: vocab_size
            .ok_or_else(|| Error::format("corpus header missing vocab_size".to_string()))?,
        length_range: (
            length_min
                .ok_or_else(|| Error::format("corpus header missing length_min".to_string()))?,
            length_max
                .ok_or_else(|| Error::format("corpus header missing length_max".to_string()))?,
        ),
        zipf_exponent: zipf
            .ok_or_else(|| Error::format("corpus header missing zipf_exponent".to_string()))?,
        seed: seed.ok_or_else(|| Error::format("corpus header missing seed".to_string()))?,
    };
    spec.validate()?;
    Ok(CorpusFile { spec, split, pairs })
}

fn parse_num(v: &str, ln: usize) -> Result<usize> {
    v.parse::<usize>()
        .map_err(|_| Error::format(format!("line {}: bad integer '{v}'", ln + 1)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: TaskKind) -> TaskSpec {
        TaskSpec {
            kind,
            vocab_size: 64,
            length_range: (3, 8),
            zipf_exponent: 1.2,
            seed: 42,
        }
    }

    #[test]
    fn copy_task_repeats_source() {
        let mut rng = Pcg32::new(1, 1);
        let p = gen_pair(&spec(TaskKind::Copy), &mut rng).unwrap();
        assert_eq!(p.src, p.tgt);
    }

    #[test]
    fn reverse_task_reverses_source() {
        let mut rng = Pcg32::new(1, 1);
        let p = gen_pair(&spec(TaskKind::Reverse), &mut rng).unwrap();
        let want: Vec<usize> = p.src.iter().rev().copied().collect();
        assert_eq!(p.tgt, want);
    }

    #[test]
    fn mapped_copy_applies_seed_derived_permutation() {
        let s = spec(TaskKind::MappedCopy);
        let perm = derive_permutation(&s);
        let mut rng = Pcg32::new(1, 1);
        let p = gen_pair(&s, &mut rng).unwrap();
        let want: Vec<usize> = p
            .src
            .iter()
            .map(|&t| NUM_SPECIAL + perm[t - NUM_SPECIAL])
            .collect();
        assert_eq!(p.tgt, want);
        // permutation is a bijection over the content ids
        let mut sorted = perm.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..s.content_vocab()).collect::<Vec<_>>());
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let s = spec(TaskKind::MappedCopy);
        let a = gen_corpus(&s, 50, "corpus/train").unwrap();
        let b = gen_corpus(&s, 50, "corpus/train").unwrap();
        assert_eq!(a, b);
        let c = gen_corpus(&s, 50, "corpus/valid").unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn content_tokens_stay_clear_of_specials() {
        let s = spec(TaskKind::Copy);
        for p in gen_corpus(&s, 200, "corpus/train").unwrap() {
            assert!(p.src.iter().all(|&t| (NUM_SPECIAL..64).contains(&t)));
            let (lo, hi) = s.length_range;
            assert!((lo..=hi).contains(&p.src.len()));
        }
    }

    #[test]
    fn zipf_skew_separates_top_from_median() {
        let s = TaskSpec {
            kind: TaskKind::Copy,
            vocab_size: 64, // 60 content tokens
            length_range: (1, 1),
            zipf_exponent: 1.2,
            seed: 7,
        };
        let pairs = gen_corpus(&s, 100_000, "zipf-check").unwrap();
        let counts = token_frequencies(&pairs, 64);
        let top = counts[NUM_SPECIAL]; // rank 1 token
        let median = counts[NUM_SPECIAL + 29]; // rank 30 of 60
        assert!(
            top as f64 >= 5.0 * median.max(1) as f64,
            "top {top} median {median}"
        );
    }

    #[test]
    fn extrapolate_filter_is_boundary_inclusive() {
        let keep = SequencePair::plain(vec![4; 20], vec![4; 20]);
        let drop_src = SequencePair::plain(vec![4; 21], vec![4; 10]);
        let drop_tgt = SequencePair::plain(vec![4; 10], vec![4; 21]);
        let train = vec![keep.clone(), drop_src, drop_tgt];
        let filtered = make_extrapolate_split(&train, 20).unwrap();
        assert_eq!(filtered, vec![keep]);
    }

    #[test]
    fn extrapolate_filter_rejects_empty_result() {
        let train = vec![SequencePair::plain(vec![4; 30], vec![4; 30])];
        assert!(make_extrapolate_split(&train, 20).is_err());
    }

    #[test]
    fn interpolate_merges_with_separator() {
        let pairs = vec![
            SequencePair::plain(vec![10, 11], vec![12]),
            SequencePair::plain(vec![13], vec![14, 15]),
        ];
        let merged = make_interpolate_dataset(&pairs, 2, SEP_ID).unwrap();
        assert_eq!(merged.len(), 1);
        assert_eq!(merged[0].src, vec![10, 11, SEP_ID, 13]);
        assert_eq!(merged[0].tgt, vec![12, SEP_ID, 14, 15]);
        assert_eq!(merged[0].boundaries, Some(vec![2]));
    }

    #[test]
    fn interpolate_drops_short_trailing_group() {
        let pairs: Vec<SequencePair> = (0..11)
            .map(|i| SequencePair::plain(vec![4 + i % 3], vec![4 + i % 3]))
            .collect();
        let merged = make_interpolate_dataset(&pairs, 5, SEP_ID).unwrap();
        assert_eq!(merged.len(), 2);
    }

    #[test]
    fn interpolate_round_trips_through_segment_split() {
        let s = spec(TaskKind::MappedCopy);
        let pairs = gen_corpus(&s, 15, "roundtrip").unwrap();
        let merged = make_interpolate_dataset(&pairs, 5, SEP_ID).unwrap();
        let mut recovered = Vec::new();
        for m in &merged {
            let srcs = split_segments(&m.src, SEP_ID);
            let tgts = split_segments(&m.tgt, SEP_ID);
            assert_eq!(srcs.len(), 5);
            for (src, tgt) in srcs.into_iter().zip(tgts) {
                recovered.push(SequencePair::plain(src, tgt));
            }
        }
        assert_eq!(recovered, pairs);
    }

    #[test]
    fn swap_moves_first_sentence_to_the_end() {
        let pairs = vec![
            SequencePair::plain(vec![10, 11], vec![10, 11]),
            SequencePair::plain(vec![12], vec![12]),
            SequencePair::plain(vec![13, 14], vec![13, 14]),
        ];
        let merged = make_interpolate_dataset(&pairs, 3, SEP_ID).unwrap();
        let swapped = swap_first_to_end(&merged[0], SEP_ID).unwrap();
        assert_eq!(swapped.src, vec![12, SEP_ID, 13, 14, SEP_ID, 10, 11]);
        assert_eq!(swapped.tgt, swapped.src);
        assert_eq!(swapped.boundaries, Some(vec![1, 4]));
    }

    #[test]
    fn swap_twice_on_two_sentences_is_identity() {
        let pairs = vec![
            SequencePair::plain(vec![10, 11], vec![20]),
            SequencePair::plain(vec![12], vec![21, 22]),
        ];
        let merged = make_interpolate_dataset(&pairs, 2, SEP_ID).unwrap();
        let once = swap_first_to_end(&merged[0], SEP_ID).unwrap();
        let twice = swap_first_to_end(&once, SEP_ID).unwrap();
        assert_eq!(twice, merged[0]);
        assert_ne!(once, merged[0]);
    }

    #[test]
    fn swap_rejects_unconcatenated_pairs() {
        let plain = SequencePair::plain(vec![4, 5], vec![4, 5]);
        assert!(swap_first_to_end(&plain, SEP_ID).is_err());
    }

    #[test]
    fn corpus_file_round_trip_is_byte_identical() {
        let s = spec(TaskKind::MappedCopy);
        let pairs = gen_corpus(&s, 20, "io").unwrap();
        let text = corpus_to_string(&s, "train", &pairs);
        let parsed = parse_corpus(&text).unwrap();
        assert_eq!(parsed.pairs, pairs);
        assert_eq!(parsed.split, "train");
        let text2 = corpus_to_string(&parsed.spec, &parsed.split, &parsed.pairs);
        assert_eq!(text, text2);
    }

    #[test]
    fn concatenated_corpus_recovers_boundaries_from_file() {
        let s = spec(TaskKind::Copy);
        let pairs = gen_corpus(&s, 4, "io2").unwrap();
        let merged = make_interpolate_dataset(&pairs, 2, SEP_ID).unwrap();
        let text = corpus_to_string(&s, "train", &merged);
        let parsed = parse_corpus(&text).unwrap();
        assert_eq!(parsed.pairs[0].boundaries, merged[0].boundaries);
    }

    #[test]
    fn bad_vocab_rejected() {
        let s = TaskSpec {
            kind: TaskKind::Copy,
            vocab_size: 4,
            length_range: (1, 2),
            zipf_exponent: 1.0,
            seed: 0,
        };
        assert!(s.validate().is_err());
    }
}
