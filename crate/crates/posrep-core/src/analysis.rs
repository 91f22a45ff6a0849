//! The three probes: offset cosine-similarity matrices over encoder
//! states, the swapped-sentence-order evaluation on concatenated corpora,
//! and tokenwise gold-score win ratios bucketed by decoder position and
//! training-data token frequency.

use crate::bleu::{corpus_bleu, Smoothing};
use crate::error::{Error, Result};
use crate::eval::DecodeMode;
use crate::model::{gold_targets, Model, NUM_SPECIAL};
use crate::scalar::Scalar;
use crate::tasks::{split_segments, swap_first_to_end, SequencePair};
use crate::tensor::Tensor;

/// Mean cosine similarity of encoder states across forced offsets,
/// averaged over positions and probe sequences. Symmetric with a unit
/// diagonal (both measured, not assumed).
#[derive(Clone, Debug)]
pub struct SimilarityMatrix {
    pub offsets: Vec<u32>,
    /// Row-major `offsets.len() x offsets.len()`.
    pub values: Vec<f64>,
    pub sequence_count: usize,
}

impl SimilarityMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.offsets.len() + j]
    }

    /// Mean of the strictly off-diagonal entries.
    pub fn off_diagonal_mean(&self) -> f64 {
        let n = self.offsets.len();
        let mut sum = 0.0;
        let mut count = 0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    sum += self.get(i, j);
                    count += 1;
                }
            }
        }
        sum / count as f64
    }
}

fn mean_row_cosine<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    let n = a.last_dim();
    let rows = a.len() / n;
    let mut total = 0.0;
    for r in 0..rows {
        let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
        for (x, y) in a.row(r).iter().zip(b.row(r)) {
            let (x, y) = (x.as_f64(), y.as_f64());
            dot += x * y;
            na += x * x;
            nb += y * y;
        }
        total += dot / (na.sqrt() * nb.sqrt()).max(1e-30);
    }
    total / rows as f64
}

/// Encode every probe sequence (EOS-terminated, as in training) under each
/// forced offset and compare states pairwise. Absolute-position schemes
/// only; offsets are undefined under RPE, which is a hard error here.
pub fn offset_similarity(
    model: &Model<f32>,
    inputs: &[Vec<usize>],
    offsets: &[u32],
) -> Result<SimilarityMatrix> {
    if model.config().scheme.is_rpe() {
        return Err(Error::config(
            "offset similarity is undefined for the RPE scheme: \
             its encoder never reads an absolute position"
                .to_string(),
        ));
    }
    if inputs.is_empty() || offsets.is_empty() {
        return Err(Error::config("need at least one probe sequence and offset"));
    }
    let n = offsets.len();
    let mut values = vec![0.0f64; n * n];
    for input in inputs {
        let src = crate::model::with_eos(input, model.config().eos_id);
        let states: Vec<Tensor<f32>> = offsets
            .iter()
            .map(|&k| model.encode(&src, k))
            .collect::<Result<_>>()?;
        for i in 0..n {
            for j in i..n {
                let sim = mean_row_cosine(&states[i], &states[j]);
                values[i * n + j] += sim;
                values[j * n + i] += if i == j { 0.0 } else { sim };
            }
        }
    }
    for v in &mut values {
        *v /= inputs.len() as f64;
    }
    Ok(SimilarityMatrix {
        offsets: offsets.to_vec(),
        values,
        sequence_count: inputs.len(),
    })
}

pub fn similarity_to_csv(m: &SimilarityMatrix) -> String {
    let mut s = String::from("k1,k2,mean_cos\n");
    for (i, &k1) in m.offsets.iter().enumerate() {
        for (j, &k2) in m.offsets.iter().enumerate() {
            s.push_str(&format!("{k1},{k2},{:.6}\n", m.get(i, j)));
        }
    }
    s
}

/// Teacher-forced log-probability of every gold token (content positions
/// and the final EOS), with offsets forced to 0. One inner vector per
/// pair, length `|Y| + 1`.
pub fn tokenwise_scores(model: &Model<f32>, pairs: &[SequencePair]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let logits = model.forward_teacher_forced(&pair.src, &pair.tgt, 0, 0)?;
        let gold = gold_targets(&pair.tgt, model.config().eos_id);
        let mut scores = Vec::with_capacity(gold.len());
        for (j, &y) in gold.iter().enumerate() {
            let row: Vec<f64> = logits.row(j).iter().map(|v| v.as_f64()).collect();
            let logp = crate::model::log_softmax_row(&row);
            scores.push(logp[y]);
        }
        out.push(scores);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct WinRatioCell {
    pub pos_lo: usize,
    pub pos_hi: usize,
    pub freq_lo: u64,
    pub freq_hi: u64,
    pub count: usize,
    wins: f64,
}

impl WinRatioCell {
    /// Win ratio in [0, 1]; absent (never 0.5-by-default) for empty cells.
    pub fn ratio(&self) -> Option<f64> {
        if self.count == 0 {
            None
        } else {
            Some(self.wins / self.count as f64)
        }
    }
}

#[derive(Clone, Debug)]
pub struct WinRatioGrid {
    pub pos_bucket_width: usize,
    pub freq_edges: Vec<(u64, u64)>,
    /// Row-major: position buckets outer, frequency buckets inner.
    pub cells: Vec<WinRatioCell>,
    pub pos_buckets: usize,
}

impl WinRatioGrid {
    pub fn cell(&self, pos_bucket: usize, freq_bucket: usize) -> &WinRatioCell {
        &self.cells[pos_bucket * self.freq_edges.len() + freq_bucket]
    }

    /// Count-weighted ratio pooled over everything.
    pub fn overall_ratio(&self) -> Option<f64> {
        let count: usize = self.cells.iter().map(|c| c.count).sum();
        if count == 0 {
            return None;
        }
        let wins: f64 = self.cells.iter().map(|c| c.wins).sum();
        Some(wins / count as f64)
    }

    /// Ratio pooled over positions, one entry per frequency bucket.
    pub fn freq_marginal(&self) -> Vec<Option<f64>> {
        (0..self.freq_edges.len())
            .map(|f| {
                let mut wins = 0.0;
                let mut count = 0usize;
                for p in 0..self.pos_buckets {
                    let c = self.cell(p, f);
                    wins += c.wins;
                    count += c.count;
                }
                if count == 0 {
                    None
                } else {
                    Some(wins / count as f64)
                }
            })
            .collect()
    }
}

/// Logarithmic frequency bucket edges that keep rare-token cells populated
/// at desk scale.
pub fn default_freq_edges() -> Vec<(u64, u64)> {
    vec![(0, 2), (3, 8), (9, 32), (33, u64::MAX)]
}

/// Cell value: fraction of gold tokens where model A scores strictly
/// higher than model B, ties counting one half. Scores must come from the
/// same corpus in the same order; gold specials (pad/bos/eos/sep) are
/// skipped. Token frequencies must be counted on the training corpus.
pub fn win_ratio_grid(
    scores_a: &[Vec<f64>],
    scores_b: &[Vec<f64>],
    pairs: &[SequencePair],
    train_freqs: &[u64],
    pos_bucket_width: usize,
    freq_edges: &[(u64, u64)],
) -> Result<WinRatioGrid> {
    if scores_a.len() != scores_b.len() || scores_a.len() != pairs.len() {
        return Err(Error::config(format!(
            "misaligned corpora: {} vs {} score sets over {} pairs",
            scores_a.len(),
            scores_b.len(),
            pairs.len()
        )));
    }
    let pos_bucket_width = pos_bucket_width.max(1);
    let mut max_pos = 0usize;
    for (a, (b, p)) in scores_a.iter().zip(scores_b.iter().zip(pairs)) {
        if a.len() != b.len() || a.len() != p.tgt.len() + 1 {
            return Err(Error::config(
                "score vectors misaligned with target lengths".to_string(),
            ));
        }
        max_pos = max_pos.max(a.len());
    }
    let pos_buckets = max_pos.div_ceil(pos_bucket_width).max(1);
    let mut cells = Vec::with_capacity(pos_buckets * freq_edges.len());
    for p in 0..pos_buckets {
        for &(lo, hi) in freq_edges {
            cells.push(WinRatioCell {
                pos_lo: p * pos_bucket_width + 1,
                pos_hi: (p + 1) * pos_bucket_width,
                freq_lo: lo,
                freq_hi: hi,
                count: 0,
                wins: 0.0,
            });
        }
    }
    for ((a, b), pair) in scores_a.iter().zip(scores_b).zip(pairs) {
        for (j, (&sa, &sb)) in a.iter().zip(b).enumerate() {
            if j >= pair.tgt.len() {
                break; // EOS position: no content token to bucket
            }
            let token = pair.tgt[j];
            if token < NUM_SPECIAL {
                continue;
            }
            let freq = train_freqs.get(token).copied().unwrap_or(0);
            let Some(f) = freq_edges
                .iter()
                .position(|&(lo, hi)| freq >= lo && freq <= hi)
            else {
                continue;
            };
            let pos_bucket = j / pos_bucket_width;
            let cell = &mut cells[pos_bucket * freq_edges.len() + f];
            cell.count += 1;
            cell.wins += if sa > sb {
                1.0
            } else if sa == sb {
                0.5
            } else {
                0.0
            };
        }
    }
    Ok(WinRatioGrid {
        pos_bucket_width,
        freq_edges: freq_edges.to_vec(),
        cells,
        pos_buckets,
    })
}

pub fn winratio_to_csv(grid: &WinRatioGrid) -> String {
    let mut s = String::from("pos_lo,pos_hi,freq_lo,freq_hi,count,ratio\n");
    for c in &grid.cells {
        let ratio = c.ratio().map(|r| format!("{r:.6}")).unwrap_or_default();
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            c.pos_lo, c.pos_hi, c.freq_lo, c.freq_hi, c.count, ratio
        ));
    }
    s
}

#[derive(Clone, Debug)]
pub struct SwappedReport {
    pub bleu_original: f64,
    pub bleu_swapped: f64,
    pub drop: f64,
    /// Decodes whose output lacked separator structure and fell back to a
    /// proportional split; never silent.
    pub fallback_count: usize,
    pub pair_count: usize,
}

fn extract_probe_segment(
    output: &[usize],
    sep_id: usize,
    want_first: bool,
    ref_fraction: f64,
    fallbacks: &mut usize,
) -> Vec<usize> {
    let segments = split_segments(output, sep_id);
    if segments.len() >= 2 {
        if want_first {
            segments.into_iter().next().unwrap()
        } else {
            segments.into_iter().next_back().unwrap()
        }
    } else {
        *fallbacks += 1;
        let take = ((output.len() as f64) * ref_fraction).round() as usize;
        let take = take.min(output.len());
        if want_first {
            output[..take].to_vec()
        } else {
            output[output.len() - take..].to_vec()
        }
    }
}

/// Decode each concatenated pair in its original and swapped order and
/// score only the probed sentence: the first target segment originally,
/// which lands at the end after the swap. Segment extraction keys on
/// separators in the decoded output; outputs without separators fall back
/// to a proportional split and are counted in the report.
pub fn swapped_order_eval(
    model: &Model<f32>,
    pairs: &[SequencePair],
    mode: DecodeMode,
    sep_id: usize,
) -> Result<SwappedReport> {
    if pairs.is_empty() {
        return Err(Error::config("swapped-order probe corpus is empty"));
    }
    let max_pos = model.config().max_position;
    let mut refs = Vec::with_capacity(pairs.len());
    let mut orig_probes = Vec::with_capacity(pairs.len());
    let mut swap_probes = Vec::with_capacity(pairs.len());
    let mut fallbacks = 0usize;
    for pair in pairs {
        let swapped = swap_first_to_end(pair, sep_id)?;
        let tgt_segments = split_segments(&pair.tgt, sep_id);
        let y1 = tgt_segments[0].clone();
        let ref_fraction = y1.len() as f64 / pair.tgt.len().max(1) as f64;
        let budget = (pair.src.len() * 2 + 8).min(max_pos.saturating_sub(2));
        let decode = |src: &[usize]| -> Result<Vec<usize>> {
            match mode {
                DecodeMode::Greedy => model.greedy_decode(src, budget),
                DecodeMode::Beam(w) => model.beam_decode(src, w, budget),
            }
        };
        let orig_out = decode(&pair.src)?;
        let swap_out = decode(&swapped.src)?;
        orig_probes.push(extract_probe_segment(
            &orig_out,
            sep_id,
            true,
            ref_fraction,
            &mut fallbacks,
        ));
        swap_probes.push(extract_probe_segment(
            &swap_out,
            sep_id,
            false,
            ref_fraction,
            &mut fallbacks,
        ));
        refs.push(y1);
    }
    let bleu_original = corpus_bleu(&orig_probes, &refs, Smoothing::Exp)?;
    let bleu_swapped = corpus_bleu(&swap_probes, &refs, Smoothing::Exp)?;
    Ok(SwappedReport {
        bleu_original,
        bleu_swapped,
        drop: bleu_original - bleu_swapped,
        fallback_count: fallbacks,
        pair_count: pairs.len(),
    })
}

pub fn swapped_to_csv(report: &SwappedReport) -> String {
    format!(
        "# pairs={} fallback_splits={} smoothing=exp\nbleu_original,bleu_swapped,drop\n{:.6},{:.6},{:.6}\n",
        report.pair_count,
        report.fallback_count,
        report.bleu_original,
        report.bleu_swapped,
        report.drop
    )
}

/// P2 (plain-text) grayscale rendering of a matrix, 0..255, with the value
/// range recorded in a comment line.
pub fn matrix_to_pgm(values: &[f64], rows: usize, cols: usize) -> Result<String> {
    if values.len() != rows * cols || values.is_empty() {
        return Err(Error::config(format!(
            "pgm wants {rows}x{cols} values, got {}",
            values.len()
        )));
    }
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let mut s = format!("P2\n# min={min:.6} max={max:.6}\n{cols} {rows}\n255\n");
    for r in 0..rows {
        let row: Vec<String> = (0..cols)
            .map(|c| {
                let v = values[r * cols + c];
                let scaled = if span <= 0.0 {
                    0
                } else {
                    ((v - min) / span * 255.0).round() as u32
                };
                scaled.min(255).to_string()
            })
            .collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    Ok(s)
}
