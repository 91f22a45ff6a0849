//! Deterministic training loop: token-count batching over a
//! window-shuffled corpus, per-sequence SHAPE offsets, label-smoothed
//! cross-entropy, Adam with the warmup schedule, and periodic checkpoints.
//!
//! All randomness flows from `TrainConfig::seed` through named streams
//! (`batch-order`, `offset`, `dropout`), so two runs with the same seed and
//! config produce byte-identical parameters.

use std::path::{Path, PathBuf};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::graph::{Graph, VarId};
use crate::model::{gold_targets, with_bos, with_eos, BoundParams, Model, ModelState};
use crate::optim::{noam_lr, OptimizerState};
use crate::rng::Pcg32;
use crate::scalar::Scalar;
use crate::tasks::SequencePair;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub steps: u64,
    /// Batch budget: pairs are packed until the sum of per-pair costs
    /// (max of source and target token counts, specials included) would
    /// exceed this.
    pub batch_tokens: usize,
    pub warmup: u64,
    pub lr_factor: f64,
    pub label_smoothing: f64,
    /// 0 disables checkpointing.
    pub checkpoint_every: u64,
    pub average_last: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn desk(seed: u64) -> Self {
        TrainConfig {
            steps: 3000,
            batch_tokens: 512,
            warmup: 400,
            lr_factor: 2.0,
            label_smoothing: 0.1,
            checkpoint_every: 500,
            average_last: 5,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_tokens == 0 {
            return Err(Error::config("batch_tokens must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::config("label_smoothing must be in [0, 1)"));
        }
        if self.checkpoint_every > 0
            && self.average_last as u64 > self.steps / self.checkpoint_every
        {
            return Err(Error::config(format!(
                "average_last {} exceeds the {} checkpoints {} steps will produce",
                self.average_last,
                self.steps / self.checkpoint_every,
                self.steps
            )));
        }
        Ok(())
    }
}

/// Source/target offsets for one pair, drawn independently.
#[derive(Clone, Copy, Debug, Default)]
pub struct OffsetPair {
    pub src: u32,
    pub tgt: u32,
}

/// Teacher-forced smoothed cross-entropy for one pair, as a scalar graph
/// node, plus the number of gold positions it averages over.
pub fn pair_loss<T: Scalar>(
    model: &Model<T>,
    g: &mut Graph<T>,
    bound: &BoundParams,
    pair: &SequencePair,
    offsets: OffsetPair,
    epsilon: f64,
    dropout_rng: Option<&mut Pcg32>,
) -> Result<(VarId, usize)> {
    let cfg = model.config();
    let src_in = with_eos(&pair.src, cfg.eos_id);
    let tgt_in = with_bos(&pair.tgt, cfg.bos_id);
    let gold = gold_targets(&pair.tgt, cfg.eos_id);
    let mut rng = dropout_rng;
    let enc = model.encode_on(g, bound, &src_in, offsets.src, rng.as_deref_mut())?;
    let logits = model.decode_on(g, bound, enc, &tgt_in, offsets.tgt, rng.as_deref_mut())?;
    let loss = g.cross_entropy_smoothed(logits, &gold, T::from_f64(epsilon), cfg.pad_id)?;
    Ok((loss, gold.len()))
}

/// Batch loss: token-weighted mean of the per-pair means, i.e. the mean
/// smoothed cross-entropy over every gold position in the batch.
pub fn batch_loss_var<T: Scalar>(
    model: &Model<T>,
    g: &mut Graph<T>,
    bound: &BoundParams,
    batch: &[(&SequencePair, OffsetPair)],
    epsilon: f64,
    mut dropout_rng: Option<&mut Pcg32>,
) -> Result<VarId> {
    let mut terms = Vec::with_capacity(batch.len());
    let mut total = 0usize;
    for &(pair, offsets) in batch {
        let (loss, count) =
            pair_loss(model, g, bound, pair, offsets, epsilon, dropout_rng.as_deref_mut())?;
        terms.push((loss, count));
        total += count;
    }
    let weighted: Vec<(VarId, T)> = terms
        .into_iter()
        .map(|(v, c)| (v, T::from_usize(c) / T::from_usize(total)))
        .collect();
    g.weighted_sum(&weighted)
}

/// Forward-only batch loss on a frozen model (no dropout); the scalar the
/// finite-difference oracle differentiates.
pub fn batch_loss_value<T: Scalar>(
    model: &Model<T>,
    batch: &[(&SequencePair, OffsetPair)],
    epsilon: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let bound = model.bind_frozen(&mut g);
    let loss = batch_loss_var(model, &mut g, &bound, batch, epsilon, None)?;
    Ok(g.value(loss).item().as_f64())
}

/// Batch loss and its analytic parameter gradients (no dropout), aligned
/// with `ModelState::params` order.
pub fn batch_loss_and_grads<T: Scalar>(
    model: &Model<T>,
    batch: &[(&SequencePair, OffsetPair)],
    epsilon: f64,
) -> Result<(f64, Vec<Option<Tensor<T>>>)> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let loss = batch_loss_var(model, &mut g, &bound, batch, epsilon, None)?;
    g.backward(loss)?;
    let grads = bound.vars.iter().map(|&v| g.grad(v).cloned()).collect();
    Ok((g.value(loss).item().as_f64(), grads))
}

#[derive(Clone, Copy, Debug)]
pub struct LossRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f32,
}

#[derive(Debug)]
pub struct TrainOutput {
    pub state: ModelState<f32>,
    pub loss_log: Vec<LossRecord>,
    /// (step, state) at every checkpoint step, in order.
    pub snapshots: Vec<(u64, ModelState<f32>)>,
    pub checkpoint_paths: Vec<PathBuf>,
}

impl TrainOutput {
    /// The final model per the averaging recipe: mean of the last
    /// `average_last` checkpoints, or the raw final state when no
    /// checkpoints were taken.
    pub fn averaged_final(&self, average_last: usize) -> Result<ModelState<f32>> {
        if self.snapshots.is_empty() || average_last == 0 {
            return Ok(self.state.clone());
        }
        let m = average_last.min(self.snapshots.len());
        let states: Vec<ModelState<f32>> =
            self.snapshots.iter().map(|(_, s)| s.clone()).collect();
        checkpoint::average_states(&states, m)
    }
}

/// Batches are built per epoch: shuffle the corpus, sort by cost inside
/// windows of 1000 pairs to bound length variance, then pack greedily up
/// to the token budget.
struct Batcher {
    order_rng: Pcg32,
    costs: Vec<usize>,
    batch_tokens: usize,
    queue: std::collections::VecDeque<Vec<usize>>,
}

const SORT_WINDOW: usize = 1000;

fn pair_cost(pair: &SequencePair) -> usize {
    (pair.src.len() + 1).max(pair.tgt.len() + 2)
}

impl Batcher {
    fn new(pairs: &[SequencePair], order_rng: Pcg32, batch_tokens: usize) -> Self {
        Batcher {
            order_rng,
            costs: pairs.iter().map(pair_cost).collect(),
            batch_tokens,
            queue: std::collections::VecDeque::new(),
        }
    }

    fn refill(&mut self) {
        let mut order: Vec<usize> = (0..self.costs.len()).collect();
        self.order_rng.shuffle(&mut order);
        for window in order.chunks_mut(SORT_WINDOW) {
            window.sort_by_key(|&i| self.costs[i]);
        }
        let mut batch = Vec::new();
        let mut used = 0usize;
        for idx in order {
            let cost = self.costs[idx];
            if !batch.is_empty() && used + cost > self.batch_tokens {
                self.queue.push_back(std::mem::take(&mut batch));
                used = 0;
            }
            batch.push(idx);
            used += cost;
        }
        if !batch.is_empty() {
            self.queue.push_back(batch);
        }
    }

    fn next_batch(&mut self) -> Vec<usize> {
        if self.queue.is_empty() {
            self.refill();
        }
        self.queue.pop_front().expect("non-empty corpus")
    }
}

/// Run the training loop. Checkpoints are written under `out_dir` when
/// given (`ckpt_000500.ckpt`, ...) and always kept in memory as snapshots
/// for averaging. A non-finite loss aborts with a diagnostic.
pub fn train(
    state: ModelState<f32>,
    corpus: &[SequencePair],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::config("training corpus is empty"));
    }
    let k_max = state.config.scheme.k_max();
    let max_cost = corpus.iter().map(pair_cost).max().unwrap_or(0);
    if max_cost + k_max as usize > state.config.max_position {
        return Err(Error::config(format!(
            "max_position {} cannot hold length {} plus offset bound {}",
            state.config.max_position, max_cost, k_max
        )));
    }
    let mut model = Model::new(state)?;
    let is_shape = k_max > 0;
    let mut opt = OptimizerState::<f32>::adam_default();
    let mut offset_rng = Pcg32::for_purpose(cfg.seed, "offset");
    let mut dropout_rng = Pcg32::for_purpose(cfg.seed, "dropout");
    let mut batcher = Batcher::new(
        corpus,
        Pcg32::for_purpose(cfg.seed, "batch-order"),
        cfg.batch_tokens,
    );
    let d_model = model.config().d_model;
    let mut loss_log = Vec::with_capacity(cfg.steps as usize);
    let mut snapshots = Vec::new();
    let mut checkpoint_paths = Vec::new();
    for step in 1..=cfg.steps {
        let idxs = batcher.next_batch();
        let batch: Vec<(&SequencePair, OffsetPair)> = idxs
            .iter()
            .map(|&i| {
                let offsets = if is_shape {
                    OffsetPair {
                        src: offset_rng.uniform_int_inclusive(k_max),
                        tgt: offset_rng.uniform_int_inclusive(k_max),
                    }
                } else {
                    OffsetPair::default()
                };
                (&corpus[i], offsets)
            })
            .collect();
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let loss_var = batch_loss_var(
            &model,
            &mut g,
            &bound,
            &batch,
            cfg.label_smoothing,
            Some(&mut dropout_rng),
        )?;
        let loss = g.value(loss_var).item();
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss {loss} at step {step} ({} pairs in batch)",
                batch.len()
            )));
        }
        g.backward(loss_var)?;
        let grads: Vec<Option<Tensor<f32>>> =
            bound.vars.iter().map(|&v| g.grad(v).cloned()).collect();
        drop(g);
        let lr = noam_lr(step, d_model, cfg.warmup, cfg.lr_factor)?;
        opt.step(model.state_mut().params_mut(), &grads, lr)?;
        loss_log.push(LossRecord { step, lr, loss });
        if step % 100 == 0 {
            log::debug!("step {step}: lr {lr:.3e} loss {loss:.4}");
        }
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            let snap = model.state().clone();
            if let Some(dir) = out_dir {
                let path = dir.join(format!("ckpt_{step:06}.ckpt"));
                checkpoint::save(&path, &snap, step)?;
                checkpoint_paths.push(path);
            }
            snapshots.push((step, snap));
        }
    }
    Ok(TrainOutput {
        state: model.into_state(),
        loss_log,
        snapshots,
        checkpoint_paths,
    })
}

/// Loss log CSV: `step,lr,loss`.
pub fn loss_log_csv(log: &[LossRecord]) -> String {
    let mut s = String::from("step,lr,loss\n");
    for r in log {
        s.push_str(&format!("{},{},{}\n", r.step, r.lr, r.loss));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::position::PositionScheme;
    use crate::tasks::{gen_corpus, TaskKind, TaskSpec};

    fn tiny_setup() -> (ModelState<f32>, Vec<SequencePair>, TrainConfig) {
        let mut mc = ModelConfig::desk(PositionScheme::Ape);
        mc.layers = 1;
        mc.heads = 2;
        mc.d_model = 16;
        mc.d_ff = 32;
        mc.src_vocab = 16;
        mc.tgt_vocab = 16;
        mc.max_position = 32;
        let spec = TaskSpec {
            kind: TaskKind::Copy,
            vocab_size: 16,
            length_range: (2, 5),
            zipf_exponent: 1.2,
            seed: 3,
        };
        let corpus = gen_corpus(&spec, 40, "corpus/train").unwrap();
        let state = ModelState::init(mc, 3).unwrap();
        let mut cfg = TrainConfig::desk(3);
        cfg.steps = 10;
        cfg.batch_tokens = 32;
        cfg.warmup = 5;
        cfg.checkpoint_every = 5;
        cfg.average_last = 2;
        (state, corpus, cfg)
    }

    #[test]
    fn zero_steps_returns_init_unchanged() {
        let (state, corpus, mut cfg) = tiny_setup();
        cfg.steps = 0;
        cfg.checkpoint_every = 0;
        let before = state.clone();
        let out = train(state, &corpus, &cfg, None).unwrap();
        for (a, b) in before.params().iter().zip(out.state.params()) {
            assert_eq!(a, b);
        }
        assert!(out.snapshots.is_empty());
        assert!(out.loss_log.is_empty());
    }

    #[test]
    fn same_seed_same_loss_curve() {
        let (state, corpus, cfg) = tiny_setup();
        let a = train(state.clone(), &corpus, &cfg, None).unwrap();
        let b = train(state, &corpus, &cfg, None).unwrap();
        assert_eq!(a.loss_log.len(), b.loss_log.len());
        for (x, y) in a.loss_log.iter().zip(&b.loss_log) {
            assert_eq!(x.loss, y.loss, "step {}", x.step);
        }
        for (x, y) in a.state.params().iter().zip(b.state.params()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn loss_decreases_on_average_over_short_run() {
        let (state, corpus, mut cfg) = tiny_setup();
        cfg.steps = 50;
        cfg.checkpoint_every = 0;
        let out = train(state, &corpus, &cfg, None).unwrap();
        let first: f32 = out.loss_log[..5].iter().map(|r| r.loss).sum::<f32>() / 5.0;
        let last: f32 = out.loss_log[45..].iter().map(|r| r.loss).sum::<f32>() / 5.0;
        assert!(last < first, "loss failed to move: {first} -> {last}");
    }

    #[test]
    fn non_finite_parameters_abort_with_diagnostic() {
        let (mut state, corpus, cfg) = tiny_setup();
        state.get_mut("src_embed").unwrap().data_mut()[0] = f32::INFINITY;
        let err = train(state, &corpus, &cfg, None).unwrap_err();
        assert_eq!(err.exit_code(), 3, "{err}");
    }

    #[test]
    fn table_overflow_is_a_config_time_error() {
        let (state, _corpus, cfg) = tiny_setup();
        // one pair longer than max_position can hold
        let long = vec![SequencePair::plain(vec![5; 40], vec![5; 40])];
        let err = train(state, &long, &cfg, None).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn checkpoints_written_and_averaged() {
        let dir = tempfile::tempdir().unwrap();
        let (state, corpus, cfg) = tiny_setup();
        let out = train(state, &corpus, &cfg, Some(dir.path())).unwrap();
        assert_eq!(out.checkpoint_paths.len(), 2); // steps 5 and 10
        assert_eq!(out.snapshots.len(), 2);
        let finalized = out.averaged_final(cfg.average_last).unwrap();
        assert_eq!(finalized.param_count(), out.state.param_count());
        // m=1 averaging equals the last snapshot
        let last_only = out.averaged_final(1).unwrap();
        for (a, b) in last_only.params().iter().zip(out.snapshots[1].1.params()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn invariant_average_last_vs_checkpoints() {
        let (_, _, mut cfg) = tiny_setup();
        cfg.steps = 10;
        cfg.checkpoint_every = 5;
        cfg.average_last = 3; // only 2 checkpoints possible
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn batcher_packs_within_budget_and_covers_corpus() {
        let pairs: Vec<SequencePair> = (0..25)
            .map(|i| SequencePair::plain(vec![4; 1 + i % 7], vec![4; 1 + i % 7]))
            .collect();
        let mut b = Batcher::new(&pairs, Pcg32::new(1, 1), 20);
        let mut seen = vec![0usize; pairs.len()];
        let mut batches = 0;
        while seen.iter().any(|&c| c == 0) {
            let batch = b.next_batch();
            let cost: usize = batch.iter().map(|&i| pair_cost(&pairs[i])).sum();
            assert!(cost <= 20 || batch.len() == 1);
            for i in batch {
                seen[i] += 1;
            }
            batches += 1;
            assert!(batches < 100, "batcher failed to cover the corpus");
        }
    }
}
