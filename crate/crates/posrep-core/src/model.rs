//! Encoder-decoder Transformer (post-norm by default) with a pluggable
//! position scheme.
//!
//! APE and SHAPE add rows of the sinusoidal table to the scaled token
//! embeddings at the input layer; SHAPE shifts the rows by a per-sequence
//! offset during training. RPE adds nothing at the input: under
//! `scheme = rpe` no sinusoidal table is even built, and position
//! information enters only through learned per-distance key/value
//! embeddings inside encoder and decoder self-attention (never
//! cross-attention). Distances are clipped to `[-limit, limit]`.

use crate::error::{Error, Result};
use crate::graph::{Graph, VarId};
use crate::position::{build_table, PositionScheme, RpeTable, SinusoidalTable};
use crate::rng::Pcg32;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const SEP_ID: usize = 3;
pub const NUM_SPECIAL: usize = 4;

/// Logit mask value; exp(-1e9) underflows to exactly 0 in f32 and f64.
const MASKED: f64 = -1e9;

#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub scheme: PositionScheme,
    pub dropout: f64,
    pub max_position: usize,
    /// Post-norm (the original recipe) when false. Pre-norm is exposed
    /// because post-norm can be touchy at small scale, but stays off by
    /// default.
    pub pre_norm: bool,
    /// Give every layer its own RPE table instead of sharing one per
    /// encoder/decoder side.
    pub rpe_per_layer: bool,
    pub pad_id: usize,
    pub bos_id: usize,
    pub eos_id: usize,
    pub sep_id: usize,
}

impl ModelConfig {
    /// Desk-scale defaults: 2 layers, 4 heads, d=64, ff=256, vocab 64.
    pub fn desk(scheme: PositionScheme) -> Self {
        ModelConfig {
            layers: 2,
            heads: 4,
            d_model: 64,
            d_ff: 256,
            src_vocab: 64,
            tgt_vocab: 64,
            scheme,
            dropout: 0.1,
            max_position: 128,
            pre_norm: false,
            rpe_per_layer: false,
            pad_id: PAD_ID,
            bos_id: BOS_ID,
            eos_id: EOS_ID,
            sep_id: SEP_ID,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.d_ff == 0 {
            return Err(Error::config("layers, heads, and d_ff must be positive"));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if !self.scheme.is_rpe() && self.d_model % 2 != 0 {
            return Err(Error::config("sinusoidal schemes need an even d_model"));
        }
        let vocab = self.src_vocab.min(self.tgt_vocab);
        let ids = [self.pad_id, self.bos_id, self.eos_id, self.sep_id];
        for (n, &id) in ["pad", "bos", "eos", "sep"].iter().zip(&ids) {
            if id >= vocab {
                return Err(Error::config(format!("{n} id {id} outside vocab {vocab}")));
            }
        }
        for a in 0..ids.len() {
            for b in a + 1..ids.len() {
                if ids[a] == ids[b] {
                    return Err(Error::config("special token ids must be distinct"));
                }
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must be in [0, 1)"));
        }
        if self.max_position == 0 {
            return Err(Error::config("max_position must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
enum InitKind {
    /// U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
    Xavier,
    Zeros,
    Ones,
    /// N(0, d_model^-0.5).
    Embedding,
}

struct ParamDef {
    name: String,
    shape: Vec<usize>,
    init: InitKind,
}

fn attn_defs(prefix: &str, d: usize, defs: &mut Vec<ParamDef>) {
    for part in ["q", "k", "v", "o"] {
        defs.push(ParamDef {
            name: format!("{prefix}.w{part}"),
            shape: vec![d, d],
            init: InitKind::Xavier,
        });
        defs.push(ParamDef {
            name: format!("{prefix}.b{part}"),
            shape: vec![d],
            init: InitKind::Zeros,
        });
    }
}

fn norm_defs(prefix: &str, d: usize, defs: &mut Vec<ParamDef>) {
    defs.push(ParamDef {
        name: format!("{prefix}.gamma"),
        shape: vec![d],
        init: InitKind::Ones,
    });
    defs.push(ParamDef {
        name: format!("{prefix}.beta"),
        shape: vec![d],
        init: InitKind::Zeros,
    });
}

fn ffn_defs(prefix: &str, d: usize, ff: usize, defs: &mut Vec<ParamDef>) {
    defs.push(ParamDef {
        name: format!("{prefix}.w1"),
        shape: vec![d, ff],
        init: InitKind::Xavier,
    });
    defs.push(ParamDef {
        name: format!("{prefix}.b1"),
        shape: vec![ff],
        init: InitKind::Zeros,
    });
    defs.push(ParamDef {
        name: format!("{prefix}.w2"),
        shape: vec![ff, d],
        init: InitKind::Xavier,
    });
    defs.push(ParamDef {
        name: format!("{prefix}.b2"),
        shape: vec![d],
        init: InitKind::Zeros,
    });
}

/// The parameter name set is a pure function of the config: same config,
/// same names, same order.
fn param_defs(cfg: &ModelConfig) -> Vec<ParamDef> {
    let d = cfg.d_model;
    let mut defs = Vec::new();
    defs.push(ParamDef {
        name: "src_embed".into(),
        shape: vec![cfg.src_vocab, d],
        init: InitKind::Embedding,
    });
    defs.push(ParamDef {
        name: "tgt_embed".into(),
        shape: vec![cfg.tgt_vocab, d],
        init: InitKind::Embedding,
    });
    for l in 0..cfg.layers {
        attn_defs(&format!("enc.{l}.self_attn"), d, &mut defs);
        norm_defs(&format!("enc.{l}.norm1"), d, &mut defs);
        ffn_defs(&format!("enc.{l}.ffn"), d, cfg.d_ff, &mut defs);
        norm_defs(&format!("enc.{l}.norm2"), d, &mut defs);
    }
    for l in 0..cfg.layers {
        attn_defs(&format!("dec.{l}.self_attn"), d, &mut defs);
        norm_defs(&format!("dec.{l}.norm1"), d, &mut defs);
        attn_defs(&format!("dec.{l}.cross_attn"), d, &mut defs);
        norm_defs(&format!("dec.{l}.norm2"), d, &mut defs);
        ffn_defs(&format!("dec.{l}.ffn"), d, cfg.d_ff, &mut defs);
        norm_defs(&format!("dec.{l}.norm3"), d, &mut defs);
    }
    defs.push(ParamDef {
        name: "out_proj.w".into(),
        shape: vec![d, cfg.tgt_vocab],
        init: InitKind::Xavier,
    });
    defs.push(ParamDef {
        name: "out_proj.b".into(),
        shape: vec![cfg.tgt_vocab],
        init: InitKind::Zeros,
    });
    if let PositionScheme::Rpe { limit } = cfg.scheme {
        let rows = 2 * limit + 1;
        let dh = cfg.d_head();
        for side in ["enc", "dec"] {
            let tables = if cfg.rpe_per_layer { cfg.layers } else { 1 };
            for t in 0..tables {
                let prefix = if cfg.rpe_per_layer {
                    format!("rpe.{side}.{t}")
                } else {
                    format!("rpe.{side}")
                };
                for part in ["key", "value"] {
                    defs.push(ParamDef {
                        name: format!("{prefix}.{part}"),
                        shape: vec![rows, dh],
                        init: InitKind::Xavier,
                    });
                }
            }
        }
    }
    defs
}

/// All learnable tensors plus the architecture config; the serializable
/// unit the checkpoint format stores.
#[derive(Clone, Debug)]
pub struct ModelState<T> {
    pub config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
}

impl<T: Scalar> ModelState<T> {
    /// Fresh parameters drawn from the `init` stream of `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Pcg32::for_purpose(seed, "init");
        let mut gauss_cache = None;
        let defs = param_defs(&config);
        let mut names = Vec::with_capacity(defs.len());
        let mut params = Vec::with_capacity(defs.len());
        let embed_std = (config.d_model as f64).powf(-0.5);
        for def in defs {
            let numel: usize = def.shape.iter().product();
            let data: Vec<T> = match def.init {
                InitKind::Zeros => vec![T::zero(); numel],
                InitKind::Ones => vec![T::one(); numel],
                InitKind::Xavier => {
                    let (fan_in, fan_out) = match def.shape.as_slice() {
                        [rows, cols] => (*rows, *cols),
                        _ => (numel, numel),
                    };
                    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    (0..numel)
                        .map(|_| T::from_f64(rng.uniform_range_f64(-a, a)))
                        .collect()
                }
                InitKind::Embedding => (0..numel)
                    .map(|_| T::from_f64(rng.next_gaussian(&mut gauss_cache) * embed_std))
                    .collect(),
            };
            names.push(def.name);
            params.push(Tensor::new(&def.shape, data)?);
        }
        Ok(ModelState {
            config,
            names,
            params,
        })
    }

    /// Assemble from externally provided tensors (checkpoint load). The
    /// name set and shapes must match what the config dictates.
    pub fn from_parts(config: ModelConfig, parts: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let defs = param_defs(&config);
        if parts.len() != defs.len() {
            return Err(Error::format(format!(
                "checkpoint has {} tensors, config wants {}",
                parts.len(),
                defs.len()
            )));
        }
        let mut names = Vec::with_capacity(defs.len());
        let mut params = Vec::with_capacity(defs.len());
        for (def, (name, tensor)) in defs.iter().zip(parts) {
            if def.name != name {
                return Err(Error::format(format!(
                    "parameter '{}' where '{}' was expected",
                    name, def.name
                )));
            }
            if def.shape != tensor.shape() {
                return Err(Error::format(format!(
                    "parameter '{}' has shape {:?}, expected {:?}",
                    name,
                    tensor.shape(),
                    def.shape
                )));
            }
            names.push(name);
            params.push(tensor);
        }
        Ok(ModelState {
            config,
            names,
            params,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index_of(name).map(move |i| &mut self.params[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Total scalar parameter count; a pure function of the config.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_all_finite())
    }

    pub fn cast<U: Scalar>(&self) -> ModelState<U> {
        ModelState {
            config: self.config.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(|p| p.cast()).collect(),
        }
    }
}

#[derive(Clone, Copy)]
struct AttnIdx {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
}

#[derive(Clone, Copy)]
struct NormIdx {
    gamma: usize,
    beta: usize,
}

#[derive(Clone, Copy)]
struct FfnIdx {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

struct EncLayerIdx {
    self_attn: AttnIdx,
    norm1: NormIdx,
    ffn: FfnIdx,
    norm2: NormIdx,
}

struct DecLayerIdx {
    self_attn: AttnIdx,
    norm1: NormIdx,
    cross_attn: AttnIdx,
    norm2: NormIdx,
    ffn: FfnIdx,
    norm3: NormIdx,
}

struct ModelIdx {
    src_embed: usize,
    tgt_embed: usize,
    enc: Vec<EncLayerIdx>,
    dec: Vec<DecLayerIdx>,
    out_w: usize,
    out_b: usize,
    /// (key, value) table index per encoder layer (repeats the shared pair
    /// when tables are not per-layer).
    rpe_enc: Vec<(usize, usize)>,
    rpe_dec: Vec<(usize, usize)>,
}

/// Parameters bound into a graph as leaves, in state order.
pub struct BoundParams {
    pub vars: Vec<VarId>,
}

/// A [`ModelState`] plus the derived lookup tables needed to run it.
pub struct Model<T> {
    state: ModelState<T>,
    table: Option<SinusoidalTable<T>>,
    idx: ModelIdx,
}

impl<T: Scalar> Model<T> {
    pub fn new(state: ModelState<T>) -> Result<Self> {
        state.config.validate()?;
        let table = if state.config.scheme.is_rpe() {
            None
        } else {
            Some(build_table(state.config.max_position, state.config.d_model)?)
        };
        let idx = Self::build_index(&state)?;
        Ok(Model { state, table, idx })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.state.config
    }

    pub fn state(&self) -> &ModelState<T> {
        &self.state
    }

    pub fn into_state(self) -> ModelState<T> {
        self.state
    }

    pub fn state_mut(&mut self) -> &mut ModelState<T> {
        &mut self.state
    }

    /// The sinusoidal table, present only for absolute-position schemes.
    /// Under RPE this is `None` by construction: no code path can read an
    /// absolute position.
    pub fn position_table(&self) -> Option<&SinusoidalTable<T>> {
        self.table.as_ref()
    }

    fn build_index(state: &ModelState<T>) -> Result<ModelIdx> {
        let find = |name: String| -> Result<usize> {
            state
                .index_of(&name)
                .ok_or_else(|| Error::format(format!("missing parameter '{name}'")))
        };
        let attn = |prefix: String| -> Result<AttnIdx> {
            Ok(AttnIdx {
                wq: find(format!("{prefix}.wq"))?,
                bq: find(format!("{prefix}.bq"))?,
                wk: find(format!("{prefix}.wk"))?,
                bk: find(format!("{prefix}.bk"))?,
                wv: find(format!("{prefix}.wv"))?,
                bv: find(format!("{prefix}.bv"))?,
                wo: find(format!("{prefix}.wo"))?,
                bo: find(format!("{prefix}.bo"))?,
            })
        };
        let norm = |prefix: String| -> Result<NormIdx> {
            Ok(NormIdx {
                gamma: find(format!("{prefix}.gamma"))?,
                beta: find(format!("{prefix}.beta"))?,
            })
        };
        let ffn = |prefix: String| -> Result<FfnIdx> {
            Ok(FfnIdx {
                w1: find(format!("{prefix}.w1"))?,
                b1: find(format!("{prefix}.b1"))?,
                w2: find(format!("{prefix}.w2"))?,
                b2: find(format!("{prefix}.b2"))?,
            })
        };
        let cfg = &state.config;
        let mut enc = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            enc.push(EncLayerIdx {
                self_attn: attn(format!("enc.{l}.self_attn"))?,
                norm1: norm(format!("enc.{l}.norm1"))?,
                ffn: ffn(format!("enc.{l}.ffn"))?,
                norm2: norm(format!("enc.{l}.norm2"))?,
            });
        }
        let mut dec = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            dec.push(DecLayerIdx {
                self_attn: attn(format!("dec.{l}.self_attn"))?,
                norm1: norm(format!("dec.{l}.norm1"))?,
                cross_attn: attn(format!("dec.{l}.cross_attn"))?,
                norm2: norm(format!("dec.{l}.norm2"))?,
                ffn: ffn(format!("dec.{l}.ffn"))?,
                norm3: norm(format!("dec.{l}.norm3"))?,
            });
        }
        let mut rpe_enc = Vec::new();
        let mut rpe_dec = Vec::new();
        if cfg.scheme.is_rpe() {
            for l in 0..cfg.layers {
                for (side, acc) in [("enc", &mut rpe_enc), ("dec", &mut rpe_dec)] {
                    let prefix = if cfg.rpe_per_layer {
                        format!("rpe.{side}.{l}")
                    } else {
                        format!("rpe.{side}")
                    };
                    acc.push((
                        find(format!("{prefix}.key"))?,
                        find(format!("{prefix}.value"))?,
                    ));
                }
            }
        }
        Ok(ModelIdx {
            src_embed: find("src_embed".into())?,
            tgt_embed: find("tgt_embed".into())?,
            enc,
            dec,
            out_w: find("out_proj.w".into())?,
            out_b: find("out_proj.b".into())?,
            rpe_enc,
            rpe_dec,
        })
    }

    /// Copy every parameter into `g` as a gradient-bearing leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> BoundParams {
        BoundParams {
            vars: self
                .state
                .params
                .iter()
                .map(|p| g.param(p.clone()))
                .collect(),
        }
    }

    /// Copy every parameter into `g` as a constant (inference).
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> BoundParams {
        BoundParams {
            vars: self
                .state
                .params
                .iter()
                .map(|p| g.constant(p.clone()))
                .collect(),
        }
    }

    fn dropout(
        &self,
        g: &mut Graph<T>,
        x: VarId,
        rng: &mut Option<&mut Pcg32>,
    ) -> Result<VarId> {
        let rate = self.state.config.dropout;
        let Some(rng) = rng.as_deref_mut() else {
            return Ok(x);
        };
        if rate <= 0.0 {
            return Ok(x);
        }
        let keep_scale = T::from_f64(1.0 / (1.0 - rate));
        let mask = Tensor::new(
            g.value(x).shape(),
            (0..g.value(x).len())
                .map(|_| {
                    if rng.uniform_f64() < rate {
                        T::zero()
                    } else {
                        keep_scale
                    }
                })
                .collect(),
        )?;
        g.mul_const(x, mask)
    }

    /// Residual + norm wrapper. Post-norm: `LN(x + drop(f(x)))`.
    /// Pre-norm: `x + drop(f(LN(x)))`.
    fn sublayer(
        &self,
        g: &mut Graph<T>,
        bound: &BoundParams,
        norm: NormIdx,
        x: VarId,
        rng: &mut Option<&mut Pcg32>,
        f: impl FnOnce(&mut Graph<T>, VarId) -> Result<VarId>,
    ) -> Result<VarId> {
        let eps = T::from_f64(1e-5);
        let gamma = bound.vars[norm.gamma];
        let beta = bound.vars[norm.beta];
        if self.state.config.pre_norm {
            let normed = g.layer_norm(x, gamma, beta, eps)?;
            let y = f(g, normed)?;
            let y = self.dropout(g, y, rng)?;
            g.add(x, y)
        } else {
            let y = f(g, x)?;
            let y = self.dropout(g, y, rng)?;
            let sum = g.add(x, y)?;
            g.layer_norm(sum, gamma, beta, eps)
        }
    }

    /// Multi-head attention. `rpe` carries (key table var, value table var,
    /// limit) when the scheme injects relative positions into this block.
    fn attention(
        &self,
        g: &mut Graph<T>,
        bound: &BoundParams,
        idx: AttnIdx,
        q_in: VarId,
        kv_in: VarId,
        causal: bool,
        rpe: Option<(VarId, VarId, usize)>,
    ) -> Result<VarId> {
        let cfg = &self.state.config;
        let dh = cfg.d_head();
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let q = g.linear(q_in, bound.vars[idx.wq], bound.vars[idx.bq])?;
        let k = g.linear(kv_in, bound.vars[idx.wk], bound.vars[idx.bk])?;
        let v = g.linear(kv_in, bound.vars[idx.wv], bound.vars[idx.bv])?;
        let len_q = g.value(q).dims2()?.0;
        let len_k = g.value(k).dims2()?.0;
        let mask = if causal {
            Some(causal_mask::<T>(len_q))
        } else {
            None
        };
        let mut heads_out = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let mut scores = g.matmul_nt(qh, kh)?;
            if let Some((key_table, _, limit)) = rpe {
                let s = g.matmul_nt(qh, key_table)?;
                let bias = g.rel_scores(s, len_k, limit)?;
                scores = g.add(scores, bias)?;
            }
            let mut scores = g.scale(scores, scale);
            if let Some(mask) = &mask {
                scores = g.add_const(scores, mask.clone())?;
            }
            let alpha = g.softmax_rows(scores);
            let mut ctx = g.matmul(alpha, vh)?;
            if let Some((_, value_table, limit)) = rpe {
                let w = g.rel_context(alpha, limit)?;
                let extra = g.matmul(w, value_table)?;
                ctx = g.add(ctx, extra)?;
            }
            heads_out.push(ctx);
        }
        let concat = g.concat_cols(&heads_out)?;
        g.linear(concat, bound.vars[idx.wo], bound.vars[idx.bo])
    }

    fn ffn(
        &self,
        g: &mut Graph<T>,
        bound: &BoundParams,
        idx: FfnIdx,
        x: VarId,
    ) -> Result<VarId> {
        let h = g.linear(x, bound.vars[idx.w1], bound.vars[idx.b1])?;
        let h = g.relu(h);
        g.linear(h, bound.vars[idx.w2], bound.vars[idx.b2])
    }

    /// Token embedding, `sqrt(D)` scaling, position addition (absolute
    /// schemes only), and input dropout.
    fn embed_input(
        &self,
        g: &mut Graph<T>,
        table_var: VarId,
        ids: &[usize],
        offset: u32,
        rng: &mut Option<&mut Pcg32>,
    ) -> Result<VarId> {
        let emb = g.embed_rows(table_var, ids)?;
        let scaled = g.scale(emb, T::from_f64((self.state.config.d_model as f64).sqrt()));
        let x = match &self.table {
            Some(table) => {
                let rows = table.shifted_rows(offset as usize, ids.len())?;
                g.add_const(scaled, rows)?
            }
            None => scaled,
        };
        self.dropout(g, x, rng)
    }

    fn rpe_vars(
        &self,
        bound: &BoundParams,
        tables: &[(usize, usize)],
        layer: usize,
    ) -> Option<(VarId, VarId, usize)> {
        let limit = match self.state.config.scheme {
            PositionScheme::Rpe { limit } => limit,
            _ => return None,
        };
        tables
            .get(layer)
            .map(|&(kt, vt)| (bound.vars[kt], bound.vars[vt], limit))
    }

    /// Encoder stack over `src` (EOS already appended by the caller) with a
    /// forced offset. RPE ignores the offset: its representation depends on
    /// pairwise distances only.
    pub fn encode_on(
        &self,
        g: &mut Graph<T>,
        bound: &BoundParams,
        src: &[usize],
        k_src: u32,
        mut rng: Option<&mut Pcg32>,
    ) -> Result<VarId> {
        let cfg = &self.state.config;
        if let Some(&bad) = src.iter().find(|&&t| t >= cfg.src_vocab) {
            return Err(Error::config(format!(
                "source token {bad} outside vocab {}",
                cfg.src_vocab
            )));
        }
        let mut x = self.embed_input(g, bound.vars[self.idx.src_embed], src, k_src, &mut rng)?;
        for l in 0..self.idx.enc.len() {
            let rpe = self.rpe_vars(bound, &self.idx.rpe_enc, l);
            let layer = &self.idx.enc[l];
            x = self.sublayer(g, bound, layer.norm1, x, &mut rng, |g, xin| {
                self.attention(g, bound, layer.self_attn, xin, xin, false, rpe)
            })?;
            x = self.sublayer(g, bound, layer.norm2, x, &mut rng, |g, xin| {
                self.ffn(g, bound, layer.ffn, xin)
            })?;
        }
        Ok(x)
    }

    /// Decoder stack over `tgt_in` (BOS-prefixed input tokens) attending to
    /// `enc_out`; returns logits `[len(tgt_in) × tgt_vocab]`.
    pub fn decode_on(
        &self,
        g: &mut Graph<T>,
        bound: &BoundParams,
        enc_out: VarId,
        tgt_in: &[usize],
        k_tgt: u32,
        mut rng: Option<&mut Pcg32>,
    ) -> Result<VarId> {
        let cfg = &self.state.config;
        if let Some(&bad) = tgt_in.iter().find(|&&t| t >= cfg.tgt_vocab) {
            return Err(Error::config(format!(
                "target token {bad} outside vocab {}",
                cfg.tgt_vocab
            )));
        }
        let mut x = self.embed_input(g, bound.vars[self.idx.tgt_embed], tgt_in, k_tgt, &mut rng)?;
        for l in 0..self.idx.dec.len() {
            let rpe = self.rpe_vars(bound, &self.idx.rpe_dec, l);
            let layer = &self.idx.dec[l];
            x = self.sublayer(g, bound, layer.norm1, x, &mut rng, |g, xin| {
                self.attention(g, bound, layer.self_attn, xin, xin, true, rpe)
            })?;
            // Cross-attention carries no relative terms under any scheme.
            x = self.sublayer(g, bound, layer.norm2, x, &mut rng, |g, xin| {
                self.attention(g, bound, layer.cross_attn, xin, enc_out, false, None)
            })?;
            x = self.sublayer(g, bound, layer.norm3, x, &mut rng, |g, xin| {
                self.ffn(g, bound, layer.ffn, xin)
            })?;
        }
        g.linear(x, bound.vars[self.idx.out_w], bound.vars[self.idx.out_b])
    }

    /// Encoder hidden states for `src` under a forced offset;
    /// inference-only convenience (no EOS appended here).
    pub fn encode(&self, src: &[usize], k_src: u32) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let bound = self.bind_frozen(&mut g);
        let out = self.encode_on(&mut g, &bound, src, k_src, None)?;
        Ok(g.value(out).clone())
    }

    /// Teacher-forced logits for the training view of a pair: source is
    /// `X + EOS`, decoder input is `BOS + Y`, so row `j` predicts `Y[j]`
    /// and the last row predicts EOS. Offsets are forced (0 everywhere
    /// outside SHAPE training).
    pub fn forward_teacher_forced(
        &self,
        src: &[usize],
        tgt: &[usize],
        k_src: u32,
        k_tgt: u32,
    ) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let bound = self.bind_frozen(&mut g);
        let src_in = with_eos(src, self.state.config.eos_id);
        let tgt_in = with_bos(tgt, self.state.config.bos_id);
        let enc = self.encode_on(&mut g, &bound, &src_in, k_src, None)?;
        let logits = self.decode_on(&mut g, &bound, enc, &tgt_in, k_tgt, None)?;
        Ok(g.value(logits).clone())
    }

    /// Argmax decoding; ties break toward the lowest token id. Offsets are
    /// 0 at inference. Stops at EOS or after `max_len` tokens.
    pub fn greedy_decode(&self, src: &[usize], max_len: usize) -> Result<Vec<usize>> {
        self.beam_decode(src, 1, max_len)
    }

    /// Beam search over cumulative log-probabilities, no length
    /// normalization. Finished hypotheses (EOS emitted) compete with live
    /// ones by total score; every tie breaks by (score, then lexicographic
    /// token order), so width 1 reproduces greedy decoding exactly.
    pub fn beam_decode(&self, src: &[usize], width: usize, max_len: usize) -> Result<Vec<usize>> {
        if width == 0 {
            return Err(Error::config("beam width must be >= 1"));
        }
        let cfg = &self.state.config;
        let mut g = Graph::new();
        let bound = self.bind_frozen(&mut g);
        let src_in = with_eos(src, cfg.eos_id);
        let enc = self.encode_on(&mut g, &bound, &src_in, 0, None)?;

        struct Hyp {
            tokens: Vec<usize>,
            score: f64,
        }
        let mut live = vec![Hyp {
            tokens: Vec::new(),
            score: 0.0,
        }];
        let mut finished: Vec<Hyp> = Vec::new();
        for _ in 0..max_len {
            if live.is_empty() {
                break;
            }
            let mut candidates: Vec<Hyp> = Vec::with_capacity(live.len() * cfg.tgt_vocab);
            for hyp in &live {
                let tgt_in = with_bos(&hyp.tokens, cfg.bos_id);
                let logits = self.decode_on(&mut g, &bound, enc, &tgt_in, 0, None)?;
                let last: Vec<f64> = g
                    .value(logits)
                    .row(tgt_in.len() - 1)
                    .iter()
                    .map(|v| v.as_f64())
                    .collect();
                let logp = log_softmax_row(&last);
                for (t, lp) in logp.iter().enumerate() {
                    let mut tokens = hyp.tokens.clone();
                    tokens.push(t);
                    candidates.push(Hyp {
                        tokens,
                        score: hyp.score + lp,
                    });
                }
            }
            candidates.sort_by(|a, b| {
                b.score
                    .total_cmp(&a.score)
                    .then_with(|| a.tokens.cmp(&b.tokens))
            });
            candidates.truncate(width);
            live = Vec::new();
            for cand in candidates {
                if *cand.tokens.last().unwrap() == cfg.eos_id {
                    finished.push(Hyp {
                        tokens: cand.tokens[..cand.tokens.len() - 1].to_vec(),
                        score: cand.score,
                    });
                } else {
                    live.push(cand);
                }
            }
        }
        finished.extend(live);
        finished.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then_with(|| a.tokens.cmp(&b.tokens))
        });
        Ok(finished
            .into_iter()
            .next()
            .map(|h| h.tokens)
            .unwrap_or_default())
    }
}

/// Single-head attention with relative key/value embeddings on plain
/// tensors:
/// `e_ij = q_i · (k_j + a_key[clip(j-i)]) / sqrt(d_head)` and
/// `z_i = Σ_j α_ij (v_j + a_value[clip(j-i)])`.
/// Runs through the same graph ops the model uses.
pub fn attention_rpe<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    rpe: &RpeTable<T>,
    causal: bool,
) -> Result<Tensor<T>> {
    let (len_q, dh) = q.dims2()?;
    let (len_k, dh_k) = k.dims2()?;
    if dh != dh_k || v.dims2()? != (len_k, dh) {
        return Err(Error::shape(
            "attention_rpe",
            format!("q {:?} k {:?} v {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    let mut g: Graph<T> = Graph::new();
    let qv = g.constant(q.clone());
    let kv = g.constant(k.clone());
    let vv = g.constant(v.clone());
    let key_t = g.constant(rpe.key.clone());
    let val_t = g.constant(rpe.value.clone());
    let mut scores = g.matmul_nt(qv, kv)?;
    let s = g.matmul_nt(qv, key_t)?;
    let bias = g.rel_scores(s, len_k, rpe.limit)?;
    scores = g.add(scores, bias)?;
    let mut scores = g.scale(scores, T::from_f64(1.0 / (dh as f64).sqrt()));
    if causal {
        scores = g.add_const(scores, causal_mask::<T>(len_q))?;
    }
    let alpha = g.softmax_rows(scores);
    let ctx = g.matmul(alpha, vv)?;
    let w = g.rel_context(alpha, rpe.limit)?;
    let extra = g.matmul(w, val_t)?;
    let out = g.add(ctx, extra)?;
    Ok(g.value(out).clone())
}

/// Upper-triangular mask: 0 on and below the diagonal, a large negative
/// number above it.
pub fn causal_mask<T: Scalar>(len: usize) -> Tensor<T> {
    let masked = T::from_f64(MASKED);
    let mut data = vec![T::zero(); len * len];
    for i in 0..len {
        for j in i + 1..len {
            data[i * len + j] = masked;
        }
    }
    Tensor::new(&[len, len], data).expect("square mask")
}

pub fn with_eos(tokens: &[usize], eos: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(tokens.len() + 1);
    out.extend_from_slice(tokens);
    out.push(eos);
    out
}

pub fn with_bos(tokens: &[usize], bos: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(tokens.len() + 1);
    out.push(bos);
    out.extend_from_slice(tokens);
    out
}

/// Gold targets for teacher forcing: `Y + EOS`.
pub fn gold_targets(tokens: &[usize], eos: usize) -> Vec<usize> {
    with_eos(tokens, eos)
}

pub(crate) fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
    let log_z = max + sum.ln();
    row.iter().map(|v| v - log_z).collect()
}
