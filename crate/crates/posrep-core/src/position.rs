//! The three position representations.
//!
//! * Sinusoidal absolute embeddings (APE): a fixed table where channel pairs
//!   (2c, 2c+1) hold sin/cos of `i / 10000^(2c/D)`.
//! * SHAPE: the same table read at `i + k` with `k ~ U{0..K}` drawn per
//!   sequence during training and forced to 0 at inference.
//! * RPE: learned per-distance embeddings added to attention keys and
//!   values, with the distance clipped to `[-limit, limit]`.

use crate::error::{Error, Result};
use crate::rng::Pcg32;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use crate::graph::clip_index;

/// Scheme selector, parsed from `ape`, `shape:K=<int>`, or
/// `rpe:limit=<int>`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PositionScheme {
    Ape,
    Shape { k_max: u32 },
    Rpe { limit: usize },
}

impl PositionScheme {
    /// Parse the config-file form. `shape:K=0` is the same scheme as `ape`
    /// by definition, so it canonicalizes to `Ape` (offset draws at K=0
    /// are identically zero and the checkpoint metadata stays identical).
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "ape" {
            return Ok(PositionScheme::Ape);
        }
        if let Some(rest) = s.strip_prefix("shape:K=") {
            let k_max: u32 = rest
                .parse()
                .map_err(|_| Error::config(format!("bad SHAPE offset bound in '{s}'")))?;
            return Ok(if k_max == 0 {
                PositionScheme::Ape
            } else {
                PositionScheme::Shape { k_max }
            });
        }
        if let Some(rest) = s.strip_prefix("rpe:limit=") {
            let limit: usize = rest
                .parse()
                .map_err(|_| Error::config(format!("bad RPE distance limit in '{s}'")))?;
            if limit == 0 {
                return Err(Error::config("rpe:limit must be >= 1"));
            }
            return Ok(PositionScheme::Rpe { limit });
        }
        Err(Error::config(format!(
            "unknown scheme '{s}' (expected ape | shape:K=<int> | rpe:limit=<int>)"
        )))
    }

    pub fn is_rpe(&self) -> bool {
        matches!(self, PositionScheme::Rpe { .. })
    }

    /// Maximum training-time offset; 0 for APE and RPE.
    pub fn k_max(&self) -> u32 {
        match self {
            PositionScheme::Shape { k_max } => *k_max,
            _ => 0,
        }
    }
}

impl std::fmt::Display for PositionScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PositionScheme::Ape => write!(f, "ape"),
            PositionScheme::Shape { k_max } => write!(f, "shape:K={k_max}"),
            PositionScheme::Rpe { limit } => write!(f, "rpe:limit={limit}"),
        }
    }
}

/// Precomputed sinusoidal table, `[max_position × dim]`, entries in [-1, 1].
#[derive(Clone, Debug)]
pub struct SinusoidalTable<T> {
    max_position: usize,
    dim: usize,
    values: Tensor<T>,
}

/// Build the sinusoidal table. Channel `m` of position `i` holds
/// `sin(i / 10000^(2·(m/2)/D))` for even `m` and the cosine of the same
/// angle for odd `m`, so each even/odd pair shares one frequency. Angles
/// are evaluated in f64 before narrowing to `T`.
pub fn build_table<T: Scalar>(max_position: usize, dim: usize) -> Result<SinusoidalTable<T>> {
    if dim % 2 != 0 {
        return Err(Error::config(format!(
            "sinusoidal table dim must be even, got {dim}"
        )));
    }
    if max_position == 0 {
        return Err(Error::config("sinusoidal table needs max_position >= 1"));
    }
    let mut data = Vec::with_capacity(max_position * dim);
    for i in 0..max_position {
        for m in 0..dim {
            let pair = (m / 2) as f64;
            let angle = i as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            let v = if m % 2 == 0 { angle.sin() } else { angle.cos() };
            data.push(T::from_f64(v));
        }
    }
    Ok(SinusoidalTable {
        max_position,
        dim,
        values: Tensor::new(&[max_position, dim], data)?,
    })
}

impl<T: Scalar> SinusoidalTable<T> {
    pub fn max_position(&self) -> usize {
        self.max_position
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[T] {
        self.values.row(i)
    }

    /// Rows `[k, k+len)`, the block added to a length-`len` sequence shifted
    /// by `k`. Errors rather than wrapping when the table is too small.
    pub fn shifted_rows(&self, k: usize, len: usize) -> Result<Tensor<T>> {
        if len + k > self.max_position {
            return Err(Error::config(format!(
                "position table overflow: length {len} + offset {k} exceeds max_position {}",
                self.max_position
            )));
        }
        self.values.slice_rows(k, len)
    }
}

/// Offset-sampling configuration for SHAPE.
#[derive(Clone, Copy, Debug)]
pub struct ShapeConfig {
    pub k_max: u32,
    pub mode: OffsetMode,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OffsetMode {
    Training,
    Inference,
}

/// Draw one offset. Training mode samples uniformly over `{0..K}`
/// inclusive; inference always yields 0 without touching the generator.
/// Callers draw separately for source and target sides.
pub fn sample_offset(rng: &mut Pcg32, cfg: &ShapeConfig) -> u32 {
    match cfg.mode {
        OffsetMode::Inference => 0,
        OffsetMode::Training => rng.uniform_int_inclusive(cfg.k_max),
    }
}

/// `out[i] = embeddings[i] + table[i + k]`.
pub fn add_positions<T: Scalar>(
    embeddings: &Tensor<T>,
    table: &SinusoidalTable<T>,
    k: usize,
) -> Result<Tensor<T>> {
    let (len, dim) = embeddings.dims2()?;
    if dim != table.dim() {
        return Err(Error::shape(
            "add_positions",
            format!("embedding dim {dim} vs table dim {}", table.dim()),
        ));
    }
    embeddings.add(&table.shifted_rows(k, len)?)
}

/// Clipped relative distance index: `clamp(delta, -r, r) + r`.
pub fn clip_distance(delta: i64, limit: usize) -> usize {
    clip_index(delta, limit)
}

/// Learned relative-position embeddings for keys and values; `2·limit + 1`
/// rows indexed by clipped distance + limit.
#[derive(Clone, Debug)]
pub struct RpeTable<T> {
    pub limit: usize,
    pub key: Tensor<T>,
    pub value: Tensor<T>,
}

impl<T: Scalar> RpeTable<T> {
    pub fn new(limit: usize, key: Tensor<T>, value: Tensor<T>) -> Result<Self> {
        let rows = 2 * limit + 1;
        for (name, t) in [("key", &key), ("value", &value)] {
            let (r, _) = t.dims2()?;
            if r != rows {
                return Err(Error::shape(
                    "rpe_table",
                    format!("{name} embeddings have {r} rows, expected {rows}"),
                ));
            }
        }
        Ok(RpeTable { limit, key, value })
    }
}
