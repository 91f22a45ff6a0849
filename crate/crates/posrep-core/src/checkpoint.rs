//! Binary checkpoint format and checkpoint averaging.
//!
//! Layout (all integers little-endian):
//! ```text
//! magic "PRLB" | version u32 | meta_len u32 | meta (UTF-8 key=value lines)
//! | tensor_count u32 | per tensor: name_len u16, name, rank u8,
//!   dims u32 each, f32 data
//! ```
//! The metadata block carries the model config and the training step, so a
//! checkpoint alone reconstructs its model. Same state in, same bytes out.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelState};
use crate::position::PositionScheme;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"PRLB";
pub const FORMAT_VERSION: u32 = 1;

/// Serialize a state (narrowed to f32 on disk) plus the step counter.
pub fn checkpoint_bytes<T: Scalar>(state: &ModelState<T>, step: u64) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let meta = config_metadata(&state.config, step);
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    out.extend_from_slice(&(state.params().len() as u32).to_le_bytes());
    for (name, tensor) in state.names().iter().zip(state.params()) {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(tensor.shape().len() as u8);
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.as_f32().to_le_bytes());
        }
    }
    out
}

pub fn save<T: Scalar>(path: &Path, state: &ModelState<T>, step: u64) -> Result<()> {
    fs::write(path, checkpoint_bytes(state, step))
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load(path: &Path) -> Result<(ModelState<f32>, u64)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    state_from_bytes(&bytes)
}

pub fn state_from_bytes(bytes: &[u8]) -> Result<(ModelState<f32>, u64)> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::format(format!(
            "bad checkpoint magic {:02x?}, expected {:02x?}",
            magic, MAGIC
        )));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::format(format!(
            "checkpoint format version {version}, this build reads {FORMAT_VERSION}"
        )));
    }
    let meta_len = r.u32()? as usize;
    let meta_bytes = r.take(meta_len)?;
    let meta = std::str::from_utf8(meta_bytes)
        .map_err(|_| Error::format("metadata is not UTF-8".to_string()))?;
    let (config, step) = parse_metadata(meta)?;
    let count = r.u32()? as usize;
    let mut parts = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::format("tensor name is not UTF-8".to_string()))?
            .to_string();
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(r.f32()?);
        }
        parts.push((name, Tensor::new(&shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::format(format!(
            "{} trailing bytes after checkpoint payload",
            bytes.len() - r.pos
        )));
    }
    Ok((ModelState::from_parts(config, parts)?, step))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format("checkpoint truncated".to_string()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn config_metadata(cfg: &ModelConfig, step: u64) -> String {
    let mut s = String::new();
    let mut kv = |k: &str, v: String| {
        s.push_str(k);
        s.push('=');
        s.push_str(&v);
        s.push('\n');
    };
    kv("layers", cfg.layers.to_string());
    kv("heads", cfg.heads.to_string());
    kv("d_model", cfg.d_model.to_string());
    kv("d_ff", cfg.d_ff.to_string());
    kv("src_vocab", cfg.src_vocab.to_string());
    kv("tgt_vocab", cfg.tgt_vocab.to_string());
    kv("scheme", cfg.scheme.to_string());
    kv("dropout", cfg.dropout.to_string());
    kv("max_position", cfg.max_position.to_string());
    kv("pre_norm", cfg.pre_norm.to_string());
    kv("rpe_per_layer", cfg.rpe_per_layer.to_string());
    kv("pad_id", cfg.pad_id.to_string());
    kv("bos_id", cfg.bos_id.to_string());
    kv("eos_id", cfg.eos_id.to_string());
    kv("sep_id", cfg.sep_id.to_string());
    kv("step", step.to_string());
    s
}

fn parse_metadata(meta: &str) -> Result<(ModelConfig, u64)> {
    let mut map = BTreeMap::new();
    for line in meta.lines() {
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(format!("bad metadata line '{line}'")))?;
        map.insert(k.to_string(), v.to_string());
    }
    let get = |k: &str| -> Result<&String> {
        map.get(k)
            .ok_or_else(|| Error::format(format!("metadata missing '{k}'")))
    };
    let num = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::format(format!("metadata '{k}' is not an integer")))
    };
    let config = ModelConfig {
        layers: num("layers")?,
        heads: num("heads")?,
        d_model: num("d_model")?,
        d_ff: num("d_ff")?,
        src_vocab: num("src_vocab")?,
        tgt_vocab: num("tgt_vocab")?,
        scheme: PositionScheme::parse(get("scheme")?)?,
        dropout: get("dropout")?
            .parse()
            .map_err(|_| Error::format("metadata 'dropout' is not a float".to_string()))?,
        max_position: num("max_position")?,
        pre_norm: get("pre_norm")? == "true",
        rpe_per_layer: get("rpe_per_layer")? == "true",
        pad_id: num("pad_id")?,
        bos_id: num("bos_id")?,
        eos_id: num("eos_id")?,
        sep_id: num("sep_id")?,
    };
    let step = get("step")?
        .parse()
        .map_err(|_| Error::format("metadata 'step' is not an integer".to_string()))?;
    Ok((config, step))
}

/// Elementwise arithmetic mean of the last `last_m` states (f64
/// accumulation, narrowed back to f32). All states must share the same
/// parameter name set and shapes.
pub fn average_states(states: &[ModelState<f32>], last_m: usize) -> Result<ModelState<f32>> {
    if last_m == 0 || states.len() < last_m {
        return Err(Error::config(format!(
            "cannot average last {last_m} of {} checkpoints",
            states.len()
        )));
    }
    let chosen = &states[states.len() - last_m..];
    let first = &chosen[0];
    for s in &chosen[1..] {
        if s.names() != first.names() {
            return Err(Error::format(
                "checkpoint parameter name sets differ".to_string(),
            ));
        }
        for (a, b) in s.params().iter().zip(first.params()) {
            if a.shape() != b.shape() {
                return Err(Error::format(
                    "checkpoint parameter shapes differ".to_string(),
                ));
            }
        }
    }
    let inv = 1.0 / last_m as f64;
    let mut out = first.clone();
    for (i, p) in out.params_mut().iter_mut().enumerate() {
        let mut acc = vec![0.0f64; p.len()];
        for s in chosen {
            for (a, &v) in acc.iter_mut().zip(s.params()[i].data()) {
                *a += v as f64;
            }
        }
        for (dst, a) in p.data_mut().iter_mut().zip(acc) {
            *dst = (a * inv) as f32;
        }
    }
    Ok(out)
}

/// Load `paths` in order and average the last `last_m`.
pub fn average_checkpoints(paths: &[std::path::PathBuf], last_m: usize) -> Result<ModelState<f32>> {
    let mut states = Vec::with_capacity(paths.len());
    for p in paths {
        states.push(load(p)?.0);
    }
    average_states(&states, last_m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_state(seed: u64) -> ModelState<f32> {
        let mut cfg = ModelConfig::desk(PositionScheme::Ape);
        cfg.layers = 1;
        cfg.heads = 2;
        cfg.d_model = 8;
        cfg.d_ff = 16;
        cfg.src_vocab = 10;
        cfg.tgt_vocab = 10;
        cfg.max_position = 16;
        ModelState::init(cfg, seed).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let state = small_state(42);
        let bytes = checkpoint_bytes(&state, 77);
        let (loaded, step) = state_from_bytes(&bytes).unwrap();
        assert_eq!(step, 77);
        for (a, b) in state.params().iter().zip(loaded.params()) {
            assert_eq!(a, b);
        }
        // re-serialization reproduces the same bytes
        assert_eq!(bytes, checkpoint_bytes(&loaded, 77));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let state = small_state(1);
        save(&path, &state, 5).unwrap();
        let (loaded, step) = load(&path).unwrap();
        assert_eq!(step, 5);
        assert_eq!(loaded.param_count(), state.param_count());
    }

    #[test]
    fn corrupted_magic_is_a_format_error() {
        let state = small_state(3);
        let mut bytes = checkpoint_bytes(&state, 1);
        bytes[0] = b'X';
        let err = state_from_bytes(&bytes).unwrap_err();
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn version_mismatch_is_a_format_error() {
        let state = small_state(3);
        let mut bytes = checkpoint_bytes(&state, 1);
        bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
        let err = state_from_bytes(&bytes).unwrap_err();
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn truncation_is_a_format_error() {
        let state = small_state(3);
        let bytes = checkpoint_bytes(&state, 1);
        let err = state_from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn average_of_one_is_identity() {
        let a = small_state(1);
        let b = small_state(2);
        let avg = average_states(&[a, b.clone()], 1).unwrap();
        for (x, y) in avg.params().iter().zip(b.params()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn opposite_states_average_to_zero() {
        let a = small_state(5);
        let mut neg = a.clone();
        for p in neg.params_mut() {
            for v in p.data_mut() {
                *v = -*v;
            }
        }
        let avg = average_states(&[a, neg], 2).unwrap();
        for p in avg.params() {
            assert!(p.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn scalar_mean_of_three() {
        let base = small_state(7);
        let mut s1 = base.clone();
        let mut s2 = base.clone();
        let mut s3 = base.clone();
        for (s, v) in [(&mut s1, 1.0f32), (&mut s2, 2.0), (&mut s3, 3.0)] {
            s.get_mut("out_proj.b").unwrap().data_mut()[0] = v;
        }
        let avg = average_states(&[s1, s2, s3], 3).unwrap();
        assert_eq!(avg.get("out_proj.b").unwrap().data()[0], 2.0);
    }

    #[test]
    fn averaging_commutes_with_scaling() {
        let a = small_state(11);
        let b = small_state(12);
        let avg = average_states(&[a.clone(), b.clone()], 2).unwrap();
        let scale = |mut s: ModelState<f32>| {
            for p in s.params_mut() {
                for v in p.data_mut() {
                    *v *= 2.0;
                }
            }
            s
        };
        let avg_scaled = average_states(&[scale(a), scale(b)], 2).unwrap();
        for (x, y) in avg.params().iter().zip(avg_scaled.params()) {
            for (&xa, &ya) in x.data().iter().zip(y.data()) {
                assert!((xa * 2.0 - ya).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn averaging_more_than_available_is_an_error() {
        let a = small_state(1);
        assert!(average_states(&[a], 2).is_err());
    }
}
