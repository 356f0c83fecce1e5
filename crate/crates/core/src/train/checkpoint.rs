//! Little-endian checkpoint files.
//!
//! Layout: the 8-byte magic, a `u32` version, a `u64` length and that many
//! bytes of UTF-8 run configuration, then records until end of file. A record
//! is a `u32` name length, the name, a `u32` rank, `rank` dimensions as `u64`
//! and the values as `f32`.
//!
//! Model parameters, batch-norm statistics and momentum buffers are stored
//! under `param.`, `buffer.` and `momentum.` prefixes. Integer and `f64` state
//! (`state.*`) is split into 16-bit pieces, each exact in an `f32`.

use std::fs;
use std::path::Path;

use super::TrainState;
use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ParamSet};
use crate::tensor::{Shape, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HYPCOLCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Run configuration text, stored verbatim.
    pub config: String,
    pub records: Vec<(String, Tensor<f32>)>,
}

fn words_to_tensor(words: &[u64]) -> Tensor<f32> {
    let data = words.iter().flat_map(|w| (0..4).map(move |i| ((w >> (16 * i)) & 0xffff) as f32)).collect::<Vec<_>>();
    Tensor::from_vec([1, 1, 1, data.len()], data).expect("small shape")
}

fn tensor_to_words(t: &Tensor<f32>) -> Option<Vec<u64>> {
    if t.len() % 4 != 0 {
        return None;
    }
    t.data()
        .chunks(4)
        .map(|piece| {
            piece.iter().enumerate().try_fold(0u64, |acc, (i, &v)| {
                (v >= 0.0 && v <= 65535.0 && v.fract() == 0.0).then(|| acc | ((v as u64) << (16 * i)))
            })
        })
        .collect()
}

impl Checkpoint {
    pub fn from_state(state: &TrainState, config: &str) -> Self {
        let mut records = Vec::new();
        for (prefix, set) in [("param", &state.model.params), ("buffer", &state.model.buffers), ("momentum", &state.velocity)] {
            for (name, t) in set.iter() {
                records.push((format!("{prefix}.{name}"), t.clone()));
            }
        }
        let n = &state.normalization;
        let words: [(&str, Vec<u64>); 6] = [
            ("state.epoch", vec![state.epoch as u64]),
            ("state.shuffle_seed", vec![state.shuffle_seed]),
            ("state.split_seed", vec![state.split_seed]),
            ("state.holdout", vec![state.holdout as u64]),
            ("state.norm_mean", n.mean.iter().map(|v| v.to_bits()).collect()),
            ("state.norm_std", n.std.iter().map(|v| v.to_bits()).collect()),
        ];
        for (name, w) in words {
            records.push((name.to_string(), words_to_tensor(&w)));
        }
        Self { config: config.to_string(), records }
    }

    /// Rebuilds training state for `model_config`. Every parameter, buffer
    /// and momentum tensor of that architecture must be present with the
    /// right shape, and no other record may appear.
    pub fn to_state(&self, model_config: &ModelConfig) -> Result<TrainState> {
        let err = |msg: String| Error::Checkpoint { path: "<memory>".into(), msg };
        let template = Model::<f32>::build(model_config.clone(), 0)?;
        let mut found: std::collections::HashMap<&str, &Tensor<f32>> = std::collections::HashMap::new();
        for (name, t) in &self.records {
            if found.insert(name, t).is_some() {
                return Err(err(format!("duplicate record `{name}`")));
            }
        }
        let mut take = |name: &str| found.remove(name).ok_or_else(|| err(format!("missing record `{name}`")));
        let mut fill = |prefix: &str, like: &ParamSet<f32>| -> Result<ParamSet<f32>> {
            let mut out = ParamSet::new();
            for (name, t) in like.iter() {
                let rec = take(&format!("{prefix}.{name}"))?;
                if rec.shape() != t.shape() {
                    return Err(err(format!("`{prefix}.{name}` has shape {}, architecture needs {}", rec.shape(), t.shape())));
                }
                out.insert(name, rec.clone());
            }
            Ok(out)
        };
        let params = fill("param", &template.params)?;
        let buffers = fill("buffer", &template.buffers)?;
        let velocity = fill("momentum", &template.params)?;
        let mut words = |name: &str, len: usize| -> Result<Vec<u64>> {
            let w = tensor_to_words(take(name)?).ok_or_else(|| err(format!("`{name}` is not an encoded integer")))?;
            if w.len() != len {
                return Err(err(format!("`{name}` has {} words, expected {len}", w.len())));
            }
            Ok(w)
        };
        let epoch = words("state.epoch", 1)?[0] as usize;
        let shuffle_seed = words("state.shuffle_seed", 1)?[0];
        let split_seed = words("state.split_seed", 1)?[0];
        let holdout = words("state.holdout", 1)?[0] as usize;
        let floats = |w: Vec<u64>| -> [f64; 3] { std::array::from_fn(|i| f64::from_bits(w[i])) };
        let mean = floats(words("state.norm_mean", 3)?);
        let std = floats(words("state.norm_std", 3)?);
        if let Some(extra) = found.keys().next() {
            return Err(err(format!("record `{extra}` does not belong to this architecture")));
        }
        Ok(TrainState {
            model: Model { config: model_config.clone(), params, buffers },
            velocity,
            epoch,
            shuffle_seed,
            split_seed,
            holdout,
            normalization: Normalization { mean, std },
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        for (name, t) in &self.records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let dims = t.shape().0;
            out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
            for d in dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err("bad magic: not a checkpoint file".into());
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(format!("unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"));
        }
        let len = r.u64()? as usize;
        let config = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| "config blob is not UTF-8".to_string())?;
        let mut records = Vec::new();
        while r.pos < bytes.len() {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| "record name is not UTF-8".to_string())?;
            let rank = r.u32()? as usize;
            if rank > 4 {
                return Err(format!("record `{name}` has unsupported rank {rank}"));
            }
            let mut dims = [1usize; 4];
            for i in 0..rank {
                dims[4 - rank + i] = usize::try_from(r.u64()?).map_err(|_| "dimension overflow".to_string())?;
            }
            let shape = Shape(dims);
            let numel = shape.checked_numel().map_err(|e| e.to_string())?;
            let raw = r.take(numel.checked_mul(4).ok_or("dimension overflow")?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            records.push((name, Tensor::from_vec(shape, data).map_err(|e| e.to_string())?));
        }
        Ok(Self { config, records })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or("truncated file")?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, ckpt.encode()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::decode(&bytes).map_err(|msg| Error::Checkpoint { path: path.to_path_buf(), msg })
}
