//! Versioned binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes  "LARLCKPT"
//! version   u32
//! header    u64 length, then JSON (config, dtype, optimizer, rng, counters)
//! blocks    u32 count, then per block:
//!           u32 name length, name bytes, u8 dtype code, u32 rank,
//!           u64 per dim, raw element data
//! ```
//!
//! Optimizer moments are stored as blocks named `opt.m.<param>` and
//! `opt.v.<param>`.

use std::collections::BTreeMap;
use std::path::Path;

use larl_tensor::{DType, Optimizer, OptimizerKind, Scalar, Tensor};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::{DialogModel, ModelConfig};
use crate::error::{LarlError, Result};
use crate::rng::Rng;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LARLCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Model plus the training state needed to resume.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub model: DialogModel<T>,
    pub optimizer: Option<Optimizer<T>>,
    pub rng: Option<Rng>,
    pub counters: BTreeMap<String, u64>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    dtype: String,
    optimizer: Option<OptimizerHeader>,
    rng: Option<RngHeader>,
    counters: BTreeMap<String, u64>,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    kind: String,
    beta1: f64,
    beta2: f64,
    eps: f64,
    lr: f64,
    clip: Option<f64>,
    steps: u64,
}

#[derive(Serialize, Deserialize)]
struct RngHeader {
    seed: [u8; 32],
    stream: u64,
    /// Decimal string; JSON numbers cannot hold a u128 portably.
    word_pos: String,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(model: DialogModel<T>) -> Self {
        Self {
            model,
            optimizer: None,
            rng: None,
            counters: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let optimizer = self.optimizer.as_ref().map(|o| {
            let (kind, beta1, beta2, eps) = match o.kind {
                OptimizerKind::Sgd => ("sgd", 0.0, 0.0, 0.0),
                OptimizerKind::Adam { beta1, beta2, eps } => ("adam", beta1, beta2, eps),
            };
            OptimizerHeader {
                kind: kind.into(),
                beta1,
                beta2,
                eps,
                lr: o.lr,
                clip: o.clip,
                steps: o.steps_taken(),
            }
        });
        let rng = self.rng.as_ref().map(|r| RngHeader {
            seed: r.get_seed(),
            stream: r.get_stream(),
            word_pos: r.get_word_pos().to_string(),
        });
        let header = Header {
            config: self.model.config.clone(),
            dtype: T::DTYPE.name().into(),
            optimizer,
            rng,
            counters: self.counters.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut blocks: Vec<(String, &Tensor<T>)> = self.model.store.iter().map(|(_, n, t)| (n.to_string(), t)).collect();
        if let Some(o) = &self.optimizer {
            let (m, v) = o.moments();
            for (prefix, map) in [("opt.m.", m), ("opt.v.", v)] {
                for (id, t) in map {
                    blocks.push((format!("{prefix}{}", self.model.store.name(*id)), t));
                }
            }
        }
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
        for (name, t) in blocks {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(T::DTYPE.code());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                x.write_le(&mut out);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != CHECKPOINT_MAGIC {
            return Err(LarlError::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(LarlError::Checkpoint(format!(
                "unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let len = r.u64("header length")? as usize;
        let header: Header = serde_json::from_slice(r.take(len, "header")?)
            .map_err(|e| LarlError::Checkpoint(format!("malformed header: {e}")))?;
        if header.dtype != T::DTYPE.name() {
            return Err(LarlError::Checkpoint(format!(
                "checkpoint holds {} data, loader expects {}",
                header.dtype,
                T::DTYPE.name()
            )));
        }
        let n = r.u32("block count")?;
        let mut params = Vec::new();
        let mut moments: BTreeMap<String, Tensor<T>> = BTreeMap::new();
        for _ in 0..n {
            let name_len = r.u32("block name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "block name")?)
                .map_err(|_| LarlError::Checkpoint("block name is not utf-8".into()))?
                .to_string();
            let dtype = DType::from_code(r.take(1, "dtype")?[0])
                .ok_or_else(|| LarlError::Checkpoint(format!("block {name}: unknown dtype code")))?;
            if dtype != T::DTYPE {
                return Err(LarlError::Checkpoint(format!("block {name}: dtype {}", dtype.name())));
            }
            let rank = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64("dim")? as usize);
            }
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let size = numel
                .and_then(|n| n.checked_mul(dtype.size()))
                .ok_or_else(|| LarlError::Checkpoint(format!("block {name}: shape overflow")))?;
            let raw = r.take(size, "tensor data")?;
            let data = raw.chunks_exact(dtype.size()).map(T::read_le).collect();
            let t = Tensor::new(shape, data).map_err(|e| LarlError::Checkpoint(format!("block {name}: {e}")))?;
            if name.starts_with("opt.") {
                moments.insert(name, t);
            } else {
                params.push((name, t));
            }
        }
        if r.pos != bytes.len() {
            return Err(LarlError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let model = DialogModel::from_named(header.config, params)?;
        let optimizer = match header.optimizer {
            None => None,
            Some(o) => {
                let kind = match o.kind.as_str() {
                    "sgd" => OptimizerKind::Sgd,
                    "adam" => OptimizerKind::Adam {
                        beta1: o.beta1,
                        beta2: o.beta2,
                        eps: o.eps,
                    },
                    other => return Err(LarlError::Checkpoint(format!("unknown optimizer {other}"))),
                };
                let mut opt = Optimizer::new(kind, o.lr, o.clip)?;
                let (mut first, mut second) = (BTreeMap::new(), BTreeMap::new());
                for (name, t) in moments {
                    let (map, param) = if let Some(p) = name.strip_prefix("opt.m.") {
                        (&mut first, p)
                    } else if let Some(p) = name.strip_prefix("opt.v.") {
                        (&mut second, p)
                    } else {
                        return Err(LarlError::Checkpoint(format!("unknown block {name}")));
                    };
                    let id = model
                        .store
                        .id(param)
                        .map_err(|_| LarlError::Checkpoint(format!("moment for unknown parameter {param}")))?;
                    map.insert(id, t);
                }
                opt.restore(o.steps, first, second);
                Some(opt)
            }
        };
        let rng = match header.rng {
            None => None,
            Some(h) => {
                let pos: u128 = h
                    .word_pos
                    .parse()
                    .map_err(|_| LarlError::Checkpoint("malformed rng position".into()))?;
                let mut rng = Rng::from_seed(h.seed);
                rng.set_stream(h.stream);
                rng.set_word_pos(pos);
                Some(rng)
            }
        };
        Ok(Self {
            model,
            optimizer,
            rng,
            counters: header.counters,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?)
            .map_err(|e| LarlError::Checkpoint(format!("cannot write {}: {e}", path.display())))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes =
            std::fs::read(path).map_err(|e| LarlError::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            LarlError::Checkpoint(m) => LarlError::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(LarlError::Checkpoint(format!("truncated file while reading {what}"))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}
