//! Training checkpoints.
//!
//! Layout: `SGCK`, u32 LE version, u64 LE header length, a JSON header, then
//! every parameter and Adam moment as f64 LE in header order. The payload is
//! f64 rather than SGT1's f32 so that a resumed run continues bit-identically.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use signal_core::{AdamConfig, AdamState, ParamStore, Tensor};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;

pub const MAGIC: &[u8; 4] = b"SGCK";
pub const VERSION: u32 = 1;

/// Optimizer state of one parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub name: String,
    /// Parameter names in update order.
    pub params: Vec<String>,
    pub state: AdamState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub groups: Vec<Group>,
    /// Completed epochs.
    pub epoch: usize,
    /// Word position of the sampler stream.
    pub rng_word_pos: u128,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: RunConfig,
    epoch: usize,
    grid: [usize; 2],
    d_raw: usize,
    num_classes: usize,
    /// Decimal, since JSON numbers cannot hold a u128 exactly.
    rng_word_pos: String,
    params: Vec<ParamHeader>,
    groups: Vec<GroupHeader>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GroupHeader {
    name: String,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    params: Vec<String>,
}

fn push_f64s(out: &mut Vec<u8>, data: &[f64]) {
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let m = &self.model;
        let header = Header {
            config: m.config.clone(),
            epoch: self.epoch,
            grid: m.grid,
            d_raw: m.d_raw,
            num_classes: m.num_classes,
            rng_word_pos: self.rng_word_pos.to_string(),
            params: m
                .params
                .iter()
                .map(|(name, t)| ParamHeader {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            groups: self
                .groups
                .iter()
                .map(|g| {
                    let c = g.state.config;
                    GroupHeader {
                        name: g.name.clone(),
                        lr: c.lr,
                        beta1: c.beta1,
                        beta2: c.beta2,
                        eps: c.eps,
                        step: g.state.step(),
                        params: g.params.clone(),
                    }
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Config(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in m.params.iter() {
            push_f64s(&mut out, t.data());
        }
        for g in &self.groups {
            for t in g.state.first_moments().iter().chain(g.state.second_moments()) {
                push_f64s(&mut out, t.data());
            }
        }
        Ok(out)
    }

    /// Parses checkpoint bytes; `path` only labels errors.
    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let err = |offset: usize, msg: String| Error::format(path, offset as u64, msg);
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(err(0, "bad magic, expected SGCK".into()));
        }
        if bytes.len() < 16 {
            return Err(err(bytes.len(), "truncated header".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("four bytes"));
        if version != VERSION {
            return Err(err(4, format!("unsupported version {version}, expected {VERSION}")));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("eight bytes"));
        let end = usize::try_from(len)
            .ok()
            .and_then(|l| l.checked_add(16))
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| err(8, format!("header length {len} exceeds the file")))?;
        let header: Header = serde_json::from_slice(&bytes[16..end]).map_err(|e| err(16, format!("header: {e}")))?;
        let word_pos: u128 = header
            .rng_word_pos
            .parse()
            .map_err(|_| err(16, format!("bad rng position {:?}", header.rng_word_pos)))?;

        let mut pos = end;
        let mut take = |shape: &[usize]| -> Result<Tensor> {
            let n: usize = shape.iter().product();
            let stop = n
                .checked_mul(8)
                .and_then(|b| b.checked_add(pos))
                .filter(|&s| s <= bytes.len())
                .ok_or_else(|| err(bytes.len(), format!("truncated payload: tensor of shape {shape:?} at byte {pos}")))?;
            let data = bytes[pos..stop]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
                .collect();
            pos = stop;
            Ok(Tensor::new(shape, data)?)
        };
        let mut params = ParamStore::new();
        for p in &header.params {
            params.insert(&p.name, take(&p.shape)?)?;
        }
        let mut groups = Vec::with_capacity(header.groups.len());
        for g in &header.groups {
            let shapes = g
                .params
                .iter()
                .map(|n| {
                    params
                        .get(n)
                        .map(|t| t.shape().to_vec())
                        .ok_or_else(|| Error::Config(format!("{}: group {} names unknown parameter {n}", path.display(), g.name)))
                })
                .collect::<Result<Vec<_>>>()?;
            let first = shapes.iter().map(|s| take(s)).collect::<Result<Vec<_>>>()?;
            let second = shapes.iter().map(|s| take(s)).collect::<Result<Vec<_>>>()?;
            let config = AdamConfig {
                lr: g.lr,
                beta1: g.beta1,
                beta2: g.beta2,
                eps: g.eps,
            };
            groups.push(Group {
                name: g.name.clone(),
                params: g.params.clone(),
                state: AdamState::from_parts(config, g.step, first, second)?,
            });
        }
        if pos != bytes.len() {
            return Err(err(pos, format!("{} trailing bytes", bytes.len() - pos)));
        }
        let model = Model {
            config: header.config,
            grid: header.grid,
            d_raw: header.d_raw,
            num_classes: header.num_classes,
            params,
        };
        let expected = Model::specs(&model.config, model.d_raw, model.num_classes)?;
        let mismatch = expected.len() != model.params.len()
            || expected
                .iter()
                .any(|s| model.params.get(&s.name).map(Tensor::shape) != Some(s.shape.as_slice()));
        if mismatch {
            return Err(Error::Config(format!(
                "{}: parameters do not match the architecture in the stored config",
                path.display()
            )));
        }
        Ok(Self {
            model,
            groups,
            epoch: header.epoch,
            rng_word_pos: word_pos,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }

    /// Loads and rejects a checkpoint written under a different config.
    pub fn load_for(path: &Path, config: &RunConfig) -> Result<Self> {
        let ck = Self::load(path)?;
        config
            .check_compatible(&ck.model.config)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(ck)
    }
}
