//! Binary checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic      8 bytes  "VGSECKPT"
//! version    u32      1
//! meta_len   u64
//! meta       meta_len bytes of JSON: {"config", "config_hash", "vocab", "epoch", "step"}
//! n_tensors  u32
//! n_tensors × { name_len u32, name utf-8, rows u32, cols u32, rows·cols × f64 }
//! ```
//!
//! Tensors appear in a fixed order: parameters as `param/<name>`, then Adam
//! first moments `adam.m/<name>`, then second moments `adam.v/<name>`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::TrainConfig;
use super::optim::AdamState;
use crate::autodiff::Matrix;
use crate::error::{Error, Result};
use crate::model::params::{TENSOR_COUNT, TENSOR_NAMES};
use crate::model::{Model, ModelParameters};
use crate::text::Vocabulary;

const MAGIC: &[u8; 8] = b"VGSECKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub vocab: Vocabulary,
    pub params: ModelParameters,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: TrainConfig,
    config_hash: String,
    vocab: Vocabulary,
    epoch: usize,
    step: u64,
}

/// SHA-256 of the canonical JSON form of `config`, hex encoded.
pub fn config_hash(config: &TrainConfig) -> String {
    let json = serde_json::to_vec(config).expect("config serializes");
    Sha256::digest(&json)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, m: &Matrix) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, m.rows() as u32);
    put_u32(out, m.cols() as u32);
    for x in m.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn tensor(&mut self) -> Result<(String, Matrix)> {
        let len = self.u32()? as usize;
        let name = String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?;
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        let raw = self.take(rows * cols * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok((name, Matrix::from_vec(rows, cols, data)?))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = Meta {
            config: self.config.clone(),
            config_hash: config_hash(&self.config),
            vocab: self.vocab.clone(),
            epoch: self.epoch,
            step: self.adam.step,
        };
        let json = serde_json::to_vec(&meta)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        put_u32(&mut out, (3 * TENSOR_COUNT) as u32);
        for (name, m) in self.params.named() {
            put_tensor(&mut out, &format!("param/{name}"), m);
        }
        for (name, m) in TENSOR_NAMES.iter().zip(&self.adam.m) {
            put_tensor(&mut out, &format!("adam.m/{name}"), m);
        }
        for (name, m) in TENSOR_NAMES.iter().zip(&self.adam.v) {
            put_tensor(&mut out, &format!("adam.v/{name}"), m);
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let meta_len = r.u64()? as usize;
        let meta: Meta = serde_json::from_slice(r.take(meta_len)?)?;
        if meta.config_hash != config_hash(&meta.config) {
            return Err(Error::Checkpoint("config hash mismatch".into()));
        }
        let n = r.u32()? as usize;
        if n != 3 * TENSOR_COUNT {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {n}",
                3 * TENSOR_COUNT
            )));
        }
        let mut groups: [Vec<Matrix>; 3] = Default::default();
        for (g, prefix) in groups.iter_mut().zip(["param", "adam.m", "adam.v"]) {
            for name in TENSOR_NAMES {
                let (found, m) = r.tensor()?;
                if found != format!("{prefix}/{name}") {
                    return Err(Error::Checkpoint(format!(
                        "expected tensor {prefix}/{name}, found {found}"
                    )));
                }
                g.push(m);
            }
        }
        if r.pos != buf.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        let [p, m, v] = groups;
        let params = Model::from_array(p.try_into().expect("tensor count"));
        let shapes = meta.config.dims(meta.vocab.len()).shapes();
        for ((name, s), t) in shapes.named().zip(params.refs()) {
            if *s != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?} disagrees with config {s:?}",
                    t.shape()
                )));
            }
        }
        Ok(Checkpoint {
            config: meta.config,
            vocab: meta.vocab,
            params,
            adam: AdamState {
                m,
                v,
                step: meta.step,
            },
            epoch: meta.epoch,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
