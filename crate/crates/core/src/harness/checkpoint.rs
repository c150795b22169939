//! Binary checkpoints: `GVLP`, version, JSON config, step, RNG state,
//! named tensors, optional optimizer moments and a CRC-32 trailer. All
//! integers and floats are little-endian.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor::{AdamWState, ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"GVLP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerSnapshot {
    pub t: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: Value,
    pub step: u64,
    pub rng: RngState,
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub optimizer: Option<OptimizerSnapshot>,
}

impl Checkpoint {
    pub fn from_store(
        config: Value,
        step: u64,
        rng: &ChaCha8Rng,
        store: &ParamStore<f32>,
        optimizer: Option<&AdamWState<f32>>,
    ) -> Self {
        Self {
            config,
            step,
            rng: RngState::capture(rng),
            tensors: store.iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect(),
            optimizer: optimizer.map(|s| OptimizerSnapshot {
                t: s.t,
                m: s.m.clone(),
                v: s.v.clone(),
            }),
        }
    }

    pub fn to_store(&self) -> Result<ParamStore<f32>> {
        let mut store = ParamStore::new();
        for (name, t) in &self.tensors {
            if store.id(name).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
            }
            store.add(name.clone(), t.clone());
        }
        Ok(store)
    }

    /// Optimizer moments checked against `store`'s shapes.
    pub fn optimizer_state(&self, store: &ParamStore<f32>) -> Result<Option<AdamWState<f32>>> {
        let Some(opt) = &self.optimizer else {
            return Ok(None);
        };
        if opt.m.len() != store.len() || opt.v.len() != store.len() {
            return Err(Error::Checkpoint("optimizer state does not match the parameter count".into()));
        }
        for ((_, name, t), (m, v)) in store.iter().zip(opt.m.iter().zip(&opt.v)) {
            if m.shape() != t.shape() || v.shape() != t.shape() {
                return Err(Error::Checkpoint(format!("optimizer state shape mismatch for tensor {name}")));
            }
        }
        Ok(Some(AdamWState {
            m: opt.m.clone(),
            v: opt.v.clone(),
            t: opt.t,
        }))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let json = serde_json::to_vec(&self.config).expect("JSON values serialize");
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            write_tensor(&mut out, t);
        }
        match &self.optimizer {
            None => out.push(0),
            Some(opt) => {
                out.push(1);
                out.extend_from_slice(&opt.t.to_le_bytes());
                out.extend_from_slice(&(opt.m.len() as u32).to_le_bytes());
                for t in opt.m.iter().chain(&opt.v) {
                    write_tensor(&mut out, t);
                }
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic bytes)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}, expected {VERSION}"
            )));
        }
        if bytes.len() < 12 {
            return Err(truncated());
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(Error::Checkpoint("integrity check failed (CRC mismatch or truncated file)".into()));
        }
        let mut r = Reader { bytes: body, pos: 8 };
        let json_len = r.u32()? as usize;
        let config = serde_json::from_slice(r.take(json_len)?)
            .map_err(|e| Error::Checkpoint(format!("bad config blob: {e}")))?;
        let step = r.u64()?;
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let n = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let t = r.tensor()?;
            tensors.push((name, t));
        }
        let optimizer = match r.take(1)?[0] {
            0 => None,
            1 => {
                let t = r.u64()?;
                let count = r.u32()? as usize;
                let m = (0..count).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
                let v = (0..count).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
                Some(OptimizerSnapshot { t, m, v })
            }
            flag => return Err(Error::Checkpoint(format!("bad optimizer flag {flag}"))),
        };
        if r.pos != body.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after the tensor table",
                body.len() - r.pos
            )));
        }
        Ok(Self {
            config,
            step,
            rng: RngState { seed, stream, word_pos },
            tensors,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn write_tensor(out: &mut Vec<u8>, t: &Tensor<f32>) {
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for d in t.shape() {
        out.extend_from_slice(&(*d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn truncated() -> Error {
    Error::Checkpoint("truncated file".into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len()).ok_or_else(truncated)?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self) -> Result<Tensor<f32>> {
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("implausible tensor rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| self.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let count = shape
            .iter()
            .try_fold(1usize, |a, d| a.checked_mul(*d))
            .filter(|c| c.checked_mul(4).is_some_and(|b| b <= self.bytes.len() - self.pos))
            .ok_or_else(truncated)?;
        let data = self
            .take(count * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}
