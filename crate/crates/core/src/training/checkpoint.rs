//! FPCK checkpoint files.
//!
//! Little-endian layout: magic `FPCK`, u32 version, u64 architecture hash,
//! the normalization block (as in FPDS), u32-prefixed config text, u64 step,
//! u32 tensor count, then per tensor a u16-prefixed name, u32 rank, u32
//! dims and the f64 payload. Tensor groups are `params.`, `ema.`, `adam_m.`
//! and `adam_v.`, each in parameter order.

use std::path::Path;

use numgrad::Tensor;

use super::TrainState;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::model::Model;
use crate::params::ParamStore;
use crate::scenario::dataset::{put_stats, read_stats, Reader};
use crate::scenario::NormStats;

pub const MAGIC: &[u8; 4] = b"FPCK";
pub const VERSION: u32 = 2;

const WHAT: &str = "checkpoint";
const GROUPS: [&str; 4] = ["params", "ema", "adam_m", "adam_v"];
const MAX_NAME: usize = 256;
const MAX_RANK: usize = 4;
const MAX_CONFIG: usize = 1 << 16;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Invalid(format!("{what} too large for the checkpoint format")))
}

impl TrainState {
    fn groups(&self) -> [&ParamStore; 4] {
        [&self.params, &self.ema, &self.adam_m, &self.adam_v]
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        out.extend_from_slice(&self.model.cfg.arch_hash().to_le_bytes());
        put_stats(&mut out, &self.stats)?;
        let text = self.model.cfg.to_text();
        put_u32(&mut out, len_u32(text.len(), "config")?);
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        let count: usize = self.groups().iter().map(|s| s.len()).sum();
        put_u32(&mut out, len_u32(count, "tensor table")?);
        for (group, store) in GROUPS.iter().zip(self.groups()) {
            for (name, t) in store.iter() {
                let full = format!("{group}.{name}");
                let n = u16::try_from(full.len()).map_err(|_| Error::Invalid(format!("tensor name {full} too long")))?;
                out.extend_from_slice(&n.to_le_bytes());
                out.extend_from_slice(full.as_bytes());
                put_u32(&mut out, len_u32(t.shape().len(), "rank")?);
                for &d in t.shape() {
                    put_u32(&mut out, len_u32(d, "dimension")?);
                }
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    /// Parses a checkpoint. The stored config determines the architecture;
    /// every tensor must match it by name and shape.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, WHAT);
        if r.take(4)? != MAGIC {
            return Err(Error::format(WHAT, "bad magic, not an FPCK file"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(WHAT, format!("unsupported version {version}")));
        }
        let hash = r.u64()?;
        let stats = read_stats(&mut r)?;
        let n = r.u32()? as usize;
        if n > MAX_CONFIG {
            return Err(Error::format(WHAT, format!("config text of {n} bytes")));
        }
        let text = std::str::from_utf8(r.take(n)?).map_err(|_| Error::format(WHAT, "config text is not UTF-8"))?;
        let cfg = Config::parse(text).map_err(|e| Error::format(WHAT, format!("embedded config: {e}")))?;
        if cfg.arch_hash() != hash {
            return Err(Error::format(WHAT, "architecture hash does not match the embedded config"));
        }
        let step = r.u64()?;
        let (model, template) = Model::init(&cfg, 0)?;
        let count = r.u32()? as usize;
        if count != GROUPS.len() * template.len() {
            return Err(Error::format(WHAT, format!("{count} tensors, expected {}", GROUPS.len() * template.len())));
        }
        let mut stores: Vec<ParamStore> = Vec::with_capacity(GROUPS.len());
        for group in GROUPS {
            let mut store = ParamStore::new();
            for (name, want) in template.iter() {
                let full = r.string(MAX_NAME)?;
                if full != format!("{group}.{name}") {
                    return Err(Error::format(WHAT, format!("tensor {full:?} where {group}.{name} was expected")));
                }
                let rank = r.u32()? as usize;
                if rank == 0 || rank > MAX_RANK {
                    return Err(Error::format(WHAT, format!("{full}: rank {rank}")));
                }
                let mut shape = Vec::with_capacity(rank);
                for _ in 0..rank {
                    shape.push(r.u32()? as usize);
                }
                if shape != want.shape() {
                    return Err(Error::format(WHAT, format!("{full}: shape {shape:?}, expected {:?}", want.shape())));
                }
                let raw = r.take(want.len() * 8)?;
                let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
                store.add(name, Tensor::new(shape, data)?);
            }
            stores.push(store);
        }
        if r.remaining() != 0 {
            return Err(Error::format(WHAT, format!("{} trailing bytes", r.remaining())));
        }
        let adam_v = stores.pop().expect("four groups");
        let adam_m = stores.pop().expect("four groups");
        let ema = stores.pop().expect("four groups");
        let params = stores.pop().expect("four groups");
        Ok(Self { model, params, ema, adam_m, adam_v, step, stats })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    /// Loads a checkpoint and requires its architecture to match `cfg`.
    pub fn load_for(path: &Path, cfg: &Config) -> Result<Self> {
        let s = Self::load(path)?;
        s.check_arch(cfg)?;
        Ok(s)
    }

    /// Errors with a per-key report when `cfg` describes another
    /// architecture.
    pub fn check_arch(&self, cfg: &Config) -> Result<()> {
        if self.model.cfg.arch_hash() != cfg.arch_hash() {
            return Err(Error::ConfigMismatch(self.model.cfg.arch_diff(cfg)));
        }
        Ok(())
    }

    pub fn check_stats(&self, stats: &NormStats) -> Result<()> {
        if !self.stats.bitwise_eq(stats) {
            return Err(Error::StatsMismatch);
        }
        Ok(())
    }
}
