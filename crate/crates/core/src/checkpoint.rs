//! Binary checkpoints of a training run.
//!
//! Layout: `b"MCIN"`, `u32` format version, `u64` header length, a JSON
//! header (config, parameter layout, step, history, optimizer counter),
//! then every parameter, momentum and second-moment scalar as little-endian
//! `f64` in store order. Writes go to a temporary sibling first and are
//! renamed into place.

use std::fs;
use std::io::Write;
use std::path::Path;

use mcinet_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::params::ParamGroup;
use crate::train::{MetricHistory, Trainer};

pub const MAGIC: &[u8; 4] = b"MCIN";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    shape: Vec<usize>,
    group: ParamGroup,
    frozen: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    params: Vec<ParamRecord>,
    step: usize,
    optimizer_updates: u64,
    history: MetricHistory,
}

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Serializes a trainer to bytes.
pub fn to_bytes(t: &Trainer) -> Result<Vec<u8>> {
    let header = Header {
        config: t.cfg.clone(),
        params: t
            .store
            .entries()
            .iter()
            .map(|e| ParamRecord {
                name: e.name.clone(),
                shape: e.value.shape().to_vec(),
                group: e.group,
                frozen: e.frozen,
            })
            .collect(),
        step: t.step,
        optimizer_updates: t.opt.updates,
        history: t.history.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| ckpt_err(e.to_string()))?;
    let scalars = t.store.num_scalars();
    let mut out = Vec::with_capacity(16 + json.len() + 3 * 8 * scalars);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let values = t.store.entries().iter().map(|e| &e.value);
    for tensor in values.chain(&t.opt.velocity).chain(&t.opt.second) {
        for v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| ckpt_err("truncated file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(n.checked_mul(8).ok_or_else(|| ckpt_err("length overflow"))?)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

/// Rebuilds a trainer from bytes written by [`to_bytes`].
pub fn from_bytes(bytes: &[u8]) -> Result<Trainer> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(ckpt_err("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(ckpt_err(format!("format version {} is not supported (expected {})", version, FORMAT_VERSION)));
    }
    let len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
    let len = usize::try_from(len).map_err(|_| ckpt_err("header too large"))?;
    let header: Header = serde_json::from_slice(r.take(len)?).map_err(|e| ckpt_err(format!("header: {}", e)))?;

    let mut t = Trainer::new(&header.config)?;
    if t.store.len() != header.params.len() {
        return Err(ckpt_err(format!(
            "checkpoint has {} parameters, config builds {}",
            header.params.len(),
            t.store.len()
        )));
    }
    for (e, p) in t.store.entries().iter().zip(&header.params) {
        if e.name != p.name || e.value.shape() != p.shape.as_slice() || e.group != p.group {
            return Err(ckpt_err(format!(
                "parameter {} {:?} does not match config layout {} {:?}",
                p.name,
                p.shape,
                e.name,
                e.value.shape()
            )));
        }
    }
    let ids: Vec<_> = t.store.ids().collect();
    for (&id, p) in ids.iter().zip(&header.params) {
        let data = r.f64s(t.store.get(id).len())?;
        *t.store.get_mut(id) = Tensor::new(p.shape.clone(), data)?;
        if p.frozen && !t.store.entry(id).frozen {
            t.store.freeze_group(p.group);
        }
    }
    for buf in [&mut t.opt.velocity, &mut t.opt.second] {
        for v in buf.iter_mut() {
            *v = Tensor::new(v.shape().to_vec(), r.f64s(v.len())?)?;
        }
    }
    if r.pos != bytes.len() {
        return Err(ckpt_err(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    t.step = header.step;
    t.opt.updates = header.optimizer_updates;
    t.history = header.history;
    Ok(t)
}

/// Writes atomically: temporary sibling, flush, rename.
pub fn save(t: &Trainer, path: &Path) -> Result<()> {
    let bytes = to_bytes(t)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = Path::new(&tmp);
    {
        let mut f = fs::File::create(tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Trainer> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    fn tiny_trainer() -> Trainer {
        let mut cfg = RunConfig::default();
        cfg.model = ModelConfig::tiny();
        cfg.train.batch_size = 1;
        Trainer::new(&cfg).unwrap()
    }

    #[test]
    fn bad_magic_and_version_are_rejected() {
        let t = tiny_trainer();
        let mut b = to_bytes(&t).unwrap();
        b[4] = 9;
        assert!(from_bytes(&b).unwrap_err().to_string().contains("version 9"));
        b[0] = b'X';
        assert!(from_bytes(&b).unwrap_err().to_string().contains("magic"));
    }

    #[test]
    fn truncation_is_detected() {
        let b = to_bytes(&tiny_trainer()).unwrap();
        assert!(from_bytes(&b[..b.len() - 3]).is_err());
    }
}
