//! `EMEVCK01` checkpoint files: a config blob plus named tensors.
//!
//! Layout (little-endian): magic, version `u32`, config length `u32` + UTF-8
//! text, parameter count `u32`, then per tensor its name (length-prefixed),
//! rank `u32`, dims `u32[rank]` and `f32` data. An optional second tensor
//! section with the same layout holds optimizer state; it is present exactly
//! when bytes remain after the parameters.

use std::path::Path;

use crate::config::Config;
use crate::dataset::ByteReader;
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"EMEVCK01";
pub const CHECKPOINT_VERSION: u32 = 1;

pub type NamedTensors = Vec<(String, Tensor)>;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    pub params: NamedTensors,
    pub optimizer: Option<NamedTensors>,
}

impl Checkpoint {
    pub fn from_store(config: Config, store: &ParamStore) -> Checkpoint {
        Checkpoint {
            config,
            params: store
                .iter()
                .map(|p| (p.name.clone(), p.value().clone()))
                .collect(),
            optimizer: None,
        }
    }

    /// Copies every stored tensor into `store`, matching by name.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} tensors, model expects {}",
                self.params.len(),
                store.len()
            )));
        }
        for (name, t) in &self.params {
            store.set_value(name, t.clone())?;
        }
        Ok(())
    }

    pub fn optimizer_tensor(&self, name: &str) -> Option<&Tensor> {
        self.optimizer
            .as_ref()?
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_str(&mut out, &self.config.to_text());
        put_tensors(&mut out, &self.params);
        if let Some(opt) = &self.optimizer {
            put_tensors(&mut out, opt);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
        let fmt = |detail: &str| Error::Format {
            path: path.to_path_buf(),
            detail: detail.to_string(),
        };
        let mut r = ByteReader::new(bytes);
        if r.take(8) != Some(CHECKPOINT_MAGIC.as_slice()) {
            return Err(fmt("not a checkpoint file (bad magic)"));
        }
        let version = r.u32().ok_or_else(|| fmt("truncated header"))?;
        if version != CHECKPOINT_VERSION {
            return Err(fmt(&format!("unsupported checkpoint version {version}")));
        }
        let text = get_str(&mut r).ok_or_else(|| fmt("truncated or non-UTF-8 config blob"))?;
        let config = Config::parse(&text).map_err(|e| fmt(&e.to_string()))?;
        let params = get_tensors(&mut r).map_err(|d| fmt(&d))?;
        let optimizer = if r.remaining() > 0 {
            Some(get_tensors(&mut r).map_err(|d| fmt(&d))?)
        } else {
            None
        };
        if r.remaining() != 0 {
            return Err(fmt("trailing bytes after optimizer section"));
        }
        Ok(Checkpoint {
            config,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn get_str(r: &mut ByteReader) -> Option<String> {
    let n = r.u32()? as usize;
    String::from_utf8(r.take(n)?.to_vec()).ok()
}

fn put_tensors(out: &mut Vec<u8>, tensors: &[(String, Tensor)]) {
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        put_str(out, name);
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn get_tensors(r: &mut ByteReader) -> std::result::Result<NamedTensors, String> {
    let count = r.u32().ok_or("truncated tensor count")? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name = get_str(r).ok_or("truncated tensor name")?;
        let rank = r.u32().ok_or("truncated rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32().ok_or("truncated dims")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| format!("{name}: dims overflow"))?;
        let raw = n
            .checked_mul(4)
            .and_then(|b| r.take(b))
            .ok_or_else(|| format!("{name}: data shorter than its dims {shape:?}"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| format!("{name}: {e}"))?;
        out.push((name, t));
    }
    Ok(out)
}
