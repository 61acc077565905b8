//! Binary checkpoints: a magic tag, the config text, then one record per
//! parameter array. Everything is little-endian; values are raw 32-bit
//! floats, so a save/load round trip is bitwise exact.
//!
//! Layout:
//! * `"MOL1"` (4 bytes)
//! * config text: u64 byte length, then UTF-8 bytes
//! * records until end of file, each: u64 name length, name bytes,
//!   u64 rank, `rank` u64 extents, then `prod(extents)` f32 values

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::config::ModelConfig;
use crate::model::Model;
use crate::tensor::{Error, Result, Tensor};

const MAGIC: &[u8; 4] = b"MOL1";
const MAX_NAME: u64 = 4096;
const MAX_RANK: u64 = 8;

pub fn save_checkpoint(model: &Model<f32>, path: &Path) -> Result<()> {
    let bytes = checkpoint_bytes(model);
    fs::write(path, bytes).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

pub fn load_checkpoint(path: &Path) -> Result<Model<f32>> {
    let bytes =
        fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    model_from_bytes(&bytes)
}

pub fn checkpoint_bytes(model: &Model<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let cfg = model.cfg.to_text();
    out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    model.visit(&mut |name, t| {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u64).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    });
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, what: &str) -> Error {
        Error::Checkpoint(format!("{what} at offset {}", self.pos))
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.corrupt(what));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<Model<f32>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "truncated magic").ok() != Some(MAGIC) {
        return Err(Error::Checkpoint("bad magic at offset 0".into()));
    }
    let cfg_len = r.u64("truncated config length")?;
    if cfg_len > bytes.len() as u64 {
        return Err(r.corrupt(&format!("config length {cfg_len} past end of file")));
    }
    let cfg_bytes = r.take(cfg_len as usize, "truncated config text")?;
    let cfg_text = std::str::from_utf8(cfg_bytes)
        .map_err(|_| Error::Checkpoint(format!("config text is not UTF-8 at offset {}", 12)))?;
    let cfg = ModelConfig::parse(cfg_text)
        .map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;

    let mut arrays: HashMap<String, Tensor<f32>> = HashMap::new();
    while !r.done() {
        let name_len = r.u64("truncated record header")?;
        if name_len > MAX_NAME {
            return Err(r.corrupt(&format!("implausible name length {name_len}")));
        }
        let name_bytes = r.take(name_len as usize, "truncated array name")?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| r.corrupt("array name is not UTF-8"))?
            .to_string();
        let rank = r.u64("truncated rank")?;
        if rank > MAX_RANK {
            return Err(r.corrupt(&format!("implausible rank {rank} for array {name}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut len = 1u64;
        for _ in 0..rank {
            let e = r.u64("truncated extents")?;
            len = len.saturating_mul(e);
            shape.push(e as usize);
        }
        let need = len.saturating_mul(4);
        if need > (r.buf.len() - r.pos) as u64 {
            return Err(r.corrupt(&format!("truncated values for array {name}")));
        }
        let raw = r.take(need as usize, "truncated values")?;
        let vals: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(&shape, vals)
            .map_err(|e| Error::Checkpoint(format!("array {name}: {e}")))?;
        if arrays.insert(name.clone(), t).is_some() {
            return Err(Error::Checkpoint(format!("duplicate array {name}")));
        }
    }

    let mut model = Model::<f32>::zeros(&cfg)?;
    let mut problem: Option<String> = None;
    model.visit_mut(&mut |name, t| {
        if problem.is_some() {
            return;
        }
        match arrays.remove(&name) {
            None => problem = Some(format!("missing array {name}")),
            Some(saved) => {
                if saved.shape() != t.shape() {
                    problem = Some(format!(
                        "array {name}: shape {:?} does not match expected {:?}",
                        saved.shape(),
                        t.shape()
                    ));
                } else {
                    *t = saved;
                }
            }
        }
    });
    if let Some(msg) = problem {
        return Err(Error::Checkpoint(msg));
    }
    if let Some(name) = arrays.into_keys().next() {
        return Err(Error::Checkpoint(format!("unexpected array {name}")));
    }
    Ok(model)
}
