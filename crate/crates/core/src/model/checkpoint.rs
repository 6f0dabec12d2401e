//! Binary checkpoint format.
//!
//! ```text
//! "PKPT"                      magic
//! u32                         format version
//! u32 + bytes                 config as `key=value` lines
//! u32                         parameter count
//! per parameter:
//!   u32 + bytes               name
//!   u32                       rank
//!   u32 * rank                dims
//!   f32 * prod(dims)          values
//! ```
//!
//! All integers and floats are little-endian.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ModelConfig, ModelState};
use crate::error::{Error, Result};
use crate::tensor_core::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

const MAX_NAME_LEN: usize = 1 << 12;
const MAX_RANK: usize = 8;

fn put_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::contract(format!("{v} does not fit a u32 field")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_checkpoint<W: Write>(w: &mut W, model: &ModelState) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let cfg = model.config.to_kv();
    put_u32(w, cfg.len())?;
    w.write_all(cfg.as_bytes())?;
    put_u32(w, model.params.len())?;
    for (name, t) in &model.params {
        put_u32(w, name.len())?;
        w.write_all(name.as_bytes())?;
        put_u32(w, t.rank())?;
        for &d in t.shape() {
            put_u32(w, d)?;
        }
        let mut buf = Vec::with_capacity(t.numel() * 4);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize, field: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| Error::format(field, format!("truncated: {e}")))?;
        Ok(buf)
    }

    fn u32(&mut self, field: &str) -> Result<usize> {
        let b = self.bytes(4, field)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn string(&mut self, len: usize, field: &str) -> Result<String> {
        let b = self.bytes(len, field)?;
        String::from_utf8(b).map_err(|_| Error::format(field, "not valid UTF-8"))
    }
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<ModelState> {
    let mut r = Reader { inner: r };
    let magic = r.bytes(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::format("magic", format!("expected PKPT, found {magic:?}")));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(Error::format("version", format!("unsupported version {version}")));
    }
    let cfg_len = r.u32("config_length")?;
    if cfg_len > 1 << 16 {
        return Err(Error::format("config_length", format!("implausible length {cfg_len}")));
    }
    let config = ModelConfig::from_kv(&r.string(cfg_len, "config")?)?;
    let n = r.u32("param_count")?;
    let mut params = BTreeMap::new();
    for i in 0..n {
        let name_len = r.u32(&format!("param[{i}].name_length"))?;
        if name_len == 0 || name_len > MAX_NAME_LEN {
            return Err(Error::format(
                format!("param[{i}].name_length"),
                format!("implausible length {name_len}"),
            ));
        }
        let name = r.string(name_len, &format!("param[{i}].name"))?;
        let rank = r.u32(&format!("{name}.rank"))?;
        if rank > MAX_RANK {
            return Err(Error::format(format!("{name}.rank"), format!("implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for k in 0..rank {
            shape.push(r.u32(&format!("{name}.dims[{k}]"))?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= 1 << 30)
            .ok_or_else(|| Error::format(format!("{name}.dims"), format!("implausible shape {shape:?}")))?;
        let raw = r.bytes(numel * 4, &format!("{name}.data"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if params.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(Error::format(name.to_string(), "duplicate parameter"));
        }
    }
    let mut trailing = [0u8; 1];
    if r.inner.read(&mut trailing)? != 0 {
        return Err(Error::format("trailer", "unexpected bytes after last parameter"));
    }
    let model = ModelState { config, params };
    if let Some(v) = model.shape_audit().first() {
        return Err(Error::format(v.tensor(), v.to_string()));
    }
    Ok(model)
}

pub fn save_checkpoint(path: &Path, model: &ModelState) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, model)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
