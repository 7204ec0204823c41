//! `DEFC` checkpoint files.
//!
//! Layout (little-endian): magic `DEFC`, `u32` version, `u32` tensor count,
//! then per tensor `u32` name length, UTF-8 name, `u32` ndim, `u32` dims,
//! `f32` payload. A trailer follows: `u32` length and the model config as
//! UTF-8 TOML.

use std::fs;
use std::path::Path;

use super::config::ModelConfig;
use super::model::Model;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DEFC";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// Serializes every slot (parameters and running statistics) and the config.
pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, model.slots().len() as u32);
    for slot in model.slots() {
        put_u32(&mut out, slot.name.len() as u32);
        out.extend_from_slice(slot.name.as_bytes());
        let shape = slot.tensor.shape();
        put_u32(&mut out, shape.len() as u32);
        for &d in shape {
            put_u32(&mut out, d as u32);
        }
        for v in slot.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let cfg = toml::to_string(model.config()).map_err(|e| Error::config(format!("config serialization: {e}")))?;
    put_u32(&mut out, cfg.len() as u32);
    out.extend_from_slice(cfg.as_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                Some(self.pos as u64),
                format!("truncated checkpoint while reading {what}"),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

struct RawTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f32>,
}

pub fn from_bytes(buf: &[u8]) -> Result<Model> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(Some(0), "not a DEFC checkpoint (bad magic)"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(Some(4), format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let at = r.pos as u64;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::format(Some(at), "tensor name is not UTF-8"))?
            .to_string();
        let ndim = r.u32("ndim")? as usize;
        let shape = (0..ndim)
            .map(|_| r.u32("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let payload = r.take(n.saturating_mul(4), "payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(RawTensor { name, shape, data });
    }
    let len = r.u32("config trailer length")? as usize;
    let at = r.pos as u64;
    let text = std::str::from_utf8(r.take(len, "config trailer")?)
        .map_err(|_| Error::format(Some(at), "config trailer is not UTF-8"))?;
    let cfg: ModelConfig =
        toml::from_str(text).map_err(|e| Error::format(Some(at), format!("config trailer: {e}")))?;
    if r.pos != buf.len() {
        return Err(Error::format(Some(r.pos as u64), "trailing bytes after checkpoint"));
    }

    let mut model = Model::build(&cfg)?;
    if tensors.len() != model.slots().len() {
        return Err(Error::config(format!(
            "checkpoint holds {} tensors, config expects {}",
            tensors.len(),
            model.slots().len()
        )));
    }
    for (i, raw) in tensors.into_iter().enumerate() {
        let slot = &model.slots()[i];
        if slot.name != raw.name || slot.tensor.shape() != raw.shape.as_slice() {
            return Err(Error::config(format!(
                "tensor {} {:?} does not match config ({} {:?})",
                raw.name,
                raw.shape,
                slot.name,
                slot.tensor.shape()
            )));
        }
        let t = if slot.tensor.requires_grad() {
            Tensor::param(raw.data, &raw.shape)?
        } else {
            Tensor::new(raw.data, &raw.shape)?
        };
        model.set_slot(i, t)?;
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(model)?)?;
    Ok(())
}

/// Loads a checkpoint. A missing file is a format error.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let buf = fs::read(path)
        .map_err(|e| Error::format(None, format!("cannot read checkpoint {}: {e}", path.display())))?;
    from_bytes(&buf)
}
