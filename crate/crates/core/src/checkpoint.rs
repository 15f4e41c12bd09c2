//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic            8 bytes  "SPERCKPT"
//! version          u32
//! meta length      u64, followed by that many bytes of JSON
//! tensor count     u32
//! per tensor:
//!   name length    u32, followed by the UTF-8 name
//!   ndim           u32
//!   dims           ndim x u64
//!   payload        prod(dims) x f64
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{ModelParams, ModelShape};
use crate::params::ParamSet;

pub const MAGIC: &[u8; 8] = b"SPERCKPT";
pub const VERSION: u32 = 1;

/// Everything needed to rebuild the parameter layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: RunConfig,
    pub shape: ModelShape,
}

pub fn write_checkpoint<W: Write>(mut w: W, meta: &CheckpointMeta, params: &ModelParams) -> Result<()> {
    let json = serde_json::to_vec(meta).expect("metadata serializes");
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    let mut tensors = Vec::new();
    params.visit("", &mut |name, shape, data| tensors.push((name.to_string(), shape.to_vec(), data.to_vec())));
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, shape, data) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::parse("checkpoint", format!("truncated while reading {what}")),
            _ => Error::Io(e),
        })?;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8, what)?.try_into().unwrap()))
    }
}

/// Upper bound on lengths read from the header, to reject garbage before
/// allocating.
const MAX_LEN: u64 = 1 << 32;

pub fn read_checkpoint<R: Read>(r: R) -> Result<(CheckpointMeta, ModelParams)> {
    let mut r = Reader { inner: r };
    if r.bytes(8, "magic")? != MAGIC {
        return Err(Error::parse("checkpoint", "not a checkpoint file (bad magic)"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::parse("checkpoint", format!("unsupported version {version}, expected {VERSION}")));
    }
    let meta_len = r.u64("metadata length")?;
    if meta_len > MAX_LEN {
        return Err(Error::parse("checkpoint", "metadata length out of range"));
    }
    let meta: CheckpointMeta = serde_json::from_slice(&r.bytes(meta_len as usize, "metadata")?)
        .map_err(|e| Error::parse("checkpoint metadata", e.to_string()))?;
    meta.config.validate()?;
    let mut params = ModelParams::zeros(&meta.config.model, &meta.shape);
    let mut expected = Vec::new();
    params.visit("", &mut |name, shape, _| expected.push((name.to_string(), shape.to_vec())));

    let count = r.u32("tensor count")? as usize;
    if count != expected.len() {
        return Err(Error::parse(
            "checkpoint",
            format!("{count} tensors stored, configuration needs {}", expected.len()),
        ));
    }
    let mut flat = Vec::with_capacity(params.n_params());
    for (want_name, want_shape) in &expected {
        let name_len = r.u32("tensor name length")? as u64;
        if name_len > MAX_LEN {
            return Err(Error::parse("checkpoint", "tensor name length out of range"));
        }
        let name = String::from_utf8(r.bytes(name_len as usize, "tensor name")?)
            .map_err(|_| Error::parse("checkpoint", "tensor name is not UTF-8"))?;
        let ndim = r.u32("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(r.u64("tensor shape")? as usize);
        }
        if &name != want_name || &shape != want_shape {
            return Err(Error::parse(
                format!("checkpoint tensor '{name}'"),
                format!("expected '{want_name}' with shape {want_shape:?}, found shape {shape:?}"),
            ));
        }
        let len: usize = shape.iter().product();
        let raw = r.bytes(len * 8, &format!("tensor '{name}'"))?;
        flat.extend(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())));
    }
    params.fill_from_flat(&flat);
    Ok((meta, params))
}

pub fn save_checkpoint(path: &Path, meta: &CheckpointMeta, params: &ModelParams) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(&mut file, meta, params)?;
    file.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointMeta, ModelParams)> {
    let file = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(file))
}
