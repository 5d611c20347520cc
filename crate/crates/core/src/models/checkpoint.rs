//! Binary checkpoint format (all integers and floats little-endian):
//!
//! ```text
//! "XMAL"  u32 version
//! u32 config_len   config_len bytes of canonical config text
//! u32 n_params
//! n_params × { u32 name_len, name bytes, u32 rank, rank × u64 dim, f64 payload }
//! ```

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::models::bundle::ModelBundle;
use crate::models::config::ModelConfig;
use crate::numerics::{ParamGroup, Tensor};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"XMAL";
pub const FORMAT_VERSION: u32 = 1;

pub fn to_bytes<S: Scalar>(bundle: &ModelBundle<S>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let cfg = bundle.config.canonical();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    out.extend_from_slice(&(bundle.params.len() as u32).to_le_bytes());
    for (_, p) in bundle.params.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in p.value.data() {
            out.extend_from_slice(&x.as_f64().to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Raw records of a checkpoint, in file order.
pub struct Records {
    pub config: ModelConfig,
    pub params: Vec<(String, Tensor<f64>)>,
}

pub fn parse(bytes: &[u8]) -> Result<Records> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let n = c.u32()? as usize;
    let text = std::str::from_utf8(c.take(n)?).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let config = ModelConfig::from_canonical(text)?;
    let count = c.u32()? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let n = c.u32()? as usize;
        let name = String::from_utf8(c.take(n)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let rank = c.u32()? as usize;
        let dims = (0..rank)
            .map(|_| c.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len: usize = dims.iter().product();
        let data = (0..len).map(|_| c.f64()).collect::<Result<Vec<_>>>()?;
        params.push((name, Tensor::new(dims, data)?));
    }
    if c.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(Records { config, params })
}

/// Overwrites parameters of `bundle` from `records`. With `groups` set,
/// only those groups are touched. Every touched parameter must be present
/// with identical shape.
pub fn apply<S: Scalar>(bundle: &mut ModelBundle<S>, records: &Records, groups: Option<&[ParamGroup]>) -> Result<()> {
    let ids: Vec<_> = bundle
        .params
        .iter()
        .filter(|(_, p)| groups.is_none_or(|g| g.contains(&p.group)))
        .map(|(id, _)| id)
        .collect();
    let mut staged = Vec::with_capacity(ids.len());
    for id in ids {
        let p = bundle.params.get(id);
        let (_, t) = records
            .params
            .iter()
            .find(|(n, _)| *n == p.name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{}`", p.name)))?;
        if t.shape() != p.value.shape() {
            return Err(Error::CheckpointMismatch {
                name: p.name.clone(),
                expected: p.value.shape().to_vec(),
                found: t.shape().to_vec(),
            });
        }
        staged.push((id, t.cast::<S>()));
    }
    for (id, t) in staged {
        bundle.params.get_mut(id).value = t;
    }
    Ok(())
}

pub fn from_bytes<S: Scalar>(bytes: &[u8]) -> Result<ModelBundle<S>> {
    let rec = parse(bytes)?;
    let mut bundle = ModelBundle::new(rec.config.clone(), 0)?;
    if rec.params.len() != bundle.params.len() {
        return Err(Error::Checkpoint(format!(
            "{} parameters stored, config defines {}",
            rec.params.len(),
            bundle.params.len()
        )));
    }
    apply(&mut bundle, &rec, None)?;
    Ok(bundle)
}

pub fn save<S: Scalar>(bundle: &ModelBundle<S>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&to_bytes(bundle))?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?
        .read_to_end(&mut buf)?;
    Ok(buf)
}

pub fn load<S: Scalar>(path: &Path) -> Result<ModelBundle<S>> {
    from_bytes(&read(path)?)
}

/// Git-style content hash: SHA-256 over `"blob <len>\0" ++ bytes`.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

/// Starting point for a bundle's parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum InitMode {
    Random,
    /// Every parameter restored bit-exactly from a checkpoint.
    FromCheckpoint(PathBuf),
    /// Random student side, teacher parameters taken from a checkpoint.
    TeacherPretrained(PathBuf),
}

pub fn init_bundle<S: Scalar>(config: ModelConfig, seed: u64, mode: &InitMode) -> Result<ModelBundle<S>> {
    let mut bundle = ModelBundle::new(config, seed)?;
    match mode {
        InitMode::Random => {}
        InitMode::FromCheckpoint(p) => apply(&mut bundle, &parse(&read(p)?)?, None)?,
        InitMode::TeacherPretrained(p) => apply(&mut bundle, &parse(&read(p)?)?, Some(&[ParamGroup::Teacher]))?,
    }
    Ok(bundle)
}
