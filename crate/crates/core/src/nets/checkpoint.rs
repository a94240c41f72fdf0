//! Versioned little-endian parameter files.
//!
//! Layout: magic `BGDBNET\0`, `u32` version, `u32` length + architecture
//! JSON, `u32` tensor count, then per tensor `u32` name length, name bytes,
//! `u32` rank and `u64` dims; finally a `u64` scalar count followed by all
//! tensor data as `f64` in tensor order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::{Backbone, BackboneConfig, Module, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"BGDBNET\0";
const VERSION: u32 = 1;

/// Architecture description plus named parameters.
#[derive(Debug, Clone)]
pub struct Checkpoint<A> {
    pub architecture: A,
    pub params: ParamStore,
}

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn get_u32(r: &mut impl Read) -> Result<usize> {
    let mut b = [0; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_bytes(r: &mut impl Read, len: usize) -> Result<Vec<u8>> {
    let mut b = vec![0; len];
    r.read_exact(&mut b)?;
    Ok(b)
}

pub fn write_checkpoint<A: Serialize>(w: &mut impl Write, architecture: &A, params: &ParamStore) -> Result<()> {
    let json = serde_json::to_vec(architecture).map_err(|e| Error::Checkpoint(e.to_string()))?;
    w.write_all(MAGIC)?;
    put_u32(w, VERSION as usize)?;
    put_u32(w, json.len())?;
    w.write_all(&json)?;
    put_u32(w, params.len())?;
    for (name, t) in params.names().iter().zip(params.tensors()) {
        put_u32(w, name.len())?;
        w.write_all(name.as_bytes())?;
        put_u32(w, t.ndim())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
    }
    w.write_all(&(params.num_scalars() as u64).to_le_bytes())?;
    for t in params.tensors() {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<A: DeserializeOwned>(r: &mut impl Read) -> Result<Checkpoint<A>> {
    if get_bytes(r, MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = get_u32(r)?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let json_len = get_u32(r)?;
    let architecture =
        serde_json::from_slice(&get_bytes(r, json_len)?).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let count = get_u32(r)?;
    let mut headers = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = get_u32(r)?;
        let name = String::from_utf8(get_bytes(r, name_len)?).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let rank = get_u32(r)?;
        let shape = (0..rank).map(|_| Ok(get_u64(r)? as usize)).collect::<Result<Vec<_>>>()?;
        headers.push((name, shape));
    }
    let total = get_u64(r)? as usize;
    let declared: usize = headers.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    if total != declared {
        return Err(Error::Checkpoint(format!("scalar count {total} disagrees with shapes ({declared})")));
    }
    let mut params = ParamStore::default();
    for (name, shape) in headers {
        let n: usize = shape.iter().product();
        let data = get_bytes(r, 8 * n)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        params.push(name, Tensor::parameter(data, &shape)?);
    }
    Ok(Checkpoint { architecture, params })
}

pub fn save_checkpoint<A: Serialize>(path: &Path, architecture: &A, params: &ParamStore) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, architecture, params)?;
    Ok(w.flush()?)
}

pub fn load_checkpoint<A: DeserializeOwned>(path: &Path) -> Result<Checkpoint<A>> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}

impl Backbone {
    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.config(), self.params())
    }

    /// Rebuilds the architecture and loads its parameters by name.
    pub fn load(path: &Path) -> Result<Backbone> {
        let ckpt: Checkpoint<BackboneConfig> = load_checkpoint(path)?;
        let mut net = Backbone::new(&ckpt.architecture, 0)?;
        net.params_mut().load_from(&ckpt.params)?;
        Ok(net)
    }
}
