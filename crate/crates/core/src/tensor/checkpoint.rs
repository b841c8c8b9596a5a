//! Binary checkpoint: magic, version, config echo, then one record per parameter.
//! Integers are unsigned 32-bit little-endian, values 64-bit little-endian floats.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{ParameterStore, Tensor};
use crate::error::{Error, Result};
use crate::io_util::{read_config_block, write_config_block, ByteReader};

pub const CKPT_MAGIC: &[u8; 8] = b"DMNCKPT1";
pub const CKPT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: Vec<(String, String)>,
    pub params: ParameterStore,
}

pub fn encode_checkpoint(config: &[(String, String)], params: &ParameterStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    write_config_block(&mut out, config);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t, _) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = ByteReader::new(bytes);
    if r.take(8)? != CKPT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(Error::Format(format!("checkpoint version {version}, expected {CKPT_VERSION}")));
    }
    let config = read_config_block(&mut r)?;
    let count = r.u32()? as usize;
    let mut params = ParameterStore::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let t = Tensor::new(&shape, data).map_err(|e| Error::Format(format!("parameter `{name}`: {e}")))?;
        params.insert(name, t)?;
    }
    if !r.is_empty() {
        return Err(Error::Format("trailing bytes after last parameter".into()));
    }
    Ok(Checkpoint { config, params })
}

pub fn write_checkpoint(path: impl AsRef<Path>, config: &[(String, String)], params: &ParameterStore) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_checkpoint(config, params))?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes)
}
