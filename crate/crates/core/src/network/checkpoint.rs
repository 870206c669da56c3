//! Binary checkpoints: an 8-byte magic, a little-endian `u64` header length,
//! a JSON header, then every parameter as raw little-endian `f32`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Network, NetworkConfig};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"GZBCKPT1";
pub const CHECKPOINT_VERSION: &str = "gazebench-net-1";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: String,
    config: NetworkConfig,
    params: Vec<TensorEntry>,
}

pub fn to_bytes(net: &Network) -> Result<Vec<u8>> {
    let header = Header {
        version: CHECKPOINT_VERSION.to_string(),
        config: net.cfg.clone(),
        params: net.params.params().iter().map(|p| TensorEntry { name: p.name.clone(), shape: p.shape.clone() }).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + net.params.scalar_count() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in net.params.params() {
        for v in &p.value {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Network> {
    let mut r = bytes;
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| Error::Schema("checkpoint truncated before magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::Schema("not a checkpoint file (bad magic)".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(|_| Error::Schema("checkpoint truncated before header".into()))?;
    let len = u64::from_le_bytes(len) as usize;
    if len > r.len() {
        return Err(Error::Schema("checkpoint header length exceeds file".into()));
    }
    let (json, mut body) = r.split_at(len);
    let header: Header = serde_json::from_slice(json).map_err(|e| Error::Schema(format!("checkpoint header: {e}")))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::Version { expected: CHECKPOINT_VERSION.to_string(), found: header.version });
    }
    header.config.validate().map_err(|e| Error::Schema(e.to_string()))?;
    let mut net = Network::new(header.config, 0);
    if header.params.len() != net.params.len() {
        return Err(Error::Schema(format!(
            "checkpoint has {} tensors, architecture expects {}",
            header.params.len(),
            net.params.len()
        )));
    }
    for (entry, p) in header.params.iter().zip(net.params.params_mut()) {
        if entry.name != p.name || entry.shape != p.shape {
            return Err(Error::Schema(format!("tensor {} {:?} does not match {} {:?}", entry.name, entry.shape, p.name, p.shape)));
        }
        let n = p.value.len() * 4;
        if body.len() < n {
            return Err(Error::Schema(format!("checkpoint truncated in tensor {}", p.name)));
        }
        let (chunk, rest) = body.split_at(n);
        for (v, b) in p.value.iter_mut().zip(chunk.chunks_exact(4)) {
            *v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        }
        body = rest;
    }
    if !body.is_empty() {
        return Err(Error::Schema(format!("{} trailing bytes after the last tensor", body.len())));
    }
    Ok(net)
}

pub fn save(net: &Network, path: &Path) -> Result<()> {
    let bytes = to_bytes(net)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Network> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
