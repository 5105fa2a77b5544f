//! Versioned binary checkpoint.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "ATRK"  u32 version  u32 config_len  config_len bytes of key=value text
//! u32 tensor_count
//! repeated: u32 name_len, name bytes, u32 rank, rank x u64 dims, f32 values
//! ```
//!
//! Parameters come first in construction order, followed by batch-norm
//! running statistics. Network metadata rides in the config record under
//! `meta.` keys.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Network, NetworkConfig};
use crate::error::{Error, Result};
use crate::kv::KvMap;

pub const MAGIC: &[u8; 4] = b"ATRK";
pub const FORMAT_VERSION: u32 = 1;
const META_PREFIX: &str = "meta.";

pub fn write_checkpoint<W: Write>(net: &Network, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let mut kv = net.config().to_kv();
    for (k, v) in net.metadata().iter() {
        kv.set(&format!("{META_PREFIX}{k}"), v);
    }
    let cfg = kv.to_text();
    w.write_all(&(cfg.len() as u32).to_le_bytes())?;
    w.write_all(cfg.as_bytes())?;
    let tensors = net
        .param_names()
        .iter()
        .zip(net.params())
        .chain(net.buffer_names().iter().zip(net.buffers()));
    let count = net.params().len() + net.buffers().len();
    w.write_all(&(count as u32).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.dims() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.len() * 4);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

fn eof_to_format(e: io::Error) -> Error {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        Error::Format("truncated checkpoint".into())
    } else {
        Error::Io(e)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(eof_to_format)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(eof_to_format)?;
    Ok(u64::from_le_bytes(b))
}

fn read_bytes<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.take(n as u64).read_to_end(&mut buf)?;
    if buf.len() != n {
        return Err(Error::Format("truncated checkpoint".into()));
    }
    Ok(buf)
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Network> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(eof_to_format)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic bytes {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let cfg_len = read_u32(&mut r)? as usize;
    let cfg_text = String::from_utf8(read_bytes(&mut r, cfg_len)?)
        .map_err(|_| Error::Format("config record is not UTF-8".into()))?;
    let kv = KvMap::parse(&cfg_text)?;
    let config = NetworkConfig::from_kv(&kv).map_err(|e| Error::Format(format!("config record: {e}")))?;
    let mut net = Network::build(&config, 0)?;
    for (k, v) in kv.iter() {
        if let Some(key) = k.strip_prefix(META_PREFIX) {
            net.stamp(key, v);
        }
    }
    let count = read_u32(&mut r)? as usize;
    let (np, nb) = (net.params().len(), net.buffers().len());
    if count != np + nb {
        return Err(Error::Format(format!(
            "tensor table has {count} entries, config implies {}",
            np + nb
        )));
    }
    for i in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let name = String::from_utf8(read_bytes(&mut r, name_len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        if rank > 8 {
            return Err(Error::Format(format!("tensor `{name}` has implausible rank {rank}")));
        }
        let dims = (0..rank)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let (expected_name, target) = if i < np {
            (&net.param_names()[i].clone(), &mut net.params_mut()[i])
        } else {
            (&net.buffer_names()[i - np].clone(), &mut net.buffers_mut()[i - np])
        };
        if &name != expected_name || dims != target.dims() {
            return Err(Error::Format(format!(
                "tensor {i}: found `{name}` {dims:?}, config expects `{expected_name}` {:?}",
                target.dims()
            )));
        }
        let raw = read_bytes(&mut r, target.len() * 4)?;
        for (v, chunk) in target.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
            *v = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
        }
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after tensor table".into()));
    }
    Ok(net)
}

pub fn save_checkpoint(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    write_checkpoint(net, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Network> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
