//! Binary parameter container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "NDNUMCKP"
//! version  u32      currently 1
//! meta     u32 length + UTF-8 bytes (free-form, e.g. a serialized net config)
//! count    u32      number of records
//! record   u16 name length + UTF-8 name
//!          u8  group tag (b'h' | b'y' | b's')
//!          u8  rank, then rank × u64 dims
//!          numel × f64 payload
//! ```

use std::io::{Read, Write};

use crate::error::{NdError, Result};
use crate::params::{Group, ParamStore};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"NDNUMCKP";
pub const VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> NdError {
    NdError::Checkpoint(msg.into())
}

pub fn write_checkpoint<W: Write>(mut w: W, store: &ParamStore, meta: &str) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(meta.len() as u32).to_le_bytes())?;
    w.write_all(meta.as_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for p in store.iter() {
        let name = p.name.as_bytes();
        if name.len() > u16::MAX as usize {
            return Err(bad(format!("parameter name too long: {}", p.name)));
        }
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[p.group.tag(), p.value.shape().len() as u8])?;
        for &d in p.value.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_exact<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| bad(format!("truncated checkpoint: {e}")))?;
    Ok(buf)
}

/// Reads a checkpoint; returns the parameters (with fresh optimizer state)
/// and the metadata string.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(ParamStore, String)> {
    let magic: [u8; 8] = read_exact(&mut r)?;
    if &magic != MAGIC {
        return Err(bad("not a parameter checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(read_exact(&mut r)?);
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let meta_len = u32::from_le_bytes(read_exact(&mut r)?) as usize;
    let mut meta = vec![0u8; meta_len];
    r.read_exact(&mut meta)
        .map_err(|e| bad(format!("truncated metadata: {e}")))?;
    let meta = String::from_utf8(meta).map_err(|_| bad("metadata is not UTF-8"))?;
    let count = u32::from_le_bytes(read_exact(&mut r)?);
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(read_exact(&mut r)?) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)
            .map_err(|e| bad(format!("truncated record name: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| bad("parameter name is not UTF-8"))?;
        let [tag, rank] = read_exact::<2, _>(&mut r)?;
        let group = Group::from_tag(tag).ok_or_else(|| bad(format!("bad group tag {tag:#x} for `{name}`")))?;
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(read_exact(&mut r)?) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(f64::from_le_bytes(read_exact(&mut r)?));
        }
        store.insert(name, group, Tensor::new(shape, data)?)?;
    }
    Ok((store, meta))
}
