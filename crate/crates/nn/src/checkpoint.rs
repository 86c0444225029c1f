//! Binary checkpoint of named tensors.
//!
//! Layout (little-endian): magic `AMCK`, `u16` version, `u32` tensor count, then per
//! tensor: `u32` name length + UTF-8 name, `u8` trainable flag, `u8` rank, `u32` dims,
//! `f32` values. A trailing `u32` length + UTF-8 block carries free-form `key=value`
//! metadata lines (possibly empty).

use std::io::{Read, Write};

use crate::error::{NnError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"AMCK";
pub const VERSION: u16 = 1;

pub type Metadata = Vec<(String, String)>;

pub fn write_checkpoint<W: Write>(mut w: W, store: &ParamStore, metadata: &[(String, String)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (_, name, t) in store.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[u8::from(t.trainable()), t.rank() as u8])?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    let mut meta = String::new();
    for (k, v) in metadata {
        if k.contains(['=', '\n']) || v.contains('\n') {
            return Err(NnError::Format(format!("metadata entry `{k}` is not a single key=value line")));
        }
        meta.push_str(&format!("{k}={v}\n"));
    }
    w.write_all(&(meta.len() as u32).to_le_bytes())?;
    w.write_all(meta.as_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_string<R: Read>(r: &mut R, len: usize) -> Result<String> {
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| NnError::Format(format!("invalid UTF-8: {e}")))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(ParamStore, Metadata)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NnError::Format(format!("bad magic {magic:?}")));
    }
    let mut vb = [0u8; 2];
    r.read_exact(&mut vb)?;
    let version = u16::from_le_bytes(vb);
    if version != VERSION {
        return Err(NnError::Format(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let name = read_string(&mut r, name_len)?;
        let mut flags = [0u8; 2];
        r.read_exact(&mut flags)?;
        let dims = (0..flags[1]).map(|_| read_u32(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let mut raw = vec![0u8; 4 * n];
        r.read_exact(&mut raw)?;
        let data = raw.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]]))).collect();
        let t = Tensor::new(&dims, data)?.with_trainable(flags[0] != 0);
        store.push_raw(name, t)?;
    }
    let meta_len = read_u32(&mut r)? as usize;
    let meta = read_string(&mut r, meta_len)?;
    let metadata = meta
        .lines()
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| NnError::Format(format!("bad metadata line `{l}`")))
        })
        .collect::<Result<_>>()?;
    Ok((store, metadata))
}

pub fn save<P: AsRef<std::path::Path>>(path: P, store: &ParamStore, metadata: &[(String, String)]) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(f, store, metadata)
}

pub fn load<P: AsRef<std::path::Path>>(path: P) -> Result<(ParamStore, Metadata)> {
    read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
}
