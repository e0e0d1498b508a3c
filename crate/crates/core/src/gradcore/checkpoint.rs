//! Binary parameter checkpoints.
//!
//! Layout (little endian): magic `CDECKPT\n`, `u32` version, `u32` store
//! count, then per store its name and parameter count, and per parameter its
//! name, block name, `u32` rows, `u32` cols and `rows·cols` raw `f64` values.
//! Strings are `u32` length-prefixed UTF-8.

use std::io::{Read, Write};

use super::params::{Block, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"CDECKPT\n";
pub const VERSION: u32 = 1;

fn structural(msg: impl Into<String>) -> Error {
    Error::Structural(msg.into())
}

fn put_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    put_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| structural(format!("truncated checkpoint: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

fn get_str(r: &mut impl Read) -> Result<String> {
    let n = get_u32(r)? as usize;
    if n > 1 << 16 {
        return Err(structural("checkpoint string too long"));
    }
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)
        .map_err(|e| structural(format!("truncated checkpoint: {e}")))?;
    String::from_utf8(b).map_err(|_| structural("checkpoint string is not utf-8"))
}

pub fn write_checkpoint<S: Scalar>(
    w: &mut impl Write,
    stores: &[(&str, &ParamStore<S>)],
) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    put_u32(w, VERSION)?;
    put_u32(w, stores.len() as u32)?;
    for (name, store) in stores {
        put_str(w, name)?;
        put_u32(w, store.len() as u32)?;
        for (_, p) in store.iter() {
            put_str(w, &p.name)?;
            put_str(w, p.block.name())?;
            put_u32(w, p.value.rows() as u32)?;
            put_u32(w, p.value.cols() as u32)?;
            for &x in p.value.data() {
                w.write_all(&x.as_f64().to_le_bytes())?;
            }
        }
    }
    Ok(())
}

/// Reads every store in a checkpoint. Optimizer moments are reset to zero.
pub fn read_checkpoint<S: Scalar>(r: &mut impl Read) -> Result<Vec<(String, ParamStore<S>)>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| structural("checkpoint too short"))?;
    if &magic != MAGIC {
        return Err(structural("not a checkpoint file"));
    }
    let version = get_u32(r)?;
    if version != VERSION {
        return Err(structural(format!("unsupported checkpoint version {version}")));
    }
    let n_stores = get_u32(r)?;
    let mut out = Vec::new();
    for _ in 0..n_stores {
        let name = get_str(r)?;
        let n = get_u32(r)?;
        let mut store = ParamStore::new();
        for _ in 0..n {
            let pname = get_str(r)?;
            let bname = get_str(r)?;
            let block = Block::from_name(&bname)
                .ok_or_else(|| structural(format!("unknown block {bname:?}")))?;
            let rows = get_u32(r)? as usize;
            let cols = get_u32(r)? as usize;
            let mut data = Vec::with_capacity(rows * cols);
            let mut b = [0u8; 8];
            for _ in 0..rows * cols {
                r.read_exact(&mut b)
                    .map_err(|e| structural(format!("truncated checkpoint: {e}")))?;
                data.push(S::of(f64::from_le_bytes(b)));
            }
            store.add(pname, block, Tensor::from_vec(rows, cols, data)?);
        }
        out.push((name, store));
    }
    Ok(out)
}
