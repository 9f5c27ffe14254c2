//! `PNTW` weight files: magic, tensor count, then per tensor its UTF-8 name,
//! rank, dims and raw f64 data. Every integer is a little-endian u32.

use std::io::{Read, Write};
use std::path::Path;

use super::{ParamSet, Tensor};
use crate::error::{PintError, Result};
use crate::io_util::{read_exact_or_truncated, read_u32};

pub const PARAMS_MAGIC: &[u8; 4] = b"PNTW";

pub fn write_params_to(mut w: impl Write, params: &ParamSet) -> Result<()> {
    w.write_all(PARAMS_MAGIC)?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_params_from(mut r: impl Read) -> Result<ParamSet> {
    let mut magic = [0u8; 4];
    read_exact_or_truncated(&mut r, &mut magic, "weights magic")?;
    if &magic != PARAMS_MAGIC {
        return Err(PintError::Format(format!("bad weights magic {magic:?}")));
    }
    let count = read_u32(&mut r, "tensor count")?;
    let mut out = ParamSet::new();
    for _ in 0..count {
        let len = read_u32(&mut r, "name length")? as usize;
        let mut name = vec![0u8; len];
        read_exact_or_truncated(&mut r, &mut name, "tensor name")?;
        let name = String::from_utf8(name).map_err(|_| PintError::Format("tensor name is not UTF-8".into()))?;
        let rank = read_u32(&mut r, "rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r, "dimension")? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * 8];
        read_exact_or_truncated(&mut r, &mut raw, &format!("data of {name}"))?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        out.insert(name, Tensor::new(shape, data)?)?;
    }
    Ok(out)
}

pub fn write_params(path: &Path, params: &ParamSet) -> Result<()> {
    let mut buf = Vec::new();
    write_params_to(&mut buf, params)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_params(path: &Path) -> Result<ParamSet> {
    let bytes = std::fs::read(path)?;
    read_params_from(bytes.as_slice())
}
