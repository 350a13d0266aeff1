//! Binary parameter-store format, little endian:
//!
//! ```text
//! magic "QLPS" | version u32 | flags u32 (bit 0: Adam state) | count u32
//! per parameter:
//!   name_len u32 | name utf-8 | rank u32 | extents u64 * rank | values f64 * n
//!   [if Adam state: steps u64 | m f64 * n | v f64 * n]
//! ```

use std::io::{Read, Write};

use super::{Param, ParamStore, Tensor};
use crate::{Error, Result};

pub const STORE_MAGIC: &[u8; 4] = b"QLPS";
pub const STORE_VERSION: u32 = 1;
const FLAG_ADAM: u32 = 1;

pub fn write_store<W: Write>(store: &ParamStore, with_adam: bool, out: &mut W) -> Result<()> {
    out.write_all(STORE_MAGIC)?;
    out.write_all(&STORE_VERSION.to_le_bytes())?;
    out.write_all(&(if with_adam { FLAG_ADAM } else { 0 }).to_le_bytes())?;
    out.write_all(&(store.len() as u32).to_le_bytes())?;
    for p in store.params() {
        out.write_all(&(p.name.len() as u32).to_le_bytes())?;
        out.write_all(p.name.as_bytes())?;
        out.write_all(&(p.value.shape().len() as u32).to_le_bytes())?;
        for &e in p.value.shape() {
            out.write_all(&(e as u64).to_le_bytes())?;
        }
        write_f64s(out, p.value.values())?;
        if with_adam {
            out.write_all(&p.t.to_le_bytes())?;
            write_f64s(out, &p.m)?;
            write_f64s(out, &p.v)?;
        }
    }
    Ok(())
}

pub fn read_store<R: Read>(input: &mut R) -> Result<ParamStore> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != STORE_MAGIC {
        return Err(Error::Version("not a parameter store (bad magic)".into()));
    }
    let version = read_u32(input)?;
    if version != STORE_VERSION {
        return Err(Error::Version(format!("parameter store version {version}, expected {STORE_VERSION}")));
    }
    let with_adam = read_u32(input)? & FLAG_ADAM != 0;
    let count = read_u32(input)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = read_u32(input)? as usize;
        let mut name = vec![0u8; name_len];
        input.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Version("parameter name is not utf-8".into()))?;
        let rank = read_u32(input)? as usize;
        let shape = (0..rank).map(|_| read_u64(input).map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let value = Tensor::new(shape, read_f64s(input, n)?)?;
        let mut param = Param::new(name, value);
        if with_adam {
            param.t = read_u64(input)?;
            param.m = read_f64s(input, n)?;
            param.v = read_f64s(input, n)?;
        }
        store.push(param)?;
    }
    Ok(store)
}

pub(crate) fn write_f64s<W: Write>(out: &mut W, values: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 8);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub(crate) fn read_f64s<R: Read>(input: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    input.read_exact(&mut buf)?;
    Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}

pub(crate) fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(input: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    input.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
