//! WFCK parameter checkpoints.
//!
//! Layout (little-endian): magic `WFCK`, version u8 = 1, parameter count u32,
//! then per parameter: name length u16, UTF-8 name, rank u8, rank x u32 dims,
//! float64 payload.

use std::path::Path;

use super::tensor::{checked_numel, Tensor};
use crate::codec::{self, Reader};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"WFCK";
const VERSION: u8 = 1;

pub fn encode_checkpoint(params: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let count =
        u32::try_from(params.len()).map_err(|_| Error::DimensionOverflow(format!("{} parameters", params.len())))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in params {
        let len = u16::try_from(name.len()).map_err(|_| Error::DimensionOverflow(format!("parameter name {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(t.rank()).map_err(|_| Error::DimensionOverflow(format!("rank {}", t.rank())))?;
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::DimensionOverflow(format!("dim {d}")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        codec::put_f64_slice(&mut out, t.data());
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader::new(bytes, "WFCK");
    r.expect_header(MAGIC, VERSION)?;
    let count = r.u32()? as usize;
    let mut params = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = r.utf8(len)?;
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = checked_numel(&shape)?;
        let data = r.f64_vec(numel)?;
        params.push((name, Tensor::new(shape, data)?));
    }
    if r.remaining() != 0 {
        return Err(r.malformed(format!("{} trailing bytes", r.remaining())));
    }
    Ok(params)
}

pub fn save_checkpoint(params: &[(String, Tensor)], path: impl AsRef<Path>) -> Result<()> {
    codec::write_file(path.as_ref(), &encode_checkpoint(params)?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    decode_checkpoint(&codec::read_file(path.as_ref())?)
}
