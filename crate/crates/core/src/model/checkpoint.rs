//! Parameter archive: `FCKP`, u32 tensor count, then per tensor a u32 name
//! length, the UTF-8 name and the tensor in its binary format. Integers are
//! little-endian.

use std::io::{Read, Write};

use super::transformer::{Transformer, TransformerConfig};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FCKP";

pub fn write_checkpoint<W: Write>(model: &Transformer, mut w: W) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(model.params().len() as u32).to_le_bytes())?;
    for (name, t) in model.names().iter().zip(model.params()) {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        t.write_to(&mut w)?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(config: TransformerConfig, mut r: R) -> Result<Transformer> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint archive".into()));
    }
    let count = read_u32(&mut r)? as usize;
    let mut named = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
        named.push((name, Tensor::read_from(&mut r)?));
    }
    Transformer::from_parts(config, named)
}
