//! Versioned binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "MESESCKP"
//! version    u32      1
//! manifest   u64 length + UTF-8 JSON bytes
//! count      u64      number of tensors
//! per tensor:
//!   name     u32 length + UTF-8 bytes
//!   ndim     u32
//!   dims     ndim x u64
//!   values   numel x f64 (IEEE-754 bits)
//! ```
//!
//! Values are stored as raw bits, so a save/load/save cycle is byte-identical.

use std::io::{Read, Write};

use super::params::ParamRegistry;
use super::tensor::Tensor;
use super::KernelError;

pub const MAGIC: &[u8; 8] = b"MESESCKP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_registry(manifest: String, reg: &ParamRegistry) -> Self {
        Self {
            manifest,
            tensors: reg.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
        }
    }

    /// Copies every stored tensor into `reg`; names absent from the
    /// checkpoint keep their current values.
    pub fn load_into(&self, reg: &mut ParamRegistry) -> Result<usize, KernelError> {
        let mut loaded = 0;
        for (name, t) in &self.tensors {
            if reg.id(name).is_some() {
                reg.load_value(name, t.clone())?;
                loaded += 1;
            }
        }
        Ok(loaded)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, self).expect("writing to a Vec cannot fail");
        buf
    }
}

pub fn write_checkpoint(w: &mut impl Write, ckpt: &Checkpoint) -> Result<(), KernelError> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(ckpt.manifest.len() as u64).to_le_bytes())?;
    w.write_all(ckpt.manifest.as_bytes())?;
    w.write_all(&(ckpt.tensors.len() as u64).to_le_bytes())?;
    for (name, t) in &ckpt.tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.ndim() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32, KernelError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64, KernelError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_string(r: &mut impl Read, len: usize) -> Result<String, KernelError> {
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| KernelError::Format(e.to_string()))
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Checkpoint, KernelError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(KernelError::Format("bad magic".into()));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(KernelError::Format(format!("unsupported version {version}")));
    }
    let mlen = read_u64(r)? as usize;
    let manifest = read_string(r, mlen)?;
    let count = read_u64(r)? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let nlen = read_u32(r)? as usize;
        let name = read_string(r, nlen)?;
        let ndim = read_u32(r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * 8];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    Ok(Checkpoint { manifest, tensors })
}
