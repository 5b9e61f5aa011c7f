//! Checkpoint file format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"TPDC"
//! version u32
//! config  u64   model config hash
//! step    u64   optimizer step counter
//! count   u32   manifest length
//! entry*  name_len u32, name bytes, dtype u8, ndim u32, dims u64*
//! data    raw scalar buffers, one per entry, in manifest order
//! ```
//!
//! Each parameter contributes three entries: `<name>`, `<name>.adam_m`
//! and `<name>.adam_v`, so a round trip restores optimizer state
//! bit-for-bit.

use super::{Param, UNetParams};
use crate::error::CheckpointError;
use crate::tensor::{Dtype, Scalar, Tensor};
use std::fs;
use std::io::Write;
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TPDC";
pub const CHECKPOINT_VERSION: u32 = 1;

const MOMENT_M: &str = ".adam_m";
const MOMENT_V: &str = ".adam_v";

pub fn save_checkpoint<T: Scalar>(params: &UNetParams<T>, path: &Path) -> crate::Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&params.config_hash.to_le_bytes());
    buf.extend_from_slice(&params.step.to_le_bytes());

    let count = (params.len() * 3) as u32;
    buf.extend_from_slice(&count.to_le_bytes());

    let write_entry = |buf: &mut Vec<u8>, name: &str, shape: &[usize]| {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(T::DTYPE.tag());
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
    };
    for (name, p) in params.iter() {
        write_entry(&mut buf, name, p.value.shape());
        write_entry(&mut buf, &format!("{name}{MOMENT_M}"), p.m.shape());
        write_entry(&mut buf, &format!("{name}{MOMENT_V}"), p.v.shape());
    }
    for (_, p) in params.iter() {
        for buffer in [&p.value, &p.m, &p.v] {
            for &v in buffer.data() {
                v.write_le(&mut buf);
            }
        }
    }

    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Truncated(what));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> crate::Result<UNetParams<T>> {
    let bytes = fs::read(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };

    let magic = r.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::VersionMismatch(version).into());
    }
    let config_hash = r.u64("config hash")?;
    let step = r.u64("step counter")?;
    let count = r.u32("manifest length")? as usize;

    struct Entry {
        name: String,
        shape: Vec<usize>,
    }
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32("entry name length")? as usize;
        let name = String::from_utf8(r.take(name_len, "entry name")?.to_vec())
            .map_err(|_| CheckpointError::Truncated("entry name utf8"))?;
        let dtype_tag = r.take(1, "entry dtype")?[0];
        let dtype = Dtype::from_tag(dtype_tag)
            .ok_or(CheckpointError::Incompatible(format!("unknown dtype tag {dtype_tag}")))?;
        if dtype != T::DTYPE {
            return Err(CheckpointError::Incompatible(format!(
                "entry {name} has dtype {dtype:?}, expected {:?}",
                T::DTYPE
            ))
            .into());
        }
        let ndim = r.u32("entry rank")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64("entry extent")? as usize);
        }
        entries.push(Entry { name, shape });
    }

    let elem = T::DTYPE.size_bytes();
    let mut buffers = Vec::with_capacity(count);
    for e in &entries {
        let numel: usize = e.shape.iter().product();
        let raw = r.take(numel * elem, "parameter data")?;
        let data: Vec<T> = raw.chunks_exact(elem).map(T::read_le).collect();
        buffers.push(
            Tensor::new(e.shape.clone(), data)
                .map_err(|e| CheckpointError::Incompatible(e.to_string()))?,
        );
    }

    if count % 3 != 0 {
        return Err(CheckpointError::Incompatible(format!(
            "manifest length {count} is not a multiple of 3"
        ))
        .into());
    }
    let mut params = UNetParams::new();
    params.step = step;
    params.config_hash = config_hash;
    let mut it = entries.into_iter().zip(buffers);
    while let Some((e_val, value)) = it.next() {
        let (e_m, m) = it.next().expect("length checked");
        let (e_v, v) = it.next().expect("length checked");
        if e_m.name != format!("{}{MOMENT_M}", e_val.name)
            || e_v.name != format!("{}{MOMENT_V}", e_val.name)
        {
            return Err(CheckpointError::Incompatible(format!(
                "moments for {} out of order",
                e_val.name
            ))
            .into());
        }
        let shape = value.shape().to_vec();
        params.insert_param(
            e_val.name,
            Param { value, grad: Tensor::zeros(&shape), m, v },
        );
    }
    Ok(params)
}
