//! Binary tensor archive used for checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"GEEATENS"
//! version u32 (= 1)
//! count   u64
//! repeated count times:
//!   name_len u32, name (UTF-8)
//!   dtype    u8   (0 = f32, 1 = f64)
//!   rows     u64
//!   cols     u64
//!   data     rows·cols values, row-major
//! ```
//!
//! Checkpoints are written with `f64` payloads so that a save/load cycle is
//! bit-exact; `f32` payloads are accepted on load and widened.

use std::io::{Read, Write};

use crate::autograd::Matrix;
use crate::error::{GeeaError, Result};
use crate::params::ParamStore;

const MAGIC: &[u8; 8] = b"GEEATENS";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }
}

/// Writes `(name, matrix)` entries.
pub fn write_tensors<'a, W: Write>(
    out: &mut W,
    entries: impl IntoIterator<Item = (&'a str, &'a Matrix)>,
    dtype: DType,
) -> Result<()> {
    let entries: Vec<_> = entries.into_iter().collect();
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(entries.len() as u64).to_le_bytes())?;
    for (name, m) in entries {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&[dtype.tag()])?;
        out.write_all(&(m.nrows() as u64).to_le_bytes())?;
        out.write_all(&(m.ncols() as u64).to_le_bytes())?;
        let mut buf = Vec::with_capacity(m.len() * 8);
        for &x in m.iter() {
            match dtype {
                DType::F32 => buf.extend_from_slice(&(x as f32).to_le_bytes()),
                DType::F64 => buf.extend_from_slice(&x.to_le_bytes()),
            }
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

fn read_exact<const N: usize, R: Read>(input: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    input
        .read_exact(&mut buf)
        .map_err(|e| GeeaError::Archive(format!("truncated archive: {e}")))?;
    Ok(buf)
}

/// Reads every entry in file order.
pub fn read_tensors<R: Read>(input: &mut R) -> Result<Vec<(String, Matrix)>> {
    let magic: [u8; 8] = read_exact(input)?;
    if &magic != MAGIC {
        return Err(GeeaError::Archive("bad magic".into()));
    }
    let version = u32::from_le_bytes(read_exact(input)?);
    if version != VERSION {
        return Err(GeeaError::Archive(format!("unsupported version {version}")));
    }
    let count = u64::from_le_bytes(read_exact(input)?);
    let mut out = Vec::with_capacity(count.min(1 << 16) as usize);
    for _ in 0..count {
        let name_len = u32::from_le_bytes(read_exact(input)?) as usize;
        let mut name = vec![0u8; name_len];
        input
            .read_exact(&mut name)
            .map_err(|e| GeeaError::Archive(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| GeeaError::Archive("name is not UTF-8".into()))?;
        let [tag] = read_exact::<1, _>(input)?;
        let rows = u64::from_le_bytes(read_exact(input)?) as usize;
        let cols = u64::from_le_bytes(read_exact(input)?) as usize;
        let width = match tag {
            0 => 4,
            1 => 8,
            t => return Err(GeeaError::Archive(format!("unknown dtype tag {t} for {name}"))),
        };
        let mut raw = vec![0u8; rows * cols * width];
        input
            .read_exact(&mut raw)
            .map_err(|e| GeeaError::Archive(format!("truncated data for {name}: {e}")))?;
        let values: Vec<f64> = if width == 4 {
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect()
        } else {
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect()
        };
        let m = Matrix::from_shape_vec((rows, cols), values)
            .map_err(|e| GeeaError::Archive(format!("{name}: {e}")))?;
        out.push((name, m));
    }
    Ok(out)
}

pub fn write_store<W: Write>(out: &mut W, store: &ParamStore, dtype: DType) -> Result<()> {
    write_tensors(out, store.iter().map(|(_, n, v)| (n, v)), dtype)
}

pub fn read_store<R: Read>(input: &mut R) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for (name, m) in read_tensors(input)? {
        if store.id(&name).is_some() {
            return Err(GeeaError::Archive(format!("duplicate entry {name}")));
        }
        store.register(name, m);
    }
    Ok(store)
}
