//! Binary parameter checkpoints.
//!
//! Layout (little-endian): magic `PFND`, `u32` version, `u32` tensor count,
//! then per tensor: `u32` name length, UTF-8 name, `u8` dtype (0 = f32,
//! 1 = f64), `u32` rank, `rank` x `u64` extents, raw values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::params::ParamStore;
use super::tensor::{DType, Real, Tensor};
use super::NnError;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PFND";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint<T: Real>(store: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, e) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.code());
        let shape = e.value.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in e.value.data() {
            v.write_le(&mut out);
        }
    }
    out
}

pub fn write_checkpoint<T: Real, W: Write>(store: &ParamStore<T>, mut w: W) -> Result<(), NnError> {
    w.write_all(&encode_checkpoint(store))?;
    w.flush()?;
    Ok(())
}

pub fn save_checkpoint<T: Real>(store: &ParamStore<T>, path: &Path) -> Result<(), NnError> {
    write_checkpoint(store, BufWriter::new(File::create(path)?))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, NnError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, NnError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Read a checkpoint into a store of precision `T`, converting if needed.
pub fn read_checkpoint<T: Real, R: Read>(mut r: R) -> Result<ParamStore<T>, NnError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(NnError::Format("bad checkpoint magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(NnError::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = read_u32(&mut r)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| NnError::Format("name not utf-8".into()))?;
        let mut code = [0u8; 1];
        r.read_exact(&mut code)?;
        let dtype = DType::from_code(code[0]).ok_or_else(|| NnError::Format(format!("dtype {}", code[0])))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * dtype.size()];
        r.read_exact(&mut raw)?;
        let data: Vec<T> = match dtype {
            DType::F32 => raw.chunks_exact(4).map(|b| T::c(f32::read_le(b) as f64)).collect(),
            DType::F64 => raw.chunks_exact(8).map(|b| T::c(f64::read_le(b))).collect(),
        };
        store.insert(name, Tensor::new(shape, data)?);
    }
    Ok(store)
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<ParamStore<T>, NnError> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(values in proptest::collection::vec(-1e6f64..1e6, 1..40), cols in 1usize..5) {
            let rows = values.len() / cols;
            prop_assume!(rows > 0);
            let data = values[..rows * cols].to_vec();
            let mut s = ParamStore::new();
            s.insert("a.w", Tensor::matrix(rows, cols, data.clone()).unwrap());
            s.insert("b", Tensor::new(vec![data.len()], data).unwrap());
            let bytes = encode_checkpoint(&s);
            let back: ParamStore<f64> = read_checkpoint(bytes.as_slice()).unwrap();
            prop_assert_eq!(encode_checkpoint(&back), bytes);
        }
    }

    #[test]
    fn header_layout() {
        let mut s = ParamStore::<f32>::new();
        s.insert("x", Tensor::row(vec![1.5f32]));
        let b = encode_checkpoint(&s);
        assert_eq!(&b[..4], b"PFND");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 1);
        // name len, name, dtype, rank 2, extents 1 and 1, one f32.
        assert_eq!(b.len(), 12 + 4 + 1 + 1 + 4 + 16 + 4);
        assert_eq!(b[17], 0);
    }

    #[test]
    fn rejects_bad_magic() {
        let r = read_checkpoint::<f32, _>(&b"NOPE\x01\0\0\0\0\0\0\0"[..]);
        assert!(matches!(r, Err(NnError::Format(_))));
    }
}
