//! Binary tensor records.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | field |
//! |-------|-------|
//! | 4     | magic `TNSR` |
//! | 1     | dtype: 0 = f64, 1 = f32 |
//! | 1     | rank |
//! | 2     | reserved, zero |
//! | 8·rank| dims as u64 |
//! | …     | row-major payload |

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TNSR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F64,
    F32,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F64 => 0,
            DType::F32 => 1,
        }
    }

    /// Narrowest dtype that stores `data` without loss.
    pub fn lossless_for(data: &[f64]) -> DType {
        if data.iter().all(|&x| f64::from(x as f32) == x || x.is_nan()) {
            DType::F32
        } else {
            DType::F64
        }
    }
}

pub fn write_tensor<W: Write>(w: &mut W, shape: &[usize], data: &[f64], dtype: DType) -> std::io::Result<()> {
    debug_assert_eq!(shape.iter().product::<usize>(), data.len());
    let rank = u8::try_from(shape.len()).expect("rank fits in a byte");
    w.write_all(MAGIC)?;
    w.write_all(&[dtype.code(), rank, 0, 0])?;
    for &d in shape {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(data.len() * 8);
    match dtype {
        DType::F64 => data.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
        DType::F32 => data.iter().for_each(|&x| buf.extend_from_slice(&(x as f32).to_le_bytes())),
    }
    w.write_all(&buf)
}

/// Reads one record. IO failures come back as `Err(Ok(io))`-style
/// [`std::io::Error`]s wrapped by the caller; format violations as
/// [`Error::Format`].
pub fn read_tensor<R: Read>(r: &mut R) -> Result<(Vec<usize>, Vec<f64>, DType)> {
    let mut head = [0u8; 8];
    read_exact(r, &mut head)?;
    if &head[..4] != MAGIC {
        return Err(Error::Format(format!("bad tensor magic {:?}", &head[..4])));
    }
    let dtype = match head[4] {
        0 => DType::F64,
        1 => DType::F32,
        other => return Err(Error::Format(format!("unknown tensor dtype code {other}"))),
    };
    let rank = head[5] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut d = [0u8; 8];
        read_exact(r, &mut d)?;
        shape.push(usize::try_from(u64::from_le_bytes(d)).map_err(|_| Error::Format("dimension overflow".into()))?);
    }
    let n: usize = shape.iter().product();
    let width = match dtype {
        DType::F64 => 8,
        DType::F32 => 4,
    };
    let mut payload = vec![0u8; n * width];
    read_exact(r, &mut payload)?;
    let data = match dtype {
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect(),
    };
    Ok((shape, data, dtype))
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format("truncated tensor record".into())
        } else {
            Error::io("<tensor stream>", e)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_bytes_are_exact() {
        let mut buf = Vec::new();
        write_tensor(&mut buf, &[2, 1], &[1.0, -2.0], DType::F32).unwrap();
        let mut expected = b"TNSR".to_vec();
        expected.extend_from_slice(&[1, 2, 0, 0]);
        expected.extend_from_slice(&2u64.to_le_bytes());
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(buf, expected);
    }

    #[test]
    fn round_trip_f64() {
        let data = vec![0.1, -3.5e200, f64::MIN_POSITIVE, 7.0];
        let mut buf = Vec::new();
        write_tensor(&mut buf, &[4], &data, DType::F64).unwrap();
        let (shape, back, dtype) = read_tensor(&mut buf.as_slice()).unwrap();
        assert_eq!((shape, dtype), (vec![4], DType::F64));
        assert_eq!(back.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), data.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(read_tensor(&mut &b"XXXX\0\0\0\0"[..]), Err(Error::Format(_))));
        let mut buf = Vec::new();
        write_tensor(&mut buf, &[3], &[1.0, 2.0, 3.0], DType::F64).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(matches!(read_tensor(&mut buf.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn lossless_dtype_choice() {
        assert_eq!(DType::lossless_for(&[0.5, 0.25]), DType::F32);
        assert_eq!(DType::lossless_for(&[0.1]), DType::F64);
    }
}
