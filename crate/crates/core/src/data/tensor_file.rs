//! `TNSR` binary tensor files.
//!
//! Layout, all integers little-endian:
//!
//! | bytes        | content                                  |
//! |--------------|------------------------------------------|
//! | 4            | magic `TNSR`                             |
//! | 1            | version (1)                              |
//! | 1            | dtype code: 0 = f32, 1 = f64, 2 = i32    |
//! | 1            | ndim                                     |
//! | 8 × ndim     | dims as u64                              |
//! | rest         | row-major payload                        |

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: &[u8; 4] = b"TNSR";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I32(Vec<i32>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::I32(_) => DType::I32,
        }
    }

    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::I32(v) => v.len(),
        }
    }
}

/// A tensor of any stored element type.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

fn format_err(field: &'static str, detail: impl Into<String>) -> Error {
    Error::Format {
        field,
        detail: detail.into(),
    }
}

impl StoredTensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        let want: usize = shape.iter().product();
        if want != data.len() {
            return Err(format_err("payload", format!("{} values for shape {shape:?}", data.len())));
        }
        Ok(StoredTensor { shape, data })
    }

    pub fn labels(shape: Vec<usize>, data: Vec<i32>) -> Result<Self> {
        Self::new(shape, TensorData::I32(data))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(7 + 8 * self.shape.len() + self.data.len() * self.data.dtype().size());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.data.dtype().code());
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 7 {
            return Err(format_err("header", format!("{} bytes is shorter than the header", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(format_err("magic", format!("expected TNSR, found {:?}", &bytes[..4])));
        }
        if bytes[4] != VERSION {
            return Err(format_err("version", format!("unsupported version {}", bytes[4])));
        }
        let dtype = DType::from_code(bytes[5]).ok_or_else(|| format_err("dtype", format!("unknown code {}", bytes[5])))?;
        let ndim = bytes[6] as usize;
        let dims_end = 7 + 8 * ndim;
        if bytes.len() < dims_end {
            return Err(format_err("dims", format!("truncated: need {dims_end} header bytes, have {}", bytes.len())));
        }
        let shape: Vec<usize> = bytes[7..dims_end]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")) as usize)
            .collect();
        let count = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| format_err("dims", format!("element count of {shape:?} overflows")))?;
        let payload = &bytes[dims_end..];
        let want = count
            .checked_mul(dtype.size())
            .ok_or_else(|| format_err("dims", "payload size overflows"))?;
        if payload.len() != want {
            return Err(format_err(
                "payload",
                format!("expected {want} bytes for {shape:?} {dtype:?}, found {}", payload.len()),
            ));
        }
        let data = match dtype {
            DType::F32 => TensorData::F32(
                payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect(),
            ),
            DType::F64 => TensorData::F64(
                payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect(),
            ),
            DType::I32 => TensorData::I32(
                payload.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().expect("4 bytes"))).collect(),
            ),
        };
        Ok(StoredTensor { shape, data })
    }

    /// Converts float payloads to `T`; integer payloads are rejected.
    pub fn into_float<T: Element>(self) -> Result<Tensor<T>> {
        let data: Vec<T> = match self.data {
            TensorData::F32(v) if T::DTYPE == DType::F32 => v.into_iter().map(|x| T::of(x as f64)).collect(),
            TensorData::F64(v) if T::DTYPE == DType::F64 => v.into_iter().map(T::of).collect(),
            other => {
                return Err(format_err(
                    "dtype",
                    format!("expected {:?}, found {:?}", T::DTYPE, other.dtype()),
                ))
            }
        };
        Tensor::new(self.shape, data)
    }

    pub fn into_labels(self) -> Result<(Vec<usize>, Vec<i32>)> {
        match self.data {
            TensorData::I32(v) => Ok((self.shape, v)),
            other => Err(format_err("dtype", format!("expected I32, found {:?}", other.dtype()))),
        }
    }
}

impl<T: Element> From<&Tensor<T>> for StoredTensor {
    fn from(t: &Tensor<T>) -> Self {
        let data = match T::DTYPE {
            DType::F32 => TensorData::F32(t.data().iter().map(|x| x.as_f64() as f32).collect()),
            _ => TensorData::F64(t.data().iter().map(|x| x.as_f64()).collect()),
        };
        StoredTensor {
            shape: t.shape().to_vec(),
            data,
        }
    }
}

pub fn write_tensor(path: &Path, tensor: &StoredTensor) -> Result<()> {
    fs::write(path, tensor.encode()).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<StoredTensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    StoredTensor::decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = StoredTensor::labels(vec![2], vec![1, -1]).unwrap();
        let b = t.encode();
        assert_eq!(&b[..7], b"TNSR\x01\x02\x01");
        assert_eq!(&b[7..15], &2u64.to_le_bytes());
        assert_eq!(b.len(), 15 + 8);
        assert_eq!(StoredTensor::decode(&b).unwrap(), t);
    }

    #[test]
    fn corrupt_fields_are_named() {
        let good = StoredTensor::new(vec![3], TensorData::F64(vec![1.0, 2.0, 3.0])).unwrap().encode();
        let field = |bytes: &[u8]| match StoredTensor::decode(bytes) {
            Err(Error::Format { field, .. }) => field,
            other => panic!("expected format error, got {other:?}"),
        };
        let mut b = good.clone();
        b[0] = b'X';
        assert_eq!(field(&b), "magic");
        let mut b = good.clone();
        b[4] = 9;
        assert_eq!(field(&b), "version");
        let mut b = good.clone();
        b[5] = 7;
        assert_eq!(field(&b), "dtype");
        assert_eq!(field(&good[..good.len() - 1]), "payload");
        assert_eq!(field(&good[..10]), "dims");
    }
}
