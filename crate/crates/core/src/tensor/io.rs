//! Binary tensor files.
//!
//! Layout: `b"MMFA"`, version `u8 = 1`, dtype `u8` (0 = f32, 1 = f64),
//! ndim `u8`, `ndim` little-endian `u32` dims, then the row-major
//! little-endian payload.

use std::fs;
use std::path::Path;

use super::{Real, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MMFA";
const VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// A tensor read from disk in whichever precision it was stored.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> Dtype {
        match self {
            AnyTensor::F32(_) => Dtype::F32,
            AnyTensor::F64(_) => Dtype::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    /// Converts to the requested precision; a no-op when it already matches.
    pub fn into_real<T: Real>(self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

pub fn encode<T: Real>(t: &Tensor<T>) -> Result<Vec<u8>> {
    if t.ndim() > u8::MAX as usize {
        return Err(Error::dim(format!("{} dims do not fit the header", t.ndim())));
    }
    let width = T::DTYPE.width();
    let mut out = Vec::with_capacity(7 + 4 * t.ndim() + width * t.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(T::DTYPE.code());
    out.push(t.ndim() as u8);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::dim(format!("dim {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    match T::DTYPE {
        Dtype::F32 => {
            for v in t.data() {
                out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
        Dtype::F64 => {
            for v in t.data() {
                out.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> std::result::Result<AnyTensor, String> {
    if bytes.len() < 7 {
        return Err("truncated header".into());
    }
    if &bytes[..4] != MAGIC {
        return Err("bad magic bytes".into());
    }
    if bytes[4] != VERSION {
        return Err(format!("unsupported version {}", bytes[4]));
    }
    let dtype = Dtype::from_code(bytes[5]).ok_or_else(|| format!("unknown dtype {}", bytes[5]))?;
    let ndim = bytes[6] as usize;
    let dims_end = 7 + 4 * ndim;
    if bytes.len() < dims_end {
        return Err("truncated dims".into());
    }
    let shape: Vec<usize> = bytes[7..dims_end]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let count: usize = shape.iter().product();
    let payload = &bytes[dims_end..];
    if payload.len() != count * dtype.width() {
        return Err(format!(
            "payload holds {} bytes, shape {shape:?} needs {}",
            payload.len(),
            count * dtype.width()
        ));
    }
    let tensor = match dtype {
        Dtype::F32 => {
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            AnyTensor::F32(Tensor::new(shape, data).map_err(|e| e.to_string())?)
        }
        Dtype::F64 => {
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            AnyTensor::F64(Tensor::new(shape, data).map_err(|e| e.to_string())?)
        }
    };
    Ok(tensor)
}

pub fn write_tensor_file<T: Real>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(t)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<AnyTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|msg| Error::TensorFile {
        path: path.to_path_buf(),
        msg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::<f32>::from_f64(vec![2, 1], &[1.0, -2.0]).unwrap();
        let bytes = encode(&t).unwrap();
        assert_eq!(&bytes[..4], b"MMFA");
        assert_eq!(bytes[4], 1);
        assert_eq!(bytes[5], 0);
        assert_eq!(bytes[6], 2);
        assert_eq!(&bytes[7..11], &2u32.to_le_bytes());
        assert_eq!(&bytes[11..15], &1u32.to_le_bytes());
        assert_eq!(&bytes[15..19], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[19..23], &(-2.0f32).to_le_bytes());
        assert_eq!(bytes.len(), 23);
    }

    #[test]
    fn rejects_corrupt_input() {
        assert!(decode(b"MMF").is_err());
        assert!(decode(b"XXXX\x01\x00\x00").is_err());
        assert!(decode(b"MMFA\x02\x00\x00").is_err());
        assert!(decode(b"MMFA\x01\x07\x00").is_err());
        // one f32 dim of 2 but only 4 payload bytes
        let mut b = b"MMFA\x01\x00\x01".to_vec();
        b.extend_from_slice(&2u32.to_le_bytes());
        b.extend_from_slice(&[0, 0, 0, 0]);
        assert!(decode(&b).is_err());
    }

    proptest! {
        #[test]
        fn round_trips_both_dtypes(shape in prop::collection::vec(1usize..4, 1..4), seed in any::<u64>()) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|i| ((seed.wrapping_add(i as u64) % 1000) as f64) / 7.0 - 50.0).collect();
            let t64 = Tensor::<f64>::from_f64(shape.clone(), &data).unwrap();
            prop_assert_eq!(decode(&encode(&t64).unwrap()).unwrap(), AnyTensor::F64(t64.clone()));
            let t32: Tensor<f32> = t64.cast();
            prop_assert_eq!(decode(&encode(&t32).unwrap()).unwrap(), AnyTensor::F32(t32));
        }
    }
}
