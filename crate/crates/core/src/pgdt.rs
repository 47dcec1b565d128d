//! PGDT tensor byte format.
//!
//! Layout: magic `PGDT`, version byte (1), dtype code (1 = f32, 2 = f64),
//! ndim byte, `ndim` little-endian u32 extents, then raw little-endian values
//! row-major. All persisted tensors (weights, datasets) use this encoding;
//! actual file I/O lives in the CLI crate.

use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"PGDT";
pub const VERSION: u8 = 1;

pub fn encode<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(7 + 4 * t.shape().len() + T::BYTE_WIDTH * t.numel());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(T::DTYPE_CODE);
    out.push(t.shape().len() as u8);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

/// Dtype code stored in an encoded buffer, checked against magic/version first.
pub fn peek_dtype(bytes: &[u8]) -> Result<u8> {
    if bytes.len() < 7 {
        return Err(Error::Codec("buffer shorter than header".to_string()));
    }
    if bytes[..4] != MAGIC {
        return Err(Error::Codec(format!(
            "bad magic {:?}, expected {:?}",
            &bytes[..4],
            MAGIC
        )));
    }
    if bytes[4] != VERSION {
        return Err(Error::Codec(format!(
            "unsupported version {}, expected {}",
            bytes[4], VERSION
        )));
    }
    Ok(bytes[5])
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let dtype = peek_dtype(bytes)?;
    if dtype != T::DTYPE_CODE {
        return Err(Error::Codec(format!(
            "dtype code {} does not match requested {} ({})",
            dtype,
            T::DTYPE_CODE,
            T::DTYPE_NAME
        )));
    }
    let ndim = bytes[6] as usize;
    let header = 7 + 4 * ndim;
    if bytes.len() < header {
        return Err(Error::Codec("truncated extent table".to_string()));
    }
    let mut shape = Vec::with_capacity(ndim);
    for d in 0..ndim {
        let o = 7 + 4 * d;
        shape.push(u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize);
    }
    let numel: usize = shape.iter().product();
    let expected = header + numel * T::BYTE_WIDTH;
    if bytes.len() != expected {
        return Err(Error::Codec(format!(
            "payload length {} does not match shape {:?} ({} bytes expected)",
            bytes.len(),
            shape,
            expected
        )));
    }
    let mut data = Vec::with_capacity(numel);
    for i in 0..numel {
        data.push(T::read_le(&bytes[header + i * T::BYTE_WIDTH..]));
    }
    Tensor::from_vec(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_fixed() {
        let t = Tensor::<f32>::from_vec(vec![2, 3], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..4], b"PGDT");
        assert_eq!(b[4], 1); // version
        assert_eq!(b[5], 1); // f32
        assert_eq!(b[6], 2); // ndim
        assert_eq!(&b[7..11], &2u32.to_le_bytes());
        assert_eq!(&b[11..15], &3u32.to_le_bytes());
        assert_eq!(b.len(), 15 + 6 * 4);
        assert_eq!(&b[15..19], &0.0f32.to_le_bytes());
        assert_eq!(&b[19..23], &1.0f32.to_le_bytes());
    }

    #[test]
    fn dtype_mismatch_is_an_error() {
        let t = Tensor::<f64>::scalar(1.5);
        let b = encode(&t);
        assert!(decode::<f32>(&b).is_err());
        assert_eq!(peek_dtype(&b).unwrap(), 2);
    }

    proptest! {
        #[test]
        fn roundtrip_f64(data in proptest::collection::vec(-1e6f64..1e6, 1..64)) {
            let t = Tensor::from_vec(vec![data.len()], data).unwrap();
            let back = decode::<f64>(&encode(&t)).unwrap();
            prop_assert_eq!(back, t);
        }

        #[test]
        fn roundtrip_f32_bits(data in proptest::collection::vec(-1e6f32..1e6, 1..64)) {
            let t = Tensor::from_vec(vec![1, data.len()], data).unwrap();
            let back = decode::<f32>(&encode(&t)).unwrap();
            prop_assert_eq!(back.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }
}
