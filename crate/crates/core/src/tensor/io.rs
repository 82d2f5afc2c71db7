//! `.nst` tensor files.
//!
//! Layout (all integers little-endian):
//!
//! | bytes        | content                                   |
//! |--------------|-------------------------------------------|
//! | 8            | magic `NSTENS01`                          |
//! | 1            | dtype code, 0 = f32, 1 = f64              |
//! | 1            | rank                                      |
//! | 8 × rank     | extents as u64                            |
//! | remainder    | elements, row-major, IEEE-754 LE           |

use std::fs;
use std::path::Path;

use super::{numel, DType, Element, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"NSTENS01";
pub const EXTENSION: &str = "nst";

pub fn encode<T: Element>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(10 + 8 * t.rank() + t.numel() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.push(T::DTYPE.code());
    out.push(u8::try_from(t.rank()).expect("rank fits in one byte"));
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

/// Header fields of an encoded tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Header {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub payload_offset: usize,
}

pub fn decode_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 10 {
        return Err(Error::Format("truncated header".into()));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let dtype = DType::from_code(bytes[8]).ok_or_else(|| Error::Format(format!("unknown dtype code {}", bytes[8])))?;
    let rank = bytes[9] as usize;
    let payload_offset = 10 + 8 * rank;
    if bytes.len() < payload_offset {
        return Err(Error::Format("truncated shape".into()));
    }
    let shape = (0..rank)
        .map(|i| {
            let s = 10 + 8 * i;
            u64::from_le_bytes(bytes[s..s + 8].try_into().unwrap()) as usize
        })
        .collect();
    Ok(Header {
        dtype,
        shape,
        payload_offset,
    })
}

pub fn decode<T: Element>(bytes: &[u8]) -> Result<Tensor<T>> {
    let header = decode_header(bytes)?;
    if header.dtype != T::DTYPE {
        return Err(Error::Format(format!(
            "dtype {:?} on disk, {:?} requested",
            header.dtype,
            T::DTYPE
        )));
    }
    let n = numel(&header.shape);
    let width = T::DTYPE.size();
    let payload = &bytes[header.payload_offset..];
    if payload.len() != n * width {
        return Err(Error::Format(format!(
            "payload is {} bytes, shape {:?} needs {}",
            payload.len(),
            header.shape,
            n * width
        )));
    }
    let data = payload.chunks_exact(width).map(T::read_le).collect();
    Tensor::new(header.shape, data)
}

pub fn save<T: Element>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn load<T: Element>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn f64_pi_payload_is_ieee_le() {
        let t = Tensor::<f64>::new([1], vec![std::f64::consts::PI]).unwrap();
        let bytes = encode(&t);
        // independent encoder: sign 0, exponent 0x400, mantissa 0x921FB54442D18
        let bits: u64 = (0x400u64 << 52) | 0x921F_B544_42D18;
        let mut expected = b"NSTENS01".to_vec();
        expected.push(1);
        expected.push(1);
        expected.extend_from_slice(&[1, 0, 0, 0, 0, 0, 0, 0]);
        for i in 0..8 {
            expected.push(((bits >> (8 * i)) & 0xff) as u8);
        }
        assert_eq!(bytes, expected);
    }

    #[test]
    fn round_trip_is_bitwise() {
        let mut rng = Rng::new(3);
        let t = Tensor::<f32>::normal([3, 4, 5], 1.0, &mut rng);
        let back: Tensor<f32> = decode(&encode(&t)).unwrap();
        assert!(back.bit_eq(&t));
        let s = Tensor::<f64>::scalar(-0.0);
        assert!(decode::<f64>(&encode(&s)).unwrap().bit_eq(&s));
    }

    #[test]
    fn malformed_files_are_rejected() {
        let t = Tensor::<f32>::ones([2, 2]);
        let good = encode(&t);
        assert!(decode::<f32>(&good[..good.len() - 1]).is_err());
        assert!(decode::<f32>(&good[..12]).is_err());
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(decode::<f32>(&bad).is_err());
        let mut bad = good.clone();
        bad[8] = 7;
        assert!(matches!(decode::<f32>(&bad), Err(Error::Format(m)) if m.contains("dtype code")));
        assert!(decode::<f64>(&good).is_err());
    }

    #[test]
    fn save_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.nst");
        let t = Tensor::<f64>::from_f64([2], &[1.5, -2.0]).unwrap();
        save(&p, &t).unwrap();
        assert!(load::<f64>(&p).unwrap().bit_eq(&t));
        assert!(load::<f64>(dir.path().join("missing.nst")).is_err());
    }
}
