//! Binary tensor format: `b"LBDT"`, version u8, dtype u8 (0 = f32, 1 = f64),
//! rank u8, dims as u32 LE, then raw LE values in row-major order.

use std::fs;
use std::path::Path;

use super::{DType, Scalar, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LBDT";
pub const VERSION: u8 = 1;

pub fn encode<F: Scalar>(t: &Tensor<F>) -> Vec<u8> {
    let mut out = Vec::with_capacity(7 + 4 * t.rank() + t.numel() * F::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(F::DTYPE.code());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.put_le(&mut out);
    }
    out
}

/// Decodes one tensor from the front of `bytes`, converting to `F` if the stored dtype differs.
/// Returns the tensor and the number of bytes consumed.
pub fn decode<F: Scalar>(bytes: &[u8]) -> Result<(Tensor<F>, usize)> {
    let short = || Error::Format("truncated header".into());
    if bytes.len() < 7 {
        return Err(short());
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    if bytes[4] != VERSION {
        return Err(Error::Format(format!("unsupported version {}", bytes[4])));
    }
    let dtype = DType::from_code(bytes[5])
        .ok_or_else(|| Error::Format(format!("unknown dtype code {}", bytes[5])))?;
    let rank = bytes[6] as usize;
    let mut pos = 7;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = bytes.get(pos..pos + 4).ok_or_else(short)?;
        shape.push(u32::from_le_bytes(d.try_into().unwrap()) as usize);
        pos += 4;
    }
    let numel: usize = shape.iter().product();
    let width = dtype.size();
    let raw = bytes
        .get(pos..pos + numel * width)
        .ok_or_else(|| Error::Format("truncated payload".into()))?;
    let data: Vec<F> = raw
        .chunks_exact(width)
        .map(|c| match dtype {
            DType::F32 => F::of(f32::get_le(c) as f64),
            DType::F64 => F::of(f64::get_le(c)),
        })
        .collect();
    let t = Tensor::new(&shape, data).map_err(|e| Error::Format(e.to_string()))?;
    Ok((t, pos + numel * width))
}

pub fn write<F: Scalar>(path: impl AsRef<Path>, t: &Tensor<F>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn read<F: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<F>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (t, used) = decode(&bytes)?;
    if used != bytes.len() {
        return Err(Error::Format(format!(
            "{}: {} trailing bytes",
            path.display(),
            bytes.len() - used
        )));
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::<f32>::from_f64(&[2, 3], &[1.0; 6]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..7], &[b'L', b'B', b'D', b'T', 1, 0, 2]);
        assert_eq!(&b[7..11], &2u32.to_le_bytes());
        assert_eq!(&b[11..15], &3u32.to_le_bytes());
        assert_eq!(b.len(), 15 + 24);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let t = Tensor::<f64>::zeros(&[4]);
        let mut b = encode(&t);
        assert!(decode::<f64>(&b[..b.len() - 1]).is_err());
        b[0] = b'X';
        assert!(decode::<f64>(&b).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(shape in prop::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|i| f64::from_bits(seed.wrapping_mul(i as u64 + 1) >> 2)).collect();
            let t = Tensor::<f64>::new(&shape, data).unwrap();
            let (back, used) = decode::<f64>(&encode(&t)).unwrap();
            prop_assert_eq!(used, encode(&t).len());
            prop_assert_eq!(back.shape(), t.shape());
            let same = back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same);
        }
    }
}
