//! Tensor-set serialization.
//!
//! ```text
//! "FGTS" u8 version=1 u32 count
//! per tensor: u16 name_len, name (UTF-8), u8 dtype (0 = f32), u8 rank,
//!             rank x u32 dims, row-major little-endian f32 payload
//! ```

use crate::codec::{Reader, Writer};
use crate::compute::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FGTS";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 0;

pub type NamedTensors = Vec<(String, Tensor<f32>)>;

pub fn encode(tensors: &[(String, Tensor<f32>)]) -> Result<Vec<u8>> {
    let payload: usize = tensors.iter().map(|(n, t)| n.len() + 8 + 4 * (t.dims().len() + t.len())).sum();
    let mut w = Writer::with_capacity(9 + payload);
    w.raw(MAGIC).u8(VERSION).u32(tensors.len() as u32);
    for (name, t) in tensors {
        if name.len() > u16::MAX as usize {
            return Err(Error::InvalidArgument(format!("tensor name too long: {} bytes", name.len())));
        }
        if t.dims().len() > u8::MAX as usize {
            return Err(Error::InvalidArgument(format!("tensor `{name}` rank too high")));
        }
        w.u16(name.len() as u16)
            .raw(name.as_bytes())
            .u8(DTYPE_F32)
            .u8(t.dims().len() as u8);
        for d in t.dims() {
            let d = u32::try_from(*d)
                .map_err(|_| Error::InvalidArgument(format!("dimension {d} exceeds u32")))?;
            w.u32(d);
        }
        for v in t.data() {
            w.f32(*v);
        }
    }
    Ok(w.into_inner())
}

pub fn decode(bytes: &[u8]) -> Result<NamedTensors> {
    let bad = |m: &str| Error::Corrupt(format!("tensor set: {m}"));
    let mut r = Reader::new(bytes);
    if r.take(4)? != MAGIC {
        return Err(bad("bad magic"));
    }
    if r.u8()? != VERSION {
        return Err(bad("unsupported version"));
    }
    let count = r.u32()?;
    let mut out = Vec::with_capacity(count.min(1024) as usize);
    for _ in 0..count {
        let n = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| bad("name is not UTF-8"))?
            .to_owned();
        if r.u8()? != DTYPE_F32 {
            return Err(bad("unknown dtype"));
        }
        let rank = r.u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        let len = dims
            .iter()
            .try_fold(1usize, |acc, d| acc.checked_mul(*d))
            .ok_or_else(|| bad("element count overflows"))?;
        if len.checked_mul(4).is_none_or(|b| b > r.remaining()) {
            return Err(bad("truncated payload"));
        }
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(r.f32()?);
        }
        out.push((name, Tensor::new(dims, data).map_err(|e| bad(&e.to_string()))?));
    }
    r.finish()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_bit_exact() {
        let t = Tensor::new(vec![1, 2], vec![1.0f32, -0.0]).unwrap();
        let bytes = encode(&[("w".into(), t)]).unwrap();
        let mut want = b"FGTS".to_vec();
        want.push(1);
        want.extend(1u32.to_le_bytes());
        want.extend(1u16.to_le_bytes());
        want.push(b'w');
        want.push(0);
        want.push(2);
        want.extend(1u32.to_le_bytes());
        want.extend(2u32.to_le_bytes());
        want.extend(1.0f32.to_le_bytes());
        want.extend((-0.0f32).to_le_bytes());
        assert_eq!(bytes, want);
        let back = decode(&bytes).unwrap();
        assert_eq!(back[0].0, "w");
        assert_eq!(back[0].1.data()[1].to_bits(), (-0.0f32).to_bits());
    }

    #[test]
    fn truncation_is_rejected() {
        let t = Tensor::new(vec![3], vec![1.0f32, 2.0, 3.0]).unwrap();
        let bytes = encode(&[("x".into(), t)]).unwrap();
        for cut in 0..bytes.len() {
            assert!(decode(&bytes[..cut]).is_err(), "cut at {cut}");
        }
    }
}
