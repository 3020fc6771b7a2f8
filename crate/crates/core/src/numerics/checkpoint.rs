//! "APGW" named-tensor container.
//!
//! Layout: magic `APGW`, u32 version, u32 count, then per tensor a u16 name
//! length, the UTF-8 name, a u8 rank, `rank` u32 dims and the row-major f32
//! values, all little-endian. Tensors are written in name order.

use std::path::Path;

use super::{ParamStore, Tensor};
use crate::binio::{dim_u32, put_f32_slice, put_u16, put_u32, Reader};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"APGW";
const VERSION: u32 = 1;

pub fn encode_checkpoint(params: &ParamStore) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, dim_u32(params.len(), "tensor count")?);
    for (name, t) in params.iter() {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Argument(format!("tensor name too long: {name}")))?;
        put_u16(&mut out, len);
        out.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(t.shape().len())
            .map_err(|_| Error::Argument(format!("rank of `{name}` exceeds 255")))?;
        out.push(rank);
        for &d in t.shape() {
            put_u32(&mut out, dim_u32(d, "dimension")?);
        }
        put_f32_slice(&mut out, t.data());
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParamStore> {
    let mut r = Reader::new(bytes, "APGW checkpoint");
    r.magic(MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("APGW version {version} not supported")));
    }
    let count = r.u32()?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_owned();
        let rank = r.u8()? as usize;
        let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let n = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("`{name}` size overflows")))?;
        let data = r.f32_vec(n)?;
        if params.contains(&name) {
            return Err(Error::Format(format!("duplicate tensor `{name}`")));
        }
        params.insert(name, Tensor::new(&shape, data)?);
    }
    r.finish()?;
    Ok(params)
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &ParamStore) -> Result<()> {
    std::fs::write(path, encode_checkpoint(params)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParamStore> {
    decode_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_of_a_single_tensor() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::new(&[1, 2], vec![1.0, -2.0]).unwrap());
        let bytes = encode_checkpoint(&p).unwrap();
        let mut expect = b"APGW".to_vec();
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&1u16.to_le_bytes());
        expect.push(b'w');
        expect.push(2);
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&2u32.to_le_bytes());
        expect.extend_from_slice(&1f32.to_le_bytes());
        expect.extend_from_slice(&(-2f32).to_le_bytes());
        assert_eq!(bytes, expect);
    }

    #[test]
    fn truncation_and_magic_are_format_errors() {
        let mut p = ParamStore::new();
        p.insert("a.b", Tensor::zeros(&[3, 3]));
        let bytes = encode_checkpoint(&p).unwrap();
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn f32_representable_values_round_trip(
            vals in proptest::collection::vec(-1e6f32..1e6, 1..40),
            name in "[a-z]{1,6}\\.[a-z0-9_]{1,8}",
        ) {
            let mut p = ParamStore::new();
            let n = vals.len();
            p.insert(name, Tensor::new(&[n, 1], vals.iter().map(|&v| v as f64).collect()).unwrap());
            let back = decode_checkpoint(&encode_checkpoint(&p).unwrap()).unwrap();
            prop_assert_eq!(back, p);
        }
    }
}
