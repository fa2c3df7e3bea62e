//! DSCW weights file format.
//!
//! Layout, all integers little-endian:
//!   magic "DSCW" | version u16 | tensor count u32 | per tensor:
//!   name_len u32 | name UTF-8 | rank u32 | dims u32 x rank | f32 data.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::params::ParamSet;
use crate::nn::tensor::Scalar;

const MAGIC: &[u8; 4] = b"DSCW";
const VERSION: u16 = 1;

pub fn encode<F: Scalar>(params: &ParamSet<F>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for &d in &p.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &p.data {
            out.extend_from_slice(&(v.to_double() as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Vec<usize>, Vec<f32>)>> {
    let bad = |reason: String| Error::WeightsFormat(reason);
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(bad(format!(
                "truncated: need {} bytes at offset {}, file has {}",
                n,
                *pos,
                bytes.len()
            )));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };

    if take(&mut pos, 4)? != MAGIC {
        return Err(bad("missing DSCW magic".into()));
    }
    let version = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap());
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;

    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| bad("non-utf8 tensor name".into()))?;
        let rank = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
        }
        let len: usize = shape.iter().product();
        let raw = take(&mut pos, len * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, shape, data));
    }
    if pos != bytes.len() {
        return Err(bad(format!(
            "trailing bytes: {} past the declared tensors",
            bytes.len() - pos
        )));
    }
    Ok(tensors)
}

pub fn save<F: Scalar>(params: &ParamSet<F>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(params)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Vec<(String, Vec<usize>, Vec<f32>)>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Copy decoded tensors into an existing parameter set, matching by name and
/// validating shapes.
pub fn apply<F: Scalar>(
    params: &mut ParamSet<F>,
    tensors: &[(String, Vec<usize>, Vec<f32>)],
) -> Result<()> {
    for (name, shape, data) in tensors {
        let idx = params.index_of(name).ok_or_else(|| {
            Error::WeightsFormat(format!("unknown tensor {name} in weights file"))
        })?;
        let p = params.get_mut(idx);
        if &p.shape != shape {
            return Err(Error::WeightsFormat(format!(
                "tensor {name}: shape {:?} in file, {:?} expected",
                shape, p.shape
            )));
        }
        p.data = data.iter().map(|&v| F::from_double(v as f64)).collect();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_params() -> ParamSet<f32> {
        let mut p = ParamSet::new();
        p.push("a.w", vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], true);
        p.push("a.b", vec![2], vec![-1.0, 0.5], true);
        p
    }

    #[test]
    fn round_trip() {
        let params = sample_params();
        let bytes = encode(&params);
        let tensors = decode(&bytes).unwrap();
        assert_eq!(tensors.len(), 2);
        assert_eq!(tensors[0].0, "a.w");
        assert_eq!(tensors[0].1, vec![2, 3]);
        assert_eq!(tensors[1].2, vec![-1.0, 0.5]);

        let mut fresh = sample_params();
        fresh.get_mut(0).data.fill(0.0);
        apply(&mut fresh, &tensors).unwrap();
        assert_eq!(fresh.get(0).data, params.get(0).data);
    }

    #[test]
    fn length_validated() {
        let bytes = encode(&sample_params());
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut padded = bytes.clone();
        padded.push(0);
        assert!(decode(&padded).is_err());
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes = encode(&sample_params());
        bytes[0] = b'X';
        assert!(decode(&bytes).is_err());
    }
}
