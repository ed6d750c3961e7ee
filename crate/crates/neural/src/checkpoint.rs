//! Binary parameter files.
//!
//! Layout, little-endian: magic `LASP`, `u32` version, `u32` length plus the
//! network configuration as JSON, `u32` block count, then per block a `u32`
//! name length, the UTF-8 name, a `u32` rank, `u32` dimensions and `f32`
//! values.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{NeuralError, Result};
use crate::model::{LasNetConfig, LasNetParams};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LASP";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| NeuralError::Checkpoint(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn to_bytes(params: &LasNetParams) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION as usize)?;
    let cfg = serde_json::to_vec(&params.config)?;
    put_u32(&mut out, cfg.len())?;
    out.extend_from_slice(&cfg);
    put_u32(&mut out, params.registry.len())?;
    for p in params.registry.iter() {
        put_u32(&mut out, p.name.len())?;
        out.extend_from_slice(p.name.as_bytes());
        put_u32(&mut out, p.value.shape().len())?;
        for &d in p.value.shape() {
            put_u32(&mut out, d)?;
        }
        for &v in p.value.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(NeuralError::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

/// Parses a checkpoint. Parameter tags come from the configuration; every
/// registered parameter must be present with a matching shape.
pub fn from_bytes(buf: &[u8]) -> Result<LasNetParams> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(NeuralError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(NeuralError::Checkpoint(format!("unsupported version {version}")));
    }
    let n = r.u32()?;
    let config: LasNetConfig = serde_json::from_slice(r.take(n)?)?;
    let mut params = LasNetParams::init(&config, 0)?;
    let blocks = r.u32()?;
    if blocks != params.registry.len() {
        return Err(NeuralError::Checkpoint(format!(
            "{blocks} blocks, configuration expects {}",
            params.registry.len()
        )));
    }
    for _ in 0..blocks {
        let n = r.u32()?;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| NeuralError::Checkpoint("non-UTF-8 block name".into()))?
            .to_string();
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let raw = r.take(4 * len)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        let slot = params
            .registry
            .get_mut(&name)
            .ok_or_else(|| NeuralError::Checkpoint(format!("unknown block {name}")))?;
        if slot.shape() != shape.as_slice() {
            return Err(NeuralError::Checkpoint(format!(
                "block {name} has shape {shape:?}, expected {:?}",
                slot.shape()
            )));
        }
        *slot = Tensor::new(&shape, data)?;
    }
    if r.pos != buf.len() {
        return Err(NeuralError::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(params)
}

pub fn save(params: &LasNetParams, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&to_bytes(params)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<LasNetParams> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    from_bytes(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> LasNetConfig {
        LasNetConfig {
            base_dim: 4,
            depths: vec![1, 1],
            heads: vec![1, 1],
            patch_size: 12,
            ..Default::default()
        }
    }

    #[test]
    fn round_trip_at_f32_precision() {
        let p = LasNetParams::init(&small(), 3).unwrap();
        let q = from_bytes(&to_bytes(&p).unwrap()).unwrap();
        assert_eq!(p.config, q.config);
        for (a, b) in p.registry.iter().zip(q.registry.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.tag, b.tag);
            for (x, y) in a.value.data().iter().zip(b.value.data()) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
    }

    #[test]
    fn rejects_corruption() {
        let p = LasNetParams::init(&small(), 3).unwrap();
        let bytes = to_bytes(&p).unwrap();
        assert!(from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(from_bytes(&extra).is_err());
    }
}
