use std::path::Path;

use super::wire::{frame, unframe, Reader, Writer};
use crate::encoder::ParameterSet;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"FTCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A parameter set as stored on disk, with the CRC that mask bundles bind to.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParameterSet,
    pub crc: u32,
}

/// Rounds every value to the nearest 32-bit float, as storing does.
pub fn quantize_f32(params: &ParameterSet) -> ParameterSet {
    let mut out = params.clone();
    for (_, t) in out.iter_mut() {
        for v in t.data_mut() {
            *v = *v as f32 as f64;
        }
    }
    out
}

/// Exact size in bytes of the encoded checkpoint.
pub fn checkpoint_size(params: &ParameterSet) -> usize {
    let body: usize = params
        .iter()
        .map(|(n, t)| 4 + n.len() + 4 + 4 * t.rank() + 4 * t.len())
        .sum();
    16 + body + 4
}

pub fn encode_checkpoint(params: &ParameterSet) -> Result<Vec<u8>> {
    let mut w = Writer::new();
    for (name, t) in params.iter() {
        w.str_u32(name)?;
        w.len_u32(t.rank(), "rank")?;
        for &d in t.shape() {
            w.len_u32(d, "dimension")?;
        }
        for &v in t.data() {
            let f = v as f32;
            if !f.is_finite() {
                return Err(Error::OutOfRange(format!("{name} has a value not representable as f32: {v}")));
            }
            w.f32(f);
        }
    }
    frame(&CHECKPOINT_MAGIC, CHECKPOINT_VERSION, params.len() as u32, &w.buf)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let f = unframe(bytes, &CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let mut r = Reader::new(f.payload);
    let mut params = ParameterSet::new();
    for _ in 0..f.field {
        let name = r.str_u32()?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let size = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n.checked_mul(4).is_some_and(|b| b <= r.remaining()))
            .ok_or_else(|| Error::Malformed(format!("tensor {name} dims {shape:?} exceed the payload")))?;
        let data = (0..size).map(|_| r.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
        if params.contains(&name) {
            return Err(Error::Malformed(format!("duplicate tensor {name}")));
        }
        params.insert(name, Tensor::new(shape, data)?);
    }
    if r.remaining() != 0 {
        return Err(Error::Malformed(format!("{} unread payload bytes", r.remaining())));
    }
    Ok(Checkpoint { params, crc: f.crc })
}

/// Writes the checkpoint and returns its CRC.
pub fn save_checkpoint(params: &ParameterSet, path: impl AsRef<Path>) -> Result<u32> {
    let bytes = encode_checkpoint(params)?;
    std::fs::write(path, &bytes)?;
    Ok(crc_of(&bytes))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path)?)
}

/// The CRC a checkpoint of `params` carries, without writing it.
pub fn checkpoint_crc(params: &ParameterSet) -> Result<u32> {
    Ok(crc_of(&encode_checkpoint(params)?))
}

fn crc_of(bytes: &[u8]) -> u32 {
    u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("trailer"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{init_model, InitScheme, ModelConfig};
    use crate::numerics::RngStream;

    fn desk() -> ParameterSet {
        init_model(&ModelConfig::default(), InitScheme::Normal, &RngStream::named(5, "init")).unwrap()
    }

    #[test]
    fn round_trip_is_f32_exact() {
        let p = desk();
        let bytes = encode_checkpoint(&p).unwrap();
        assert_eq!(bytes.len(), checkpoint_size(&p));
        let c = decode_checkpoint(&bytes).unwrap();
        assert_eq!(c.params, quantize_f32(&p));
        assert_eq!(c.crc, checkpoint_crc(&p).unwrap());
        c.params.check_layout(&ModelConfig::default()).unwrap();
    }

    #[test]
    fn desk_size_formula() {
        // 38 tensors, 533 name bytes, 15 rank-2 and 23 rank-1 tensors.
        let p = desk();
        let names: usize = p.names().map(str::len).sum();
        assert_eq!(names, 533);
        assert_eq!(checkpoint_size(&p), 16 + 38 * 8 + 533 + 4 * (2 * 15 + 23) + 4 * 29088 + 4);
        assert_eq!(checkpoint_size(&p), 117_421);
    }

    #[test]
    fn corruption_is_caught() {
        let bytes = encode_checkpoint(&desk()).unwrap();
        for pos in [0, 5, 20, 1000, bytes.len() - 1] {
            let mut b = bytes.clone();
            b[pos] ^= 0x40;
            assert!(matches!(decode_checkpoint(&b), Err(Error::CrcMismatch { .. })), "byte {pos}");
        }
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 1]), Err(Error::Truncated { .. })));
    }

    #[test]
    fn non_finite_rejected() {
        let mut p = ParameterSet::new();
        p.insert("x", Tensor::vector(&[1e300]));
        assert!(encode_checkpoint(&p).is_err());
    }
}
