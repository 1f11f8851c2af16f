use std::path::Path;

use super::checkpoint::Checkpoint;
use super::wire::{frame, unframe, Reader, Writer};
use crate::encoder::{HeadKind, TaskHead};
use crate::error::{Error, Result};
use crate::masking::BinaryMask;
use crate::numerics::Tensor;

pub const BUNDLE_MAGIC: [u8; 4] = *b"FTMK";
pub const BUNDLE_VERSION: u32 = 1;

/// Provenance stored alongside a task mask.
#[derive(Clone, Debug, PartialEq)]
pub struct BundleMeta {
    pub task: String,
    /// Initial sparsity of the supermask run; `None` for pruning masks.
    pub initial_sparsity: Option<f64>,
    pub final_sparsity: f64,
    pub iterations: u64,
}

/// Everything a task needs on top of the shared checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskBundle {
    pub reference_crc: u32,
    pub mask: BinaryMask,
    pub head: TaskHead,
    pub meta: BundleMeta,
}

/// Packs `{0,1}` values row-major, least-significant bit first within each
/// byte; the final byte is zero-padded.
pub fn pack_bits(values: &[f64]) -> Result<Vec<u8>> {
    let mut out = vec![0u8; values.len().div_ceil(8)];
    for (i, &v) in values.iter().enumerate() {
        if v == 1.0 {
            out[i / 8] |= 1 << (i % 8);
        } else if v != 0.0 {
            return Err(Error::OutOfRange(format!("mask value {v} at {i} is not binary")));
        }
    }
    Ok(out)
}

/// Inverse of [`pack_bits`]; nonzero padding bits are rejected.
pub fn unpack_bits(bytes: &[u8], n: usize) -> Result<Vec<f64>> {
    if bytes.len() != n.div_ceil(8) {
        return Err(Error::Malformed(format!("{} packed bytes cannot hold exactly {n} bits", bytes.len())));
    }
    if !n.is_multiple_of(8) && bytes[n / 8] >> (n % 8) != 0 {
        return Err(Error::Malformed("nonzero padding bits".into()));
    }
    Ok((0..n)
        .map(|i| if bytes[i / 8] >> (i % 8) & 1 == 1 { 1.0 } else { 0.0 })
        .collect())
}

fn write_head(w: &mut Writer, head: &TaskHead) -> Result<()> {
    let (kind, out) = match head.kind {
        HeadKind::Classification(k) => (0u8, k),
        HeadKind::Regression => (1u8, 1),
    };
    let small = |v: usize, what: &str| {
        u16::try_from(v).map_err(|_| Error::OutOfRange(format!("head {what} {v} exceeds u16")))
    };
    w.u8(kind);
    w.u16(small(out, "outputs")?);
    w.u16(small(head.hidden(), "width")?);
    for &v in head.weight.data().iter().chain(head.bias.data()) {
        let f = v as f32;
        if !f.is_finite() {
            return Err(Error::OutOfRange(format!("head value {v} not representable as f32")));
        }
        w.f32(f);
    }
    Ok(())
}

fn read_head(r: &mut Reader) -> Result<TaskHead> {
    let kind = r.u8()?;
    let out = r.u16()? as usize;
    let hidden = r.u16()? as usize;
    let kind = match (kind, out) {
        (0, k) => HeadKind::Classification(k),
        (1, 1) => HeadKind::Regression,
        (k, o) => return Err(Error::Malformed(format!("head kind {k} with {o} outputs"))),
    };
    let mut floats = |n: usize| (0..n).map(|_| r.f32().map(f64::from)).collect::<Result<Vec<_>>>();
    let w = floats(hidden * out)?;
    let b = floats(out)?;
    TaskHead::new(kind, Tensor::new(vec![hidden, out], w)?, Tensor::new(vec![out], b)?)
}

/// Encodes a bundle; the mask must be congruent with `reference`.
pub fn encode_bundle(bundle: &MaskBundle, reference: &Checkpoint) -> Result<Vec<u8>> {
    if bundle.reference_crc != reference.crc {
        return Err(Error::ReferenceMismatch {
            bundle: bundle.reference_crc,
            checkpoint: reference.crc,
        });
    }
    bundle.mask.check_congruent(&reference.params)?;
    let mut w = Writer::new();
    let m = &bundle.meta;
    w.str_u16(&m.task)?;
    w.f64(m.initial_sparsity.unwrap_or(f64::NAN));
    w.f64(m.final_sparsity);
    w.u64(m.iterations);
    write_head(&mut w, &bundle.head)?;
    let count = u16::try_from(bundle.mask.len())
        .map_err(|_| Error::OutOfRange("too many mask tensors".into()))?;
    w.u16(count);
    for (name, t) in bundle.mask.iter() {
        w.str_u16(name)?;
        w.bytes(&pack_bits(t.data())?);
    }
    frame(&BUNDLE_MAGIC, BUNDLE_VERSION, bundle.reference_crc, &w.buf)
}

/// Decodes a bundle, refusing it unless it was bound to `reference`. Mask
/// shapes are taken from the checkpoint.
pub fn decode_bundle(bytes: &[u8], reference: &Checkpoint) -> Result<MaskBundle> {
    let f = unframe(bytes, &BUNDLE_MAGIC, BUNDLE_VERSION)?;
    if f.field != reference.crc {
        return Err(Error::ReferenceMismatch {
            bundle: f.field,
            checkpoint: reference.crc,
        });
    }
    let mut r = Reader::new(f.payload);
    let task = r.str_u16()?;
    let initial = r.f64()?;
    let meta = BundleMeta {
        task,
        initial_sparsity: (!initial.is_nan()).then_some(initial),
        final_sparsity: r.f64()?,
        iterations: r.u64()?,
    };
    let head = read_head(&mut r)?;
    let count = r.u16()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.str_u16()?;
        let shape = reference.params.get(&name)?.shape().to_vec();
        let n: usize = shape.iter().product();
        let bits = unpack_bits(r.take(n.div_ceil(8))?, n)?;
        entries.push((name, Tensor::new(shape, bits)?));
    }
    if r.remaining() != 0 {
        return Err(Error::Malformed(format!("{} unread payload bytes", r.remaining())));
    }
    Ok(MaskBundle {
        reference_crc: f.field,
        mask: BinaryMask::new(entries)?,
        head,
        meta,
    })
}

pub fn save_bundle(bundle: &MaskBundle, reference: &Checkpoint, path: impl AsRef<Path>) -> Result<usize> {
    let bytes = encode_bundle(bundle, reference)?;
    std::fs::write(path, &bytes)?;
    Ok(bytes.len())
}

pub fn load_bundle(path: impl AsRef<Path>, reference: &Checkpoint) -> Result<MaskBundle> {
    decode_bundle(&std::fs::read(path)?, reference)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::artifacts::{decode_checkpoint, encode_checkpoint};
    use crate::encoder::{init_model, InitScheme, ModelConfig};
    use crate::masking::{sample_mask, init_mask_params, MaskableSet};
    use crate::numerics::RngStream;

    #[test]
    fn pack_layout_is_lsb_first() {
        assert_eq!(pack_bits(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0]).unwrap(), vec![0x81, 0x01]);
        assert_eq!(pack_bits(&vec![1.0; 1024]).unwrap().len(), 128);
        assert!(pack_bits(&[0.5]).is_err());
        assert!(unpack_bits(&[0x02], 1).is_err());
        let v = [0.0, 1.0, 1.0];
        assert_eq!(unpack_bits(&pack_bits(&v).unwrap(), 3).unwrap(), v);
    }

    fn fixture() -> (ModelConfig, Checkpoint, MaskBundle) {
        let cfg = ModelConfig::default();
        let p = init_model(&cfg, InitScheme::Uniform, &RngStream::named(2, "init")).unwrap();
        let ck = decode_checkpoint(&encode_checkpoint(&p).unwrap()).unwrap();
        let ms = MaskableSet::default_for(&cfg, true);
        let nu = init_mask_params(&ck.params, &ms, 0.3, 5.0).unwrap();
        let mask = sample_mask(&nu, &RngStream::named(2, "mask"));
        let head = TaskHead::init(HeadKind::Classification(2), cfg.hidden_size, &mut RngStream::named(2, "head"));
        let bundle = MaskBundle {
            reference_crc: ck.crc,
            meta: BundleMeta {
                task: "pattern-hard".into(),
                initial_sparsity: Some(0.3),
                final_sparsity: mask.sparsity().global,
                iterations: 500,
            },
            mask,
            head,
        };
        (cfg, ck, bundle)
    }

    #[test]
    fn round_trip_and_binding() {
        let (_, ck, b) = fixture();
        let bytes = encode_bundle(&b, &ck).unwrap();
        let back = decode_bundle(&bytes, &ck).unwrap();
        assert_eq!(back.mask, b.mask);
        assert_eq!(back.meta, b.meta);
        assert_eq!(back.head.kind, b.head.kind);
        assert!(back.head.weight.max_abs_diff(&b.head.weight) < 1e-7);
        let other = Checkpoint {
            crc: ck.crc ^ 1,
            ..ck.clone()
        };
        assert!(matches!(decode_bundle(&bytes, &other), Err(Error::ReferenceMismatch { .. })));
        let mut bad = bytes.clone();
        bad[40] ^= 0x10;
        assert!(matches!(decode_bundle(&bad, &ck), Err(Error::CrcMismatch { .. })));
        assert!(matches!(decode_bundle(&bytes[..100], &ck), Err(Error::Truncated { .. })));
    }

    #[test]
    fn bundle_is_small() {
        let (_, ck, b) = fixture();
        let bytes = encode_bundle(&b, &ck).unwrap();
        let maskable = b.mask.num_entries();
        assert!(bytes.len() <= maskable.div_ceil(8) + 4 * b.head.num_params() + 4096);
        let ckpt = crate::artifacts::checkpoint_size(&ck.params);
        assert!(bytes.len() * 30 <= ckpt, "{} vs {}", bytes.len(), ckpt);
    }
}
