//! `CKPT1` checkpoints.
//!
//! Layout (little-endian): magic `CKPT1`, `u32` tensor count, then per tensor
//! a `u32` name length, the UTF-8 name, a `u32` rank, `rank` `u32` extents
//! and the `f32` payload. The iteration counter is the rank-0 tensor
//! `meta.iteration`; the 64-bit seed is `meta.seed`, four 16-bit limbs (least
//! significant first) so that every limb is exact in `f32`.

use std::path::Path;

use crossmodal_core::autodiff::Tensor;
use crossmodal_core::encoders::{EncoderConfig, EncoderParams, SEG_PREFIX};

use crate::error::{Error, Result};
use crate::formats::{read_file, write_atomic};

pub const CKPT_MAGIC: &[u8; 5] = b"CKPT1";
pub const ITERATION_KEY: &str = "meta.iteration";
pub const SEED_KEY: &str = "meta.seed";

/// Tensors exactly as stored, before matching against a configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCheckpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub iteration: u64,
    pub seed: u64,
}

fn push_u32(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit a u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn push_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) -> Result<()> {
    push_u32(out, name.len(), "name length")?;
    out.extend_from_slice(name.as_bytes());
    push_u32(out, t.rank(), "rank")?;
    for &e in t.shape() {
        push_u32(out, e, "extent")?;
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

pub fn encode_checkpoint(params: &EncoderParams<f32>) -> Result<Vec<u8>> {
    let mut out = CKPT_MAGIC.to_vec();
    let entries = params.store.entries();
    push_u32(&mut out, entries.len() + 2, "tensor count")?;
    for e in entries {
        push_tensor(&mut out, &e.name, &e.value)?;
    }
    if params.iteration >= 1 << 24 {
        return Err(Error::Format(format!("iteration {} is not exact in f32", params.iteration)));
    }
    push_tensor(&mut out, ITERATION_KEY, &Tensor::scalar(params.iteration as f32))?;
    let limbs: Vec<f32> = (0..4).map(|i| ((params.seed >> (16 * i)) & 0xffff) as f32).collect();
    push_tensor(&mut out, SEED_KEY, &Tensor::new(vec![4], limbs)?)?;
    Ok(out)
}

struct Reader<'a> {
    raw: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.raw.len());
        let end = end.ok_or_else(|| Error::Truncated(format!("checkpoint ends inside {what}")))?;
        let s = &self.raw[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }
}

pub fn decode_checkpoint(raw: &[u8]) -> Result<RawCheckpoint> {
    if !raw.starts_with(CKPT_MAGIC) {
        return Err(Error::Format("missing `CKPT1` magic".into()));
    }
    let mut r = Reader { raw, at: CKPT_MAGIC.len() };
    let count = r.u32("the tensor count")?;
    let mut tensors = Vec::new();
    let (mut iteration, mut seed) = (None, None);
    for i in 0..count {
        let len = r.u32("a name length")?;
        let name = std::str::from_utf8(r.take(len, "a name")?)
            .map_err(|_| Error::Format(format!("tensor {i} has a non-UTF-8 name")))?
            .to_string();
        let rank = r.u32("a rank")?;
        let shape = (0..rank).map(|_| r.u32("an extent")).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format(format!("tensor `{name}` is too large")))?;
        let data = r
            .take(n, &format!("tensor `{name}`"))?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data)?;
        match name.as_str() {
            ITERATION_KEY if t.len() == 1 => iteration = Some(t.data()[0] as u64),
            SEED_KEY if t.len() == 4 => {
                seed = Some(t.data().iter().enumerate().fold(0u64, |s, (i, &l)| s | (l as u64) << (16 * i)))
            }
            ITERATION_KEY | SEED_KEY => return Err(Error::Format(format!("malformed `{name}`"))),
            _ => tensors.push((name, t)),
        }
    }
    if r.at != raw.len() {
        return Err(Error::Format(format!("{} trailing bytes after the last tensor", raw.len() - r.at)));
    }
    let iteration = iteration.ok_or_else(|| Error::Format(format!("missing `{ITERATION_KEY}`")))?;
    let seed = seed.ok_or_else(|| Error::Format(format!("missing `{SEED_KEY}`")))?;
    Ok(RawCheckpoint { tensors, iteration, seed })
}

/// Builds parameters for `config` from stored tensors. A stored segmentation
/// head is reattached with its stored part count. Errors name the first
/// tensor that is missing, unexpected or misshaped.
pub fn restore(raw: &RawCheckpoint, config: &EncoderConfig) -> Result<EncoderParams<f32>> {
    let mut params = EncoderParams::<f32>::init(config, raw.seed)?;
    if raw.tensors.iter().any(|(n, _)| n.starts_with(SEG_PREFIX)) {
        let last = format!("seg.l{}.b", config.seg_hidden.len());
        let parts = raw
            .tensors
            .iter()
            .find(|(n, _)| *n == last)
            .map(|(_, t)| t.len())
            .ok_or_else(|| Error::Config(format!("checkpoint is missing tensor `{last}`")))?;
        params.attach_segmentation_head(config, parts, raw.seed)?;
    }
    for (name, t) in &raw.tensors {
        let expect = params
            .store
            .get(name)
            .map_err(|_| Error::Config(format!("checkpoint tensor `{name}` is not part of the configured networks")))?;
        if expect.shape() != t.shape() {
            return Err(Error::Config(format!(
                "tensor `{name}` has shape {:?} but the configuration needs {:?}",
                t.shape(),
                expect.shape()
            )));
        }
    }
    for e in params.store.entries() {
        if !raw.tensors.iter().any(|(n, _)| *n == e.name) {
            return Err(Error::Config(format!("checkpoint is missing tensor `{}`", e.name)));
        }
    }
    for (name, t) in &raw.tensors {
        let id = params.store.id(name)?;
        *params.store.value_mut(id) = t.clone();
    }
    params.iteration = raw.iteration;
    Ok(params)
}

pub fn save_checkpoint(path: &Path, params: &EncoderParams<f32>) -> Result<()> {
    write_atomic(path, &encode_checkpoint(params)?)
}

pub fn load_checkpoint(path: &Path, config: &EncoderConfig) -> Result<EncoderParams<f32>> {
    restore(&decode_checkpoint(&read_file(path)?)?, config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> EncoderConfig {
        EncoderConfig {
            image_channels: vec![2, 3],
            point_widths: vec![2, 2],
            embed_dim: 3,
            k: 2,
            fusion_hidden: 4,
            seg_hidden: vec![3],
            input_channels: 1,
            stem_stride: 1,
            leaky_slope: 0.2,
        }
    }

    #[test]
    fn round_trip_preserves_everything() {
        let mut p = EncoderParams::<f32>::init(&config(), 0xDEAD_BEEF_0123_4567).unwrap();
        p.iteration = 1234;
        let back = restore(&decode_checkpoint(&encode_checkpoint(&p).unwrap()).unwrap(), &config()).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.seed, 0xDEAD_BEEF_0123_4567);
    }

    #[test]
    fn segmentation_head_round_trips() {
        let mut p = EncoderParams::<f32>::init(&config(), 3).unwrap();
        p.attach_segmentation_head(&config(), 5, 9).unwrap();
        let back = restore(&decode_checkpoint(&encode_checkpoint(&p).unwrap()).unwrap(), &config()).unwrap();
        assert_eq!(back.num_parts(&config()), Some(5));
        assert_eq!(back.store, p.store);
    }

    #[test]
    fn header_layout() {
        let p = EncoderParams::<f32>::init(&config(), 1).unwrap();
        let raw = encode_checkpoint(&p).unwrap();
        assert_eq!(&raw[..5], b"CKPT1");
        let count = u32::from_le_bytes(raw[5..9].try_into().unwrap()) as usize;
        assert_eq!(count, p.store.len() + 2);
        let name_len = u32::from_le_bytes(raw[9..13].try_into().unwrap()) as usize;
        assert_eq!(&raw[13..13 + name_len], p.store.entries()[0].name.as_bytes());
        let rank = u32::from_le_bytes(raw[13 + name_len..17 + name_len].try_into().unwrap()) as usize;
        assert_eq!(rank, p.store.entries()[0].value.rank());
    }

    #[test]
    fn width_mismatch_names_the_tensor() {
        let p = EncoderParams::<f32>::init(&config(), 1).unwrap();
        let raw = decode_checkpoint(&encode_checkpoint(&p).unwrap()).unwrap();
        let wider = EncoderConfig { image_channels: vec![4, 3], ..config() };
        let msg = restore(&raw, &wider).unwrap_err().to_string();
        assert!(msg.contains("`img.stem.conv.w`"), "{msg}");
        let deeper = EncoderConfig { point_widths: vec![2, 2, 2], ..config() };
        let msg = restore(&raw, &deeper).unwrap_err().to_string();
        assert!(msg.contains("`pt.fc.w`") || msg.contains("`pt.e2."), "{msg}");
    }

    #[test]
    fn unknown_and_missing_tensors_are_named() {
        let p = EncoderParams::<f32>::init(&config(), 1).unwrap();
        let mut raw = decode_checkpoint(&encode_checkpoint(&p).unwrap()).unwrap();
        raw.tensors.push(("extra.w".into(), Tensor::zeros(&[1])));
        assert!(restore(&raw, &config()).unwrap_err().to_string().contains("`extra.w`"));
        raw.tensors.pop();
        let (gone, _) = raw.tensors.remove(3);
        assert!(restore(&raw, &config()).unwrap_err().to_string().contains(&format!("`{gone}`")));
    }

    #[test]
    fn corrupt_inputs() {
        let p = EncoderParams::<f32>::init(&config(), 1).unwrap();
        let raw = encode_checkpoint(&p).unwrap();
        assert!(matches!(decode_checkpoint(&raw[..raw.len() - 2]), Err(Error::Truncated(_))));
        assert!(matches!(decode_checkpoint(b"CKPT2"), Err(Error::Format(_))));
        let mut long = raw;
        long.push(1);
        assert!(matches!(decode_checkpoint(&long), Err(Error::Format(_))));
    }
}
