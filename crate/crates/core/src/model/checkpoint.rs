//! Binary checkpoints: every parameter tensor plus the metadata needed to
//! rebuild the architecture and the input normalisation.
//!
//! Layout (little-endian): magic `MSML0001`, `u32` class count, `u32` tensor
//! count, then per tensor a `u32` name length, the UTF-8 name, a `u32` rank,
//! `rank` `u32` dimensions and the `f64` values.

use std::path::Path;

use super::backbone::{BackboneConfig, ConvBlock};
use super::network::{BaselineModel, Model, TwoStreamModel};
use crate::dataset::{write_atomic, ChannelStats};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MSML0001";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub norm: ChannelStats,
}

fn push_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Parameter(format!("{v} does not fit a u32 field")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn meta(model: &Model, norm: &ChannelStats) -> Vec<(String, Tensor)> {
    let cfg = model.backbone_config();
    let blocks: Vec<f64> = cfg
        .blocks
        .iter()
        .flat_map(|b| [b.out_channels as f64, b.kernel as f64, if b.pool { 1.0 } else { 0.0 }])
        .collect();
    let kind = match model {
        Model::Baseline(_) => 0.0,
        Model::TwoStream(_) => 1.0,
    };
    let weights = match model {
        Model::Baseline(_) => LossWeights::default(),
        Model::TwoStream(m) => m.loss_weights,
    };
    let n = cfg.blocks.len();
    vec![
        ("meta.kind".into(), Tensor::vector(vec![kind])),
        (
            "meta.input".into(),
            Tensor::vector(vec![
                cfg.input_channels as f64,
                cfg.input_height as f64,
                cfg.input_width as f64,
            ]),
        ),
        (
            "meta.blocks".into(),
            Tensor::new(vec![n, 3], blocks).expect("block table shape"),
        ),
        ("meta.dropout".into(), Tensor::vector(vec![model.dropout()])),
        (
            "meta.loss_weights".into(),
            Tensor::vector(vec![weights.alpha, weights.beta]),
        ),
        ("meta.norm_mean".into(), Tensor::vector(norm.mean.clone())),
        ("meta.norm_std".into(), Tensor::vector(norm.std.clone())),
    ]
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let model = &ckpt.model;
    let mut tensors = meta(model, &ckpt.norm);
    tensors.extend(model.named_params().into_iter().map(|(n, t)| (n, t.clone())));
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    push_u32(&mut out, model.num_classes())?;
    push_u32(&mut out, tensors.len())?;
    for (name, t) in &tensors {
        push_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        push_u32(&mut out, t.rank())?;
        for &d in t.shape() {
            push_u32(&mut out, d)?;
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.bytes.len() as u64, format!("truncated {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }
}

fn as_count(v: f64, offset: u64, what: &str) -> Result<usize> {
    if v.fract() != 0.0 || !(0.0..=u32::MAX as f64).contains(&v) {
        return Err(Error::format(offset, format!("{what} is not a count: {v}")));
    }
    Ok(v as usize)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format(0, "not a checkpoint (bad magic)"));
    }
    let num_classes = r.u32("class count")?;
    let count = r.u32("tensor count")?;
    let mut tensors: Vec<(String, Tensor, u64)> = Vec::new();
    for _ in 0..count {
        let at = r.pos as u64;
        let len = r.u32("name length")?;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::format(at, "tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u32("rank")?;
        let shape = (0..rank).map(|_| r.u32("shape")).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.ok_or_else(|| Error::format(at, format!("{name}: shape {shape:?} overflows")))?;
        let raw = r.take(
            n.checked_mul(8).ok_or_else(|| Error::format(at, "tensor too large"))?,
            "tensor data",
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::format(at, e.to_string()))?;
        tensors.push((name, t, at));
    }
    if r.pos != bytes.len() {
        return Err(Error::format(r.pos as u64, "trailing bytes after the last tensor"));
    }

    let end = bytes.len() as u64;
    let find = |name: &str| -> Result<(&Tensor, u64)> {
        tensors
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, t, at)| (t, *at))
            .ok_or_else(|| Error::format(end, format!("missing tensor {name}")))
    };
    let (kind, kind_at) = find("meta.kind")?;
    let (input, input_at) = find("meta.input")?;
    let (blocks, blocks_at) = find("meta.blocks")?;
    if input.len() != 3 || blocks.rank() != 2 || blocks.shape()[1] != 3 {
        return Err(Error::format(
            input_at.min(blocks_at),
            "malformed architecture metadata",
        ));
    }
    let cfg = BackboneConfig {
        input_channels: as_count(input.data()[0], input_at, "input channels")?,
        input_height: as_count(input.data()[1], input_at, "input height")?,
        input_width: as_count(input.data()[2], input_at, "input width")?,
        blocks: blocks
            .data()
            .chunks_exact(3)
            .map(|b| {
                Ok(ConvBlock {
                    out_channels: as_count(b[0], blocks_at, "block channels")?,
                    kernel: as_count(b[1], blocks_at, "block kernel")?,
                    pool: b[2] != 0.0,
                })
            })
            .collect::<Result<_>>()?,
    };
    let dropout = find("meta.dropout")?.0.data().first().copied().unwrap_or(f64::NAN);
    let (lw, lw_at) = find("meta.loss_weights")?;
    if lw.len() != 2 {
        return Err(Error::format(lw_at, "loss weights need two values"));
    }
    let weights = LossWeights {
        alpha: lw.data()[0],
        beta: lw.data()[1],
    };
    let norm = ChannelStats {
        mean: find("meta.norm_mean")?.0.data().to_vec(),
        std: find("meta.norm_std")?.0.data().to_vec(),
    };

    let mut model = match kind.data() {
        [k] if *k == 0.0 => Model::Baseline(BaselineModel::build(cfg, num_classes, dropout, 0)?),
        [k] if *k == 1.0 => {
            let (proj, proj_at) = find("bilinear.proj.weight")?;
            if proj.rank() != 2 {
                return Err(Error::format(proj_at, "projection weight must be a matrix"));
            }
            Model::TwoStream(TwoStreamModel::build(
                cfg,
                num_classes,
                proj.shape()[1],
                dropout,
                weights,
                0,
            )?)
        }
        _ => return Err(Error::format(kind_at, "unknown model kind")),
    };
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    for (name, slot) in names.iter().zip(model.params_mut()) {
        let (t, at) = find(name)?;
        if t.shape() != slot.shape() {
            return Err(Error::format(
                at,
                format!("{name}: shape {:?}, architecture expects {:?}", t.shape(), slot.shape()),
            ));
        }
        *slot = t.clone();
    }
    Ok(Checkpoint { model, norm })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(ckpt)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> BackboneConfig {
        BackboneConfig {
            input_channels: 1,
            input_height: 8,
            input_width: 8,
            blocks: vec![
                ConvBlock {
                    out_channels: 3,
                    kernel: 3,
                    pool: true,
                },
                ConvBlock {
                    out_channels: 2,
                    kernel: 1,
                    pool: false,
                },
            ],
        }
    }

    fn norm() -> ChannelStats {
        ChannelStats {
            mean: vec![0.25],
            std: vec![0.5],
        }
    }

    #[test]
    fn two_stream_round_trip() {
        let m = TwoStreamModel::build(small_cfg(), 4, 5, 0.3, LossWeights { alpha: 0.1, beta: 0.7 }, 9).unwrap();
        let ckpt = Checkpoint {
            model: Model::TwoStream(m),
            norm: norm(),
        };
        let back = decode_checkpoint(&encode_checkpoint(&ckpt).unwrap()).unwrap();
        assert_eq!(back, ckpt);
    }

    #[test]
    fn baseline_round_trip() {
        let m = BaselineModel::build(small_cfg(), 3, 0.5, 4).unwrap();
        let ckpt = Checkpoint {
            model: Model::Baseline(m),
            norm: norm(),
        };
        let back = decode_checkpoint(&encode_checkpoint(&ckpt).unwrap()).unwrap();
        assert_eq!(back, ckpt);
    }

    #[test]
    fn corruption_is_reported_with_offsets() {
        let m = BaselineModel::build(small_cfg(), 3, 0.5, 4).unwrap();
        let bytes = encode_checkpoint(&Checkpoint {
            model: Model::Baseline(m),
            norm: norm(),
        })
        .unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format { offset: 0, .. })));

        let cut = &bytes[..bytes.len() - 3];
        match decode_checkpoint(cut) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, cut.len() as u64),
            other => panic!("expected a format error, got {other:?}"),
        }

        let mut long = bytes.clone();
        long.push(0);
        match decode_checkpoint(&long) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, bytes.len() as u64),
            other => panic!("expected a format error, got {other:?}"),
        }
    }
}
