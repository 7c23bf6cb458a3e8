//! Checkpoint file.
//!
//! `AIRDCKPT`, `u32` version, 4-byte section tag, `u32` layer count, then per
//! layer `u32` inputs, `u32` outputs, `u8` activation code, `f32` weights
//! row-major and `f32` biases; then the metadata-encoder table (`u32` vocab,
//! `u32` width, `f32` rows; zero sizes when absent); then a `u8` flag and,
//! when set, the optimizer states.

use std::fs;
use std::path::Path;

use super::{Activation, Adam, AdamConfig, Layer};
use crate::binio::{Reader, Writer};
use crate::error::{AirdError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"AIRDCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SectionTag {
    /// Metadata generator (counterfeiter).
    Mg,
    /// Consistency verifier (detector).
    Cv,
    /// Metadata-predictor baseline.
    Mp,
}

impl SectionTag {
    fn bytes(self) -> [u8; 4] {
        match self {
            SectionTag::Mg => *b"MG\0\0",
            SectionTag::Cv => *b"CV\0\0",
            SectionTag::Mp => *b"MP\0\0",
        }
    }

    fn parse(b: &[u8]) -> Result<Self> {
        match b {
            b"MG\0\0" => Ok(SectionTag::Mg),
            b"CV\0\0" => Ok(SectionTag::Cv),
            b"MP\0\0" => Ok(SectionTag::Mp),
            _ => Err(AirdError::format(format!("unknown section tag {b:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderTable {
    pub vocab: usize,
    pub width: usize,
    pub rows: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tag: SectionTag,
    pub layers: Vec<Layer>,
    pub encoder: Option<EncoderTable>,
    pub optimizers: Vec<Adam>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.bytes(&self.tag.bytes());
        w.len_u32(self.layers.len())?;
        for l in &self.layers {
            w.len_u32(l.inputs)?;
            w.len_u32(l.outputs)?;
            w.u8(l.activation.code());
            w.f32s(&l.weights);
            w.f32s(&l.bias);
        }
        match &self.encoder {
            Some(e) => {
                w.len_u32(e.vocab)?;
                w.len_u32(e.width)?;
                w.f32s(&e.rows);
            }
            None => {
                w.u32(0);
                w.u32(0);
            }
        }
        w.u8(u8::from(!self.optimizers.is_empty()));
        if !self.optimizers.is_empty() {
            w.len_u32(self.optimizers.len())?;
            for opt in &self.optimizers {
                let c = opt.config;
                for v in [c.lr, c.beta1, c.beta2, c.eps] {
                    w.f64(v);
                }
                w.len_u32(opt.tensor_count())?;
                for t in 0..opt.tensor_count() {
                    w.len_u32(opt.first[t].len())?;
                    w.u64(opt.steps[t]);
                    w.f64s(&opt.first[t]);
                    w.f64s(&opt.second[t]);
                }
            }
        }
        Ok(w.buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_magic(CHECKPOINT_MAGIC)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(AirdError::format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let tag = SectionTag::parse(r.take(4)?)?;
        let count = r.u32()? as usize;
        let mut layers = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let inputs = r.u32()? as usize;
            let outputs = r.u32()? as usize;
            let code = r.u8()?;
            let activation = Activation::from_code(code)
                .ok_or_else(|| AirdError::format(format!("bad activation code {code}")))?;
            let weights = r.f32s(inputs.checked_mul(outputs).ok_or_else(|| AirdError::format("size overflow"))?)?;
            let bias = r.f32s(outputs)?;
            layers.push(Layer {
                inputs,
                outputs,
                weights,
                bias,
                activation,
            });
        }
        let vocab = r.u32()? as usize;
        let width = r.u32()? as usize;
        let encoder = if vocab == 0 && width == 0 {
            None
        } else {
            let rows = r.f32s(vocab.checked_mul(width).ok_or_else(|| AirdError::format("size overflow"))?)?;
            Some(EncoderTable { vocab, width, rows })
        };
        let mut optimizers = Vec::new();
        match r.u8()? {
            0 => {}
            1 => {
                let n = r.u32()? as usize;
                for _ in 0..n {
                    let config = AdamConfig {
                        lr: r.f64()?,
                        beta1: r.f64()?,
                        beta2: r.f64()?,
                        eps: r.f64()?,
                    };
                    let tensors = r.u32()? as usize;
                    let mut opt = Adam::new(config, &[]);
                    for _ in 0..tensors {
                        let len = r.u32()? as usize;
                        opt.steps.push(r.u64()?);
                        opt.first.push(r.f64s(len)?);
                        opt.second.push(r.f64s(len)?);
                    }
                    optimizers.push(opt);
                }
            }
            other => return Err(AirdError::format(format!("bad optimizer flag {other}"))),
        }
        r.finish()?;
        Ok(Self {
            tag,
            layers,
            encoder,
            optimizers,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn expect_tag(self, tag: SectionTag) -> Result<Self> {
        if self.tag == tag {
            Ok(self)
        } else {
            Err(AirdError::format(format!(
                "expected a {tag:?} checkpoint, found {:?}",
                self.tag
            )))
        }
    }
}
