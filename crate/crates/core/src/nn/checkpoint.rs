//! Binary checkpoint format.
//!
//! All integers are little-endian `u32`, all parameter values `f32`:
//!
//! ```text
//! "HCP1" | version | input rank | input dims...
//! layer count | per layer: kind u8 + kind-specific fields
//! param count | per param: rank | dims... | lr group | values... | momentum...
//! stage u8 (0 pretrain, 1 ift, 2 hft) | epoch | mean len | mean f32...
//! ```
//!
//! Layer records: conv `out_channels kernel stride pad lr_group`, relu and
//! softmax empty, maxpool `kernel stride`, fc `out_units lr_group`, dropout a
//! little-endian `f64` ratio.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::network::{Layer, LayerSpec, Network};
use super::optim::Parameter;

pub const MAGIC: &[u8; 4] = b"HCP1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Pretrain,
    Ift,
    Hft,
}

impl Stage {
    fn tag(self) -> u8 {
        match self {
            Stage::Pretrain => 0,
            Stage::Ift => 1,
            Stage::Hft => 2,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Stage::Pretrain),
            1 => Ok(Stage::Ift),
            2 => Ok(Stage::Hft),
            t => Err(Error::format("checkpoint", format!("unknown stage tag {t}"))),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Pretrain => "pretrain",
            Stage::Ift => "ift",
            Stage::Hft => "hft",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Stage::Pretrain),
            "ift" => Ok(Stage::Ift),
            "hft" => Ok(Stage::Hft),
            other => Err(Error::InvalidArgument(format!("unknown stage {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: Network<f32>,
    pub stage: Stage,
    pub epoch: u32,
    /// Per-channel input mean subtracted before the first layer.
    pub mean: Vec<f32>,
}

impl Checkpoint {
    pub fn expect_stage(&self, expected: Stage) -> Result<()> {
        if self.stage != expected {
            return Err(Error::StageMismatch {
                expected: expected.to_string(),
                found: self.stage.to_string(),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(FORMAT_VERSION);
        let input = self.network.input_shape();
        w.u32(input.len() as u32);
        input.iter().for_each(|&d| w.u32(d as u32));

        let layers = self.network.layers();
        w.u32(layers.len() as u32);
        for layer in layers {
            match layer.spec {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    pad,
                    lr_group,
                } => {
                    w.u8(0);
                    [out_channels, kernel, stride, pad, lr_group]
                        .iter()
                        .for_each(|&v| w.u32(v as u32));
                }
                LayerSpec::Relu => w.u8(1),
                LayerSpec::MaxPool { kernel, stride } => {
                    w.u8(2);
                    w.u32(kernel as u32);
                    w.u32(stride as u32);
                }
                LayerSpec::Fc {
                    out_units,
                    lr_group,
                } => {
                    w.u8(3);
                    w.u32(out_units as u32);
                    w.u32(lr_group as u32);
                }
                LayerSpec::Dropout { ratio } => {
                    w.u8(4);
                    w.0.extend_from_slice(&ratio.to_le_bytes());
                }
                LayerSpec::Softmax => w.u8(5),
            }
        }

        let params: Vec<&Parameter<f32>> = self.network.params().collect();
        w.u32(params.len() as u32);
        for p in params {
            let shape = p.value.shape();
            w.u32(shape.len() as u32);
            shape.iter().for_each(|&d| w.u32(d as u32));
            w.u32(p.lr_group as u32);
            p.value.data().iter().for_each(|&v| w.f32(v));
            p.momentum.data().iter().for_each(|&v| w.f32(v));
        }

        w.u8(self.stage.tag());
        w.u32(self.epoch);
        w.u32(self.mean.len() as u32);
        self.mean.iter().for_each(|&v| w.f32(v));
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::format(
                "checkpoint",
                format!("unsupported version {version}"),
            ));
        }
        let rank = r.u32()? as usize;
        let input: Vec<usize> = (0..rank).map(|_| r.usize()).collect::<Result<_>>()?;

        let layer_count = r.u32()? as usize;
        let mut specs = Vec::with_capacity(layer_count.min(1024));
        for _ in 0..layer_count {
            let spec = match r.u8()? {
                0 => LayerSpec::Conv {
                    out_channels: r.usize()?,
                    kernel: r.usize()?,
                    stride: r.usize()?,
                    pad: r.usize()?,
                    lr_group: r.usize()?,
                },
                1 => LayerSpec::Relu,
                2 => LayerSpec::MaxPool {
                    kernel: r.usize()?,
                    stride: r.usize()?,
                },
                3 => LayerSpec::Fc {
                    out_units: r.usize()?,
                    lr_group: r.usize()?,
                },
                4 => {
                    let b: [u8; 8] = r.take(8)?.try_into().expect("8 bytes");
                    LayerSpec::Dropout {
                        ratio: f64::from_le_bytes(b),
                    }
                }
                5 => LayerSpec::Softmax,
                k => return Err(Error::format("checkpoint", format!("unknown layer kind {k}"))),
            };
            specs.push(spec);
        }

        let param_count = r.u32()? as usize;
        let mut params = Vec::with_capacity(param_count.min(1024));
        for _ in 0..param_count {
            let rank = r.u32()? as usize;
            let shape: Vec<usize> = (0..rank).map(|_| r.usize()).collect::<Result<_>>()?;
            let lr_group = r.usize()?;
            let n: usize = shape.iter().product();
            if n > bytes.len() {
                return Err(Error::format("checkpoint", "parameter larger than file"));
            }
            let value = r.f32s(n)?;
            let momentum = r.f32s(n)?;
            let mut p = Parameter::new(Tensor::new(shape.clone(), value)?, lr_group);
            p.momentum = Tensor::new(shape, momentum)?;
            params.push(p);
        }

        let stage = Stage::from_tag(r.u8()?)?;
        let epoch = r.u32()?;
        let mean_len = r.u32()? as usize;
        let mean = r.f32s(mean_len)?;
        if r.pos != bytes.len() {
            return Err(Error::format("checkpoint", "trailing bytes"));
        }

        let mut params = params.into_iter();
        let mut layers = Vec::with_capacity(specs.len());
        for spec in specs {
            let count = match spec {
                LayerSpec::Conv { .. } | LayerSpec::Fc { .. } => 2,
                _ => 0,
            };
            let ps: Vec<_> = params.by_ref().take(count).collect();
            if ps.len() != count {
                return Err(Error::format("checkpoint", "too few parameter blocks"));
            }
            layers.push(Layer { spec, params: ps });
        }
        if params.next().is_some() {
            return Err(Error::format("checkpoint", "too many parameter blocks"));
        }
        let network = Network::from_layers(input, layers)
            .map_err(|e| Error::format("checkpoint", e.to_string()))?;
        Ok(Checkpoint {
            network,
            stage,
            epoch,
            mean,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format("checkpoint", "unexpected end of file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::format("checkpoint", "size overflow"))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}
