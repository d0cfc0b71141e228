//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "ARTLNKCK"
//! version      u32
//! config       vocab_size, max_positions, hidden_dim, num_layers,
//!              num_heads, ffn_dim as u64; dropout_rate f64; seed u64
//! stage        u8       0 = base, 1 = art-pretrained, 2 = fine-tuned
//! epoch        u32
//! metrics      u32 count, then (u16 name length, UTF-8 name, f64 value)
//! tensors      u32 count, then (u16 name length, UTF-8 name, u32 ndims,
//!              u64 dims[ndims], f32 data[product(dims)])
//! ```

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{EncoderModel, ModelConfig, NamedTensor};

pub const MAGIC: &[u8; 8] = b"ARTLNKCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Base,
    ArtPretrained,
    FineTuned,
}

impl Stage {
    fn code(self) -> u8 {
        match self {
            Stage::Base => 0,
            Stage::ArtPretrained => 1,
            Stage::FineTuned => 2,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Stage::Base),
            1 => Ok(Stage::ArtPretrained),
            2 => Ok(Stage::FineTuned),
            c => Err(Error::Checkpoint(format!("unknown stage tag {c}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Base => "base",
            Stage::ArtPretrained => "art-pretrained",
            Stage::FineTuned => "fine-tuned",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Stage::Base),
            "art-pretrained" | "art" => Ok(Stage::ArtPretrained),
            "fine-tuned" => Ok(Stage::FineTuned),
            other => Err(Error::InvalidArgument(format!("unknown stage {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: EncoderModel<f32>,
    pub stage: Stage,
    pub epoch: u32,
    pub metrics: Vec<(String, f64)>,
}

impl Checkpoint {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let c = &self.model.config;
        for v in [c.vocab_size, c.max_positions, c.hidden_dim, c.num_layers, c.num_heads, c.ffn_dim] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        out.extend_from_slice(&c.dropout_rate.to_le_bytes());
        out.extend_from_slice(&c.seed.to_le_bytes());
        out.push(self.stage.code());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&(self.metrics.len() as u32).to_le_bytes());
        for (name, value) in &self.metrics {
            write_name(&mut out, name);
            out.extend_from_slice(&value.to_le_bytes());
        }
        out.extend_from_slice(&(self.model.params.len() as u32).to_le_bytes());
        for p in &self.model.params {
            write_name(&mut out, &p.name);
            out.extend_from_slice(&2u32.to_le_bytes());
            out.extend_from_slice(&(p.tensor.rows as u64).to_le_bytes());
            out.extend_from_slice(&(p.tensor.cols as u64).to_le_bytes());
            for x in &p.tensor.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let mut dims = [0usize; 6];
        for d in dims.iter_mut() {
            *d = r.u64()? as usize;
        }
        let config = ModelConfig {
            vocab_size: dims[0],
            max_positions: dims[1],
            hidden_dim: dims[2],
            num_layers: dims[3],
            num_heads: dims[4],
            ffn_dim: dims[5],
            dropout_rate: r.f64()?,
            seed: r.u64()?,
        };
        config.validate()?;
        let stage = Stage::from_code(r.take(1)?[0])?;
        let epoch = r.u32()?;
        let n_metrics = r.u32()? as usize;
        let mut metrics = Vec::with_capacity(n_metrics.min(1024));
        for _ in 0..n_metrics {
            let name = r.name()?;
            metrics.push((name, r.f64()?));
        }
        let n_tensors = r.u32()? as usize;
        let expected = config.parameter_shapes();
        if n_tensors != expected.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors for this configuration, found {n_tensors}",
                expected.len()
            )));
        }
        let mut params = Vec::with_capacity(n_tensors);
        for (want_name, want_shape) in expected {
            let name = r.name()?;
            let ndims = r.u32()?;
            if ndims != 2 {
                return Err(Error::Checkpoint(format!("tensor {name} has {ndims} dims, expected 2")));
            }
            let shape = (r.u64()? as usize, r.u64()? as usize);
            if name != want_name || shape != want_shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} {shape:?} does not match {want_name} {want_shape:?}"
                )));
            }
            let n = shape.0 * shape.1;
            let raw = r.take(n * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                .collect();
            params.push(NamedTensor {
                name,
                tensor: Tensor::new(shape.0, shape.1, data),
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            model: EncoderModel { config, params },
            stage,
            epoch,
            metrics,
        })
    }
}

fn write_name(out: &mut Vec<u8>, name: &str) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn name(&mut self) -> Result<String> {
        let len = u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")) as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, checkpoint: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, checkpoint.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
