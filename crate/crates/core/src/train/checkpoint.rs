//! Binary checkpoint format.
//!
//! ```text
//! "CHAMCKPT"                 8 bytes
//! version                    u32
//! config                     grid, feature_channels, n_hidden, a_channels,
//!                            num_classes, seq_len, skip_stride, kernel_size,
//!                            head_hidden: u32 each;
//!                            g_activation (0 sigmoid, 1 tanh): u8
//!                            layer2_enabled: u8
//!                            attention_input (0 features, 1 hidden_only): u8
//!                            dropout_rate: f64
//! iteration                  u64
//! has_adam                   u8, followed by the Adam step (u64) when 1
//! tensor count               u32
//! tensors                    name length u32, UTF-8 name, rank u32,
//!                            dims u32 each, values f32
//! ```
//!
//! All integers and reals are little-endian. Parameter tensors come first in
//! [`ChamParams::tensors`] order, then `adam.m.<name>` and `adam.v.<name>`
//! for every parameter when Adam state is present.
//!
//! Values are rounded to f32 when a [`Checkpoint`] is built, so the in-memory
//! checkpoint and the file hold exactly the same numbers.

use std::fs;
use std::path::Path;

use crate::cell::AttentionInput;
use crate::error::{Error, Result};
use crate::model::{ChamConfig, ChamModel, ChamParams};
use crate::tensor::Activation;

use super::AdamState;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CHAMCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ChamConfig,
    pub params: ChamParams,
    /// Completed training iterations.
    pub iteration: u64,
    pub adam: Option<AdamState>,
}

fn quantize(v: &mut [f64]) {
    for x in v {
        *x = *x as f32 as f64;
    }
}

impl Checkpoint {
    /// Copies and rounds everything to f32 precision.
    pub fn new(
        config: &ChamConfig,
        params: &ChamParams,
        iteration: u64,
        adam: Option<&AdamState>,
    ) -> Result<Self> {
        config.validate()?;
        let expected = ChamParams::zeros(config);
        let same_layout = expected
            .tensors()
            .iter()
            .zip(params.tensors())
            .all(|(a, b)| a.name == b.name && a.dims == b.dims)
            && expected.tensors().len() == params.tensors().len();
        if !same_layout {
            return Err(Error::Invalid(
                "checkpoint parameters do not match the configuration".into(),
            ));
        }
        let mut params = params.clone();
        for t in params.tensors_mut() {
            quantize(t.data);
        }
        let adam = adam.map(|a| {
            let mut a = a.clone();
            a.m.iter_mut().chain(a.v.iter_mut()).for_each(|t| quantize(t));
            a
        });
        if let Some(a) = &adam {
            let lens: Vec<usize> = params.tensors().iter().map(|t| t.data.len()).collect();
            let ok = |moments: &Vec<Vec<f64>>| {
                moments.len() == lens.len() && moments.iter().zip(&lens).all(|(m, &l)| m.len() == l)
            };
            if !ok(&a.m) || !ok(&a.v) {
                return Err(Error::Invalid(
                    "optimizer moments do not mirror the parameter shapes".into(),
                ));
            }
        }
        Ok(Checkpoint {
            config: config.clone(),
            params,
            iteration,
            adam,
        })
    }

    pub fn model(&self) -> ChamModel {
        ChamModel {
            config: self.config.clone(),
            params: self.params.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let c = &self.config;
        for v in [
            c.grid,
            c.feature_channels,
            c.n_hidden,
            c.a_channels,
            c.num_classes,
            c.seq_len,
            c.skip_stride,
            c.kernel_size,
            c.head_hidden,
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.push(match c.g_activation {
            Activation::Sigmoid => 0,
            Activation::Tanh => 1,
        });
        out.push(c.layer2_enabled as u8);
        out.push(match c.attention_input {
            AttentionInput::Features => 0,
            AttentionInput::HiddenOnly => 1,
        });
        out.extend_from_slice(&c.dropout_rate.to_le_bytes());
        out.extend_from_slice(&self.iteration.to_le_bytes());
        match &self.adam {
            Some(a) => {
                out.push(1);
                out.extend_from_slice(&a.step.to_le_bytes());
            }
            None => out.push(0),
        }

        let tensors = self.params.tensors();
        let count = tensors.len() * if self.adam.is_some() { 3 } else { 1 };
        out.extend_from_slice(&(count as u32).to_le_bytes());
        let mut put = |name: &str, dims: &[usize], data: &[f64]| {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
            for &d in dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in data {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        };
        for t in &tensors {
            put(&t.name, &t.dims, t.data);
        }
        if let Some(a) = &self.adam {
            for (t, m) in tensors.iter().zip(&a.m) {
                put(&format!("adam.m.{}", t.name), &t.dims, m);
            }
            for (t, v) in tensors.iter().zip(&a.v) {
                put(&format!("adam.v.{}", t.name), &t.dims, v);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], context: &str) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            context,
        };
        let magic = r.take(8, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(r.error(0, format!("bad magic {:?}, expected \"CHAMCKPT\"", String::from_utf8_lossy(magic))));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(r.error(8, format!("unsupported version {version}, expected {CHECKPOINT_VERSION}")));
        }
        let mut dims = [0usize; 9];
        for d in &mut dims {
            *d = r.u32("config")? as usize;
        }
        let at = r.pos;
        let g_activation = match r.u8("config")? {
            0 => Activation::Sigmoid,
            1 => Activation::Tanh,
            v => return Err(r.error(at, format!("unknown g_activation code {v}"))),
        };
        let at = r.pos;
        let layer2_enabled = match r.u8("config")? {
            0 => false,
            1 => true,
            v => return Err(r.error(at, format!("invalid layer2_enabled flag {v}"))),
        };
        let at = r.pos;
        let attention_input = match r.u8("config")? {
            0 => AttentionInput::Features,
            1 => AttentionInput::HiddenOnly,
            v => return Err(r.error(at, format!("unknown attention_input code {v}"))),
        };
        let dropout_rate = f64::from_le_bytes(r.take(8, "config")?.try_into().unwrap());
        let config = ChamConfig {
            grid: dims[0],
            feature_channels: dims[1],
            n_hidden: dims[2],
            a_channels: dims[3],
            num_classes: dims[4],
            seq_len: dims[5],
            skip_stride: dims[6],
            kernel_size: dims[7],
            head_hidden: dims[8],
            g_activation,
            attention_input,
            dropout_rate,
            layer2_enabled,
        };
        config
            .validate()
            .map_err(|e| r.error(12, format!("stored configuration is invalid: {e}")))?;
        let iteration = r.u64("iteration")?;
        let at = r.pos;
        let adam_step = match r.u8("adam flag")? {
            0 => None,
            1 => Some(r.u64("adam step")?),
            v => return Err(r.error(at, format!("invalid adam flag {v}"))),
        };

        let mut params = ChamParams::zeros(&config);
        let layout: Vec<(String, Vec<usize>)> =
            params.tensors().into_iter().map(|t| (t.name, t.dims)).collect();
        let expected = layout.len() * if adam_step.is_some() { 3 } else { 1 };
        let at = r.pos;
        let count = r.u32("tensor count")? as usize;
        if count != expected {
            return Err(r.error(at, format!("expected {expected} tensors, found {count}")));
        }
        for (slot, (name, dims)) in layout.iter().enumerate() {
            let values = r.tensor(name, dims)?;
            params.tensors_mut()[slot].data.copy_from_slice(&values);
        }
        let adam = match adam_step {
            None => None,
            Some(step) => {
                let mut m = Vec::with_capacity(layout.len());
                for (name, dims) in &layout {
                    m.push(r.tensor(&format!("adam.m.{name}"), dims)?);
                }
                let mut v = Vec::with_capacity(layout.len());
                for (name, dims) in &layout {
                    v.push(r.tensor(&format!("adam.v.{name}"), dims)?);
                }
                Some(AdamState { m, v, step })
            }
        };
        if r.pos != bytes.len() {
            return Err(r.error(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            config,
            params,
            iteration,
            adam,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    context: &'a str,
}

impl<'a> Reader<'a> {
    fn error(&self, offset: usize, message: String) -> Error {
        Error::Format {
            context: self.context.to_string(),
            offset: offset as u64,
            message,
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error(
                self.pos,
                format!(
                    "truncated {what}: expected {n} bytes, found {}",
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn tensor(&mut self, name: &str, dims: &[usize]) -> Result<Vec<f64>> {
        let at = self.pos;
        let len = self.u32("tensor name length")? as usize;
        let found = self.take(len, "tensor name")?;
        if found != name.as_bytes() {
            return Err(self.error(
                at,
                format!("expected tensor {name}, found {}", String::from_utf8_lossy(found)),
            ));
        }
        let at = self.pos;
        let rank = self.u32("tensor rank")? as usize;
        let mut stored = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            stored.push(self.u32("tensor dims")? as usize);
        }
        if stored != dims {
            return Err(self.error(at, format!("{name}: expected dims {dims:?}, found {stored:?}")));
        }
        let n: usize = dims.iter().product();
        let raw = self.take(4 * n, name)?;
        Ok(raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect())
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, &path.display().to_string())
}
