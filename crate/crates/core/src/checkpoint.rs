//! Binary checkpoints: named `f32` parameters plus optional Adam state.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "TSAL" | version u32 | count u32
//! count x { name_len u32 | name utf-8 | rank u32 | extents u32 x rank | data f32 x numel }
//! has_adam u8 | [ step u64 | beta1 f64 | beta2 f64 | eps f64 | m data | v data ]
//! ```
//!
//! The Adam moment buffers follow the parameter order and shapes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::AdamState;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TSAL";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub names: Vec<String>,
    pub params: Vec<Tensor<f32>>,
    pub adam: Option<AdamState<f32>>,
}

impl Checkpoint {
    pub fn from_model(model: &Model<f32>, adam: Option<&AdamState<f32>>) -> Self {
        Self {
            names: model.param_names().to_vec(),
            params: model.params().to_vec(),
            adam: adam.cloned(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, self.params.len() as u32);
        for (name, t) in self.names.iter().zip(&self.params) {
            put_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.rank() as u32);
            for &e in t.shape() {
                put_u32(&mut out, e as u32);
            }
            put_f32s(&mut out, t.data());
        }
        match &self.adam {
            None => out.push(0),
            Some(a) => {
                out.push(1);
                out.extend_from_slice(&a.step.to_le_bytes());
                for x in [a.beta1, a.beta2, a.eps] {
                    out.extend_from_slice(&x.to_le_bytes());
                }
                for t in a.m.iter().chain(&a.v) {
                    put_f32s(&mut out, t.data());
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut names = Vec::with_capacity(count.min(1 << 16));
        let mut params = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint(format!("parameter name at byte {} is not utf-8", r.pos)))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().product();
            params.push(Tensor::new(shape, r.f32s(numel)?)?);
            names.push(name);
        }
        let adam = match r.take(1)?[0] {
            0 => None,
            1 => {
                let step = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
                let mut f = || r.take(8).map(|b| f64::from_le_bytes(b.try_into().unwrap()));
                let (beta1, beta2, eps) = (f()?, f()?, f()?);
                let moments = |r: &mut Reader| -> Result<Vec<Tensor<f32>>> {
                    params
                        .iter()
                        .map(|p| Tensor::new(p.shape().to_vec(), r.f32s(p.numel())?))
                        .collect()
                };
                let m = moments(&mut r)?;
                let v = moments(&mut r)?;
                Some(AdamState { step, beta1, beta2, eps, m, v })
            }
            b => return Err(Error::Checkpoint(format!("bad optimizer flag {b}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { names, params, adam })
    }

    /// Writes via a temporary file so a crash never leaves a torn checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.encode()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    /// Copies the weights into `model`, which must have the same names and shapes.
    pub fn apply_to(&self, model: &mut Model<f32>) -> Result<()> {
        if self.names != model.param_names() {
            let missing = model
                .param_names()
                .iter()
                .find(|n| !self.names.contains(n))
                .map_or_else(|| "order differs".to_string(), |n| format!("missing {n}"));
            return Err(Error::Checkpoint(format!("parameters do not match the model: {missing}")));
        }
        model
            .set_params(self.params.clone())
            .map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, data: &[f32]) {
    for x in data {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated: wanted {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("extent overflow".into()))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}
