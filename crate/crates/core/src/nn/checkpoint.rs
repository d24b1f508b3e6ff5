//! Binary checkpoint format.
//!
//! ```text
//! "TFTC" | version u16 | epoch u32 | count u32
//! count x { name_len u16 | name utf-8 | trainable u8 | ndim u8 | dims u32.. | f32 payload }
//! has_adam u8
//! if has_adam: step u64 | lr, beta1, beta2, eps, weight_decay f64
//!              for each trainable record in order: m f32[numel] | v f32[numel]
//! ```
//!
//! All integers and floats are little-endian.

use std::path::Path;

use crate::error::{Error, Result};

use super::{Adam, AdamConfig, AdamState, ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"TFTC";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamRecord {
    pub name: String,
    pub trainable: bool,
    pub tensor: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub epoch: u32,
    pub params: Vec<ParamRecord>,
    pub adam: Option<(AdamConfig, AdamState<f32>)>,
}

impl Checkpoint {
    pub fn capture(store: &ParamStore<f32>, adam: Option<&Adam<f32>>, epoch: u32) -> Self {
        Self {
            epoch,
            params: store
                .iter()
                .map(|(_, p)| ParamRecord {
                    name: p.name.clone(),
                    trainable: p.trainable,
                    tensor: p.tensor.clone(),
                })
                .collect(),
            adam: adam.map(|a| (a.config, a.state.clone())),
        }
    }

    /// Copies values into a store built for the same architecture.
    pub fn restore(&self, store: &mut ParamStore<f32>) -> Result<()> {
        if store.len() != self.params.len() {
            return Err(Error::format(
                "checkpoint",
                format!(
                    "{} parameters in file, model expects {}",
                    self.params.len(),
                    store.len()
                ),
            ));
        }
        for rec in &self.params {
            let id = store.id(&rec.name).ok_or_else(|| {
                Error::format("checkpoint", format!("unknown parameter {}", rec.name))
            })?;
            let p = store.get_mut(id);
            if p.tensor.shape() != rec.tensor.shape() || p.trainable != rec.trainable {
                return Err(Error::format(
                    "checkpoint",
                    format!(
                        "{}: file has {:?}, model expects {:?}",
                        rec.name,
                        rec.tensor.shape(),
                        p.tensor.shape()
                    ),
                ));
            }
            p.tensor = rec.tensor.clone();
        }
        Ok(())
    }

    /// Rebuilds the optimizer; `None` when the file carries no Adam state.
    pub fn optimizer(&self) -> Option<Adam<f32>> {
        self.adam.as_ref().map(|(config, state)| Adam {
            config: *config,
            state: state.clone(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for rec in &self.params {
            out.extend_from_slice(&(rec.name.len() as u16).to_le_bytes());
            out.extend_from_slice(rec.name.as_bytes());
            out.push(rec.trainable as u8);
            out.push(rec.tensor.ndim() as u8);
            for &d in rec.tensor.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            put_f32s(&mut out, rec.tensor.data());
        }
        match &self.adam {
            None => out.push(0),
            Some((cfg, state)) => {
                out.push(1);
                out.extend_from_slice(&state.step.to_le_bytes());
                for v in [cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                for (i, rec) in self.params.iter().enumerate() {
                    if rec.trainable {
                        put_f32s(&mut out, &state.m[i]);
                        put_f32s(&mut out, &state.v[i]);
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "checkpoint");
        if r.take(4)? != MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::format(
                "checkpoint",
                format!("unsupported version {version}, expected {VERSION}"),
            ));
        }
        let epoch = r.u32()?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::format("checkpoint", "parameter name is not utf-8"))?;
            let trainable = match r.u8()? {
                0 => false,
                1 => true,
                b => return Err(Error::format("checkpoint", format!("bad trainable flag {b}"))),
            };
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let numel = checked_numel(&shape)?;
            let data = r.f32s(numel)?;
            let tensor = Tensor::new(&shape, data)
                .map_err(|e| Error::format("checkpoint", format!("{name}: {e}")))?;
            params.push(ParamRecord {
                name,
                trainable,
                tensor,
            });
        }
        let adam = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let mut h = [0.0f64; 5];
                for v in &mut h {
                    *v = r.f64()?;
                }
                let cfg = AdamConfig {
                    lr: h[0],
                    beta1: h[1],
                    beta2: h[2],
                    eps: h[3],
                    weight_decay: h[4],
                };
                let mut m = Vec::with_capacity(params.len());
                let mut v = Vec::with_capacity(params.len());
                for rec in &params {
                    if rec.trainable {
                        m.push(r.f32s(rec.tensor.numel())?);
                        v.push(r.f32s(rec.tensor.numel())?);
                    } else {
                        m.push(Vec::new());
                        v.push(Vec::new());
                    }
                }
                Some((cfg, AdamState { step, m, v }))
            }
            b => return Err(Error::format("checkpoint", format!("bad optimizer flag {b}"))),
        };
        if !r.is_empty() {
            return Err(Error::format("checkpoint", "trailing bytes"));
        }
        Ok(Self {
            epoch,
            params,
            adam,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub(crate) fn checked_numel(shape: &[usize]) -> Result<usize> {
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n > 0 && n < (1 << 31))
        .ok_or_else(|| Error::format("tensor header", format!("implausible shape {shape:?}")))
}

fn put_f32s(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Bounds-checked little-endian cursor.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Self { bytes, pos: 0, what }
    }

    pub fn is_empty(&self) -> bool {
        self.pos == self.bytes.len()
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(
                self.what,
                format!("truncated at byte {} (wanted {n} more)", self.pos),
            )),
        }
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        self.array().map(u16::from_le_bytes)
    }

    pub fn u32(&mut self) -> Result<u32> {
        self.array().map(u32::from_le_bytes)
    }

    pub fn u64(&mut self) -> Result<u64> {
        self.array().map(u64::from_le_bytes)
    }

    pub fn f64(&mut self) -> Result<f64> {
        self.array().map(f64::from_le_bytes)
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let len = n
            .checked_mul(4)
            .ok_or_else(|| Error::format(self.what, "payload length overflow"))?;
        Ok(self
            .take(len)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
