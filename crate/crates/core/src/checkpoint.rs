//! Session checkpoints: the mixture bank in a `VMFB` container,
//! optionally followed by a `THET` section holding the backbone.
//!
//! Layout (all little-endian):
//!
//! ```text
//! "VMFB" | version u32 | dim u32 | kappa f32 | classes u32
//!   per class: class_id u32 | K u32 | K*dim f32
//! ["THET" | layers u32 | per layer: in u32 | out u32 | in*out f64 | out f64]
//! ```
//!
//! Means are stored as `f32` and re-normalized on load.

use std::path::Path;

use crate::backbone::{BackboneParams, Layer};
use crate::error::{Error, Result};
use crate::mixture::{ClassMixture, ModelBank};
use crate::vmf::normalize;

pub const BANK_MAGIC: &[u8; 4] = b"VMFB";
pub const BACKBONE_TAG: &[u8; 4] = b"THET";
pub const BANK_VERSION: u32 = 1;

pub fn encode_checkpoint(bank: &ModelBank, backbone: Option<&BackboneParams>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(BANK_MAGIC);
    out.extend_from_slice(&BANK_VERSION.to_le_bytes());
    out.extend_from_slice(&(bank.dim() as u32).to_le_bytes());
    out.extend_from_slice(&(bank.kappa() as f32).to_le_bytes());
    out.extend_from_slice(&(bank.num_classes() as u32).to_le_bytes());
    for m in bank.mixtures() {
        out.extend_from_slice(&m.class_id.to_le_bytes());
        out.extend_from_slice(&(m.num_components() as u32).to_le_bytes());
        for mean in m.means() {
            for &x in mean.as_slice() {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
    }
    if let Some(p) = backbone {
        out.extend_from_slice(BACKBONE_TAG);
        out.extend_from_slice(&(p.layers().len() as u32).to_le_bytes());
        for l in p.layers() {
            out.extend_from_slice(&(l.in_dim as u32).to_le_bytes());
            out.extend_from_slice(&(l.out_dim as u32).to_le_bytes());
            for x in l.weight.iter().chain(&l.bias) {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Parse { offset: self.at as u64, message: format!("truncated {what}") });
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelBank, Option<BackboneParams>)> {
    let mut c = Cursor { bytes, at: 0 };
    if c.take(4, "magic")? != BANK_MAGIC {
        return Err(Error::Parse { offset: 0, message: "bad magic, expected \"VMFB\"".into() });
    }
    let version = c.u32("version")?;
    if version != BANK_VERSION {
        return Err(Error::Parse { offset: 4, message: format!("unsupported version {version}") });
    }
    let dim = c.u32("dim")? as usize;
    let kappa = c.f32("kappa")? as f64;
    let mut bank = ModelBank::new(dim, kappa)?;
    let classes = c.u32("class count")?;
    for _ in 0..classes {
        let class = c.u32("class id")?;
        let k = c.u32("component count")? as usize;
        let mut means = Vec::with_capacity(k);
        for _ in 0..k {
            let at = c.at;
            let raw: Vec<f64> = (0..dim).map(|_| c.f32("mean").map(f64::from)).collect::<Result<_>>()?;
            means.push(normalize(&raw).map_err(|e| Error::Parse { offset: at as u64, message: e.to_string() })?);
        }
        bank.insert(ClassMixture::new(class, means))?;
    }
    if c.at == bytes.len() {
        return Ok((bank, None));
    }
    let at = c.at;
    if c.take(4, "section tag")? != BACKBONE_TAG {
        return Err(Error::Parse { offset: at as u64, message: "unknown section tag".into() });
    }
    let n = c.u32("layer count")?;
    let mut layers = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let in_dim = c.u32("layer shape")? as usize;
        let out_dim = c.u32("layer shape")? as usize;
        let weight = (0..in_dim * out_dim).map(|_| c.f64("weight")).collect::<Result<_>>()?;
        let bias = (0..out_dim).map(|_| c.f64("bias")).collect::<Result<_>>()?;
        layers.push(Layer { in_dim, out_dim, weight, bias });
    }
    if c.at != bytes.len() {
        return Err(Error::Parse { offset: c.at as u64, message: "trailing bytes after backbone section".into() });
    }
    Ok((bank, Some(BackboneParams::from_layers(layers)?)))
}

pub fn write_checkpoint(path: &Path, bank: &ModelBank, backbone: Option<&BackboneParams>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(bank, backbone))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<(ModelBank, Option<BackboneParams>)> {
    decode_checkpoint(&std::fs::read(path)?)
}
