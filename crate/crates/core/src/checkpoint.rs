//! Parameter checkpoint container.
//!
//! Layout: magic `PMUD`, u32 version, u32 entry count, then per entry
//! {u16 name length, name bytes, u8 ndim, u32 dims..., raw little-endian
//! 32-bit reals}, and a trailing CRC32 over everything before it.
//! Trivially parseable in any language.

use std::fs;
use std::path::Path;

use ndarray::ArrayD;

use crate::error::{Error, Result};
use crate::nn::ParamSet;

pub const MAGIC: &[u8; 4] = b"PMUD";
pub const VERSION: u32 = 1;

/// A loaded (or about-to-be-saved) set of named tensors, in file order.
#[derive(Clone, Debug, Default)]
pub struct ParamBundle {
    pub entries: Vec<(String, ArrayD<f64>)>,
}

impl ParamBundle {
    pub fn from_params<P: ParamSet>(params: &P) -> Self {
        ParamBundle {
            entries: params
                .entries()
                .iter()
                .map(|e| (e.name.clone(), e.view.to_owned()))
                .collect(),
        }
    }

    /// Concatenate several networks into one bundle.
    pub fn from_sections(sections: &[&dyn ParamSet]) -> Self {
        let mut entries = Vec::new();
        for s in sections {
            for e in s.entries() {
                entries.push((e.name.clone(), e.view.to_owned()));
            }
        }
        ParamBundle { entries }
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    /// Copy this bundle's tensors into a parameter set. Every entry of the
    /// target must be present with an identical shape; the first mismatch is
    /// reported by name.
    pub fn load_into<P: ParamSet>(&self, params: &mut P) -> Result<()> {
        for e in params.entries_mut() {
            let found = self.entries.iter().find(|(n, _)| *n == e.name);
            let Some((_, tensor)) = found else {
                return Err(Error::IncompatibleCheckpoint(format!(
                    "missing entry {}",
                    e.name
                )));
            };
            if tensor.shape() != e.view.shape() {
                return Err(Error::IncompatibleCheckpoint(format!(
                    "entry {} has shape {:?}, expected {:?}",
                    e.name,
                    tensor.shape(),
                    e.view.shape()
                )));
            }
            let mut view = e.view;
            view.assign(tensor);
        }
        Ok(())
    }
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

/// Serialize a bundle to the container format (values stored as f32).
pub fn encode(bundle: &ParamBundle) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    push_u32(&mut buf, VERSION);
    push_u32(&mut buf, bundle.entries.len() as u32);
    for (name, tensor) in &bundle.entries {
        let name_bytes = name.as_bytes();
        if name_bytes.len() > u16::MAX as usize {
            return Err(Error::InvalidParam(format!("entry name too long: {name}")));
        }
        buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        let ndim = tensor.ndim();
        if ndim > u8::MAX as usize {
            return Err(Error::InvalidParam(format!("too many dims in {name}")));
        }
        buf.push(ndim as u8);
        for &d in tensor.shape() {
            push_u32(&mut buf, d as u32);
        }
        for &v in tensor.iter() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    push_u32(&mut buf, crc);
    Ok(buf)
}

/// Parse the container format.
pub fn decode(bytes: &[u8]) -> Result<ParamBundle> {
    let corrupt = |msg: &str| Error::CorruptFile(msg.to_string());
    if bytes.len() < 16 {
        return Err(corrupt("file shorter than header"));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(corrupt("checksum mismatch"));
    }
    if &body[0..4] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::IncompatibleCheckpoint(format!(
            "unsupported container version {version}, expected {VERSION}"
        )));
    }
    let count = u32::from_le_bytes(body[8..12].try_into().unwrap()) as usize;
    let mut pos = 12;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let need = |pos: usize, n: usize| -> Result<()> {
            if pos + n > body.len() {
                Err(corrupt("truncated entry"))
            } else {
                Ok(())
            }
        };
        need(pos, 2)?;
        let name_len = u16::from_le_bytes(body[pos..pos + 2].try_into().unwrap()) as usize;
        pos += 2;
        need(pos, name_len)?;
        let name = String::from_utf8(body[pos..pos + name_len].to_vec())
            .map_err(|_| corrupt("entry name is not utf-8"))?;
        pos += name_len;
        need(pos, 1)?;
        let ndim = body[pos] as usize;
        pos += 1;
        need(pos, 4 * ndim)?;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(body[pos..pos + 4].try_into().unwrap()) as usize);
            pos += 4;
        }
        let len: usize = shape.iter().product();
        need(pos, 4 * len)?;
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            let v = f32::from_le_bytes(body[pos..pos + 4].try_into().unwrap());
            data.push(v as f64);
            pos += 4;
        }
        let tensor = ArrayD::from_shape_vec(ndarray::IxDyn(&shape), data)
            .map_err(|_| corrupt("inconsistent entry shape"))?;
        entries.push((name, tensor));
    }
    if pos != body.len() {
        return Err(corrupt("trailing bytes after last entry"));
    }
    Ok(ParamBundle { entries })
}

pub fn save(bundle: &ParamBundle, path: &Path) -> Result<()> {
    let bytes = encode(bundle)?;
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load(path: &Path) -> Result<ParamBundle> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    decode(&bytes)
}
