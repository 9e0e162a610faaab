//! Versioned binary checkpoints: named parameter arrays, optimizer momentum,
//! step counter and the resolved configuration text. The byte layout is
//! fixed little-endian so a save → load → save round trip is identical.

use crate::error::{Error, Result};
use crate::params::{Group, ParamRegistry};
use crate::scalar::{Dtype, Scalar};
use ndarray::{ArrayD, IxDyn};
use std::io::Write;
use std::path::Path;

const MAGIC: &[u8; 8] = b"SODCKPT\0";
const VERSION: u32 = 1;

/// In-memory image of a checkpoint file.
pub struct Checkpoint<T: Scalar> {
    pub step: u64,
    pub config_text: String,
    pub params: Vec<ParamRecord<T>>,
    /// Momentum buffers, aligned by name with trainable parameters.
    pub momentum: Vec<(String, Vec<T>)>,
}

pub struct ParamRecord<T: Scalar> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    pub trainable: bool,
}

fn push_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("file truncated".into()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("invalid utf-8 in name".into()))
    }
}

/// Serialize the registry and optimizer state.
pub fn encode<T: Scalar>(
    reg: &ParamRegistry<T>,
    momentum: &[(String, Vec<T>)],
    step: u64,
    config_text: &str,
) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(T::DTYPE.tag());
    buf.extend_from_slice(&step.to_le_bytes());
    push_str(&mut buf, config_text);
    let entries: Vec<_> = reg.iter().collect();
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (_, e) in &entries {
        push_str(&mut buf, &e.name);
        buf.push(e.trainable as u8);
        buf.push(matches!(e.group, Group::Backbone) as u8);
        buf.push(e.value.ndim() as u8);
        for &d in e.value.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        buf.extend_from_slice(&((e.value.len() * T::DTYPE.size()) as u64).to_le_bytes());
        for &v in e.value.iter() {
            v.write_le(&mut buf);
        }
    }
    buf.extend_from_slice(&(momentum.len() as u32).to_le_bytes());
    for (name, data) in momentum {
        push_str(&mut buf, name);
        buf.extend_from_slice(&((data.len() * T::DTYPE.size()) as u64).to_le_bytes());
        for &v in data.iter() {
            v.write_le(&mut buf);
        }
    }
    buf
}

/// Dtype recorded in a checkpoint file, without decoding the rest.
pub fn peek_dtype(bytes: &[u8]) -> Result<Dtype> {
    if bytes.len() < 13 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (this build reads {VERSION})"
        )));
    }
    Dtype::from_tag(bytes[12])
        .ok_or_else(|| Error::Checkpoint(format!("unknown dtype tag {}", bytes[12])))
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let dtype = peek_dtype(bytes)?;
    if dtype != T::DTYPE {
        return Err(Error::Checkpoint(format!(
            "checkpoint dtype {dtype:?} does not match requested {:?}",
            T::DTYPE
        )));
    }
    let mut r = Reader { buf: bytes, pos: 13 };
    let step = r.u64()?;
    let config_text = r.string()?;
    let n_params = r.u32()? as usize;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name = r.string()?;
        let trainable = r.u8()? != 0;
        let _backbone = r.u8()?;
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let nbytes = r.u64()? as usize;
        let raw = r.take(nbytes)?;
        let n = nbytes / T::DTYPE.size();
        if shape.iter().product::<usize>() != n {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: shape {shape:?} does not match {n} values"
            )));
        }
        let data: Vec<T> = raw
            .chunks_exact(T::DTYPE.size())
            .map(|c| T::read_le(c))
            .collect();
        params.push(ParamRecord {
            name,
            shape,
            data,
            trainable,
        });
    }
    let n_m = r.u32()? as usize;
    let mut momentum = Vec::with_capacity(n_m);
    for _ in 0..n_m {
        let name = r.string()?;
        let nbytes = r.u64()? as usize;
        let raw = r.take(nbytes)?;
        let data: Vec<T> = raw
            .chunks_exact(T::DTYPE.size())
            .map(|c| T::read_le(c))
            .collect();
        momentum.push((name, data));
    }
    Ok(Checkpoint {
        step,
        config_text,
        params,
        momentum,
    })
}

pub fn save<T: Scalar>(
    path: &Path,
    reg: &ParamRegistry<T>,
    momentum: &[(String, Vec<T>)],
    step: u64,
    config_text: &str,
) -> Result<()> {
    let bytes = encode(reg, momentum, step, config_text);
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Copy decoded values into a freshly constructed registry, matching by name
/// and checking shapes.
pub fn apply_to_registry<T: Scalar>(ckpt: &Checkpoint<T>, reg: &mut ParamRegistry<T>) -> Result<()> {
    if ckpt.params.len() != reg.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, model has {}",
            ckpt.params.len(),
            reg.len()
        )));
    }
    for rec in &ckpt.params {
        let id = reg.lookup(&rec.name).ok_or_else(|| {
            Error::Checkpoint(format!("parameter {} not present in model", rec.name))
        })?;
        let v = reg.value_mut(id);
        if v.shape() != rec.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter {}: shape {:?} vs model {:?}",
                rec.name,
                rec.shape,
                v.shape()
            )));
        }
        *v = ArrayD::from_shape_vec(IxDyn(&rec.shape), rec.data.clone()).unwrap();
    }
    Ok(())
}
