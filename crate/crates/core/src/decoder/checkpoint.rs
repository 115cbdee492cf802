//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! magic      8 bytes  "RRGCKPT\0"
//! version    u32      1
//! cfg_len    u32      length of the config JSON
//! cfg        bytes    DecoderConfig as UTF-8 JSON
//! count      u32      number of tensors
//! per tensor:
//!   name_len u32, name bytes (UTF-8)
//!   ndim     u32, dims ndim x u32
//!   data     prod(dims) x f32 little-endian, row-major
//! ```
//!
//! Tensors appear in [`DecoderParams::tensors`] order. Values are stored in
//! single precision, so a round trip rounds parameters to `f32`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{DecoderConfig, DecoderParams};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RRGCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

fn corrupt(message: impl Into<String>) -> Error {
    Error::parse("checkpoint", message.into())
}

fn put_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| corrupt(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32<R: Read>(r: &mut R) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| corrupt(format!("truncated: {e}")))?;
    Ok(u32::from_le_bytes(b) as usize)
}

pub fn write_checkpoint<W: Write>(params: &DecoderParams, cfg: &DecoderConfig, w: &mut W) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    put_u32(w, CHECKPOINT_VERSION as usize)?;
    let cfg_json = serde_json::to_vec(cfg).map_err(std::io::Error::from)?;
    put_u32(w, cfg_json.len())?;
    w.write_all(&cfg_json)?;
    let tensors = params.tensors();
    put_u32(w, tensors.len())?;
    for (name, t) in tensors {
        put_u32(w, name.len())?;
        w.write_all(name.as_bytes())?;
        put_u32(w, t.ndim())?;
        for &d in t.shape() {
            put_u32(w, d)?;
        }
        for &x in t.iter() {
            w.write_all(&(x as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<(DecoderParams, DecoderConfig)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| corrupt("missing magic"))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic; not a decoder checkpoint"));
    }
    let version = get_u32(r)?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(corrupt(format!("unsupported version {version} (expected {CHECKPOINT_VERSION})")));
    }
    let cfg_len = get_u32(r)?;
    let mut cfg_bytes = vec![0u8; cfg_len];
    r.read_exact(&mut cfg_bytes).map_err(|e| corrupt(format!("truncated config: {e}")))?;
    let cfg: DecoderConfig = serde_json::from_slice(&cfg_bytes).map_err(|e| corrupt(format!("bad config: {e}")))?;
    cfg.validate()?;

    let mut params = DecoderParams::zeros(&cfg);
    let count = get_u32(r)?;
    let mut slots = params.tensors_mut();
    if count != slots.len() {
        return Err(corrupt(format!("{count} tensors, config implies {}", slots.len())));
    }
    for (expected_name, view) in slots.iter_mut() {
        let name_len = get_u32(r)?;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(|e| corrupt(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| corrupt("tensor name is not UTF-8"))?;
        if &name != expected_name {
            return Err(corrupt(format!("expected tensor {expected_name}, found {name}")));
        }
        let ndim = get_u32(r)?;
        let shape = (0..ndim).map(|_| get_u32(r)).collect::<Result<Vec<_>>>()?;
        if shape != view.shape() {
            return Err(corrupt(format!("tensor {name} has shape {shape:?}, expected {:?}", view.shape())));
        }
        let mut buf = [0u8; 4];
        for x in view.iter_mut() {
            r.read_exact(&mut buf).map_err(|e| corrupt(format!("truncated data in {name}: {e}")))?;
            *x = f32::from_le_bytes(buf) as f64;
        }
    }
    drop(slots);
    if let Some(name) = params.first_non_finite() {
        return Err(Error::NonFinite(format!("checkpoint tensor {name}")));
    }
    Ok((params, cfg))
}

pub fn save_checkpoint(params: &DecoderParams, cfg: &DecoderConfig, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(params, cfg, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(DecoderParams, DecoderConfig)> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}
