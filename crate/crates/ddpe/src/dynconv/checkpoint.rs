//! Flat binary checkpoints.
//!
//! Layout: magic `DDPE`, format version `u32`, config blob length
//! (`u64`) plus canonical TOML config bytes, then one record per
//! parameter: name length (`u32`), UTF-8 name, rank (`u32`), extents as
//! `u64`, raw `f32` data. All integers and floats little-endian.
//! Round-trips are bit-exact.

use super::{build_network, Model, NetworkConfig};
use crate::error::{bail, Result};
use std::collections::BTreeMap;
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"DDPE";
pub const VERSION: u32 = 1;

pub fn to_bytes(model: &Model<f32>) -> Vec<u8> {
    let config = model.config.canonical_toml();
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u64).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    for (name, tensor) in model.named_params() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for extent in tensor.shape() {
            out.extend_from_slice(&(*extent as u64).to_le_bytes());
        }
        for v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            bail!(Parse, "checkpoint truncated while reading {what}");
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        bail!(Parse, "not a DDPE checkpoint (bad magic)");
    }
    let version = r.u32("version")?;
    if version != VERSION {
        bail!(Parse, "unsupported checkpoint version {version}");
    }
    let config_len = r.u64("config length")? as usize;
    let config_text = std::str::from_utf8(r.take(config_len, "config blob")?)
        .map_err(|e| crate::error::err_fmt!(Parse, "config blob is not UTF-8: {e}"))?;
    let config: NetworkConfig = toml::from_str(config_text)
        .map_err(|e| crate::error::err_fmt!(Parse, "config blob does not parse: {e}"))?;

    let mut loaded: BTreeMap<String, (Vec<u64>, Vec<f32>)> = BTreeMap::new();
    while !r.done() {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|e| crate::error::err_fmt!(Parse, "parameter name is not UTF-8: {e}"))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut extents = Vec::with_capacity(rank);
        for _ in 0..rank {
            extents.push(r.u64("extent")?);
        }
        let numel: u64 = extents.iter().product();
        let raw = r.take(numel as usize * 4, "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if loaded.insert(name.clone(), (extents, data)).is_some() {
            bail!(Parse, "duplicate parameter {name} in checkpoint");
        }
    }

    // materialize a model of the right architecture, then fill the values
    let mut model = build_network::<f32>(&config, 0)?;
    let expected = model.named_params().len();
    if loaded.len() != expected {
        bail!(
            Parse,
            "checkpoint has {} parameters, config implies {expected}",
            loaded.len()
        );
    }
    let names: Vec<String> = model.named_params().iter().map(|(n, _)| n.clone()).collect();
    for (name, slot) in names.iter().zip(model.params_mut()) {
        let Some((extents, data)) = loaded.get(name) else {
            bail!(Parse, "checkpoint is missing parameter {name}");
        };
        let shape: Vec<usize> = extents.iter().map(|e| *e as usize).collect();
        if slot.shape() != shape.as_slice() {
            bail!(
                Parse,
                "parameter {name}: checkpoint shape {shape:?} does not match config shape {:?}",
                slot.shape()
            );
        }
        slot.data_mut().copy_from_slice(data);
    }
    Ok(model)
}

pub fn save(model: &Model<f32>, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model<f32>> {
    let bytes = std::fs::read(path)?;
    from_bytes(&bytes)
}
