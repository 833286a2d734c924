//! Adapter checkpoints.
//!
//! Layout: the 8-byte magic `GLCKPT01`, a little-endian `u32` header length,
//! a UTF-8 JSON header, then every factor in [`Adapter::factors`] order as a
//! matrix binary container. The loader rebuilds the expected factor shapes
//! from the header and rejects any payload that disagrees.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::{init_adapter, Adapter, AdapterKind, AdapterSpec};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

const MAGIC: &[u8; 8] = b"GLCKPT01";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub kind: AdapterKind,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub r: usize,
    pub k: usize,
    pub alpha: f64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lora_rank: Option<usize>,
}

impl CheckpointHeader {
    pub fn for_adapter(adapter: &Adapter, seed: u64) -> Self {
        let spec = adapter.spec();
        Self {
            kind: spec.kind,
            m: spec.out_dim,
            n: spec.in_dim,
            r: spec.rank,
            k: spec.k,
            alpha: spec.alpha,
            seed,
            lora_rank: (spec.kind == AdapterKind::Hybrid).then_some(spec.lora_rank),
        }
    }

    pub fn spec(&self) -> Result<AdapterSpec> {
        let spec = match self.kind {
            AdapterKind::Lora => AdapterSpec::lora(self.m, self.n, self.r),
            AdapterKind::Gralora => AdapterSpec::gralora(self.m, self.n, self.r, self.k),
            AdapterKind::Hybrid => {
                let lora_rank = self
                    .lora_rank
                    .ok_or_else(|| Error::Format("hybrid checkpoint without lora_rank".into()))?;
                AdapterSpec::hybrid(self.m, self.n, self.r, self.k, lora_rank)
            }
        }
        .with_alpha(self.alpha);
        spec.validate()?;
        Ok(spec)
    }
}

pub fn write_checkpoint<W: Write>(adapter: &Adapter, seed: u64, mut w: W) -> Result<()> {
    let header = serde_json::to_vec(&CheckpointHeader::for_adapter(adapter, seed))?;
    w.write_all(MAGIC)?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    for factor in adapter.factors() {
        factor.write_binary(&mut w)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(CheckpointHeader, Adapter)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not an adapter checkpoint (bad magic)".into()));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let mut header = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut header)?;
    let header: CheckpointHeader = serde_json::from_slice(&header)?;
    // a zero-initialized adapter of the declared shape gives the expected layout
    let mut adapter = init_adapter(&header.spec()?, 0)?;
    let names = adapter.factor_names();
    for (slot, name) in adapter.factors_mut().into_iter().zip(names) {
        let loaded = Matrix::read_binary(&mut r)?;
        if loaded.shape() != slot.shape() {
            return Err(Error::Format(format!(
                "factor {name}: payload shape {:?} does not match header shape {:?}",
                loaded.shape(),
                slot.shape()
            )));
        }
        *slot = loaded;
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after checkpoint payload".into()));
    }
    Ok((header, adapter))
}

pub fn save_checkpoint(adapter: &Adapter, seed: u64, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(adapter, seed, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(CheckpointHeader, Adapter)> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
