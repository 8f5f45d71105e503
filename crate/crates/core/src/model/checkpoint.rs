//! Binary checkpoints: a magic line, a length-prefixed JSON header with the
//! config, vocabulary and tensor table, then every parameter as little-endian
//! `f64`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ParameterStore, TensorSpec, TuningMode, Vocab};
use crate::error::{Error, Result};

const MAGIC: &[u8; 16] = b"SLOTPROMPT-CKPT1";

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    mode: TuningMode,
    vocab: Vocab,
    tensors: Vec<TensorSpec>,
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let header = serde_json::to_vec(&Header {
        config: model.config().clone(),
        mode: model.params.mode(),
        vocab: model.vocab.clone(),
        tensors: model.params.specs().to_vec(),
    })?;
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(&header)?;
    for value in model.params.data() {
        out.write_all(&value.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let mut input = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 16];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
    input.read_exact(&mut header)?;
    let header: Header = serde_json::from_slice(&header)?;
    let total = header.tensors.last().map_or(0, |s| s.offset + s.len());
    let mut raw = Vec::new();
    input.read_to_end(&mut raw)?;
    if raw.len() != total * 8 {
        return Err(Error::Checkpoint(format!("expected {} parameters, found {} bytes", total, raw.len())));
    }
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let params = ParameterStore::from_parts(&header.config, header.vocab.len(), &header.tensors, data, header.mode)?;
    Ok(Model {
        vocab: header.vocab,
        params,
    })
}
