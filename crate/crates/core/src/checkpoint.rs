//! Named-tensor checkpoint archives.
//!
//! Layout: 4-byte magic "NTAR", u32 format version, u32 metadata length +
//! JSON metadata, u32 entry count, then per entry a length-prefixed name
//! and a tensor record. Entries are written in model traversal order, so
//! identical models produce byte-identical archives.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{build_model, ModelConfig, SequenceModel};
use crate::tensor::serial::{read_u32, write_u32};
use crate::tensor::{read_tensor_record, write_tensor_record, Tensor};

const MAGIC: &[u8; 4] = b"NTAR";
const VERSION: u32 = 1;

/// Metadata stored alongside the tensors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    /// Seed the training run used (also determines the dataset split).
    pub train_seed: u64,
    pub train_fraction: f64,
}

/// Serialize a model checkpoint: metadata, normalization statistics
/// (entries "norm.mean" / "norm.std"), and every model tensor.
pub fn save_checkpoint(
    path: &Path,
    model: &SequenceModel,
    meta: &CheckpointMeta,
    norm_mean: &[f64],
    norm_std: &[f64],
) -> Result<()> {
    let mut entries = vec![
        (
            "norm.mean".to_string(),
            Tensor::new(&[norm_mean.len()], norm_mean.to_vec())?,
        ),
        (
            "norm.std".to_string(),
            Tensor::new(&[norm_std.len()], norm_std.to_vec())?,
        ),
    ];
    entries.extend(model.named_state());

    let meta_json = serde_json::to_vec(meta)
        .map_err(|e| Error::Format(format!("metadata serialization failed: {e}")))?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    write_u32(&mut w, VERSION)?;
    write_u32(&mut w, meta_json.len() as u32)?;
    w.write_all(&meta_json)?;
    write_u32(&mut w, entries.len() as u32)?;
    for (name, tensor) in &entries {
        write_u32(&mut w, name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        write_tensor_record(&mut w, tensor)?;
    }
    w.flush()?;
    Ok(())
}

/// Load a checkpoint: rebuilds the model from the embedded config and
/// restores every tensor. Returns (model, metadata, (mean, std)).
pub fn load_checkpoint(path: &Path) -> Result<(SequenceModel, CheckpointMeta, (Vec<f64>, Vec<f64>))> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| Error::CheckpointIncompatible(format!("unreadable header: {e}")))?;
    if &magic != MAGIC {
        return Err(Error::CheckpointIncompatible(format!(
            "bad magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::CheckpointIncompatible(format!(
            "format version {version}, this build reads {VERSION}"
        )));
    }
    let meta_len = read_u32(&mut r)? as usize;
    let mut meta_json = vec![0u8; meta_len];
    r.read_exact(&mut meta_json)
        .map_err(|e| Error::Format(format!("truncated checkpoint metadata: {e}")))?;
    let meta: CheckpointMeta = serde_json::from_slice(&meta_json)
        .map_err(|e| Error::CheckpointIncompatible(format!("undecodable metadata: {e}")))?;

    let n = read_u32(&mut r)? as usize;
    let mut map = HashMap::with_capacity(n);
    for _ in 0..n {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)
            .map_err(|e| Error::Format(format!("truncated entry name: {e}")))?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format("entry name is not UTF-8".into()))?;
        let tensor = read_tensor_record(&mut r)?;
        map.insert(name, tensor);
    }

    let mean = map
        .get("norm.mean")
        .ok_or_else(|| Error::Format("checkpoint is missing norm.mean".into()))?
        .values()
        .to_vec();
    let std = map
        .get("norm.std")
        .ok_or_else(|| Error::Format("checkpoint is missing norm.std".into()))?
        .values()
        .to_vec();

    let mut model = build_model(&meta.model, 0)?;
    model.load_state(&map)?;
    Ok((model, meta, (mean, std)))
}
