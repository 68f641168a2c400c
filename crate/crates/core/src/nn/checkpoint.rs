use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"EMOCKPT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

/// JSON header preceding the raw parameter values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model_name: String,
    pub layers: Vec<String>,
    pub params: Vec<ParamInfo>,
    pub seed: u64,
    pub config_hash: String,
    /// Free-form build description (e.g. the serialized model spec).
    #[serde(default)]
    pub extra: serde_json::Value,
}

/// Writes `magic | u64 LE header length | header JSON | f64 LE values`.
/// The `params` field of `header` is overwritten from `store`.
pub fn save_checkpoint(path: &Path, header: &CheckpointHeader, store: &ParamStore) -> Result<()> {
    let mut header = header.clone();
    header.params = store
        .iter()
        .map(|p| ParamInfo {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            trainable: p.trainable,
        })
        .collect();
    let json = serde_json::to_vec(&header).map_err(|e| Error::Data(format!("checkpoint header: {e}")))?;
    let mut buf = Vec::with_capacity(16 + json.len() + store.count() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    buf.extend_from_slice(&store.to_le_bytes());
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint; returns the header and one tensor per parameter.
pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, Vec<Tensor>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::Data(format!("{}: {msg}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + len).ok_or_else(|| bad("truncated header".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(body).map_err(|e| bad(format!("header: {e}")))?;
    let mut rest = &bytes[16 + len..];
    let mut tensors = Vec::with_capacity(header.params.len());
    for p in &header.params {
        let n: usize = p.shape.iter().product();
        if rest.len() < n * 8 {
            return Err(bad(format!("truncated values for {}", p.name)));
        }
        let data = rest[..n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        rest = &rest[n * 8..];
        tensors.push(Tensor::new(p.shape.clone(), data)?);
    }
    if !rest.is_empty() {
        return Err(bad(format!("{} trailing bytes", rest.len())));
    }
    Ok((header, tensors))
}

impl ParamStore {
    /// Fills every parameter named `prefix + name` from the checkpoint entry
    /// `name`. Checkpoint entries without a counterpart are ignored; a
    /// counterpart-less parameter under `prefix` is an error. Returns the
    /// number of parameters filled.
    pub fn load_values(&mut self, header: &CheckpointHeader, tensors: &[Tensor], prefix: &str) -> Result<usize> {
        let mut filled = 0;
        for p in self.iter_mut() {
            let Some(local) = p.name.strip_prefix(prefix) else { continue };
            let Some(i) = header.params.iter().position(|info| info.name == local) else {
                return Err(Error::Contract(format!(
                    "checkpoint of {} has no parameter {local}",
                    header.model_name
                )));
            };
            if p.value.shape() != tensors[i].shape() {
                return Err(Error::shape("load_checkpoint", p.value.shape(), tensors[i].shape()));
            }
            p.value = tensors[i].clone();
            filled += 1;
        }
        Ok(filled)
    }
}
