//! Materialized per-corpus feature tensors and their on-disk form.
//!
//! File layout: `EMOFEAT1`, u64 LE header length, JSON header, then the
//! tensor as f64 LE in row-major order.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::thread;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::{featurize_speech, read_wav, SpeechConfig};
use crate::data::{Corpus, Modality, Utterance};
use crate::error::{Error, Result};
use crate::mocap::{combine, partition_average, MocapStream, StreamRole, COMBINED_CHANNELS, PARTITIONS};
use crate::tensor::Tensor;
use crate::text::{tokenize, EmbeddingTable, MAX_TOKENS};

const MAGIC: &[u8; 8] = b"EMOFEAT1";

/// Stable short hash of a serializable configuration.
pub fn config_hash<T: Serialize + ?Sized>(cfg: &T) -> String {
    let json = serde_json::to_string(cfg).expect("configuration serializes");
    let digest = Sha256::digest(json.as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    /// `(N, 100, 34)` frame features.
    Speech,
    /// `(N, 500, E)` pretrained embeddings.
    Text,
    /// `(N, 500)` vocabulary row ids; `-1` is padding, `V` the shared
    /// out-of-vocabulary row.
    Tokens,
    /// `(N, 200, 189)` partition averages of face, hand and rotation.
    Mocap,
}

impl FeatureKind {
    pub fn file_name(self) -> &'static str {
        match self {
            FeatureKind::Speech => "speech.feat",
            FeatureKind::Text => "text.feat",
            FeatureKind::Tokens => "tokens.feat",
            FeatureKind::Mocap => "mocap.feat",
        }
    }

    pub fn modality(self) -> Modality {
        match self {
            FeatureKind::Speech => Modality::Speech,
            FeatureKind::Text | FeatureKind::Tokens => Modality::Text,
            FeatureKind::Mocap => Modality::Mocap,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: FeatureKind,
    ids: Vec<String>,
    shape: Vec<usize>,
    valid: Vec<usize>,
    flags: Vec<bool>,
    config_hash: String,
    config: serde_json::Value,
}

/// One tensor row per utterance, in `ids` order.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub kind: FeatureKind,
    pub ids: Vec<String>,
    pub tensor: Tensor,
    /// Valid leading rows (frames, tokens, partitions) per utterance.
    pub valid: Vec<usize>,
    /// Short audio, empty transcript, or a motion stream without samples.
    pub flags: Vec<bool>,
    pub config_hash: String,
    pub config: serde_json::Value,
}

impl FeatureSet {
    pub fn row_shape(&self) -> &[usize] {
        &self.tensor.shape()[1..]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    /// Slice of one utterance's features.
    pub fn row(&self, i: usize) -> &[f64] {
        let w: usize = self.row_shape().iter().product();
        &self.tensor.data()[i * w..(i + 1) * w]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            kind: self.kind,
            ids: self.ids.clone(),
            shape: self.tensor.shape().to_vec(),
            valid: self.valid.clone(),
            flags: self.flags.clone(),
            config_hash: self.config_hash.clone(),
            config: self.config.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Data(e.to_string()))?;
        let mut buf = Vec::with_capacity(16 + json.len() + self.tensor.len() * 8);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        buf.extend_from_slice(&self.tensor.to_le_bytes());
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |m: &str| Error::Data(format!("{}: {m}", path.display()));
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a feature file"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let json = bytes.get(16..16 + len).ok_or_else(|| bad("truncated header"))?;
        let h: Header = serde_json::from_slice(json).map_err(|e| bad(&e.to_string()))?;
        let body = &bytes[16 + len..];
        let n: usize = h.shape.iter().product();
        if body.len() != n * 8 || h.ids.len() != h.shape[0] || h.valid.len() != h.ids.len() {
            return Err(bad("header and payload disagree"));
        }
        let data = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(FeatureSet {
            kind: h.kind,
            ids: h.ids,
            tensor: Tensor::new(h.shape, data)?,
            valid: h.valid,
            flags: h.flags,
            config_hash: h.config_hash,
            config: h.config,
        })
    }

    /// Loads `dir/<kind file>`.
    pub fn load_kind(dir: &Path, kind: FeatureKind) -> Result<Self> {
        Self::load(&dir.join(kind.file_name()))
    }
}

struct Row {
    values: Vec<f64>,
    valid: usize,
    flag: bool,
}

/// Maps `f` over `items` on all cores, preserving order; the first error
/// (by position) wins.
fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let workers = thread::available_parallelism().map_or(1, |n| n.get()).min(items.len().max(1));
    let chunk = items.len().div_ceil(workers).max(1);
    let parts: Vec<Result<Vec<R>>> = thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Result<Vec<R>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("feature worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

fn assemble(kind: FeatureKind, us: &[&Utterance], rows: Vec<Row>, row_shape: Vec<usize>, config: serde_json::Value) -> Result<FeatureSet> {
    let mut shape = vec![us.len()];
    shape.extend(row_shape);
    let mut data = Vec::with_capacity(shape.iter().product());
    let mut valid = Vec::with_capacity(us.len());
    let mut flags = Vec::with_capacity(us.len());
    for r in rows {
        data.extend(r.values);
        valid.push(r.valid);
        flags.push(r.flag);
    }
    Ok(FeatureSet {
        kind,
        ids: us.iter().map(|u| u.id.clone()).collect(),
        tensor: Tensor::new(shape, data)?,
        valid,
        flags,
        config_hash: config_hash(&config),
        config,
    })
}

pub fn featurize_speech_corpus(corpus: &Corpus, cfg: &SpeechConfig) -> Result<FeatureSet> {
    cfg.validate()?;
    let us: Vec<&Utterance> = corpus.utterances.iter().collect();
    let rows = par_map(&us, |u| {
        let path = u
            .wav
            .as_ref()
            .ok_or_else(|| Error::Data(format!("{}: no wav path", u.id)))?;
        let f = featurize_speech(&read_wav(&corpus.resolve(path))?, cfg)?;
        Ok(Row {
            values: f.tensor.into_data(),
            valid: f.valid_frames,
            flag: f.short,
        })
    })?;
    let shape = vec![cfg.frame.max_frames, cfg.width()];
    let config = serde_json::to_value(cfg).map_err(|e| Error::Data(e.to_string()))?;
    assemble(FeatureKind::Speech, &us, rows, shape, config)
}

/// Pretrained-embedding tensors and vocabulary ids from the same table.
pub fn featurize_text_corpus(corpus: &Corpus, table: &EmbeddingTable) -> Result<(FeatureSet, FeatureSet)> {
    let us: Vec<&Utterance> = corpus.utterances.iter().collect();
    let vocab = table.vocab_size();
    let mut dense = Vec::with_capacity(us.len());
    let mut ids = Vec::with_capacity(us.len());
    for u in &us {
        let toks = tokenize(&u.transcript);
        let f = table.embed(&toks);
        let id_row: Vec<f64> = (0..MAX_TOKENS)
            .map(|i| match toks.get(i) {
                Some(t) => table.row_of(t).unwrap_or(vocab) as f64,
                None => -1.0,
            })
            .collect();
        ids.push(Row {
            values: id_row,
            valid: f.valid_tokens,
            flag: f.empty,
        });
        dense.push(Row {
            values: f.tensor.into_data(),
            valid: f.valid_tokens,
            flag: f.empty,
        });
    }
    let config = serde_json::json!({
        "max_tokens": MAX_TOKENS,
        "vocab_size": vocab,
        "dim": table.dim(),
        "table_hash": config_hash(&table.matrix().data()),
    });
    let text = assemble(FeatureKind::Text, &us, dense, vec![MAX_TOKENS, table.dim()], config.clone())?;
    let tokens = assemble(FeatureKind::Tokens, &us, ids, vec![MAX_TOKENS], config)?;
    Ok((text, tokens))
}

/// Partition averages of the three motion streams for every utterance that
/// has all of them. Returns the set and the ids skipped.
pub fn featurize_mocap_corpus(corpus: &Corpus) -> Result<(FeatureSet, Vec<String>)> {
    let (us, skipped): (Vec<&Utterance>, Vec<&Utterance>) = corpus.utterances.iter().partition(|u| u.has_mocap());
    if us.is_empty() {
        return Err(Error::Data("no utterance has all motion streams".into()));
    }
    let rows = par_map(&us, |u| {
        let paths: [(StreamRole, &PathBuf); 3] = [
            (StreamRole::Face, u.mocap.face.as_ref().expect("complete")),
            (StreamRole::Hand, u.mocap.hand.as_ref().expect("complete")),
            (StreamRole::Rotation, u.mocap.rotation.as_ref().expect("complete")),
        ];
        let mut parts = Vec::with_capacity(3);
        let mut flag = false;
        for (role, p) in paths {
            let stream = MocapStream::read_csv(&corpus.resolve(p), role)?;
            let avg = partition_average(&stream, u.start, u.finish)
                .map_err(|e| Error::Data(format!("{}: {e}", u.id)))?;
            flag |= avg.empty;
            parts.push(avg.tensor);
        }
        let t = combine(Some(&parts[0]), Some(&parts[1]), Some(&parts[2]))?;
        Ok(Row {
            values: t.into_data(),
            valid: PARTITIONS,
            flag,
        })
    })?;
    let config = serde_json::json!({ "partitions": PARTITIONS, "channels": COMBINED_CHANNELS });
    let set = assemble(FeatureKind::Mocap, &us, rows, vec![PARTITIONS, COMBINED_CHANNELS], config)?;
    Ok((set, skipped.into_iter().map(|u| u.id.clone()).collect()))
}
