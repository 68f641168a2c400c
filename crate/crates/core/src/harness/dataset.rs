use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::featfile::{FeatureKind, FeatureSet};
use crate::zoo::{Batch, InputKind};

/// Feature sets keyed by kind, each indexed by utterance id.
#[derive(Debug, Default)]
pub struct FeatureStore {
    sets: HashMap<FeatureKind, (FeatureSet, HashMap<String, usize>)>,
}

impl FeatureStore {
    pub fn insert(&mut self, set: FeatureSet) {
        let index = set.ids.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
        self.sets.insert(set.kind, (set, index));
    }

    pub fn load(dir: &Path, kinds: &[FeatureKind]) -> Result<Self> {
        let mut store = FeatureStore::default();
        for &k in kinds {
            store.insert(FeatureSet::load_kind(dir, k)?);
        }
        Ok(store)
    }

    pub fn get(&self, kind: FeatureKind) -> Result<&FeatureSet> {
        self.sets
            .get(&kind)
            .map(|(s, _)| s)
            .ok_or_else(|| Error::Data(format!("no {kind:?} features loaded")))
    }

    fn row(&self, kind: FeatureKind, id: &str) -> Result<(&FeatureSet, usize)> {
        let (set, index) = self
            .sets
            .get(&kind)
            .ok_or_else(|| Error::Data(format!("no {kind:?} features loaded")))?;
        let i = *index
            .get(id)
            .ok_or_else(|| Error::Data(format!("utterance {id} has no {kind:?} features")))?;
        Ok((set, i))
    }
}

/// Rows of one input for one utterance, before normalization.
fn raw_row(store: &FeatureStore, kind: InputKind, id: &str) -> Result<(Vec<f64>, Vec<usize>, usize)> {
    let (set, i) = store.row(kind.feature_kind(), id)?;
    let row = set.row(i);
    let shape = set.row_shape().to_vec();
    match kind.mocap_columns() {
        Some(cols) => {
            let width = shape[1];
            let t = shape[0];
            let mut out = Vec::with_capacity(t * cols.len());
            for r in 0..t {
                out.extend_from_slice(&row[r * width + cols.start..r * width + cols.end]);
            }
            Ok((out, vec![t, cols.len()], set.valid[i]))
        }
        None => Ok((row.to_vec(), shape, set.valid[i])),
    }
}

fn normalized(kind: InputKind) -> bool {
    !matches!(kind, InputKind::Text | InputKind::Tokens)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Per-column z-scoring of speech and motion inputs, fitted on the valid
/// rows of the training utterances.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub inputs: BTreeMap<String, ColumnStats>,
}

fn kind_key(kind: InputKind) -> String {
    serde_json::to_value(kind)
        .ok()
        .and_then(|v| v.as_str().map(String::from))
        .unwrap_or_default()
}

impl Normalization {
    pub fn fit(store: &FeatureStore, inputs: &[InputKind], ids: &[String]) -> Result<Self> {
        let mut out = Normalization::default();
        for &kind in inputs.iter().filter(|k| normalized(**k)) {
            let mut sum: Vec<f64> = vec![];
            let mut sq: Vec<f64> = vec![];
            let mut n = 0usize;
            for id in ids {
                let (row, shape, valid) = raw_row(store, kind, id)?;
                let f = shape[1];
                if sum.is_empty() {
                    sum = vec![0.0; f];
                    sq = vec![0.0; f];
                }
                for r in row.chunks(f).take(valid) {
                    for (j, v) in r.iter().enumerate() {
                        sum[j] += v;
                        sq[j] += v * v;
                    }
                }
                n += valid;
            }
            if n == 0 {
                continue;
            }
            let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
            let std = sq
                .iter()
                .zip(&mean)
                .map(|(q, m)| {
                    let var = (q / n as f64 - m * m).max(0.0);
                    if var.sqrt() < 1e-8 {
                        1.0
                    } else {
                        var.sqrt()
                    }
                })
                .collect();
            out.inputs.insert(kind_key(kind), ColumnStats { mean, std });
        }
        Ok(out)
    }

    fn apply(&self, kind: InputKind, row: &mut [f64], f: usize, valid: usize) {
        let Some(s) = self.inputs.get(&kind_key(kind)) else { return };
        for r in row.chunks_mut(f).take(valid) {
            for (j, v) in r.iter_mut().enumerate() {
                *v = (*v - s.mean[j]) / s.std[j];
            }
        }
    }
}

#[derive(Clone, Debug)]
struct InputData {
    kind: InputKind,
    row_shape: Vec<usize>,
    data: Vec<f64>,
    lengths: Vec<usize>,
}

/// Labelled, normalized inputs for one split, ready for batching.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
    inputs: Vec<InputData>,
}

impl Dataset {
    pub fn build(
        store: &FeatureStore,
        corpus: &Corpus,
        inputs: &[InputKind],
        ids: &[String],
        norm: Option<&Normalization>,
    ) -> Result<Self> {
        let labels_by_id: HashMap<&str, usize> = corpus
            .utterances
            .iter()
            .filter_map(|u| u.label.map(|l| (u.id.as_str(), l.index())))
            .collect();
        let labels = ids
            .iter()
            .map(|id| {
                labels_by_id
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| Error::Data(format!("utterance {id} has no accepted label")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut datas = Vec::with_capacity(inputs.len());
        for &kind in inputs {
            let mut data = Vec::new();
            let mut lengths = Vec::with_capacity(ids.len());
            let mut row_shape = vec![];
            for id in ids {
                let (mut row, shape, valid) = raw_row(store, kind, id)?;
                if let Some(n) = norm {
                    if shape.len() == 2 {
                        n.apply(kind, &mut row, shape[1], valid);
                    }
                }
                data.extend(row);
                lengths.push(valid);
                row_shape = shape;
            }
            datas.push(InputData {
                kind,
                row_shape,
                data,
                lengths,
            });
        }
        Ok(Dataset {
            ids: ids.to_vec(),
            labels,
            inputs: datas,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// One [`Batch`] per input for the utterances at `idx`.
    pub fn batch(&self, idx: &[usize]) -> Result<Vec<Batch>> {
        self.inputs
            .iter()
            .map(|inp| {
                let w: usize = inp.row_shape.iter().product();
                if inp.kind == InputKind::Tokens {
                    let ids = idx
                        .iter()
                        .flat_map(|&i| inp.data[i * w..(i + 1) * w].iter())
                        .map(|&v| if v < 0.0 { None } else { Some(v as usize) })
                        .collect();
                    return Ok(Batch::Tokens { ids, batch: idx.len() });
                }
                let mut shape = vec![idx.len()];
                shape.extend(&inp.row_shape);
                let data = idx.iter().flat_map(|&i| inp.data[i * w..(i + 1) * w].iter().copied()).collect();
                let full = inp.row_shape[0];
                let lengths: Vec<usize> = idx.iter().map(|&i| inp.lengths[i]).collect();
                let lengths = if lengths.iter().all(|&l| l >= full) { None } else { Some(lengths) };
                Ok(Batch::Dense {
                    x: crate::tensor::Tensor::new(shape, data)?,
                    lengths,
                })
            })
            .collect()
    }
}
