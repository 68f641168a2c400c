use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use crate::data::Emotion;
use crate::error::{Error, Result};
use crate::zoo::Network;
use crate::NUM_CLASSES;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub label: usize,
    pub predicted: usize,
    pub probs: [f64; NUM_CLASSES],
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Inference-mode predictions in dataset order.
pub fn predict(net: &Network, data: &Dataset, batch_size: usize) -> Result<Vec<Prediction>> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for chunk in idx.chunks(batch_size.max(1)) {
        let batches = data.batch(chunk)?;
        let refs: Vec<_> = batches.iter().collect();
        let probs = net.predict_proba(&refs)?;
        for (row, &i) in chunk.iter().enumerate() {
            let p: [f64; NUM_CLASSES] = probs.row(row).try_into().expect("four classes");
            out.push(Prediction {
                id: data.ids[i].clone(),
                label: data.labels[i],
                predicted: argmax(&p),
                probs: p,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub split: String,
    pub total: usize,
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    /// `confusion[true][predicted]`.
    pub confusion: [[usize; NUM_CLASSES]; NUM_CLASSES],
    /// Utterance counts of train, validation, test and excluded.
    pub cardinalities: [usize; 4],
    pub config_hash: String,
}

impl EvalReport {
    pub fn from_predictions(
        model: &str,
        split: &str,
        preds: &[Prediction],
        cardinalities: [usize; 4],
        config_hash: &str,
    ) -> Result<Self> {
        if preds.is_empty() {
            return Err(Error::Config(format!("split {split} is empty")));
        }
        let mut confusion = [[0usize; NUM_CLASSES]; NUM_CLASSES];
        for p in preds {
            confusion[p.label][p.predicted] += 1;
        }
        let trace: usize = (0..NUM_CLASSES).map(|i| confusion[i][i]).sum();
        let per_class = Emotion::ALL
            .iter()
            .map(|e| {
                let c = e.index();
                let support: usize = confusion[c].iter().sum();
                let predicted: usize = confusion.iter().map(|r| r[c]).sum();
                let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
                ClassMetrics {
                    class: e.name().to_string(),
                    precision: ratio(confusion[c][c], predicted),
                    recall: ratio(confusion[c][c], support),
                    support,
                }
            })
            .collect();
        Ok(EvalReport {
            model: model.to_string(),
            split: split.to_string(),
            total: preds.len(),
            accuracy: trace as f64 / preds.len() as f64,
            per_class,
            confusion,
            cardinalities,
            config_hash: config_hash.to_string(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

/// Scores `net` on `data`.
pub fn evaluate(
    net: &Network,
    data: &Dataset,
    split: &str,
    batch_size: usize,
    cardinalities: [usize; 4],
    config_hash: &str,
) -> Result<(EvalReport, Vec<Prediction>)> {
    let preds = predict(net, data, batch_size)?;
    let report = EvalReport::from_predictions(net.name(), split, &preds, cardinalities, config_hash)?;
    Ok((report, preds))
}

pub fn predictions_csv(preds: &[Prediction]) -> String {
    let mut s = String::from("id,label,predicted,p_anger,p_excited,p_neutral,p_sadness\n");
    for p in preds {
        let _ = write!(s, "{},{},{}", p.id, Emotion::ALL[p.label], Emotion::ALL[p.predicted]);
        for v in p.probs {
            let _ = write!(s, ",{v:.17e}");
        }
        s.push('\n');
    }
    s
}

/// Re-reads a predictions file as `(id, label, predicted)` triples.
pub fn read_predictions(path: &Path) -> Result<Vec<(String, String, String)>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    r.records()
        .map(|rec| {
            let rec = rec.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            Ok((rec[0].to_string(), rec[1].to_string(), rec[2].to_string()))
        })
        .collect()
}
