use serde::{Deserialize, Serialize};

use super::spec::{InputKind, LayerSpec, ModelSpec};
use crate::audio::{COLUMNS, FrameConfig};
use crate::error::{Error, Result};
use crate::nn::{Activation, OptimizerKind};
use crate::text::MAX_TOKENS;
use crate::NUM_CLASSES;

pub const CATALOG: [&str; 13] = [
    "Speech_Model1",
    "Speech_Model2",
    "Speech_Model3",
    "Speech_Model4",
    "Text_Model1",
    "Text_Model2",
    "Text_Model3",
    "Head_Model1",
    "Head_Model2",
    "Hand_Model1",
    "Hand_Model2",
    "Face_Model1",
    "Face_Model2",
];

/// Also accepted by [`catalog`]; listed separately because it is the
/// combined-motion member rather than a per-stream model.
const MOCAP_MODEL: &str = "Mocap_Model1";

pub fn catalog_names() -> Vec<&'static str> {
    CATALOG.iter().copied().chain([MOCAP_MODEL]).collect()
}

/// Knobs that reshape catalog models without changing their structure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CatalogOptions {
    /// Divides every hidden width (units, filters), floor 1.
    pub width_divisor: usize,
    /// Speech_Model4 encoder and decoder units.
    pub speech_lstm_units: Option<usize>,
    /// Text_Model2 first LSTM units; the second gets half.
    pub text_lstm_units: Option<usize>,
    /// Replaces every model's dropout probability.
    pub dropout: Option<f64>,
    /// Pretrained embedding width for Text_Model1/2.
    pub text_dim: usize,
    /// Known vocabulary size for Text_Model3 (one extra OOV row is added).
    pub vocab_size: usize,
    /// Trainable embedding width for Text_Model3.
    pub embedding_dim: usize,
}

impl Default for CatalogOptions {
    fn default() -> Self {
        CatalogOptions {
            width_divisor: 1,
            speech_lstm_units: None,
            text_lstm_units: None,
            dropout: None,
            text_dim: 300,
            vocab_size: 0,
            embedding_dim: 128,
        }
    }
}

fn dense(units: usize) -> LayerSpec {
    LayerSpec::Dense {
        units,
        activation: Activation::Relu,
    }
}

fn output() -> LayerSpec {
    LayerSpec::Dense {
        units: NUM_CLASSES,
        activation: Activation::None,
    }
}

fn lstm(units: usize, return_sequences: bool) -> LayerSpec {
    LayerSpec::Lstm {
        units,
        return_sequences,
    }
}

/// Builds the named specification.
pub fn catalog(name: &str, opts: &CatalogOptions) -> Result<ModelSpec> {
    if opts.width_divisor == 0 {
        return Err(Error::Config("width_divisor must be at least 1".into()));
    }
    let w = |n: usize| (n / opts.width_divisor).max(1);
    let drop = |default: f64| LayerSpec::Dropout {
        p: opts.dropout.unwrap_or(default),
    };
    let speech_shape = vec![FrameConfig::default().max_frames, COLUMNS.len()];
    let text_shape = vec![MAX_TOKENS, opts.text_dim];

    // Recurrent stack with a dense head: two LSTMs then dense(512).
    let stacked = |first: usize, second: usize| {
        vec![lstm(w(first), true), lstm(w(second), false), drop(0.0), dense(w(512)), output()]
    };
    // Five stride-2 convolutions then dense(256).
    let conv_stack = || {
        let mut l = vec![LayerSpec::ExpandChannel];
        for f in [32, 64, 64, 128, 128] {
            l.push(LayerSpec::Conv2d {
                filters: w(f),
                kernel: 3,
                stride: 2,
            });
        }
        l.extend([drop(0.2), LayerSpec::Flatten, dense(w(256)), output()]);
        l
    };
    let recurrent_head = || vec![lstm(w(256), false), drop(0.0), dense(w(256)), output()];
    let dense_head = || vec![LayerSpec::Flatten, drop(0.0), dense(w(256)), output()];

    let (input, shape, layers, optimizer) = match name {
        "Speech_Model1" => (
            InputKind::Speech,
            speech_shape,
            vec![LayerSpec::Flatten, dense(w(1024)), dense(w(512)), drop(0.0), dense(w(256)), output()],
            OptimizerKind::Adadelta,
        ),
        "Speech_Model2" => (InputKind::Speech, speech_shape, stacked(512, 256), OptimizerKind::Adadelta),
        "Speech_Model3" => (
            InputKind::Speech,
            speech_shape,
            vec![
                lstm(w(128), true),
                LayerSpec::AttentionDecoder {
                    units: w(128),
                    bidirectional: false,
                },
                drop(0.0),
                dense(w(512)),
                output(),
            ],
            OptimizerKind::Adadelta,
        ),
        "Speech_Model4" => {
            let u = opts.speech_lstm_units.map_or_else(|| w(128), &w);
            (
                InputKind::Speech,
                speech_shape,
                vec![
                    LayerSpec::BiLstm {
                        units: u,
                        return_sequences: true,
                    },
                    LayerSpec::AttentionDecoder {
                        units: u,
                        bidirectional: true,
                    },
                    drop(0.0),
                    dense(w(512)),
                    output(),
                ],
                OptimizerKind::Adadelta,
            )
        }
        "Text_Model1" => {
            let mut l: Vec<LayerSpec> = [256, 128, 64, 32]
                .into_iter()
                .map(|f| LayerSpec::Conv1d {
                    filters: w(f),
                    kernel: 3,
                    stride: 1,
                })
                .collect();
            l.extend([drop(0.2), LayerSpec::GlobalMaxPool, dense(w(256)), output()]);
            (InputKind::Text, text_shape, l, OptimizerKind::Adam)
        }
        "Text_Model2" => {
            let first = opts.text_lstm_units.unwrap_or(512);
            (InputKind::Text, text_shape, stacked(first, first / 2), OptimizerKind::Adadelta)
        }
        "Text_Model3" => {
            let mut l = vec![LayerSpec::Embedding {
                rows: opts.vocab_size + 1,
                dim: opts.embedding_dim,
            }];
            l.extend(stacked(512, 256));
            (InputKind::Tokens, vec![MAX_TOKENS], l, OptimizerKind::Adadelta)
        }
        "Head_Model1" | "Hand_Model1" => {
            let kind = if name.starts_with("Head") { InputKind::Head } else { InputKind::Hand };
            (kind, kind.mocap_shape().expect("motion input"), recurrent_head(), OptimizerKind::Adadelta)
        }
        "Head_Model2" | "Hand_Model2" => {
            let kind = if name.starts_with("Head") { InputKind::Head } else { InputKind::Hand };
            (kind, kind.mocap_shape().expect("motion input"), dense_head(), OptimizerKind::Adam)
        }
        "Face_Model1" => (
            InputKind::Face,
            InputKind::Face.mocap_shape().expect("motion input"),
            stacked(512, 256),
            OptimizerKind::Adadelta,
        ),
        "Face_Model2" | MOCAP_MODEL => {
            let kind = if name == MOCAP_MODEL { InputKind::Mocap } else { InputKind::Face };
            (kind, kind.mocap_shape().expect("motion input"), conv_stack(), OptimizerKind::Adam)
        }
        other => {
            return Err(Error::Config(format!(
                "unknown model {other:?}; available: {}",
                catalog_names().join(", ")
            )))
        }
    };
    let penultimate = layers.len() - 2;
    let spec = ModelSpec {
        name: name.to_string(),
        input,
        input_shape: shape,
        layers,
        penultimate,
        optimizer,
    };
    spec.validate()?;
    Ok(spec)
}
