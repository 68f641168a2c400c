use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::same_padding;
use crate::error::{Error, Result};
use crate::featfile::FeatureKind;
use crate::mocap::{StreamRole, PARTITIONS};
use crate::nn::{Activation, OptimizerKind};
use crate::NUM_CLASSES;

/// What a model consumes, and how it is cut from the feature files.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputKind {
    Speech,
    Text,
    Tokens,
    Face,
    Hand,
    Head,
    Mocap,
}

impl InputKind {
    pub fn feature_kind(self) -> FeatureKind {
        match self {
            InputKind::Speech => FeatureKind::Speech,
            InputKind::Text => FeatureKind::Text,
            InputKind::Tokens => FeatureKind::Tokens,
            InputKind::Face | InputKind::Hand | InputKind::Head | InputKind::Mocap => FeatureKind::Mocap,
        }
    }

    /// Column range of the combined motion matrix used by this input.
    pub fn mocap_columns(self) -> Option<std::ops::Range<usize>> {
        let face = StreamRole::Face.channels();
        let hand = StreamRole::Hand.channels();
        let rot = StreamRole::Rotation.channels();
        match self {
            InputKind::Face => Some(0..face),
            InputKind::Hand => Some(face..face + hand),
            InputKind::Head => Some(face + hand..face + hand + rot),
            InputKind::Mocap => Some(0..face + hand + rot),
            _ => None,
        }
    }

    /// Per-sample input shape for the default motion layout.
    pub fn mocap_shape(self) -> Option<Vec<usize>> {
        self.mocap_columns().map(|r| vec![PARTITIONS, r.len()])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Flatten,
    Dense { units: usize, activation: Activation },
    Lstm { units: usize, return_sequences: bool },
    BiLstm { units: usize, return_sequences: bool },
    AttentionDecoder { units: usize, bidirectional: bool },
    Conv1d { filters: usize, kernel: usize, stride: usize },
    Conv2d { filters: usize, kernel: usize, stride: usize },
    Dropout { p: f64 },
    GlobalMaxPool,
    /// Lookup table of `rows` vectors (vocabulary plus one shared OOV row).
    Embedding { rows: usize, dim: usize },
    /// `(T, F)` to `(T, F, 1)`.
    ExpandChannel,
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Flatten => "flatten",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Lstm { .. } => "lstm",
            LayerSpec::BiLstm { .. } => "bilstm",
            LayerSpec::AttentionDecoder { .. } => "attention_decoder",
            LayerSpec::Conv1d { .. } => "conv1d",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::GlobalMaxPool => "global_max_pool",
            LayerSpec::Embedding { .. } => "embedding",
            LayerSpec::ExpandChannel => "expand_channel",
        }
    }

    pub fn is_recurrent(&self) -> bool {
        matches!(
            self,
            LayerSpec::Lstm { .. } | LayerSpec::BiLstm { .. } | LayerSpec::AttentionDecoder { .. }
        )
    }

    /// Output shape for `input`, or a description of what was expected.
    fn infer(&self, input: &ActShape) -> std::result::Result<ActShape, String> {
        use ActShape::*;
        let zero = |n: usize| if n == 0 { Err("zero-width layer".to_string()) } else { Ok(()) };
        match (self, *input) {
            (LayerSpec::Flatten, Seq { t, f }) => Ok(Flat { n: t * f }),
            (LayerSpec::Flatten, Grid { h, w, c }) => Ok(Flat { n: h * w * c }),
            (LayerSpec::Flatten, Flat { n }) => Ok(Flat { n }),
            (LayerSpec::Dense { units, .. }, Flat { .. }) => zero(*units).map(|_| Flat { n: *units }),
            (LayerSpec::Lstm { units, return_sequences }, Seq { t, .. }) => {
                zero(*units)?;
                Ok(if *return_sequences { Seq { t, f: *units } } else { Flat { n: *units } })
            }
            (LayerSpec::BiLstm { units, return_sequences }, Seq { t, .. }) => {
                zero(*units)?;
                Ok(if *return_sequences { Seq { t, f: 2 * units } } else { Flat { n: 2 * units } })
            }
            (LayerSpec::AttentionDecoder { units, bidirectional }, Seq { .. }) => {
                zero(*units)?;
                Ok(Flat { n: units * if *bidirectional { 2 } else { 1 } })
            }
            (LayerSpec::Conv1d { filters, kernel, stride }, Seq { t, .. }) => {
                zero(*filters * *kernel * *stride)?;
                Ok(Seq { t: same_padding(t, *kernel, *stride).0, f: *filters })
            }
            (LayerSpec::Conv2d { filters, kernel, stride }, Grid { h, w, .. }) => {
                zero(*filters * *kernel * *stride)?;
                Ok(Grid {
                    h: same_padding(h, *kernel, *stride).0,
                    w: same_padding(w, *kernel, *stride).0,
                    c: *filters,
                })
            }
            (LayerSpec::Dropout { p }, s) => {
                if (0.0..1.0).contains(p) {
                    Ok(s)
                } else {
                    Err(format!("dropout probability {p} outside [0, 1)"))
                }
            }
            (LayerSpec::GlobalMaxPool, Seq { f, .. }) => Ok(Flat { n: f }),
            (LayerSpec::Embedding { rows, dim }, Ids { t }) => {
                zero(*rows * *dim)?;
                Ok(Seq { t, f: *dim })
            }
            (LayerSpec::ExpandChannel, Seq { t, f }) => Ok(Grid { h: t, w: f, c: 1 }),
            (l, s) => Err(format!("{} cannot consume {s}", l.kind())),
        }
    }
}

/// Per-sample activation shape between layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActShape {
    Ids { t: usize },
    Seq { t: usize, f: usize },
    Grid { h: usize, w: usize, c: usize },
    Flat { n: usize },
}

impl ActShape {
    pub fn dims(&self) -> Vec<usize> {
        match *self {
            ActShape::Ids { t } => vec![t],
            ActShape::Seq { t, f } => vec![t, f],
            ActShape::Grid { h, w, c } => vec![h, w, c],
            ActShape::Flat { n } => vec![n],
        }
    }

    pub fn width(&self) -> usize {
        self.dims().iter().product()
    }
}

impl fmt::Display for ActShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self {
            ActShape::Ids { .. } => "ids",
            ActShape::Seq { .. } => "sequence",
            ActShape::Grid { .. } => "grid",
            ActShape::Flat { .. } => "vector",
        };
        write!(f, "{kind} {:?}", self.dims())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub input: InputKind,
    /// Per-sample input shape, e.g. `[100, 34]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    /// Index of the layer whose output feeds fusion.
    pub penultimate: usize,
    pub optimizer: OptimizerKind,
}

impl ModelSpec {
    pub fn input_act(&self) -> Result<ActShape> {
        let s = &self.input_shape;
        match (self.input, s.len()) {
            (InputKind::Tokens, 1) => Ok(ActShape::Ids { t: s[0] }),
            (InputKind::Tokens, _) => Err(Error::Config(format!("{}: token input must be 1-D, got {s:?}", self.name))),
            (_, 2) if s.iter().all(|&d| d > 0) => Ok(ActShape::Seq { t: s[0], f: s[1] }),
            _ => Err(Error::Config(format!("{}: input shape must be (T, F), got {s:?}", self.name))),
        }
    }

    /// Activation shape after every layer; validates the whole chain.
    pub fn shapes(&self) -> Result<Vec<ActShape>> {
        let mut cur = self.input_act()?;
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let producer = if i == 0 {
                "input".to_string()
            } else {
                format!("layer {} ({})", i - 1, self.layers[i - 1].kind())
            };
            cur = l.infer(&cur).map_err(|msg| {
                Error::Config(format!(
                    "{}: layer {i} ({}) does not fit after {producer} producing {cur}: {msg}",
                    self.name,
                    l.kind()
                ))
            })?;
            out.push(cur);
        }
        Ok(out)
    }

    /// Checks the chain, the penultimate tag and the 4-way output layer.
    pub fn validate(&self) -> Result<Vec<ActShape>> {
        let shapes = self.shapes()?;
        let n = self.layers.len();
        if n < 2 {
            return Err(Error::Config(format!("{}: needs at least two layers", self.name)));
        }
        match self.layers[n - 1] {
            LayerSpec::Dense {
                units: NUM_CLASSES,
                activation: Activation::None,
            } => {}
            _ => return Err(Error::Config(format!("{}: last layer must be a linear dense({NUM_CLASSES})", self.name))),
        }
        if self.penultimate >= n - 1 || !matches!(shapes[self.penultimate], ActShape::Flat { .. }) {
            return Err(Error::Config(format!(
                "{}: penultimate layer {} must be a vector layer before the output",
                self.name, self.penultimate
            )));
        }
        Ok(shapes)
    }

    pub fn penultimate_width(&self) -> Result<usize> {
        Ok(self.validate()?[self.penultimate].width())
    }

    pub fn is_recurrent(&self) -> bool {
        self.layers.iter().any(LayerSpec::is_recurrent)
    }
}
