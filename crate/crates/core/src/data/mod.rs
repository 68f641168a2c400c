//! Corpus manifests, label filtering, split protocol and a synthetic corpus.

mod labels;
mod manifest;
mod split;
mod synth;

pub use labels::{filter_labels, LabelDecision, RejectReason};
pub use manifest::{load_manifest, write_manifest, Corpus, MocapPaths, Utterance};
pub use split::{make_splits, SplitMode, SplitPlan};
pub use synth::{generate_synthetic, simulated_corpus, SynthConfig, SynthMode};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Emotion {
    Anger,
    Excited,
    Neutral,
    Sadness,
}

impl Emotion {
    pub const ALL: [Emotion; 4] = [Emotion::Anger, Emotion::Excited, Emotion::Neutral, Emotion::Sadness];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Emotion> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Emotion::Anger => "anger",
            Emotion::Excited => "excited",
            Emotion::Neutral => "neutral",
            Emotion::Sadness => "sadness",
        }
    }

    /// Maps an annotator label into the class set; happiness merges into
    /// `Excited`.
    pub fn from_raw(raw: &str) -> Option<Emotion> {
        match raw.trim().to_ascii_lowercase().as_str() {
            "anger" | "angry" | "ang" => Some(Emotion::Anger),
            "excited" | "excitement" | "exc" | "happiness" | "happy" | "hap" => Some(Emotion::Excited),
            "neutral" | "neu" => Some(Emotion::Neutral),
            "sadness" | "sad" => Some(Emotion::Sadness),
            _ => None,
        }
    }
}

impl fmt::Display for Emotion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Feature families materialized from a corpus.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Speech,
    Text,
    Mocap,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Speech, Modality::Text, Modality::Mocap];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Speech => "speech",
            Modality::Text => "text",
            Modality::Mocap => "mocap",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Modality::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown modality {s:?} (speech, text, mocap)")))
    }
}
