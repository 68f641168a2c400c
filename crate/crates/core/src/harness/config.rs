use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::SpeechConfig;
use crate::data::SplitMode;
use crate::error::{Error, Result};
use crate::nn::OptimizerConfig;
use crate::zoo::{catalog, CatalogOptions, FusionRegime};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub mode: SplitMode,
    pub test_session: u8,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            mode: SplitMode::CombinedSession,
            test_session: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// Catalog model names, one per modality branch.
    pub members: Vec<String>,
    pub units: usize,
    pub dropout: f64,
    pub regime: FusionRegime,
    /// Member checkpoints keyed by model name.
    pub checkpoints: BTreeMap<String, PathBuf>,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            members: ["Speech_Model4", "Text_Model2", "Mocap_Model1"].map(String::from).to_vec(),
            units: 256,
            dropout: 0.0,
            regime: FusionRegime::EndToEnd,
            checkpoints: BTreeMap::new(),
        }
    }
}

/// One training run. Relative paths resolve against the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub manifest: PathBuf,
    /// Directory of `*.feat` files; missing files are computed into it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<PathBuf>,
    /// Embedding table for text features (default: `embeddings.txt` beside
    /// the manifest).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<PathBuf>,
    pub out: PathBuf,
    /// Catalog model name; mutually exclusive with `fusion`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fusion: Option<FusionConfig>,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "defaults::patience")]
    pub patience: usize,
    /// Split scored in the final report (default: `test` in combined mode,
    /// `validation` otherwise).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_split: Option<String>,
    /// Stop once training accuracy reaches this value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_train_accuracy: Option<f64>,
    #[serde(default = "defaults::normalize")]
    pub normalize: bool,
    #[serde(default)]
    pub catalog: CatalogOptions,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub speech: SpeechConfig,
}

mod defaults {
    pub fn batch_size() -> usize {
        32
    }
    pub fn max_epochs() -> usize {
        50
    }
    pub fn patience() -> usize {
        8
    }
    pub fn normalize() -> bool {
        true
    }
}

impl RunConfig {
    /// A config with every default and the given essentials.
    pub fn new(seed: u64, manifest: impl Into<PathBuf>, out: impl Into<PathBuf>) -> Self {
        RunConfig {
            seed,
            manifest: manifest.into(),
            features: None,
            embeddings: None,
            out: out.into(),
            model: None,
            fusion: None,
            split: SplitConfig::default(),
            batch_size: defaults::batch_size(),
            max_epochs: defaults::max_epochs(),
            patience: defaults::patience(),
            eval_split: None,
            target_train_accuracy: None,
            normalize: true,
            catalog: CatalogOptions::default(),
            optimizer: OptimizerConfig::default(),
            speech: SpeechConfig::default(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.manifest);
        fix(&mut self.out);
        self.features.iter_mut().for_each(fix);
        self.embeddings.iter_mut().for_each(fix);
        if let Some(f) = &mut self.fusion {
            f.checkpoints.values_mut().for_each(fix);
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.model, &self.fusion) {
            (Some(name), None) => {
                catalog(name, &self.catalog)?;
            }
            (None, Some(f)) => {
                if f.members.is_empty() {
                    return Err(Error::Config("fusion.members is empty".into()));
                }
                for m in &f.members {
                    catalog(m, &self.catalog)?;
                }
                if f.units == 0 {
                    return Err(Error::Config("fusion.units must be positive".into()));
                }
            }
            _ => return Err(Error::Config("set exactly one of `model` or `[fusion]`".into())),
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch_size and max_epochs must be positive".into()));
        }
        if let Some(s) = &self.eval_split {
            if !["train", "validation", "test"].contains(&s.as_str()) {
                return Err(Error::Config(format!("eval_split {s:?} is not train, validation or test")));
            }
        }
        self.speech.validate()
    }

    pub fn eval_split(&self) -> &str {
        match (&self.eval_split, self.split.mode) {
            (Some(s), _) => s,
            (None, SplitMode::CombinedSession) => "test",
            (None, SplitMode::PerModalityRandom) => "validation",
        }
    }

    pub fn features_dir(&self) -> PathBuf {
        self.features.clone().unwrap_or_else(|| self.out.join("features"))
    }

    pub fn embeddings_path(&self) -> PathBuf {
        self.embeddings.clone().unwrap_or_else(|| {
            self.manifest
                .parent()
                .unwrap_or(Path::new(""))
                .join("embeddings.txt")
        })
    }

    /// Hash of everything that affects results (output location excluded).
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        crate::featfile::config_hash(&c)
    }
}

/// Search space for the fusion model's random proposer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HpoSpace {
    pub speech_lstm_units: Vec<usize>,
    pub text_lstm_units: Vec<usize>,
    pub fusion_units: Vec<usize>,
    pub dropout: Vec<f64>,
    pub budget: usize,
}

impl Default for HpoSpace {
    fn default() -> Self {
        HpoSpace {
            speech_lstm_units: vec![64, 128, 256],
            text_lstm_units: vec![128, 256, 512],
            fusion_units: vec![128, 256, 512],
            dropout: vec![0.0, 0.1, 0.2, 0.3, 0.4],
            budget: 8,
        }
    }
}

impl HpoSpace {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let s: HpoSpace = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.speech_lstm_units.is_empty()
            || self.text_lstm_units.is_empty()
            || self.fusion_units.is_empty()
            || self.dropout.is_empty()
        {
            return Err(Error::Config("every search range must be non-empty".into()));
        }
        if self.budget == 0 {
            return Err(Error::Config("budget must be at least 1".into()));
        }
        if self.dropout.iter().any(|p| !(0.0..1.0).contains(p)) {
            return Err(Error::Config("dropout values must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_toml() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        fs::write(&p, "seed = 3\nmanifest = \"m.jsonl\"\nout = \"o\"\nmodel = \"Head_Model2\"\n").unwrap();
        let c = RunConfig::load(&p).unwrap();
        assert_eq!((c.batch_size, c.max_epochs, c.patience), (32, 50, 8));
        assert_eq!(c.manifest, dir.path().join("m.jsonl"));
        assert_eq!(c.eval_split(), "test");
    }

    #[test]
    fn rejects_model_and_fusion_together() {
        let mut c = RunConfig::new(0, "m", "o");
        c.model = Some("Head_Model2".into());
        c.fusion = Some(FusionConfig::default());
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.fusion = None;
        c.model = Some("Nope".into());
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn hash_ignores_output_dir() {
        let mut a = RunConfig::new(0, "m", "o1");
        a.model = Some("Head_Model2".into());
        let mut b = a.clone();
        b.out = "o2".into();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }
}
