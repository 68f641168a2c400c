use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Corpus;
use crate::error::{Error, Result};

/// Held-out validation share of the training pool for search runs: 838 of
/// 3838 on the full corpus.
const VALIDATION_NUM: usize = 838;
const VALIDATION_DEN: usize = 3838;
const PER_MODALITY_HOLDOUT: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    /// Seeded 80/20 train/validation; no test list.
    PerModalityRandom,
    /// One session is the test set; validation is drawn from the rest.
    CombinedSession,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub mode: SplitMode,
    pub seed: u64,
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
    /// Accepted utterances left out because a required stream is missing.
    pub excluded: Vec<String>,
}

impl SplitPlan {
    /// Train and validation together, in that order.
    pub fn training_pool(&self) -> Vec<String> {
        self.train.iter().chain(&self.validation).cloned().collect()
    }

    pub fn split(&self, name: &str) -> Result<&[String]> {
        match name {
            "train" => Ok(&self.train),
            "validation" | "val" => Ok(&self.validation),
            "test" => Ok(&self.test),
            _ => Err(Error::Config(format!("unknown split {name:?} (train, validation, test)"))),
        }
    }

    /// Speakers present in both the training pool and the test set.
    pub fn speaker_overlap(&self, corpus: &Corpus) -> BTreeSet<String> {
        let speakers = |ids: &mut dyn Iterator<Item = &String>| -> BTreeSet<String> {
            ids.filter_map(|id| corpus.get(id)).map(|u| u.speaker.clone()).collect()
        };
        let train = speakers(&mut self.train.iter().chain(&self.validation));
        let test = speakers(&mut self.test.iter());
        train.intersection(&test).cloned().collect()
    }
}

/// Builds a split. With `require_mocap`, utterances lacking any motion
/// stream are moved to `excluded`.
pub fn make_splits(
    corpus: &Corpus,
    mode: SplitMode,
    seed: u64,
    test_session: u8,
    require_mocap: bool,
) -> Result<SplitPlan> {
    let (scope, excluded): (Vec<_>, Vec<_>) = corpus
        .utterances
        .iter()
        .partition(|u| !require_mocap || u.has_mocap());
    let excluded: Vec<String> = excluded.into_iter().map(|u| u.id.clone()).collect();
    if scope.is_empty() {
        return Err(Error::Data("no utterances in scope for splitting".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut plan = SplitPlan {
        mode,
        seed,
        train: vec![],
        validation: vec![],
        test: vec![],
        excluded,
    };
    match mode {
        SplitMode::PerModalityRandom => {
            let mut ids: Vec<String> = scope.iter().map(|u| u.id.clone()).collect();
            ids.shuffle(&mut rng);
            let held = ((ids.len() as f64 * PER_MODALITY_HOLDOUT).round() as usize).min(ids.len() - 1);
            plan.validation = ids.split_off(ids.len() - held);
            plan.train = ids;
        }
        SplitMode::CombinedSession => {
            let sessions = corpus.sessions();
            if !sessions.contains(&test_session) {
                return Err(Error::Data(format!(
                    "test session {test_session} absent; available sessions {sessions:?}"
                )));
            }
            let (test, mut pool): (Vec<_>, Vec<_>) = scope
                .iter()
                .map(|u| (u.session, u.id.clone()))
                .partition(|(s, _)| *s == test_session);
            plan.test = test.into_iter().map(|(_, id)| id).collect();
            let mut pool: Vec<String> = pool.drain(..).map(|(_, id)| id).collect();
            if pool.is_empty() {
                return Err(Error::Data("no training utterances outside the test session".into()));
            }
            pool.shuffle(&mut rng);
            let held = validation_size(pool.len()).min(pool.len() - 1);
            plan.validation = pool.split_off(pool.len() - held);
            plan.train = pool;
        }
    }
    Ok(plan)
}

/// `ceil(n · 838 / 3838)`, which is exactly 838 for the full corpus.
pub(crate) fn validation_size(pool: usize) -> usize {
    (pool * VALIDATION_NUM).div_ceil(VALIDATION_DEN)
}
