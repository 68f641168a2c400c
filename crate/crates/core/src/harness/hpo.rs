use std::collections::BTreeSet;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{HpoSpace, RunConfig};
use super::dataset::{Dataset, Normalization};
use super::eval::{evaluate, EvalReport};
use super::run::{build_network, cardinalities, options, prepare, save_run, to_json, write};
use super::train::train;
use crate::error::{Error, Result};
use crate::featfile::config_hash;

pub(crate) const TRIALS: &str = "trials.jsonl";
pub(crate) const SUMMARY: &str = "hpo.json";
const MAX_REDRAWS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialParams {
    pub speech_lstm_units: usize,
    pub text_lstm_units: usize,
    pub fusion_units: usize,
    pub dropout: f64,
}

impl TrialParams {
    fn key(&self) -> (usize, usize, usize, u64) {
        (self.speech_lstm_units, self.text_lstm_units, self.fusion_units, self.dropout.to_bits())
    }

    fn draw(space: &HpoSpace, rng: &mut ChaCha8Rng) -> Self {
        TrialParams {
            speech_lstm_units: *space.speech_lstm_units.choose(rng).expect("non-empty"),
            text_lstm_units: *space.text_lstm_units.choose(rng).expect("non-empty"),
            fusion_units: *space.fusion_units.choose(rng).expect("non-empty"),
            dropout: *space.dropout.choose(rng).expect("non-empty"),
        }
    }

    /// `base` with these hyperparameters applied.
    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        cfg.catalog.speech_lstm_units = Some(self.speech_lstm_units);
        cfg.catalog.text_lstm_units = Some(self.text_lstm_units);
        cfg.catalog.dropout = Some(self.dropout);
        if let Some(f) = &mut cfg.fusion {
            f.units = self.fusion_units;
            f.dropout = self.dropout;
        }
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub seed: u64,
    pub params: TrialParams,
    pub validation_accuracy: Option<f64>,
    pub best_epoch: Option<usize>,
    pub error: Option<String>,
    /// Hashes of the id lists the trial trained and scored on.
    pub train_ids: String,
    pub validation_ids: String,
}

/// Which ids the final model saw, for auditing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Audit {
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub overlap: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HpoOutcome {
    pub trials: Vec<TrialRecord>,
    pub winner: TrialRecord,
    pub final_epochs: usize,
    pub test_report: EvalReport,
    pub audit: Audit,
}

/// Random search over fusion hyperparameters, then a retrain of the winner
/// on train plus validation, scored on test. Writes `trials.jsonl`,
/// `hpo.json`, `audit.json` and the usual run files to `base.out`.
pub fn run_hpo(space: &HpoSpace, base: &RunConfig) -> Result<HpoOutcome> {
    space.validate()?;
    if base.fusion.is_none() {
        return Err(Error::Config("hyperparameter search needs a `[fusion]` base config".into()));
    }
    let prep = prepare(base)?;
    let plan = &prep.plan;
    if plan.test.is_empty() || plan.validation.is_empty() {
        return Err(Error::Config("search needs non-empty validation and test splits".into()));
    }
    let norm = if base.normalize {
        Normalization::fit(&prep.store, &prep.inputs, &plan.train)?
    } else {
        Normalization::default()
    };
    let train_set = Dataset::build(&prep.store, &prep.corpus, &prep.inputs, &plan.train, Some(&norm))?;
    let val_set = Dataset::build(&prep.store, &prep.corpus, &prep.inputs, &plan.validation, Some(&norm))?;

    let mut rng = ChaCha8Rng::seed_from_u64(base.seed);
    let mut seen = BTreeSet::new();
    let mut trials: Vec<TrialRecord> = Vec::new();
    let mut log = String::new();
    for trial in 0..space.budget {
        let mut params = TrialParams::draw(space, &mut rng);
        let mut redraws = 0;
        while seen.contains(&params.key()) && redraws < MAX_REDRAWS {
            params = TrialParams::draw(space, &mut rng);
            redraws += 1;
        }
        if !seen.insert(params.key()) {
            log::info!("trial {trial}: space exhausted after {MAX_REDRAWS} redraws, skipped");
            continue;
        }
        let seed = base.seed.wrapping_add(1 + trial as u64);
        let cfg = TrialParams::apply(&params, base);
        let outcome = build_network(&cfg, &prep.store).and_then(|mut net| {
            train(&mut net, &train_set, Some(&val_set), &options(&cfg, seed, cfg.max_epochs))
        });
        let record = TrialRecord {
            trial,
            seed,
            params,
            validation_accuracy: outcome.as_ref().ok().and_then(|h| h.best_validation_accuracy),
            best_epoch: outcome.as_ref().ok().map(|h| h.best_epoch),
            error: outcome.as_ref().err().map(|e| e.to_string()),
            train_ids: config_hash(&plan.train),
            validation_ids: config_hash(&plan.validation),
        };
        log.push_str(&serde_json::to_string(&record).expect("record serializes"));
        log.push('\n');
        write(&base.out.join(TRIALS), &log)?;
        trials.push(record);
    }

    let winner = trials
        .iter()
        .filter_map(|t| t.validation_accuracy.map(|a| (a, t)))
        .fold(None::<(f64, &TrialRecord)>, |best, (a, t)| match best {
            Some((b, _)) if a <= b => best,
            _ => Some((a, t)),
        })
        .map(|(_, t)| t.clone())
        .ok_or_else(|| {
            let causes: Vec<String> = trials
                .iter()
                .map(|t| format!("trial {}: {}", t.trial, t.error.as_deref().unwrap_or("no result")))
                .collect();
            Error::Numerical(format!("all {} trials failed: {}", trials.len(), causes.join("; ")))
        })?;

    // Final model: winner's settings, trained on train ∪ validation for the
    // winner's best epoch count, scored once on test.
    let pool = plan.training_pool();
    let final_norm = if base.normalize {
        Normalization::fit(&prep.store, &prep.inputs, &pool)?
    } else {
        Normalization::default()
    };
    let pool_set = Dataset::build(&prep.store, &prep.corpus, &prep.inputs, &pool, Some(&final_norm))?;
    let test_set = Dataset::build(&prep.store, &prep.corpus, &prep.inputs, &plan.test, Some(&final_norm))?;
    let mut cfg = winner.params.apply(base);
    cfg.target_train_accuracy = None;
    let epochs = winner.best_epoch.unwrap_or(1).max(1);
    let mut net = build_network(&cfg, &prep.store)?;
    let history = train(&mut net, &pool_set, None, &options(&cfg, winner.seed, epochs))?;
    let (report, preds) = evaluate(&net, &test_set, "test", cfg.batch_size, cardinalities(plan), &cfg.hash())?;

    let test_ids: BTreeSet<&String> = test_set.ids.iter().collect();
    let audit = Audit {
        overlap: pool_set.ids.iter().filter(|id| test_ids.contains(id)).cloned().collect(),
        train_ids: pool_set.ids.clone(),
        test_ids: test_set.ids.clone(),
    };
    save_run(&base.out, &cfg, &net, &final_norm, plan, &history, &report, &preds)?;
    write(&base.out.join("audit.json"), to_json(&audit))?;
    let outcome = HpoOutcome {
        trials,
        winner,
        final_epochs: epochs,
        test_report: report,
        audit,
    };
    write(&base.out.join(SUMMARY), to_json(&outcome))?;
    Ok(outcome)
}

/// Path of the trial log inside a search output directory.
pub fn trial_log(dir: &std::path::Path) -> PathBuf {
    dir.join(TRIALS)
}
