use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::dataset::{Dataset, FeatureStore, Normalization};
use super::eval::{evaluate, predictions_csv, EvalReport, Prediction};
use super::train::{train, History, TrainOptions};
use crate::audio::SpeechConfig;
use crate::data::{load_manifest, make_splits, Corpus, SplitPlan};
use crate::error::{Error, Result};
use crate::featfile::{
    featurize_mocap_corpus, featurize_speech_corpus, featurize_text_corpus, FeatureKind, FeatureSet,
};
use crate::nn::{load_checkpoint, save_checkpoint};
use crate::text::EmbeddingTable;
use crate::zoo::{catalog, CatalogOptions, FusionMember, FusionSpec, InputKind, ModelSpec, Network, NetworkDesc};

pub(crate) const CHECKPOINT: &str = "checkpoint.ckpt";
pub(crate) const REPORT: &str = "report.json";
pub(crate) const PREDICTIONS: &str = "predictions.csv";
pub(crate) const HISTORY: &str = "history.json";
pub(crate) const SPLIT: &str = "split.json";
pub(crate) const RUN_CONFIG: &str = "run.toml";

pub(crate) fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub(crate) fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Computes the requested feature files under `dir`, skipping those that
/// already exist unless `overwrite`.
pub fn featurize_dir(
    corpus: &Corpus,
    dir: &Path,
    kinds: &[FeatureKind],
    speech: &SpeechConfig,
    embeddings: &Path,
    overwrite: bool,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let missing = |k: FeatureKind| overwrite || !dir.join(k.file_name()).exists();
    let mut written = Vec::new();
    let mut save = |set: FeatureSet| -> Result<()> {
        let p = dir.join(set.kind.file_name());
        set.save(&p)?;
        written.push(p);
        Ok(())
    };
    if kinds.contains(&FeatureKind::Speech) && missing(FeatureKind::Speech) {
        save(featurize_speech_corpus(corpus, speech)?)?;
    }
    let text_kinds = [FeatureKind::Text, FeatureKind::Tokens];
    if text_kinds.iter().any(|k| kinds.contains(k) && missing(*k)) {
        let table = EmbeddingTable::load(embeddings)?;
        let (text, tokens) = featurize_text_corpus(corpus, &table)?;
        save(text)?;
        save(tokens)?;
    }
    if kinds.contains(&FeatureKind::Mocap) && missing(FeatureKind::Mocap) {
        let (set, skipped) = featurize_mocap_corpus(corpus)?;
        if !skipped.is_empty() {
            log::info!("{} utterances lack motion capture and were skipped", skipped.len());
        }
        save(set)?;
    }
    Ok(written)
}

/// Catalog options with feature-dependent widths filled in.
fn catalog_options(cfg: &RunConfig, store: &FeatureStore) -> Result<CatalogOptions> {
    let mut opts = cfg.catalog.clone();
    if let Ok(text) = store.get(FeatureKind::Text) {
        opts.text_dim = text.row_shape()[1];
    }
    if let Ok(tokens) = store.get(FeatureKind::Tokens) {
        opts.vocab_size = tokens.config["vocab_size"]
            .as_u64()
            .ok_or_else(|| Error::Data("token features lack vocab_size".into()))? as usize;
    }
    Ok(opts)
}

fn member_names(cfg: &RunConfig) -> Vec<String> {
    match (&cfg.model, &cfg.fusion) {
        (Some(m), _) => vec![m.clone()],
        (None, Some(f)) => f.members.clone(),
        (None, None) => vec![],
    }
}

fn input_kinds(cfg: &RunConfig) -> Result<Vec<InputKind>> {
    member_names(cfg)
        .iter()
        .map(|n| Ok(catalog(n, &cfg.catalog)?.input))
        .collect()
}

fn member_key(kind: InputKind) -> String {
    serde_json::to_value(kind)
        .ok()
        .and_then(|v| v.as_str().map(String::from))
        .unwrap_or_default()
}

pub(crate) fn build_network(cfg: &RunConfig, store: &FeatureStore) -> Result<Network> {
    let opts = catalog_options(cfg, store)?;
    match (&cfg.model, &cfg.fusion) {
        (Some(name), None) => Network::single(&catalog(name, &opts)?, cfg.seed),
        (None, Some(f)) => {
            let members = f
                .members
                .iter()
                .map(|name| {
                    let spec: ModelSpec = catalog(name, &opts)?;
                    Ok(FusionMember {
                        key: member_key(spec.input),
                        checkpoint: f.checkpoints.get(name).cloned(),
                        spec,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let spec = FusionSpec {
                members,
                units: f.units,
                dropout: f.dropout,
                regime: f.regime,
            };
            Network::fusion(&spec, cfg.seed)
        }
        _ => Err(Error::Config("set exactly one of `model` or `[fusion]`".into())),
    }
}

/// Corpus, feature store and split shared by training and search.
pub(crate) struct Prepared {
    pub corpus: Corpus,
    pub store: FeatureStore,
    pub plan: SplitPlan,
    pub inputs: Vec<InputKind>,
}

pub(crate) fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    cfg.validate()?;
    let corpus = load_manifest(&cfg.manifest)?;
    let inputs = input_kinds(cfg)?;
    let mut kinds: Vec<FeatureKind> = inputs.iter().map(|k| k.feature_kind()).collect();
    kinds.sort_by_key(|k| k.file_name());
    kinds.dedup();
    let dir = cfg.features_dir();
    featurize_dir(&corpus, &dir, &kinds, &cfg.speech, &cfg.embeddings_path(), false)?;
    let store = FeatureStore::load(&dir, &kinds)?;
    if let Ok(speech) = store.get(FeatureKind::Speech) {
        let want = crate::featfile::config_hash(&serde_json::to_value(&cfg.speech).expect("speech config serializes"));
        if speech.config_hash != want {
            return Err(Error::Config(format!(
                "{} was computed with a different speech configuration",
                dir.join(FeatureKind::Speech.file_name()).display()
            )));
        }
    }
    let needs_mocap = kinds.contains(&FeatureKind::Mocap);
    let plan = make_splits(&corpus, cfg.split.mode, cfg.seed, cfg.split.test_session, needs_mocap)?;
    if !plan.excluded.is_empty() {
        log::info!("{} utterances excluded for missing motion capture", plan.excluded.len());
    }
    Ok(Prepared {
        corpus,
        store,
        plan,
        inputs,
    })
}

pub(crate) fn cardinalities(plan: &SplitPlan) -> [usize; 4] {
    [plan.train.len(), plan.validation.len(), plan.test.len(), plan.excluded.len()]
}

pub(crate) fn options(cfg: &RunConfig, seed: u64, max_epochs: usize) -> TrainOptions {
    TrainOptions {
        batch_size: cfg.batch_size,
        max_epochs,
        patience: cfg.patience,
        seed,
        optimizer: cfg.optimizer.clone(),
        target_train_accuracy: cfg.target_train_accuracy,
    }
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub report: EvalReport,
    pub predictions: Vec<Prediction>,
    pub history: History,
    pub plan: SplitPlan,
    pub dir: PathBuf,
    pub network: Network,
}

impl RunOutput {
    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join(CHECKPOINT)
    }
}

pub(crate) fn save_run(
    dir: &Path,
    cfg: &RunConfig,
    net: &Network,
    norm: &Normalization,
    plan: &SplitPlan,
    history: &History,
    report: &EvalReport,
    preds: &[Prediction],
) -> Result<()> {
    let mut header = net.checkpoint_header(&cfg.hash());
    header.extra = serde_json::json!({ "network": header.extra, "normalization": norm });
    save_checkpoint(&dir.join(CHECKPOINT), &header, &net.params)?;
    write(&dir.join(RUN_CONFIG), cfg.to_toml())?;
    write(&dir.join(SPLIT), to_json(plan))?;
    write(&dir.join(HISTORY), to_json(history))?;
    write(&dir.join(REPORT), report.to_json())?;
    write(&dir.join(PREDICTIONS), predictions_csv(preds))
}

/// Trains the configured model or fusion and writes checkpoint, report,
/// predictions, history, split and the resolved config to `cfg.out`.
pub fn run_training(cfg: &RunConfig) -> Result<RunOutput> {
    let p = prepare(cfg)?;
    let norm = if cfg.normalize {
        Normalization::fit(&p.store, &p.inputs, &p.plan.train)?
    } else {
        Normalization::default()
    };
    let data = |ids: &[String]| Dataset::build(&p.store, &p.corpus, &p.inputs, ids, Some(&norm));
    let train_set = data(&p.plan.train)?;
    let val_set = if p.plan.validation.is_empty() {
        None
    } else {
        Some(data(&p.plan.validation)?)
    };
    let split = cfg.eval_split();
    let eval_set = data(p.plan.split(split)?)?;
    let mut net = build_network(cfg, &p.store)?;
    let history = train(&mut net, &train_set, val_set.as_ref(), &options(cfg, cfg.seed, cfg.max_epochs))?;
    let (report, preds) = evaluate(&net, &eval_set, split, cfg.batch_size, cardinalities(&p.plan), &cfg.hash())?;
    save_run(&cfg.out, cfg, &net, &norm, &p.plan, &history, &report, &preds)?;
    Ok(RunOutput {
        report,
        predictions: preds,
        history,
        plan: p.plan,
        dir: cfg.out.clone(),
        network: net,
    })
}

/// Config and split saved in a run directory.
pub fn load_run(dir: &Path) -> Result<(RunConfig, SplitPlan)> {
    let cfg = RunConfig::load(&dir.join(RUN_CONFIG))?;
    let plan: SplitPlan = read_json(&dir.join(SPLIT))?;
    Ok((cfg, plan))
}

/// Rebuilds a network from a checkpoint written by a run.
pub fn load_network(path: &Path) -> Result<(Network, Normalization)> {
    let (header, tensors) = load_checkpoint(path)?;
    let desc: NetworkDesc = serde_json::from_value(header.extra["network"].clone())
        .map_err(|e| Error::Data(format!("{}: network description: {e}", path.display())))?;
    let norm: Normalization = serde_json::from_value(header.extra["normalization"].clone()).unwrap_or_default();
    let mut net = Network::from_desc(&desc, header.seed)?;
    let filled = net.params.load_values(&header, &tensors, "")?;
    if filled != net.params.len() {
        return Err(Error::Data(format!("{}: parameter list mismatch", path.display())));
    }
    for (p, info) in net.params.iter_mut().zip(&header.params) {
        p.trainable = info.trainable;
    }
    Ok((net, norm))
}

/// Scores a saved checkpoint on one split of the run it came from.
pub fn evaluate_checkpoint(path: &Path, split: &str) -> Result<(EvalReport, Vec<Prediction>)> {
    let dir = path.parent().unwrap_or(Path::new(""));
    let (cfg, plan) = load_run(dir)?;
    let (net, norm) = load_network(path)?;
    let corpus = load_manifest(&cfg.manifest)?;
    let inputs: Vec<InputKind> = net.inputs().into_iter().map(|(_, k)| k).collect();
    let mut kinds: Vec<FeatureKind> = inputs.iter().map(|k| k.feature_kind()).collect();
    kinds.sort_by_key(|k| k.file_name());
    kinds.dedup();
    let store = FeatureStore::load(&cfg.features_dir(), &kinds)?;
    let data = Dataset::build(&store, &corpus, &inputs, plan.split(split)?, Some(&norm))?;
    evaluate(&net, &data, split, cfg.batch_size, cardinalities(&plan), &cfg.hash())
}

/// Human-readable summary of a run directory.
pub fn render_report(dir: &Path) -> Result<String> {
    let report: EvalReport = read_json(&dir.join(REPORT))?;
    let mut s = String::new();
    let _ = writeln!(s, "model     {}", report.model);
    let _ = writeln!(s, "split     {} ({} utterances)", report.split, report.total);
    let _ = writeln!(
        s,
        "sizes     train {} / validation {} / test {} / excluded {}",
        report.cardinalities[0], report.cardinalities[1], report.cardinalities[2], report.cardinalities[3]
    );
    let _ = writeln!(s, "accuracy  {:.4}", report.accuracy);
    let _ = writeln!(s, "config    {}", report.config_hash);
    let _ = writeln!(s, "\nclass      precision  recall  support");
    for m in &report.per_class {
        let _ = writeln!(s, "{:<10} {:>9.4} {:>7.4} {:>8}", m.class, m.precision, m.recall, m.support);
    }
    let _ = writeln!(s, "\nconfusion (rows true, columns predicted)");
    for row in &report.confusion {
        let cells: Vec<String> = row.iter().map(|c| format!("{c:>6}")).collect();
        let _ = writeln!(s, "{}", cells.join(""));
    }
    if let Ok(h) = read_json::<History>(&dir.join(HISTORY)) {
        let _ = writeln!(
            s,
            "\nepochs    {} run, best {}{}",
            h.epochs.len(),
            h.best_epoch,
            if h.stopped_early { " (stopped early)" } else { "" }
        );
    }
    let trials = dir.join(super::hpo::TRIALS);
    if let Ok(text) = fs::read_to_string(&trials) {
        let _ = writeln!(s, "\ntrials    {}", text.lines().count());
        if let Ok(summary) = read_json::<serde_json::Value>(&dir.join(super::hpo::SUMMARY)) {
            let _ = writeln!(s, "winner    trial {}", summary["winner"]["trial"]);
        }
    }
    Ok(s)
}
