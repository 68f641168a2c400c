mod common;

use std::fs;
use std::path::Path;

use emofuse::data::{generate_synthetic, SplitMode, SynthConfig};
use emofuse::harness::{
    evaluate_checkpoint, load_network, read_predictions, run_hpo, run_training, trial_log, train, Dataset,
    FeatureStore, FusionConfig, HpoSpace, Normalization, RunConfig, TrainOptions,
};
use emofuse::featfile::FeatureKind;
use emofuse::zoo::{catalog, CatalogOptions, InputKind, Network};

fn corpus(dir: &Path) {
    let cfg = SynthConfig {
        n: 40,
        seed: 11,
        embedding_dim: 12,
        ..SynthConfig::default()
    };
    generate_synthetic(&cfg, dir).unwrap();
}

fn config(root: &Path, out: &str) -> RunConfig {
    let mut cfg = RunConfig::new(3, root.join("manifest.jsonl"), root.join(out));
    cfg.features = Some(root.join("features"));
    cfg.model = Some("Speech_Model1".into());
    cfg.catalog = CatalogOptions {
        width_divisor: 32,
        ..CatalogOptions::default()
    };
    cfg.max_epochs = 4;
    cfg.batch_size = 8;
    cfg
}

#[test]
fn training_run_is_reproducible_and_consistent() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path());
    let a = run_training(&config(dir.path(), "a")).unwrap();
    let b = run_training(&config(dir.path(), "b")).unwrap();
    for f in ["checkpoint.ckpt", "report.json", "predictions.csv", "history.json", "split.json"] {
        assert_eq!(fs::read(a.dir.join(f)).unwrap(), fs::read(b.dir.join(f)).unwrap(), "{f} differs");
    }

    // Recount accuracy from the persisted predictions.
    let rows = read_predictions(&a.dir.join("predictions.csv")).unwrap();
    assert_eq!(rows.len(), a.report.total);
    assert_eq!(rows.len(), a.plan.test.len());
    let hits = rows.iter().filter(|(_, label, pred)| label == pred).count();
    assert_eq!(hits as f64 / rows.len() as f64, a.report.accuracy);
    let confusion_total: usize = a.report.confusion.iter().flatten().sum();
    assert_eq!(confusion_total, rows.len());

    // The saved checkpoint scores identically.
    let (report, _) = evaluate_checkpoint(&a.checkpoint(), "test").unwrap();
    assert_eq!(report, a.report);
    let (net, _) = load_network(&a.checkpoint()).unwrap();
    assert_eq!(net.params.to_le_bytes(), a.network.params.to_le_bytes());

    // Early stopping restores the best validation epoch.
    let best = a.history.best_validation_accuracy.unwrap();
    let max = a.history.epochs.iter().filter_map(|e| e.validation_accuracy).fold(0.0, f64::max);
    assert_eq!(best, max);
    let (val_report, _) = evaluate_checkpoint(&a.checkpoint(), "validation").unwrap();
    assert_eq!(val_report.accuracy, best);
}

fn datasets(root: &Path) -> (Network, Dataset, Dataset) {
    let cfg = config(root, "unused");
    let corpus = emofuse::data::load_manifest(&cfg.manifest).unwrap();
    emofuse::harness::featurize_dir(
        &corpus,
        &cfg.features_dir(),
        &[FeatureKind::Speech],
        &cfg.speech,
        &cfg.embeddings_path(),
        false,
    )
    .unwrap();
    let store = FeatureStore::load(&cfg.features_dir(), &[FeatureKind::Speech]).unwrap();
    let plan = emofuse::data::make_splits(&corpus, SplitMode::CombinedSession, 0, 5, false).unwrap();
    let norm = Normalization::fit(&store, &[InputKind::Speech], &plan.train).unwrap();
    let build = |ids: &[String]| Dataset::build(&store, &corpus, &[InputKind::Speech], ids, Some(&norm)).unwrap();
    let spec = catalog("Speech_Model1", &cfg.catalog).unwrap();
    (Network::single(&spec, 0).unwrap(), build(&plan.train), build(&plan.validation))
}

fn options(patience: usize, epochs: usize) -> TrainOptions {
    TrainOptions {
        batch_size: 8,
        max_epochs: epochs,
        patience,
        seed: 1,
        optimizer: Default::default(),
        target_train_accuracy: None,
    }
}

#[test]
fn patience_zero_stops_after_one_epoch() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path());
    let (mut net, tr, va) = datasets(dir.path());
    let h = train(&mut net, &tr, Some(&va), &options(0, 10)).unwrap();
    assert_eq!(h.epochs.len(), 1);
    assert_eq!(h.best_epoch, 1);
    assert!(h.stopped_early);

    let (mut net, tr, _) = datasets(dir.path());
    let h = train(&mut net, &tr, None, &options(0, 3)).unwrap();
    assert_eq!(h.epochs.len(), 3);
    assert_eq!(h.best_epoch, 3);
}

#[test]
fn normalization_uses_training_rows_only() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path());
    let (_, tr, _) = datasets(dir.path());
    let batch = tr.batch(&(0..tr.len()).collect::<Vec<_>>()).unwrap();
    let emofuse::zoo::Batch::Dense { x, lengths } = &batch[0] else { panic!() };
    let lengths = lengths.as_ref().unwrap();
    // Each column over the valid training frames has mean 0.
    let (t, f) = (x.shape()[1], x.shape()[2]);
    for c in 0..f {
        let (mut s, mut n) = (0.0, 0);
        for (b, &len) in lengths.iter().enumerate() {
            for r in 0..len {
                s += x.data()[(b * t + r) * f + c];
                n += 1;
            }
        }
        assert!((s / n as f64).abs() < 1e-9, "column {c}");
    }
}

#[test]
fn hpo_single_trial() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path());
    let mut cfg = config(dir.path(), "hpo");
    cfg.model = None;
    cfg.fusion = Some(FusionConfig {
        members: vec!["Speech_Model1".into(), "Text_Model2".into()],
        ..FusionConfig::default()
    });
    cfg.max_epochs = 2;
    let space = HpoSpace {
        budget: 1,
        ..HpoSpace::default()
    };
    let out = run_hpo(&space, &cfg).unwrap();
    assert_eq!(out.trials.len(), 1);
    assert_eq!(out.winner, out.trials[0]);
    assert!(out.audit.overlap.is_empty());
    assert_eq!(out.audit.test_ids.len(), out.test_report.total);
    let log = fs::read_to_string(trial_log(&cfg.out)).unwrap();
    assert_eq!(log.lines().count(), 1);
    assert!(cfg.out.join("checkpoint.ckpt").exists());
}

#[test]
fn config_round_trips_through_toml() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "x");
    let path = dir.path().join("run.toml");
    fs::write(&path, cfg.to_toml()).unwrap();
    assert_eq!(RunConfig::load(&path).unwrap(), cfg);
}
