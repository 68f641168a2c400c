mod common;

use common::{batch_for, jitter_biases, labels, rng, small_spec, TOL};
use emofuse::gradcheck::check_network;
use emofuse::nn::{save_checkpoint, Mode, OptimizerConfig};
use emofuse::zoo::{catalog, catalog_names, Batch, CatalogOptions, FusionMember, FusionRegime, FusionSpec, Network};

fn small_fusion(names: &[&str], regime: FusionRegime, dropout: f64) -> FusionSpec {
    FusionSpec {
        members: names
            .iter()
            .enumerate()
            .map(|(i, n)| FusionMember {
                key: format!("m{i}"),
                spec: small_spec(n),
                checkpoint: None,
            })
            .collect(),
        units: 5,
        dropout,
        regime,
    }
}

#[test]
fn every_model_emits_probability_rows() {
    for name in catalog_names() {
        let spec = small_spec(name);
        let net = Network::single(&spec, 1).unwrap();
        let p = net.predict_proba(&[&batch_for(&spec, 2, 3)]).unwrap();
        assert_eq!(p.shape(), &[2, 4], "{name}");
        for r in 0..2 {
            assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9, "{name}");
        }
    }
}

#[test]
fn every_model_passes_gradient_check() {
    for name in catalog_names() {
        let spec = small_spec(name);
        for seed in 0..5 {
            let mut net = Network::single(&spec, seed).unwrap();
            jitter_biases(&mut net, seed);
            let batch = batch_for(&spec, 2, seed + 10);
            let err = check_network(&net, &[&batch], &labels(2, seed), Mode::Train, seed, common::H).unwrap();
            assert!(err < TOL, "{name} seed {seed}: relative error {err:e}");
        }
    }
}

#[test]
fn fusion_passes_gradient_check() {
    let spec = small_fusion(&["Speech_Model4", "Text_Model2", "Mocap_Model1"], FusionRegime::EndToEnd, 0.3);
    for seed in 0..5 {
        let mut net = Network::fusion(&spec, seed).unwrap();
        jitter_biases(&mut net, seed);
        let batches: Vec<Batch> = spec.members.iter().map(|m| batch_for(&m.spec, 3, seed + 20)).collect();
        let refs: Vec<&Batch> = batches.iter().collect();
        let err = check_network(&net, &refs, &labels(3, seed), Mode::Train, seed, common::H).unwrap();
        assert!(err < TOL, "fusion seed {seed}: relative error {err:e}");
    }
}

#[test]
fn one_step_decreases_loss() {
    for name in catalog_names() {
        let spec = small_spec(name);
        let mut net = Network::single(&spec, 2).unwrap();
        jitter_biases(&mut net, 2);
        let batch = batch_for(&spec, 4, 5);
        let y = labels(4, 1);
        let loss = |n: &Network| n.loss(&[&batch], &y, Mode::Infer, &mut rng(0)).unwrap();
        let before = loss(&net);
        let (_, grads) = net.loss_and_grads(&[&batch], &y, Mode::Infer, &mut rng(0)).unwrap();
        let decreased = [1.0, 0.1].iter().any(|&scale| {
            let mut trial = net.clone();
            let cfg = OptimizerConfig {
                lr_scale: scale,
                ..OptimizerConfig::default()
            };
            trial.optimizer(&cfg).step(&mut trial.params, &grads).unwrap();
            let after = loss(&trial);
            if after < before {
                net = trial;
                true
            } else {
                false
            }
        });
        assert!(decreased, "{name}: loss did not decrease from {before}");
    }
}

#[test]
fn frozen_members_stay_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = small_fusion(&["Speech_Model4", "Text_Model2"], FusionRegime::Frozen, 0.0);
    let mut member_bytes = Vec::new();
    for (i, m) in spec.members.iter_mut().enumerate() {
        let net = Network::single(&m.spec, 40 + i as u64).unwrap();
        let path = dir.path().join(format!("{}.ckpt", m.key));
        save_checkpoint(&path, &net.checkpoint_header("test"), &net.params).unwrap();
        member_bytes.push((m.key.clone(), net.params.clone()));
        m.checkpoint = Some(path);
    }
    let mut net = Network::fusion(&spec, 3).unwrap();
    let snapshot = |n: &Network, key: &str| -> Vec<u8> {
        n.params.iter().filter(|p| p.name.starts_with(&format!("{key}/"))).flat_map(|p| p.value.to_le_bytes()).collect()
    };
    for (key, store) in &member_bytes {
        // Truncated members keep every layer through the penultimate one.
        let loaded = snapshot(&net, key);
        let expected: Vec<u8> = store
            .iter()
            .filter(|p| net.params.find(&format!("{key}/{}", p.name)).is_some())
            .flat_map(|p| p.value.to_le_bytes())
            .collect();
        assert_eq!(loaded, expected);
    }
    let before: Vec<Vec<u8>> = member_bytes.iter().map(|(k, _)| snapshot(&net, k)).collect();
    let head_before = net.params.find("fusion.hidden.weight").unwrap().value.clone();
    let batches: Vec<Batch> = spec.members.iter().map(|m| batch_for(&m.spec, 4, 9)).collect();
    let refs: Vec<&Batch> = batches.iter().collect();
    let mut opt = net.optimizer(&OptimizerConfig::default());
    for _ in 0..5 {
        let (_, grads) = net.loss_and_grads(&refs, &labels(4, 0), Mode::Train, &mut rng(1)).unwrap();
        opt.step(&mut net.params, &grads).unwrap();
    }
    let after: Vec<Vec<u8>> = member_bytes.iter().map(|(k, _)| snapshot(&net, k)).collect();
    assert_eq!(before, after);
    assert_ne!(net.params.find("fusion.hidden.weight").unwrap().value, head_before);
}

#[test]
fn fusion_input_widths() {
    let o = CatalogOptions::default();
    let member = |name: &str, key: &str| FusionMember {
        key: key.into(),
        spec: catalog(name, &o).unwrap(),
        checkpoint: None,
    };
    let width = |members: Vec<FusionMember>| -> usize {
        let spec = FusionSpec {
            members,
            units: 256,
            dropout: 0.0,
            regime: FusionRegime::EndToEnd,
        };
        spec.members.iter().map(|m| m.spec.penultimate_width().unwrap()).sum()
    };
    assert_eq!(
        width(vec![member("Speech_Model4", "speech"), member("Text_Model2", "text"), member("Mocap_Model1", "mocap")]),
        1280
    );
    assert_eq!(width(vec![member("Speech_Model4", "speech"), member("Text_Model2", "text")]), 1024);

    // The built head consumes the concatenation.
    let spec = FusionSpec {
        members: vec![member("Head_Model2", "head"), member("Hand_Model2", "hand")],
        units: 16,
        dropout: 0.0,
        regime: FusionRegime::EndToEnd,
    };
    let net = Network::fusion(&spec, 0).unwrap();
    assert_eq!(net.params.find("fusion.hidden.weight").unwrap().value.shape(), &[512, 16]);
}

#[test]
fn unknown_batch_shape_is_reported() {
    let spec = small_spec("Speech_Model1");
    let net = Network::single(&spec, 0).unwrap();
    let wrong = batch_for(&small_spec("Text_Model2"), 2, 0);
    let msg = net.predict_proba(&[&wrong]).unwrap_err().to_string();
    assert!(msg.contains("Speech_Model1"), "{msg}");
}
