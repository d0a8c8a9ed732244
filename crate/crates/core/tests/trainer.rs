use emkd_core::checkpoint::{Checkpoint, FORMAT_VERSION};
use emkd_core::data::{split_leave_one_out, synth_generate, SplitDataset, SynthConfig};
use emkd_core::eval::ensemble_predict;
use emkd_core::gradcheck::tiny_setup;
use emkd_core::objective::{forward, BatchInputs, ForwardHooks};
use emkd_core::rng;
use emkd_core::trainer::{select_best, Trainer};
use emkd_core::{Ablation, EmkdError, ModelConfig, TrainConfig};
use emkd_tape::{Graph, Tensor};
use sha2::{Digest, Sha256};

fn small_synth() -> (ModelConfig, SplitDataset) {
    let ds = synth_generate(&SynthConfig {
        n_users: 120,
        ..SynthConfig::default()
    })
    .unwrap();
    let cfg = ModelConfig {
        hidden_dim: 16,
        n_networks: 2,
        ..ModelConfig::for_vocab(ds.n_items(), ds.n_attributes(), 20)
    };
    let split = split_leave_one_out(&ds, 20).unwrap();
    (cfg, split)
}

fn train_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 32,
        lr: 0.005,
        eval_every: 2,
        ..TrainConfig::default()
    }
}

fn bits(ts: &[&Tensor]) -> Vec<u64> {
    ts.iter().flat_map(|t| t.data().iter().map(|x| x.to_bits())).collect()
}

#[test]
fn one_epoch_is_finite_and_repeatable() {
    let (cfg, split) = small_synth();
    let run = || {
        let mut t = Trainer::new(cfg.clone(), train_cfg(1)).unwrap();
        let r = t.train_epoch(&split).unwrap();
        (r, t)
    };
    let (a, ta) = run();
    let (b, tb) = run();
    assert!(a.is_finite());
    assert!(a.mip > 0.0 && a.ap > 0.0 && a.kd >= 0.0);
    for (x, y) in [(a.mip, b.mip), (a.ap, b.ap), (a.icl, b.icl), (a.ccl, b.ccl), (a.kd, b.kd), (a.total, b.total)] {
        assert!((x - y).abs() <= 1e-9);
    }
    assert_eq!(ta.ensemble, tb.ensemble);
}

#[test]
fn item_prediction_loss_falls_over_thirty_epochs() {
    let (cfg, split) = small_synth();
    let mut t = Trainer::new(cfg, train_cfg(30)).unwrap();
    t.fit(&split, None).unwrap();
    let first = t.history.first().unwrap().loss.mip;
    let last = t.history.last().unwrap().loss.mip;
    assert!(last < first, "{first} -> {last}");
    assert_eq!(t.history.len(), 30);
}

#[test]
fn independent_networks_match_separate_runs() {
    let (cfg, split) = tiny_setup().unwrap();
    let seeds = [31, 77];
    let joint_train = TrainConfig {
        epochs: 2,
        seed: 5,
        network_seeds: Some(seeds.to_vec()),
        ablation: Ablation {
            independent_training: true,
            ..Ablation::default()
        },
        ..TrainConfig::default()
    };
    let mut joint = Trainer::new(cfg.clone(), joint_train.clone()).unwrap();
    joint.train_epoch(&split).unwrap();
    joint.train_epoch(&split).unwrap();

    for (n, &s) in seeds.iter().enumerate() {
        let single_cfg = ModelConfig {
            n_networks: 1,
            ..cfg.clone()
        };
        let single_train = TrainConfig {
            network_seeds: Some(vec![s]),
            ..joint_train.clone()
        };
        let mut single = Trainer::new(single_cfg, single_train).unwrap();
        single.train_epoch(&split).unwrap();
        single.train_epoch(&split).unwrap();
        let a = joint.ensemble.networks[n].tensors();
        let b = single.ensemble.networks[0].tensors();
        for (x, y) in a.iter().zip(&b) {
            for (p, q) in x.data().iter().zip(y.data()) {
                assert!((p - q).abs() <= 1e-9, "network {n}");
            }
        }
    }
}

#[test]
fn backward_root_is_the_reported_total() {
    let (cfg, split) = tiny_setup().unwrap();
    let t = Trainer::new(cfg.clone(), TrainConfig::default()).unwrap();
    let inputs = BatchInputs::build(&cfg, &split, &[0, 1, 2], |u| rng::stream(1, &[u as u64])).unwrap();
    let mut g = Graph::new();
    let vars: Vec<_> = t.ensemble.networks.iter().map(|p| p.bind(&mut g, true)).collect();
    let f = forward(&mut g, &cfg, &Ablation::default(), &vars, &inputs, Some(&[3, 4]), &ForwardHooks::default())
        .unwrap();
    assert!((g.item(f.total) - f.report.total).abs() <= 1e-9);
    let r = f.report;
    let recombined = r.mip + r.ap + cfg.lambda * (r.icl + r.ccl) + cfg.mu * r.kd;
    assert!((recombined - r.total).abs() <= 1e-9);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let (cfg, split) = tiny_setup().unwrap();
    let mut t = Trainer::new(cfg.clone(), train_cfg(2)).unwrap();
    t.fit(&split, None).unwrap();
    let ckpt = Checkpoint::from_trainer(&t, Some("abc".into()));
    let bytes = ckpt.to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ckpt);
    for (a, b) in back.ensemble.networks.iter().zip(&t.ensemble.networks) {
        assert_eq!(bits(&a.tensors()), bits(&b.tensors()));
    }
    let seq = &split.users[0].train;
    assert_eq!(
        ensemble_predict(&back.ensemble, &cfg, seq).unwrap(),
        ensemble_predict(&t.ensemble, &cfg, seq).unwrap()
    );
    assert_eq!(back.to_bytes().unwrap(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("last.ckpt");
    ckpt.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap(), ckpt);
}

#[test]
fn resumed_training_continues_the_schedule() {
    let (cfg, split) = tiny_setup().unwrap();
    let train = TrainConfig {
        epochs: 4,
        decay_period: 2,
        eval_every: 1,
        ..TrainConfig::default()
    };
    let mut straight = Trainer::new(cfg.clone(), train.clone()).unwrap();
    straight.fit(&split, None).unwrap();

    let mut first = Trainer::new(cfg.clone(), TrainConfig { epochs: 2, ..train.clone() }).unwrap();
    first.fit(&split, None).unwrap();
    let bytes = Checkpoint::from_trainer(&first, None).to_bytes().unwrap();
    let mut resumed = Checkpoint::from_bytes(&bytes).unwrap().into_trainer().unwrap();
    assert_eq!(resumed.epoch, 2);
    assert_eq!(resumed.train.lr_at(resumed.epoch), train.lr * 0.5);
    resumed.train.epochs = 4;
    resumed.fit(&split, None).unwrap();

    assert_eq!(resumed.history, straight.history);
    assert_eq!(resumed.ensemble, straight.ensemble);
    assert_eq!(resumed.history[2].lr, 0.0005);
}

#[test]
fn best_epoch_replays_from_the_log() {
    let (cfg, split) = small_synth();
    let mut t = Trainer::new(cfg.clone(), train_cfg(8)).unwrap();
    let mut log = Vec::new();
    t.fit(&split, Some(&mut log)).unwrap();
    let records: Vec<emkd_core::trainer::EpochRecord> = String::from_utf8(log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(records, t.history);
    let evaluated: Vec<_> = records.iter().filter_map(|r| r.validation.map(|v| (r.epoch, v.ndcg10))).collect();
    assert_eq!(evaluated.iter().map(|e| e.0).collect::<Vec<_>>(), vec![2, 4, 6, 8]);
    let max = evaluated.iter().map(|e| e.1).fold(f64::MIN, f64::max);
    let best = select_best(&records).unwrap();
    assert_eq!(best.ndcg10, max);
    assert_eq!(best.epoch, evaluated.iter().find(|e| e.1 == max).unwrap().0);
    assert_eq!(t.best, Some(best));

    // the retained parameters score the recorded value
    let kept = t.best_ensemble.as_ref().unwrap();
    let report = emkd_core::eval::evaluate(
        kept,
        &cfg,
        &split,
        emkd_core::eval::EvalTarget::Validation,
        Default::default(),
    )
    .unwrap();
    assert_eq!(report.ndcg(10), best.ndcg10);
}

#[test]
fn damaged_checkpoints_are_refused() {
    let (cfg, _) = tiny_setup().unwrap();
    let t = Trainer::new(cfg, TrainConfig::default()).unwrap();
    let bytes = Checkpoint::from_trainer(&t, None).to_bytes().unwrap();

    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x40;
    let err = Checkpoint::from_bytes(&flipped).unwrap_err();
    assert!(matches!(err, EmkdError::Checkpoint(_)));
    assert!(err.to_string().contains("checksum"));

    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 100]), Err(EmkdError::Checkpoint(_))));
    assert!(matches!(Checkpoint::from_bytes(b"not a checkpoint"), Err(EmkdError::Checkpoint(_))));

    // a future version with a valid checksum
    let mut body = bytes[..bytes.len() - 32].to_vec();
    body[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    let digest = Sha256::digest(&body);
    body.extend_from_slice(&digest);
    let err = Checkpoint::from_bytes(&body).unwrap_err();
    assert!(err.to_string().contains("version"), "{err}");
}

#[test]
fn non_finite_gradients_abort_the_epoch() {
    let (cfg, split) = tiny_setup().unwrap();
    let mut t = Trainer::new(cfg, TrainConfig::default()).unwrap();
    t.ensemble.networks[1].item_b.data_mut()[0] = f64::NAN;
    let err = t.train_epoch(&split).unwrap_err();
    assert!(matches!(err, EmkdError::NonFinite(_)), "{err}");
    assert!(err.to_string().contains("batch"));
}

#[test]
fn single_encoder_configuration_has_only_item_prediction() {
    let (cfg, split) = tiny_setup().unwrap();
    let cfg = ModelConfig { n_networks: 1, ..cfg };
    let train = TrainConfig {
        ablation: Ablation {
            no_icl: true,
            no_ccl: true,
            no_kd: true,
            no_ap: true,
            independent_training: false,
        },
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(cfg, train).unwrap();
    let r = t.train_epoch(&split).unwrap();
    assert_eq!((r.ap, r.icl, r.ccl, r.kd), (0.0, 0.0, 0.0, 0.0));
    assert_eq!(r.total, r.mip);
}
