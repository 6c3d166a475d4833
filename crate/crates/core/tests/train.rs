#![cfg(not(feature = "f32"))]

use std::path::Path;

use gridner::corpus::{
    build_all_instances, build_instance, build_pipeline_vocab, load_corpus, mlm_corpus, synthetic_corpus,
    EntityType, InstanceOptions, SentenceRecord, SyntheticOptions, Vocab,
};
use gridner::diffcore::rng::stream;
use gridner::diffcore::{Init, FLOAT_BITS};
use gridner::model::{Gradients, Model, ModelConfig, ParamStore};
use gridner::train::{
    adam_step, clip_grad_norm, finetune, load_checkpoint, mlm_pretrain, save_checkpoint, Checkpoint, CheckpointMeta,
    OptimState, TrainConfig, Trainer,
};
use gridner::Error;
use proptest::prelude::*;

fn micro_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 8,
        d_type: 4,
        d_lstm: 4,
        d_biaffine: 4,
        d_h: 4,
        d_dist: 2,
        d_region: 2,
        d_g: 4,
        dropout: 0.0,
        max_len: 48,
        ..ModelConfig::default()
    }
}

fn fixture() -> Vec<SentenceRecord> {
    load_corpus(&Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/overfit16.json")).unwrap()
}

fn store(entries: &[(&str, &[usize])]) -> ParamStore {
    let mut s = ParamStore::default();
    let mut rng = stream(0, "test-store");
    for (name, shape) in entries {
        s.add(name, shape, Init::Normal { mean: 0.0, std: 1.0 }, &mut rng).unwrap();
    }
    s
}

fn grads_of(vals: Vec<Option<Vec<f64>>>) -> Gradients {
    Gradients(vals)
}

#[test]
fn zero_gradients_leave_parameters_unchanged() {
    let mut s = store(&[("encoder.a", &[3]), ("head.b", &[2, 2])]);
    let before = s.clone();
    let mut st = OptimState::new(&s);
    let g = grads_of(vec![Some(vec![0.0; 3]), Some(vec![0.0; 4])]);
    adam_step(&mut s, &g, &mut st, &TrainConfig::default()).unwrap();
    assert_eq!(st.step, 1);
    for id in s.ids() {
        assert_eq!(s.tensor(id).data, before.tensor(id).data);
    }
}

#[test]
fn first_step_moves_by_the_group_learning_rate() {
    let mut s = store(&[("encoder.w", &[1]), ("head.w", &[1])]);
    let (e0, h0) = (s.tensor(s.id("encoder.w").unwrap()).data[0], s.tensor(s.id("head.w").unwrap()).data[0]);
    let cfg = TrainConfig::default();
    let mut st = OptimState::new(&s);
    adam_step(&mut s, &grads_of(vec![Some(vec![1.0]), Some(vec![1.0])]), &mut st, &cfg).unwrap();
    // m̂ = v̂ = 1, so the step is lr / (1 + eps)
    let de = s.tensor(s.id("encoder.w").unwrap()).data[0] - e0;
    let dh = s.tensor(s.id("head.w").unwrap()).data[0] - h0;
    assert!((de + cfg.lr_encoder / (1.0 + cfg.eps)).abs() < 1e-15, "{de}");
    assert!((dh + cfg.lr_heads / (1.0 + cfg.eps)).abs() < 1e-15, "{dh}");
}

#[test]
fn parameters_without_gradient_are_skipped() {
    let mut s = store(&[("encoder.w", &[2]), ("head.w", &[2])]);
    let before = s.clone();
    let mut st = OptimState::new(&s);
    adam_step(&mut s, &grads_of(vec![None, Some(vec![1.0, -1.0])]), &mut st, &TrainConfig::default()).unwrap();
    assert_eq!(s.tensor(s.id("encoder.w").unwrap()).data, before.tensor(before.id("encoder.w").unwrap()).data);
    assert_eq!(st.param_steps, vec![0, 1]);
}

#[test]
fn clipping_scales_norm_fifty_down_to_five() {
    let mut g = grads_of(vec![Some(vec![30.0]), Some(vec![40.0, 0.0])]);
    let (norm, scale) = clip_grad_norm(&mut g, 5.0);
    assert_eq!(norm, 50.0);
    assert!((scale - 0.1).abs() < 1e-15);
    let flat: Vec<f64> = g.0.iter().flatten().flatten().copied().collect();
    assert!((flat[0] - 3.0).abs() < 1e-12 && (flat[1] - 4.0).abs() < 1e-12 && flat[2] == 0.0);

    let mut s = store(&[("a", &[1]), ("b", &[2])]);
    let mut st = OptimState::new(&s);
    let info = adam_step(
        &mut s,
        &grads_of(vec![Some(vec![30.0]), Some(vec![40.0, 0.0])]),
        &mut st,
        &TrainConfig::default(),
    )
    .unwrap();
    assert_eq!(info.grad_norm, 50.0);
    assert!((info.clip_scale - 0.1).abs() < 1e-15);
}

#[test]
fn non_finite_gradient_names_the_parameter() {
    let mut s = store(&[("encoder.ok", &[1]), ("grid.bad", &[2])]);
    let before = s.clone();
    let mut st = OptimState::new(&s);
    let err = adam_step(
        &mut s,
        &grads_of(vec![Some(vec![1.0]), Some(vec![0.0, f64::NAN])]),
        &mut st,
        &TrainConfig::default(),
    )
    .unwrap_err();
    assert!(matches!(&err, Error::NonFinite(m) if m.contains("grid.bad")), "{err}");
    assert_eq!(st.step, 0);
    assert_eq!(s.tensor(s.id("encoder.ok").unwrap()).data, before.tensor(before.id("encoder.ok").unwrap()).data);
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    for bad in [
        TrainConfig { batch_size: 0, ..Default::default() },
        TrainConfig { lr_heads: 0.0, ..Default::default() },
        TrainConfig { lr_encoder: -1.0, ..Default::default() },
        TrainConfig { grad_clip_norm: Some(0.0), ..Default::default() },
        TrainConfig { mlm_mask_rate: 1.5, ..Default::default() },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
    let parsed: TrainConfig = serde_json::from_str(r#"{"epochs": 3}"#).unwrap();
    assert_eq!(parsed, TrainConfig { epochs: 3, ..Default::default() });
}

proptest! {
    #[test]
    fn clipping_preserves_direction(v in prop::collection::vec(-100.0f64..100.0, 1..20), cap in 0.01f64..10.0) {
        prop_assume!(v.iter().any(|x| x.abs() > 1e-3));
        let mut g = grads_of(vec![Some(v.clone())]);
        clip_grad_norm(&mut g, cap);
        let w = g.0[0].as_ref().unwrap();
        let dot: f64 = v.iter().zip(w).map(|(a, b)| a * b).sum();
        let na = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!((dot / (na * nb) - 1.0).abs() < 1e-12);
        prop_assert!(nb <= cap * (1.0 + 1e-12) || (nb - na).abs() < 1e-12);
    }
}

fn small_setup() -> (Vec<SentenceRecord>, Vocab, Model) {
    let records: Vec<SentenceRecord> = fixture().into_iter().take(4).collect();
    let vocab = build_pipeline_vocab(&records, 1).unwrap();
    let model = Model::new(micro_config(), vocab.len(), 5).unwrap();
    (records, vocab, model)
}

#[test]
fn identical_seeds_give_identical_loss_sequences() {
    let (records, vocab, model) = small_setup();
    let insts = build_all_instances(&records, &vocab, &InstanceOptions::default()).unwrap();
    let cfg = TrainConfig {
        batch_size: 1,
        ..Default::default()
    };
    let run = || {
        let mut m = model.clone();
        let mut t = Trainer::new(&m, cfg.clone()).unwrap();
        let mut losses = Vec::new();
        while losses.len() < 100 {
            losses.extend(t.train_epoch(&mut m, &insts).unwrap().step_losses);
        }
        (losses, m.params)
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert!(a.len() >= 100);
    assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    for id in pa.ids() {
        assert_eq!(pa.tensor(id).data, pb.tensor(id).data);
    }

    let mut t1 = Trainer::new(&model, cfg.clone()).unwrap();
    let mut t2 = Trainer::new(&model, cfg.clone()).unwrap();
    assert_eq!(t1.epoch_order(&insts), t2.epoch_order(&insts));
    let mut t3 = Trainer::new(&model, TrainConfig { seed: 7, ..cfg }).unwrap();
    assert_ne!(t1.epoch_order(&insts), t3.epoch_order(&insts));
}

#[test]
fn thread_count_does_not_change_results() {
    let (records, vocab, model) = small_setup();
    let insts = build_all_instances(&records, &vocab, &InstanceOptions::default()).unwrap();
    let run = |threads| {
        let mut m = model.clone();
        let cfg = TrainConfig {
            batch_size: 8,
            threads,
            ..Default::default()
        };
        let mut t = Trainer::new(&m, cfg).unwrap();
        t.train_epoch(&mut m, &insts).unwrap().step_losses
    };
    assert_eq!(run(1), run(3));
}

#[test]
fn negative_queries_are_subsampled() {
    let (records, vocab, model) = small_setup();
    let insts = build_all_instances(&records, &vocab, &InstanceOptions::default()).unwrap();
    let positives = insts.iter().filter(|i| i.label_grid.iter().any(|&l| l != 0)).count();
    let mut t = Trainer::new(
        &model,
        TrainConfig {
            negative_query_rate: 0.0,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(t.epoch_order(&insts).len(), positives);
}

#[test]
fn eval_loss_falls_on_a_training_batch() {
    let records = fixture();
    let vocab = build_pipeline_vocab(&records, 1).unwrap();
    let mut model = Model::new(ModelConfig::tiny(), vocab.len(), 11).unwrap();
    let all = build_all_instances(&records, &vocab, &InstanceOptions::default()).unwrap();
    // one batch: the first query of every sentence
    let batch: Vec<_> = all.into_iter().step_by(9).collect();
    let cfg = TrainConfig {
        batch_size: batch.len(),
        ..Default::default()
    };
    let eval = |m: &Model| batch.iter().map(|i| m.eval_loss(i).unwrap()).sum::<f64>() / batch.len() as f64;
    let mut t = Trainer::new(&model, cfg).unwrap();
    let mut losses = vec![eval(&model)];
    for _ in 0..20 {
        t.train_epoch(&mut model, &batch).unwrap();
        losses.push(eval(&model));
    }
    let rises = losses.windows(2).filter(|w| w[1] > w[0]).count();
    assert!(rises <= 2, "{losses:?}");
    assert!(losses[20] < losses[0] / 10.0, "{losses:?}");
}

#[test]
fn finetune_without_dev_keeps_last_epoch() {
    let (records, vocab, mut model) = small_setup();
    let cfg = TrainConfig {
        epochs: 2,
        ..Default::default()
    };
    let rep = finetune(&mut model, &records, &[], &vocab, &InstanceOptions::default(), &cfg).unwrap();
    assert_eq!(rep.history.len(), 2);
    assert!(rep.best_epoch.is_none() && rep.history.iter().all(|e| e.dev.is_none()));
    assert!(rep.steps > 0);
    assert!(matches!(
        finetune(&mut model, &[], &records, &vocab, &InstanceOptions::default(), &cfg),
        Err(Error::Config(_))
    ));
}

#[test]
fn finetune_patience_stops_and_restores_best() {
    let (records, vocab, mut model) = small_setup();
    let cfg = TrainConfig {
        epochs: 50,
        patience: Some(1),
        lr_heads: 1e-9,
        lr_encoder: 1e-9,
        ..Default::default()
    };
    let rep = finetune(&mut model, &records, &records, &vocab, &InstanceOptions::default(), &cfg).unwrap();
    assert!(rep.history.len() < 50);
    let best = rep.best_epoch.unwrap();
    assert!(rep.history[best - 1].improved);
}

fn mlm_setup(seed: u64) -> (Vocab, Model, Vec<Vec<usize>>) {
    let records = synthetic_corpus(seed, &SyntheticOptions::default());
    assert_eq!(records.len(), 50);
    let vocab = build_pipeline_vocab(&records, 1).unwrap();
    let cfg = ModelConfig::tiny();
    let seqs = mlm_corpus(&records, &vocab, cfg.max_len).unwrap();
    let model = Model::new(cfg, vocab.len(), seed).unwrap();
    (vocab, model, seqs)
}

#[test]
fn mlm_loss_decreases_every_epoch() {
    let (_, mut model, seqs) = mlm_setup(42);
    let before = model.params.clone();
    let cfg = TrainConfig {
        mlm_epochs: 10,
        ..Default::default()
    };
    let rep = mlm_pretrain(&mut model, &seqs, &cfg).unwrap();
    assert_eq!(rep.epoch_losses.len(), 10);
    assert!(rep.epoch_losses.windows(2).all(|w| w[1] < w[0]), "{:?}", rep.epoch_losses);
    // encoder moved; grid heads untouched
    let changed = |name: &str| {
        let id = model.params.id(name).unwrap();
        model.params.tensor(id).data != before.tensor(id).data
    };
    assert!(changed("encoder.tok_emb") && changed("encoder.layer0.wq") && changed("mlm.bias"));
    assert!(!changed("grid.out_w") && !changed("biaffine.u"));
}

#[test]
fn mlm_degenerate_inputs() {
    let (_, mut model, seqs) = mlm_setup(1);
    let before = model.params.clone();
    let rep = mlm_pretrain(
        &mut model,
        &seqs,
        &TrainConfig {
            mlm_mask_rate: 0.0,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(rep.epoch_losses.is_empty() && rep.steps == 0);
    assert_eq!(model.params.tensor(model.params.id("encoder.tok_emb").unwrap()), before.tensor(before.id("encoder.tok_emb").unwrap()));

    let one_char = Vocab::from_chars(vec!['a']);
    let mut m = Model::new(ModelConfig::tiny(), one_char.len(), 0).unwrap();
    assert!(matches!(mlm_pretrain(&mut m, &[vec![2, 5, 3]], &TrainConfig::default()), Err(Error::Config(_))));
    let mut m = Model::new(ModelConfig::tiny(), 7, 0).unwrap();
    let rep = mlm_pretrain(&mut m, &[vec![2, 3]], &TrainConfig { mlm_epochs: 1, ..Default::default() }).unwrap();
    assert_eq!(rep.skipped, 1);
}

fn trained_model() -> (Model, Vocab) {
    let (records, vocab, mut model) = small_setup();
    let insts = build_all_instances(&records, &vocab, &InstanceOptions::default()).unwrap();
    let mut t = Trainer::new(&model, TrainConfig::default()).unwrap();
    t.train_epoch(&mut model, &insts).unwrap();
    (model, vocab)
}

#[test]
fn checkpoint_roundtrip_is_bitwise() {
    let (model, vocab) = trained_model();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let meta = CheckpointMeta {
        step: 9,
        dev_metric: Some(0.5),
        extra: serde_json::json!({"note": "x"}),
    };
    save_checkpoint(&path, &model, &vocab, &meta).unwrap();
    let ck = load_checkpoint(&path).unwrap();
    assert_eq!(ck.header.step, 9);
    assert_eq!(ck.header.dev_metric, Some(0.5));
    assert_eq!(ck.header.float_bits, FLOAT_BITS);
    assert_eq!(ck.header.vocab, vocab);
    let back = ck.build_model().unwrap();
    for id in model.params.ids() {
        let (a, b) = (&model.params.tensor(id).data, &back.params.tensor(id).data);
        assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(model.params.name(id), back.params.name(id));
    }
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..8], b"GRIDNER1");
    assert_eq!(ck.to_bytes().unwrap(), bytes);

    let inst = build_instance(&fixture()[0], EntityType::Sym, &vocab, &InstanceOptions::default()).unwrap();
    assert_eq!(model.score(&inst).unwrap().probs, back.score(&inst).unwrap().probs);
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let (model, vocab) = trained_model();
    let bytes = Checkpoint::from_model(&model, &vocab, &CheckpointMeta::default())
        .unwrap()
        .to_bytes()
        .unwrap();
    let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).unwrap_err();
    assert!(matches!(&err, Error::Checkpoint(m) if m.contains("truncated")), "{err}");
    for cut in [0, 7, 12, 40] {
        assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err());
    }
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(Checkpoint::from_bytes(&extra).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Checkpoint::from_bytes(&bad).is_err());

    let mut ck = Checkpoint::from_bytes(&bytes).unwrap();
    ck.header.version = 2;
    let err = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap_err();
    assert!(err.to_string().contains("version"), "{err}");

    let mut ck = Checkpoint::from_bytes(&bytes).unwrap();
    ck.header.params[3].0 = "grid.nonexistent".into();
    let mut m = model.clone();
    let err = ck.apply_to(&mut m).unwrap_err();
    assert!(err.to_string().contains("grid.nonexistent"), "{err}");
}

#[test]
fn loading_into_a_mismatched_config_names_the_shape() {
    let (model, vocab) = trained_model();
    let ck = Checkpoint::from_model(&model, &vocab, &CheckpointMeta::default()).unwrap();
    let mut other = Model::new(
        ModelConfig {
            d_g: 6,
            ..micro_config()
        },
        vocab.len(),
        0,
    )
    .unwrap();
    let snapshot = other.params.clone();
    let err = ck.apply_to(&mut other).unwrap_err();
    assert!(err.to_string().contains("grid.mlp_w"), "{err}");
    for id in other.params.ids() {
        assert_eq!(other.params.tensor(id).data, snapshot.tensor(id).data);
    }
}

#[test]
fn encoder_transfer_copies_encoder_and_leaves_heads() {
    let (model, vocab) = trained_model();
    let ck = Checkpoint::from_model(&model, &vocab, &CheckpointMeta::default()).unwrap();
    let mut fresh = Model::new(micro_config(), vocab.len(), 99).unwrap();
    let before = fresh.params.clone();
    let n = ck.apply_encoder_to(&mut fresh).unwrap();
    assert!(n > 0);
    let mut copied = 0;
    for id in fresh.params.ids() {
        let name = fresh.params.name(id);
        let got = &fresh.params.tensor(id).data;
        if name.starts_with("encoder.") {
            copied += 1;
            assert_eq!(got, &model.params.tensor(model.params.id(name).unwrap()).data, "{name}");
        } else {
            assert_eq!(got, &before.tensor(id).data, "{name}");
        }
    }
    assert_eq!(copied, n);

    let mut wide = Model::new(ModelConfig { d_model: 10, ..micro_config() }, vocab.len(), 0).unwrap();
    let err = ck.apply_encoder_to(&mut wide).unwrap_err();
    assert!(err.to_string().contains("encoder."), "{err}");
}
