use std::collections::BTreeSet;

use boxadapt_core::backbone::{encoder_hash, ENCODER_PREFIX};
use boxadapt_core::training::*;
use boxadapt_core::*;
use proptest::prelude::*;

fn desk_model(seed: u64) -> Model {
    Model::new(&ModelConfig::for_encoder(EncoderConfig::desk32()), seed).unwrap()
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        epochs,
        seed: 2,
        ..TrainConfig::default()
    }
}

#[test]
fn gradients_reach_exactly_the_trainable_parts() {
    let model = desk_model(0);
    let sample = gen_synthetic(1, 32, 1).unwrap().remove(0);
    let bbox = coarse_bbox(32, 32, 0.95).unwrap();
    let (loss, grads) = loss_and_grads(&model, &sample, &bbox, &TrainConfig::default()).unwrap();
    assert!(loss.is_finite() && loss > 0.0);
    let got: BTreeSet<String> = grads.iter().map(|(id, _)| model.store.get(*id).name.clone()).collect();
    let trainable: BTreeSet<String> = model.store.iter().filter(|(_, p)| p.trainable).map(|(_, p)| p.name.clone()).collect();
    assert!(got.iter().all(|n| !n.starts_with(ENCODER_PREFIX)));
    assert_eq!(got, trainable);
    for prefix in ["hfa.", "msfa.", "selector.", "decoder."] {
        assert!(got.iter().any(|n| n.starts_with(prefix)), "{prefix}");
    }
    assert!(grads.iter().all(|(_, g)| g.all_finite()));
}

#[test]
fn frozen_decoder_gets_no_gradient() {
    let mut cfg = ModelConfig::for_encoder(EncoderConfig::desk32());
    cfg.freeze_decoder = true;
    let model = Model::new(&cfg, 0).unwrap();
    let sample = gen_synthetic(1, 32, 1).unwrap().remove(0);
    let bbox = coarse_bbox(32, 32, 0.95).unwrap();
    let (_, grads) = loss_and_grads(&model, &sample, &bbox, &TrainConfig::default()).unwrap();
    assert!(grads.iter().all(|(id, _)| !model.store.get(*id).name.starts_with("decoder.")));
    assert!(!grads.is_empty());
}

#[test]
fn training_changes_adapters_but_not_the_encoder() {
    let data = gen_synthetic(6, 32, 4).unwrap();
    let set = sample_exemplars(&data, 3, 4).unwrap();
    let mut model = desk_model(1);
    let before = model.clone();
    let (_, rec) = train(&mut model, &set, &quick(3)).unwrap();
    assert_eq!(encoder_hash(&model.store), encoder_hash(&before.store));
    assert_eq!(rec.frozen_hash_before, rec.frozen_hash_after);
    let changed = model
        .store
        .iter()
        .filter(|(id, p)| p.value != before.store.get(*id).value)
        .map(|(_, p)| p.name.clone())
        .collect::<Vec<_>>();
    assert!(!changed.is_empty());
    assert!(changed.iter().all(|n| !n.starts_with(ENCODER_PREFIX)));
}

#[test]
fn zero_epochs_keep_the_initialization() {
    let data = gen_synthetic(4, 32, 4).unwrap();
    let set = sample_exemplars(&data, 2, 4).unwrap();
    let mut model = desk_model(1);
    let before = model.clone();
    let (ckpt, rec) = train(&mut model, &set, &quick(0)).unwrap();
    assert!(rec.epochs.is_empty());
    assert_eq!(rec.best_epoch, None);
    assert!(model.store.iter().all(|(id, p)| p.value == before.store.get(id).value));
    assert!(!ckpt.tensors.is_empty());
}

#[test]
fn early_stopping_after_patience_without_improvement() {
    let data = gen_synthetic(6, 32, 7).unwrap();
    let set = sample_exemplars(&data, 4, 7).unwrap();
    let mut model = desk_model(3);
    // nothing can learn, so validation Dice never improves on epoch 0
    for p in ["hfa.", "msfa.", "selector.", "decoder."] {
        model.store.set_trainable_prefix(p, false);
    }
    let cfg = TrainConfig {
        patience: 3,
        epochs: 50,
        ..quick(50)
    };
    let (_, rec) = train(&mut model, &set, &cfg).unwrap();
    assert_eq!(rec.stop_reason, StopReason::EarlyStop);
    assert_eq!(rec.epochs.len(), 4);
    assert_eq!(rec.best_epoch, Some(0));
}

#[test]
fn best_epoch_is_restored() {
    let data = gen_synthetic(8, 32, 5).unwrap();
    let set = sample_exemplars(&data, 5, 5).unwrap();
    let mut model = desk_model(2);
    let (_, rec) = train(&mut model, &set, &quick(6)).unwrap();
    let best = rec.best_val_dice.unwrap();
    assert_eq!(best, rec.epochs.iter().map(|e| e.val_dice).fold(f64::NEG_INFINITY, f64::max));
    let (_, val, _) = split_validation(&set.train_samples(), 0.2, 2);
    let now = validation_dice(&model, &val, PromptSetting::D, 0.95).unwrap();
    assert_eq!(now, best);
}

#[test]
fn identical_runs_give_identical_records_and_checkpoints() {
    let run = || {
        let data = gen_synthetic(6, 32, 9).unwrap();
        let set = sample_exemplars(&data, 3, 9).unwrap();
        let mut model = desk_model(9);
        train(&mut model, &set, &quick(3)).unwrap()
    };
    let (c1, r1) = run();
    let (c2, r2) = run();
    assert_eq!(r1, r2);
    assert_eq!(c1.to_bytes().unwrap(), c2.to_bytes().unwrap());
}

#[test]
fn checkpoint_round_trip_restores_predictions() {
    let data = gen_synthetic(5, 32, 6).unwrap();
    let set = sample_exemplars(&data, 2, 6).unwrap();
    let mut model = desk_model(4);
    let (ckpt, _) = train(&mut model, &set, &quick(2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.bxad");
    ckpt.write(&path).unwrap();
    let mut fresh = desk_model(99);
    let report = load_trained(&mut fresh, &Checkpoint::read(&path).unwrap()).unwrap();
    assert!(report.missing.is_empty());
    let img = &set.eval[0].image;
    let b = coarse_bbox(32, 32, 0.95).unwrap();
    assert_eq!(model.predict(img, &b).unwrap().logits, fresh.predict(img, &b).unwrap().logits);

    let mut other = Model::new(&ModelConfig::default(), 0).unwrap();
    assert!(matches!(load_trained(&mut other, &ckpt), Err(Error::GeometryMismatch { .. })));
}

#[test]
fn epoch_csv_has_one_row_per_epoch() {
    let data = gen_synthetic(5, 32, 6).unwrap();
    let set = sample_exemplars(&data, 2, 6).unwrap();
    let mut model = desk_model(4);
    let (_, rec) = train(&mut model, &set, &quick(3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("e.csv");
    rec.write_epoch_csv(&p).unwrap();
    let text = std::fs::read_to_string(p).unwrap();
    assert_eq!(text.lines().next().unwrap(), "epoch,train_loss,val_dice,lr");
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn single_exemplar_validation_is_flagged_weak() {
    let data = gen_synthetic(3, 32, 6).unwrap();
    let set = sample_exemplars(&data, 1, 6).unwrap();
    let mut model = desk_model(4);
    let (_, rec) = train(&mut model, &set, &quick(1)).unwrap();
    assert!(rec.weak_validation);
}

fn gt_and_logits() -> impl Strategy<Value = (Mask, Vec<f64>)> {
    (1usize..8, 1usize..8).prop_flat_map(|(w, h)| {
        (
            prop::collection::vec(any::<bool>(), w * h).prop_filter("needs foreground", |b| b.iter().any(|&x| x)),
            prop::collection::vec(-30.0f64..30.0, w * h),
        )
            .prop_map(move |(bits, logits)| (Mask::new(w, h, bits).unwrap(), logits))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn loss_bounds((gt, logits) in gt_and_logits(), alpha in 0.0f64..3.0, beta in 0.0f64..3.0) {
        let probs: Vec<f64> = logits.iter().map(|z| 1.0 / (1.0 + (-z).exp())).collect();
        let d = dice_loss(&probs, &gt).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert!(ce_loss(&logits, &gt).unwrap() >= 0.0);
        prop_assert!(combined_loss(&logits, &gt, alpha, beta).unwrap() >= 0.0);
    }

    #[test]
    fn lr_schedule_steps_down(epoch in 0usize..200, step in 1usize..50) {
        let cfg = TrainConfig { decay_step: step, ..TrainConfig::default() };
        let expected = cfg.lr * cfg.lr_gamma.powi((epoch / step) as i32);
        prop_assert!((lr_at(epoch, &cfg) - expected).abs() <= 1e-15 * cfg.lr);
        prop_assert!(lr_at(epoch + 1, &cfg) <= lr_at(epoch, &cfg));
    }
}
