//! Dice + cross-entropy loss, Adam with a stepped learning rate, and the early-stopping loop.

use std::fs;
use std::path::Path;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{sigmoid, softplus, Graph, Var};
use crate::backbone::{encoder_hash, ENCODER_PREFIX};
use crate::checkpoint::{Checkpoint, LoadReport};
use crate::error::{Error, Result};
use crate::metrics::dice_score;
use crate::model::Model;
use crate::params::{to_f32_exact, Ctx, ParamId};
use crate::pipeline::{resize_to_model, ExemplarSet, SegSample};
use crate::prompts::{check_rate, make_prompt, Phase, PromptSetting, DEFAULT_BBOX_RATE};
use crate::tensor::Tensor;
use crate::types::Mask;

/// Dice smoothing term.
pub const DICE_EPS: f64 = 1e-5;

const ADAM_BETAS: (f64, f64) = (0.9, 0.999);
const ADAM_EPS: f64 = 1e-8;

fn check_len(n: usize, gt: &Mask) -> Result<()> {
    if n != gt.width() * gt.height() {
        return Err(Error::ShapeMismatch(format!(
            "{n} predictions vs {}x{} mask",
            gt.width(),
            gt.height()
        )));
    }
    Ok(())
}

/// `1 − (2Σpg + ε)/(Σp + Σg + ε)` over row-major probabilities.
pub fn dice_loss(probs: &[f64], gt: &Mask) -> Result<f64> {
    check_len(probs.len(), gt)?;
    let g = gt.to_f64();
    let inter: f64 = probs.iter().zip(&g).map(|(p, g)| p * g).sum();
    let denom = probs.iter().sum::<f64>() + g.iter().sum::<f64>();
    Ok(1.0 - (2.0 * inter + DICE_EPS) / (denom + DICE_EPS))
}

/// Mean binary cross-entropy on logits, `softplus(z) − g·z` per pixel.
pub fn ce_loss(logits: &[f64], gt: &Mask) -> Result<f64> {
    check_len(logits.len(), gt)?;
    let total: f64 = logits
        .iter()
        .zip(gt.data())
        .map(|(&z, &g)| softplus(z) - if g { z } else { 0.0 })
        .sum();
    Ok(total / logits.len() as f64)
}

fn check_weights(alpha: f64, beta: f64) -> Result<()> {
    if !(alpha >= 0.0 && beta >= 0.0) {
        return Err(Error::Config(format!("loss weights must be non-negative, got α={alpha}, β={beta}")));
    }
    Ok(())
}

/// `α·dice_loss(σ(z), g) + β·ce_loss(z, g)`.
pub fn combined_loss(logits: &[f64], gt: &Mask, alpha: f64, beta: f64) -> Result<f64> {
    check_weights(alpha, beta)?;
    let probs: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
    let dice = if alpha == 0.0 { 0.0 } else { alpha * dice_loss(&probs, gt)? };
    let ce = if beta == 0.0 { 0.0 } else { beta * ce_loss(logits, gt)? };
    Ok(dice + ce)
}

/// Graph form of [`combined_loss`] for a column of logits.
pub fn combined_loss_var(g: &mut Graph, logits: Var, gt: &Mask, alpha: f64, beta: f64) -> Result<Var> {
    check_weights(alpha, beta)?;
    check_len(g.value(logits).numel(), gt)?;
    let target = Rc::new(gt.to_f64());
    let probs = g.sigmoid(logits);
    let dice = g.dice_loss(probs, target.clone(), DICE_EPS);
    let ce = g.bce_with_logits(logits, target);
    let dice = g.scale(dice, alpha);
    let ce = g.scale(ce, beta);
    Ok(g.add(dice, ce))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    /// Coupled L2 weight decay inside Adam.
    pub weight_decay: f64,
    /// Multiplicative learning-rate step applied every `decay_step` epochs.
    pub lr_gamma: f64,
    pub decay_step: usize,
    pub epochs: usize,
    pub batch: usize,
    pub patience: usize,
    pub alpha: f64,
    pub beta: f64,
    pub prompt_setting: PromptSetting,
    pub bbox_rate: f64,
    pub exemplars: usize,
    pub seed: u64,
    /// Share of training tiles held out for early stopping.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 0.01,
            lr_gamma: 0.1,
            decay_step: 30,
            epochs: 100,
            batch: 1,
            patience: 10,
            alpha: 1.0,
            beta: 1.0,
            prompt_setting: PromptSetting::D,
            bbox_rate: DEFAULT_BBOX_RATE,
            exemplars: 5,
            seed: 0,
            val_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight decay must be non-negative, got {}", self.weight_decay));
        }
        if !(self.lr_gamma > 0.0 && self.lr_gamma <= 1.0) {
            return bad(format!("lr gamma must lie in (0, 1], got {}", self.lr_gamma));
        }
        if self.decay_step == 0 || self.batch == 0 || self.patience == 0 || self.exemplars == 0 {
            return bad("decay_step, batch, patience and exemplars must be positive".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("validation fraction must lie in [0, 1), got {}", self.val_fraction));
        }
        check_weights(self.alpha, self.beta)?;
        check_rate(self.bbox_rate)
    }
}

/// `lr · γ^⌊epoch / decay_step⌋`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr * cfg.lr_gamma.powi((epoch / cfg.decay_step) as i32)
}

/// Adam with torch-style coupled weight decay; parameters are kept f32-representable.
#[derive(Clone, Debug)]
pub struct Adam {
    weight_decay: f64,
    step: i32,
    moments: Vec<(ParamId, Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(model: &Model, weight_decay: f64) -> Self {
        let moments = model
            .store
            .trainable_ids()
            .into_iter()
            .map(|id| {
                let n = model.store.value(id).numel();
                (id, vec![0.0; n], vec![0.0; n])
            })
            .collect();
        Self {
            weight_decay,
            step: 0,
            moments,
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &[(ParamId, Tensor)], lr: f64) {
        self.step += 1;
        let (b1, b2) = ADAM_BETAS;
        let (c1, c2) = (1.0 - b1.powi(self.step), 1.0 - b2.powi(self.step));
        for (id, m, v) in &mut self.moments {
            let Some((_, g)) = grads.iter().find(|(gid, _)| gid == id) else {
                continue;
            };
            let p = model.store.get_mut(*id);
            for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi + self.weight_decay * *w;
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let update = lr * (*mi / c1) / ((*vi / c2).sqrt() + ADAM_EPS);
                *w = to_f32_exact(*w - update);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    EarlyStop,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_dice: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters were kept.
    pub best_epoch: Option<usize>,
    pub best_val_dice: Option<f64>,
    pub stop_reason: StopReason,
    pub frozen_hash_before: String,
    pub frozen_hash_after: String,
    pub train_tiles: usize,
    pub val_tiles: usize,
    /// Validation tiles overlap training tiles or come from the single training volume.
    pub weak_validation: bool,
}

impl RunRecord {
    /// CSV with columns `epoch, train_loss, val_dice, lr`.
    pub fn write_epoch_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for e in &self.epochs {
            w.serialize(e)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn prepare(samples: &[SegSample], size: usize) -> Result<Vec<SegSample>> {
    samples
        .iter()
        .map(|s| {
            if s.image.width() == size && s.image.height() == size {
                Ok(s.clone())
            } else {
                resize_to_model(s, size)
            }
        })
        .collect()
}

/// Seeded tile-level holdout: `⌈fraction·n⌉` tiles (at least one) become the validation set.
pub fn split_validation(samples: &[SegSample], fraction: f64, seed: u64) -> (Vec<SegSample>, Vec<SegSample>, bool) {
    let n = samples.len();
    if n < 2 || fraction == 0.0 {
        return (samples.to_vec(), samples.to_vec(), true);
    }
    let n_val = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5A11_D0_u64));
    let mut val_idx = order[..n_val].to_vec();
    val_idx.sort_unstable();
    let val = val_idx.iter().map(|&i| samples[i].clone()).collect();
    let train = (0..n).filter(|i| !val_idx.contains(i)).map(|i| samples[i].clone()).collect();
    (train, val, false)
}

/// Mean Dice (percent) of the model on `samples` under the test-time prompt.
pub fn validation_dice(model: &Model, samples: &[SegSample], setting: PromptSetting, rate: f64) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for s in samples {
        let bbox = make_prompt(setting, Phase::Test, s, rate)?;
        let pred = model.predict(&s.image, &bbox)?.binarize();
        total += dice_score(&pred, &s.mask)?;
    }
    Ok(total / samples.len() as f64)
}

/// One forward/backward pass; returns the loss and gradients of every trainable parameter.
pub fn loss_and_grads(model: &Model, sample: &SegSample, bbox: &crate::prompts::BBox, cfg: &TrainConfig) -> Result<(f64, Vec<(ParamId, Tensor)>)> {
    let mut ctx = Ctx::new(&model.store);
    let logits = model.forward_var(&mut ctx, &sample.image, bbox)?;
    let loss = combined_loss_var(&mut ctx.graph, logits, &sample.mask, cfg.alpha, cfg.beta)?;
    let value = ctx.graph.value(loss).data()[0];
    let mut grads = ctx.graph.backward(loss);
    let out = ctx
        .bound()
        .filter(|(id, _)| model.store.get(*id).trainable)
        .filter_map(|(id, v)| grads.take(v).map(|g| (id, g)))
        .collect();
    Ok((value, out))
}

fn snapshot(model: &Model) -> Vec<(ParamId, Tensor)> {
    model
        .store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, p)| (id, p.value.clone()))
        .collect()
}

fn restore(model: &mut Model, snap: Vec<(ParamId, Tensor)>) -> Result<()> {
    for (id, t) in snap {
        model.store.set_value(id, t)?;
    }
    Ok(())
}

/// Trains on `train`, early-stopping on `val`; the best epoch's parameters are kept.
pub fn train_on(model: &mut Model, train: &[SegSample], val: &[SegSample], cfg: &TrainConfig) -> Result<RunRecord> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::NotEnoughData { needed: 1, available: 0 });
    }
    let size = model.input_size();
    let train = prepare(train, size)?;
    let val = prepare(val, size)?;
    let before = encoder_hash(&model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model, cfg.weight_decay);
    let prompts = train
        .iter()
        .map(|s| make_prompt(cfg.prompt_setting, Phase::Train, s, cfg.bbox_rate))
        .collect::<Result<Vec<_>>>()?;

    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, Vec<(ParamId, Tensor)>)> = None;
    let mut stale = 0;
    let mut stop_reason = StopReason::MaxEpochs;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch) {
            let mut acc: Vec<(ParamId, Tensor)> = Vec::new();
            for &i in batch {
                let (loss, grads) = loss_and_grads(model, &train[i], &prompts[i], cfg)?;
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, step });
                }
                loss_sum += loss;
                for (id, g) in grads {
                    match acc.iter_mut().find(|(a, _)| *a == id) {
                        Some((_, t)) => t.add_assign(&g),
                        None => acc.push((id, g)),
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            for (_, t) in &mut acc {
                t.data_mut().iter_mut().for_each(|v| *v *= inv);
            }
            adam.step(model, &acc, lr);
            step += 1;
        }
        let val_dice = validation_dice(model, &val, cfg.prompt_setting, cfg.bbox_rate)?;
        epochs.push(EpochLog {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_dice,
            lr,
        });
        if best.as_ref().is_none_or(|(_, b, _)| val_dice > *b) {
            best = Some((epoch, val_dice, snapshot(model)));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                stop_reason = StopReason::EarlyStop;
                break;
            }
        }
    }
    let (best_epoch, best_val_dice) = match best {
        Some((e, d, snap)) => {
            restore(model, snap)?;
            (Some(e), Some(d))
        }
        None => (None, None),
    };
    let after = encoder_hash(&model.store);
    if after != before {
        return Err(Error::FrozenViolation { before, after });
    }
    Ok(RunRecord {
        epochs,
        best_epoch,
        best_val_dice,
        stop_reason,
        frozen_hash_before: before,
        frozen_hash_after: after,
        train_tiles: train.len(),
        val_tiles: val.len(),
        weak_validation: false,
    })
}

/// Holds out part of the exemplar tiles, trains, and returns the kept parameters as a checkpoint.
pub fn train(model: &mut Model, data: &ExemplarSet, cfg: &TrainConfig) -> Result<(Checkpoint, RunRecord)> {
    cfg.validate()?;
    let samples = data.train_samples();
    let (train_set, val_set, overlap) = split_validation(&samples, cfg.val_fraction, cfg.seed);
    let mut record = train_on(model, &train_set, &val_set, cfg)?;
    record.weak_validation = overlap || data.groups.len() == 1;
    Ok((trained_checkpoint(model)?, record))
}

/// Every non-encoder tensor, with the model config and encoder hash as geometry.
pub fn trained_checkpoint(model: &Model) -> Result<Checkpoint> {
    let geometry = serde_json::json!({
        "model": serde_json::to_value(&model.cfg)?,
        "encoder_hash": encoder_hash(&model.store),
    });
    Ok(Checkpoint::from_store(&model.store, geometry, |p| !p.name.starts_with(ENCODER_PREFIX)))
}

/// Loads a [`trained_checkpoint`] into a model built from the same config.
pub fn load_trained(model: &mut Model, ckpt: &Checkpoint) -> Result<LoadReport> {
    let mut report = LoadReport::default();
    for (_, p) in model.store.iter().filter(|(_, p)| !p.name.starts_with(ENCODER_PREFIX)) {
        match ckpt.tensors.get(&p.name) {
            Some(t) if t.shape() != p.value.shape() => {
                return Err(Error::GeometryMismatch {
                    name: p.name.clone(),
                    expected: p.value.shape().to_vec(),
                    found: t.shape().to_vec(),
                })
            }
            Some(_) => report.loaded.push(p.name.clone()),
            None => report.missing.push(p.name.clone()),
        }
    }
    for name in &report.loaded {
        let id = model.store.id(name).expect("present");
        model.store.set_value(id, ckpt.tensors[name].clone())?;
    }
    if let Some(expected) = ckpt.geometry.get("encoder_hash").and_then(|h| h.as_str()) {
        let actual = encoder_hash(&model.store);
        if actual != expected {
            return Err(Error::Checkpoint(format!(
                "checkpoint was trained against encoder {expected}, model has {actual}"
            )));
        }
    }
    Ok(report)
}

/// Human-readable record of a run: resolved config, code version, frozen hashes and stop reason.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub code_version: String,
    pub config_hash: String,
    pub train: TrainConfig,
    pub stop_reason: StopReason,
    pub best_epoch: Option<usize>,
    pub best_val_dice: Option<f64>,
    pub frozen_hash_before: String,
    pub frozen_hash_after: String,
    pub train_tiles: usize,
    pub val_tiles: usize,
    pub weak_validation: bool,
    pub train_volumes: Vec<String>,
    pub foreground_only_tiles: bool,
    pub decay_interpretation: String,
}

impl RunManifest {
    pub fn new(cfg: &TrainConfig, config_hash: &str, record: &RunRecord, data: &ExemplarSet) -> Self {
        Self {
            code_version: option_env!("BOXADAPT_GIT_REV")
                .unwrap_or(env!("CARGO_PKG_VERSION"))
                .to_string(),
            config_hash: config_hash.to_string(),
            train: cfg.clone(),
            stop_reason: record.stop_reason,
            best_epoch: record.best_epoch,
            best_val_dice: record.best_val_dice,
            frozen_hash_before: record.frozen_hash_before.clone(),
            frozen_hash_after: record.frozen_hash_after.clone(),
            train_tiles: record.train_tiles,
            val_tiles: record.val_tiles,
            weak_validation: record.weak_validation,
            train_volumes: data.train_volumes(),
            foreground_only_tiles: true,
            decay_interpretation: format!(
                "weight_decay={} inside Adam; lr x{} every {} epochs",
                cfg.weight_decay, cfg.lr_gamma, cfg.decay_step
            ),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(path, text)?;
        Ok(())
    }
}
