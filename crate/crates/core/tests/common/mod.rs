//! Helpers shared by the integration tests: independent reference implementations
//! and the desk-scale training run.
#![allow(dead_code)]

pub mod oracles;

use boxadapt_core::training::StopReason;
use boxadapt_core::*;

pub struct DeskRun {
    pub eval_dice: f64,
    pub eval_count: usize,
    pub epochs: usize,
    pub stop: StopReason,
}

/// Toy profile, 40 synthetic 64² images, 5 exemplars, setting D at rate 0.95.
///
/// `frozen` keeps every adapter and the decoder at initialization.
pub fn desk_run(seed: u64, toggles: AdapterToggles, frozen: bool) -> Result<DeskRun> {
    let data = gen_synthetic(40, 64, seed)?;
    let ex = sample_exemplars(&data, 5, seed)?;
    let mut cfg = ModelConfig::default();
    cfg.toggles = toggles;
    let mut model = Model::new(&cfg, seed)?;
    if frozen {
        for p in ["hfa.", "msfa.", "selector.", "decoder."] {
            model.store.set_trainable_prefix(p, false);
        }
    }
    let tcfg = TrainConfig {
        lr: 1e-3,
        epochs: 100,
        patience: 10,
        seed,
        ..TrainConfig::default()
    };
    let (_, rec) = train(&mut model, &ex, &tcfg)?;
    let report = evaluate(&model, &ex.eval, tcfg.prompt_setting, tcfg.bbox_rate)?;
    Ok(DeskRun {
        eval_dice: report.mean_dice,
        eval_count: report.samples.len(),
        epochs: rec.epochs.len(),
        stop: rec.stop_reason,
    })
}
