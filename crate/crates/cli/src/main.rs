//! `boxadapt`: train, evaluate, ablate and sweep box-prompted adapter models.

mod plot;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use boxadapt_core::pipeline::save_corpus;
use boxadapt_core::training::{load_trained, RunManifest};
use boxadapt_core::*;
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "boxadapt", version, about = "Few-exemplar adapter tuning for a frozen box-prompted segmenter")]
struct Cli {
    #[command(flatten)]
    global: Overrides,
    #[command(subcommand)]
    cmd: Command,
}

/// Flags that override the matching keys of the config file.
#[derive(Args, Debug, Default)]
struct Overrides {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root directory for run outputs.
    #[arg(long, global = true, env = "BOXADAPT_OUT", default_value = "runs")]
    out: PathBuf,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    prompt_setting: Option<PromptSetting>,
    #[arg(long, global = true)]
    bbox_rate: Option<f64>,
    #[arg(long, global = true)]
    exemplars: Option<usize>,
    #[arg(long, global = true)]
    freeze_decoder: bool,
    #[arg(long, global = true)]
    no_selector_bias: bool,
    #[arg(long, global = true)]
    hfa_tau: Option<f64>,
    #[arg(long, global = true)]
    msfa_per_layer: bool,
    #[arg(long, global = true)]
    lr: Option<f64>,
    #[arg(long, global = true)]
    lr_gamma: Option<f64>,
    #[arg(long, global = true)]
    weight_decay: Option<f64>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    patience: Option<usize>,
    /// Encoder profile: toy, desk32 or sam-vit-b.
    #[arg(long, global = true)]
    profile: Option<String>,
    /// Generate the training corpus in memory (the default data source).
    #[arg(long, global = true)]
    synthetic: bool,
    /// Corpus directory written by `synth`.
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train adapters and decoder, then score the held-out images.
    Train,
    /// Score a trained checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train and score several adapter combinations.
    Ablate {
        /// Semicolon-separated toggle sets, e.g. `hfa;msfa;hfa,msfa;hfa,msfa,selector,!bias`.
        #[arg(long, default_value = "hfa;msfa;hfa,msfa;hfa,msfa,selector,!bias;hfa,msfa,selector,bias")]
        variants: String,
    },
    /// Score one checkpoint across coarse-box rates.
    SweepRate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1.0,0.95,0.9,0.85,0.8,0.75,0.7")]
        rates: Vec<f64>,
    },
    /// Write a synthetic blob corpus.
    Synth {
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        outdir: PathBuf,
    },
}

impl Overrides {
    fn file(&self, fallback: Option<&Path>) -> Result<RunConfigFile> {
        let mut f = match self.config.as_deref().or(fallback) {
            Some(p) => RunConfigFile::read(p)?,
            None => RunConfigFile::default(),
        };
        let t = &mut f.train;
        if let Some(v) = self.seed {
            t.seed = v;
            f.data.synthetic_seed = v;
        }
        if let Some(v) = self.prompt_setting {
            t.prompt_setting = v;
        }
        if let Some(v) = self.bbox_rate {
            t.bbox_rate = v;
        }
        if let Some(v) = self.exemplars {
            t.exemplars = v;
        }
        if let Some(v) = self.lr {
            t.lr = v;
        }
        if let Some(v) = self.lr_gamma {
            t.lr_gamma = v;
        }
        if let Some(v) = self.weight_decay {
            t.weight_decay = v;
        }
        if let Some(v) = self.epochs {
            t.epochs = v;
        }
        if let Some(v) = self.patience {
            t.patience = v;
        }
        let m = &mut f.model;
        if self.freeze_decoder {
            m.freeze_decoder = true;
        }
        if self.no_selector_bias {
            m.selector_bias = false;
        }
        if let Some(v) = self.hfa_tau {
            m.hfa_tau = Some(v);
        }
        if self.msfa_per_layer {
            m.msfa_per_layer = true;
        }
        if let Some(p) = &self.profile {
            m.profile = p.clone();
            m.encoder = None;
        }
        if let Some(c) = &self.corpus {
            f.data.corpus = Some(c.clone());
            f.data.synthetic = false;
        } else if self.synthetic {
            f.data.synthetic = true;
            f.data.corpus = None;
        }
        Ok(f)
    }
}

/// `<out>/<prefix><hash>-<timestamp>`, with a counter if that already exists.
fn run_dir(out: &Path, prefix: &str, hash: &str) -> Result<PathBuf> {
    let stamp = chrono::Local::now().format("%Y%m%dT%H%M%S");
    let base = out.join(format!("{prefix}{hash}-{stamp}"));
    let mut dir = base.clone();
    let mut n = 1;
    while dir.exists() {
        dir = PathBuf::from(format!("{}-{n}", base.display()));
        n += 1;
    }
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_report(dir: &Path, report: &MetricsReport) -> Result<()> {
    report.write_csv(&dir.join("metrics.csv"))?;
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&report.summary_json())?)?;
    Ok(())
}

struct Trained {
    model: Model,
    report: MetricsReport,
}

fn train_and_score(resolved: &ResolvedConfig, dir: &Path) -> Result<Trained> {
    let data = resolved.data.load(resolved.model.encoder.input_size)?;
    let set = sample_exemplars(&data, resolved.train.exemplars, resolved.train.seed)?;
    let mut model = Model::new(&resolved.model, resolved.train.seed)?;
    let (ckpt, record) = train(&mut model, &set, &resolved.train)?;
    ckpt.write(&dir.join("checkpoint.bxad"))?;
    record.write_epoch_csv(&dir.join("epochs.csv"))?;
    RunManifest::new(&resolved.train, &resolved.hash(), &record, &set).write(&dir.join("manifest.toml"))?;
    let report = evaluate(&model, &set.eval, resolved.train.prompt_setting, resolved.train.bbox_rate)?;
    write_report(dir, &report)?;
    Ok(Trained { model, report })
}

fn cmd_train(o: &Overrides) -> Result<()> {
    let file = o.file(None)?;
    let resolved = file.resolve()?;
    let dir = run_dir(&o.out, "", &resolved.hash())?;
    fs::write(dir.join("config.toml"), file.to_toml()?)?;
    let t = train_and_score(&resolved, &dir)?;
    println!(
        "{}  dice {:.2}  miou {:.2}  hd95 {:.2}  ({} trainable params)",
        dir.display(),
        t.report.mean_dice,
        t.report.mean_miou,
        t.report.mean_hd95,
        t.model.trainable_param_count()
    );
    Ok(())
}

/// Rebuilds the model a checkpoint was trained with; the run's `config.toml` is the default config.
fn load_checkpoint(o: &Overrides, path: &Path) -> Result<(Model, ResolvedConfig)> {
    let ckpt = Checkpoint::read(path)?;
    let sibling = path.parent().map(|d| d.join("config.toml")).filter(|p| p.exists());
    let resolved = o.file(sibling.as_deref())?.resolve()?;
    let model_cfg: ModelConfig = match ckpt.geometry.get("model") {
        Some(v) => serde_json::from_value(v.clone())?,
        None => resolved.model.clone(),
    };
    let mut model = Model::new(&model_cfg, resolved.train.seed)?;
    load_trained(&mut model, &ckpt)?;
    Ok((model, resolved))
}

/// Held-out images of the configured exemplar draw.
fn held_out(resolved: &ResolvedConfig, input_size: usize) -> Result<Vec<SegSample>> {
    let data = resolved.data.load(input_size)?;
    Ok(sample_exemplars(&data, resolved.train.exemplars, resolved.train.seed)?.eval)
}

fn cmd_eval(o: &Overrides, checkpoint: &Path) -> Result<()> {
    let (model, resolved) = load_checkpoint(o, checkpoint)?;
    let eval = held_out(&resolved, model.input_size())?;
    let report = evaluate(&model, &eval, resolved.train.prompt_setting, resolved.train.bbox_rate)?;
    let dir = run_dir(&o.out, "eval-", &resolved.hash())?;
    write_report(&dir, &report)?;
    println!(
        "{}  setting {}  rate {}  dice {:.2}  miou {:.2}  hd95 {:.2}",
        dir.display(),
        report.setting,
        report.rate,
        report.mean_dice,
        report.mean_miou,
        report.mean_hd95
    );
    Ok(())
}

fn cmd_ablate(o: &Overrides, variants: &str) -> Result<()> {
    let base = o.file(None)?;
    let toggles: Vec<AdapterToggles> = variants
        .split(';')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(AdapterToggles::parse)
        .collect::<Result<_>>()?;
    // validate every variant before training any of them
    let resolved: Vec<(String, RunConfigFile, ResolvedConfig)> = toggles
        .iter()
        .map(|t| {
            let mut f = base.clone();
            f.model.toggles = t.label().replace('+', ",");
            f.model.selector_bias = t.bias;
            let r = f.resolve()?;
            Ok((t.label(), f, r))
        })
        .collect::<Result<_>>()?;
    let root = run_dir(&o.out, "ablate-", &base.resolve()?.hash())?;
    let mut w = csv::Writer::from_path(root.join("ablation.csv"))?;
    w.write_record(["variant", "config_hash", "dice", "miou", "hd95", "trainable_params"])?;
    for (label, file, r) in &resolved {
        let dir = root.join(format!("{label}-{}", r.hash()));
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("config.toml"), file.to_toml()?)?;
        let t = train_and_score(r, &dir)?;
        println!("{label:<28} dice {:>6.2}  miou {:>6.2}  hd95 {:>6.2}", t.report.mean_dice, t.report.mean_miou, t.report.mean_hd95);
        w.write_record([
            label.clone(),
            r.hash(),
            format!("{:.4}", t.report.mean_dice),
            format!("{:.4}", t.report.mean_miou),
            format!("{:.4}", t.report.mean_hd95),
            t.model.trainable_param_count().to_string(),
        ])?;
    }
    w.flush()?;
    println!("{}", root.display());
    Ok(())
}

/// Deduplicates and sorts descending; every rate must lie in `(0.5, 1]`.
fn normalize_rates(rates: &[f64]) -> Result<Vec<f64>> {
    if let Some(&bad) = rates.iter().find(|r| !(**r > 0.5 && **r <= 1.0)) {
        return Err(Error::InvalidRate(bad));
    }
    let mut out = rates.to_vec();
    out.sort_by(|a, b| b.total_cmp(a));
    let before = out.len();
    out.dedup();
    if out.len() < before {
        eprintln!("warning: dropped {} duplicate rate(s)", before - out.len());
    }
    Ok(out)
}

fn cmd_sweep_rate(o: &Overrides, checkpoint: &Path, rates: &[f64]) -> Result<()> {
    let rates = normalize_rates(rates)?;
    let (model, resolved) = load_checkpoint(o, checkpoint)?;
    let eval = held_out(&resolved, model.input_size())?;
    let setting = resolved.train.prompt_setting;
    let reports = rates
        .iter()
        .map(|&r| evaluate(&model, &eval, setting, r))
        .collect::<Result<Vec<_>>>()?;
    let dir = run_dir(&o.out, "sweep-", &resolved.hash())?;
    let mut w = csv::Writer::from_path(dir.join("sweep.csv"))?;
    w.write_record(["rate", "dice", "miou", "hd95"])?;
    for (r, rep) in rates.iter().zip(&reports) {
        w.write_record([r.to_string(), format!("{:.4}", rep.mean_dice), format!("{:.4}", rep.mean_miou), format!("{:.4}", rep.mean_hd95)])?;
    }
    w.flush()?;
    let series = |f: fn(&MetricsReport) -> f64| -> Vec<(f64, f64)> { rates.iter().zip(&reports).map(|(&r, rep)| (r, f(rep))).collect() };
    plot::line_plot(&series(|r| r.mean_dice), &dir.join("dice.png"))?;
    plot::line_plot(&series(|r| r.mean_miou), &dir.join("miou.png"))?;
    plot::line_plot(&series(|r| r.mean_hd95), &dir.join("hd95.png"))?;
    println!("{}", dir.display());
    Ok(())
}

fn cmd_synth(count: usize, size: usize, seed: u64, outdir: &Path) -> Result<()> {
    let samples = gen_synthetic(count, size, seed)?;
    let manifest = save_corpus(outdir, &samples, Some(seed))?;
    println!("{} samples of {size}x{size} in {}", manifest.count, outdir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let o = &cli.global;
    let res = match &cli.cmd {
        Command::Train => cmd_train(o),
        Command::Eval { checkpoint } => cmd_eval(o, checkpoint),
        Command::Ablate { variants } => cmd_ablate(o, variants),
        Command::SweepRate { checkpoint, rates } => cmd_sweep_rate(o, checkpoint, rates),
        Command::Synth { count, size, seed, outdir } => cmd_synth(*count, *size, *seed, outdir),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.class());
            ExitCode::from(2)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rates_sorted_and_deduplicated() {
        assert_eq!(normalize_rates(&[0.8, 1.0, 0.9, 0.95, 0.9]).unwrap(), vec![1.0, 0.95, 0.9, 0.8]);
        assert!(matches!(normalize_rates(&[0.9, 0.5]), Err(Error::InvalidRate(_))));
        assert!(normalize_rates(&[1.01]).is_err());
    }

    #[test]
    fn flags_override_file() {
        let o = Overrides {
            seed: Some(4),
            bbox_rate: Some(0.9),
            no_selector_bias: true,
            hfa_tau: Some(0.3),
            ..Overrides::default()
        };
        let f = o.file(None).unwrap();
        assert_eq!(f.train.seed, 4);
        assert_eq!(f.train.bbox_rate, 0.9);
        let r = f.resolve().unwrap();
        assert!(!r.model.toggles.bias);
        assert_eq!(r.model.hfa.tau, 0.3);
    }
}
