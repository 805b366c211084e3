//! TOML run configuration: model geometry and toggles, training recipe, and data sources.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::{AdapterToggles, ModelConfig};
use crate::ms_adapter::ParamSharing;
use crate::pipeline::{
    gen_synthetic, load_corpus, load_image_dir, load_nifti, preprocess_volume, SegSample, VolumePrep,
    MIN_SYNTH_SIZE,
};
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// `toy`, `desk32` or `sam-vit-b`; ignored when `encoder` is given.
    pub profile: String,
    pub encoder: Option<EncoderConfig>,
    /// Comma-separated subset of `hfa, msfa, selector, bias`.
    pub toggles: String,
    /// `false` pins the selector bias at `(0, 0)`.
    pub selector_bias: bool,
    pub selector_shared: bool,
    pub hfa_tau: Option<f64>,
    pub hfa_hidden_dim: Option<usize>,
    pub msfa_reduction: Option<usize>,
    /// Separate multi-scale adapter parameters per encoder layer.
    pub msfa_per_layer: bool,
    pub freeze_decoder: bool,
    pub encoder_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            profile: "toy".into(),
            encoder: None,
            toggles: "hfa,msfa,selector,bias".into(),
            selector_bias: true,
            selector_shared: false,
            hfa_tau: None,
            hfa_hidden_dim: None,
            msfa_reduction: None,
            msfa_per_layer: false,
            freeze_decoder: false,
            encoder_seed: 0,
        }
    }
}

impl ModelSection {
    pub fn resolve(&self) -> Result<ModelConfig> {
        let encoder = match &self.encoder {
            Some(e) => e.clone(),
            None => EncoderConfig::profile(&self.profile)?,
        };
        let mut cfg = ModelConfig::for_encoder(encoder);
        let mut toggles = AdapterToggles::parse(&self.toggles)?;
        if !self.selector_bias {
            toggles.bias = false;
        }
        cfg.toggles = toggles;
        if let Some(t) = self.hfa_tau {
            cfg.hfa.tau = t;
        }
        if let Some(h) = self.hfa_hidden_dim {
            cfg.hfa.hidden_dim = h;
        }
        if let Some(r) = self.msfa_reduction {
            if r == 0 {
                return Err(Error::Config("msfa_reduction must be positive".into()));
            }
            cfg.msfa.channel_reduction = r;
        }
        if self.msfa_per_layer {
            cfg.msfa.per_layer = ParamSharing::Independent;
        }
        cfg.selector.shared = self.selector_shared;
        cfg.freeze_decoder = self.freeze_decoder;
        cfg.encoder_seed = self.encoder_seed;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeSource {
    pub image: PathBuf,
    pub label: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub dataset: String,
    /// Generate blobs in memory instead of reading files.
    pub synthetic: bool,
    pub synthetic_count: usize,
    /// Defaults to the encoder input size.
    pub synthetic_size: Option<usize>,
    pub synthetic_seed: u64,
    /// Directory written by `synth`.
    pub corpus: Option<PathBuf>,
    pub images: Option<PathBuf>,
    pub masks: Option<PathBuf>,
    pub volumes: Vec<VolumeSource>,
    pub prep: VolumePrep,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            dataset: "synthetic".into(),
            synthetic: true,
            synthetic_count: 40,
            synthetic_size: None,
            synthetic_seed: 0,
            corpus: None,
            images: None,
            masks: None,
            volumes: Vec::new(),
            prep: VolumePrep::default(),
        }
    }
}

impl DataSection {
    pub fn validate(&self, input_size: usize) -> Result<()> {
        let sources = [
            self.synthetic,
            self.corpus.is_some(),
            self.images.is_some() || self.masks.is_some(),
            !self.volumes.is_empty(),
        ]
        .iter()
        .filter(|&&b| b)
        .count();
        if sources != 1 {
            return Err(Error::Config(format!("exactly one data source must be configured, found {sources}")));
        }
        if self.images.is_some() != self.masks.is_some() {
            return Err(Error::Config("`images` and `masks` must be given together".into()));
        }
        if self.synthetic {
            let size = self.synthetic_size.unwrap_or(input_size);
            if size < MIN_SYNTH_SIZE {
                return Err(Error::Config(format!("synthetic size {size} below the minimum {MIN_SYNTH_SIZE}")));
            }
        }
        if self.prep.window == 0 {
            return Err(Error::Config("prep.window must be positive".into()));
        }
        Ok(())
    }

    /// Loads or generates every sample in a deterministic order.
    pub fn load(&self, input_size: usize) -> Result<Vec<SegSample>> {
        self.validate(input_size)?;
        if self.synthetic {
            return gen_synthetic(
                self.synthetic_count,
                self.synthetic_size.unwrap_or(input_size),
                self.synthetic_seed,
            );
        }
        if let Some(dir) = &self.corpus {
            return load_corpus(dir);
        }
        if let (Some(images), Some(masks)) = (&self.images, &self.masks) {
            return load_image_dir(images, masks, &self.dataset);
        }
        let mut out = Vec::new();
        for v in &self.volumes {
            let id = v
                .image
                .file_name()
                .and_then(|s| s.to_str())
                .map(|s| s.trim_end_matches(".gz").trim_end_matches(".nii").to_string())
                .unwrap_or_default();
            let vol = load_nifti(&v.image)?;
            let lab = load_nifti(&v.label)?;
            out.extend(preprocess_volume(&vol, &lab, &self.prep, &self.dataset, &id)?);
        }
        Ok(out)
    }
}

/// The full run description; every CLI flag has a key here.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    pub model: ModelSection,
    pub train: TrainConfig,
    pub data: DataSection,
}

/// Fully validated configuration ready to run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResolvedConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataSection,
}

impl RunConfigFile {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::FileNotFound(path.to_path_buf()));
        }
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn resolve(&self) -> Result<ResolvedConfig> {
        let model = self.model.resolve()?;
        self.train.validate()?;
        self.data.validate(model.encoder.input_size)?;
        Ok(ResolvedConfig {
            model,
            train: self.train.clone(),
            data: self.data.clone(),
        })
    }
}

impl ResolvedConfig {
    /// First 12 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))[..12].to_string()
    }
}
