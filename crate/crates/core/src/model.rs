//! Full model assembly: frozen encoder, adapter bank, and mask decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::backbone::{self, Encoder, EncoderConfig, ENCODER_PREFIX};
use crate::decoder::{DecoderConfig, MaskDecoder, MaskLogits, DECODER_PREFIX};
use crate::error::{Error, Result};
use crate::hf_adapter::{HfAdapter, HfaConfig, HFA_PREFIX};
use crate::ms_adapter::{MsAdapter, MsfaConfig, MSFA_PREFIX};
use crate::params::{Ctx, ParamStore};
use crate::prompts::BBox;
use crate::selector::{Selector, SelectorConfig, SELECTOR_PREFIX};
use crate::types::ImageTensor;

/// Which adapter components are active; mirrors the ablation rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterToggles {
    pub hfa: bool,
    pub msfa: bool,
    pub selector: bool,
    pub bias: bool,
}

impl Default for AdapterToggles {
    fn default() -> Self {
        Self::full()
    }
}

impl AdapterToggles {
    pub fn full() -> Self {
        Self {
            hfa: true,
            msfa: true,
            selector: true,
            bias: true,
        }
    }

    pub fn none() -> Self {
        Self {
            hfa: false,
            msfa: false,
            selector: false,
            bias: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.selector && !(self.hfa && self.msfa) {
            return Err(Error::InvalidCombination(
                "the selector needs both the high-frequency and multi-scale adapters".into(),
            ));
        }
        if self.bias && !self.selector {
            return Err(Error::InvalidCombination("the learnable bias belongs to the selector".into()));
        }
        Ok(())
    }

    pub fn any(&self) -> bool {
        self.hfa || self.msfa
    }

    /// Short label such as `hfa+msfa+selector+bias`.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.hfa {
            parts.push("hfa");
        }
        if self.msfa {
            parts.push("msfa");
        }
        if self.selector {
            parts.push("selector");
        }
        if self.bias {
            parts.push("bias");
        }
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }

    /// Parses a comma/plus separated list: `hfa,msfa,selector,bias` or `!bias` / `no-bias`.
    pub fn parse(s: &str) -> Result<Self> {
        let mut t = Self::none();
        let mut explicit_no_bias = false;
        for part in s.split([',', '+']).map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "hfa" => t.hfa = true,
                "msfa" => t.msfa = true,
                "selector" => t.selector = true,
                "bias" => t.bias = true,
                "!bias" | "no-bias" | "¬bias" => explicit_no_bias = true,
                "none" => {}
                other => return Err(Error::Config(format!("unknown ablation toggle `{other}`"))),
            }
        }
        if explicit_no_bias {
            t.bias = false;
        }
        t.validate()?;
        Ok(t)
    }
}

/// The trainable adapters that feed the encoder, in whichever combination the toggles select.
#[derive(Clone, Debug)]
pub struct AdapterBank {
    pub toggles: AdapterToggles,
    pub hfa: Option<HfAdapter>,
    pub msfa: Option<MsAdapter>,
    pub selector: Option<Selector>,
}

/// Per-image state computed once before the encoder blocks run.
pub struct PreparedAdapters {
    pub clue: Option<Var>,
}

impl AdapterBank {
    pub fn new(
        store: &mut ParamStore,
        toggles: AdapterToggles,
        enc: &EncoderConfig,
        hfa: &HfaConfig,
        msfa: &MsfaConfig,
        selector: &SelectorConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        toggles.validate()?;
        let (g, c, k) = (enc.grid(), enc.embed_dim, enc.num_blocks);
        let hfa = if toggles.hfa {
            Some(HfAdapter::new(store, hfa, enc.patch_size, g, c, rng)?)
        } else {
            None
        };
        let msfa = if toggles.msfa {
            Some(MsAdapter::new(store, msfa, g, c, k, rng)?)
        } else {
            None
        };
        let selector = if toggles.selector {
            Some(Selector::new(store, selector, c, k, toggles.bias, rng))
        } else {
            None
        };
        Ok(Self {
            toggles,
            hfa,
            msfa,
            selector,
        })
    }

    pub fn prepare(&self, ctx: &mut Ctx, image: &ImageTensor, image_embedding: Var) -> Result<PreparedAdapters> {
        let clue = match &self.hfa {
            Some(h) => Some(h.forward_var(ctx, image, image_embedding)?),
            None => None,
        };
        Ok(PreparedAdapters { clue })
    }

    /// The feature `𝓕_k` injected after block `k`, computed from that block's input.
    pub fn fused(&self, ctx: &mut Ctx, prep: &PreparedAdapters, layer: usize, block_input: Var) -> Result<Option<Var>> {
        let f_p = match &self.msfa {
            Some(m) => Some(m.forward_var(ctx, layer, block_input)?),
            None => None,
        };
        let out = match (prep.clue, f_p, &self.selector) {
            (Some(f_f), Some(f_p), Some(sel)) => Some(sel.forward_var(ctx, layer, block_input, f_f, f_p)?),
            (Some(f_f), Some(f_p), None) => Some(ctx.graph.add(f_f, f_p)),
            (Some(f_f), None, _) => Some(f_f),
            (None, Some(f_p), _) => Some(f_p),
            (None, None, _) => None,
        };
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    #[serde(default)]
    pub hfa: HfaConfig,
    #[serde(default)]
    pub msfa: MsfaConfig,
    #[serde(default)]
    pub selector: SelectorConfig,
    #[serde(default)]
    pub toggles: AdapterToggles,
    #[serde(default)]
    pub freeze_decoder: bool,
    /// Seed of the stand-in "pretrained" encoder weights, shared by every run.
    #[serde(default)]
    pub encoder_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::for_encoder(EncoderConfig::toy())
    }
}

impl ModelConfig {
    pub fn for_encoder(encoder: EncoderConfig) -> Self {
        let decoder = DecoderConfig::for_dim(encoder.embed_dim);
        let hfa = HfaConfig {
            hidden_dim: (encoder.embed_dim / 4).max(1),
            ..HfaConfig::default()
        };
        Self {
            encoder,
            decoder,
            hfa,
            msfa: MsfaConfig::default(),
            selector: SelectorConfig::default(),
            toggles: AdapterToggles::full(),
            freeze_decoder: false,
            encoder_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.hfa.validate()?;
        self.toggles.validate()?;
        if self.toggles.msfa && self.encoder.grid() < 8 {
            return Err(Error::GridTooSmall(self.encoder.grid()));
        }
        Ok(())
    }
}

/// Anything that maps an image and a box prompt to mask logits.
pub trait Segmenter {
    fn input_size(&self) -> usize;
    fn predict(&self, image: &ImageTensor, bbox: &BBox) -> Result<MaskLogits>;
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub adapters: Option<AdapterBank>,
    pub decoder: MaskDecoder,
}

impl Model {
    /// Builds the model with a frozen encoder and freshly initialized trainable parts.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, &cfg.encoder, cfg.encoder_seed)?;
        backbone::freeze(&mut store);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let adapters = if cfg.toggles.any() {
            Some(AdapterBank::new(
                &mut store,
                cfg.toggles,
                &cfg.encoder,
                &cfg.hfa,
                &cfg.msfa,
                &cfg.selector,
                &mut rng,
            )?)
        } else {
            None
        };
        let decoder = MaskDecoder::new(
            &mut store,
            &cfg.decoder,
            cfg.encoder.embed_dim,
            cfg.encoder.grid(),
            cfg.encoder.input_size,
            !cfg.freeze_decoder,
            &mut rng,
        )?;
        let mut model = Self {
            cfg: cfg.clone(),
            store,
            encoder,
            adapters,
            decoder,
        };
        if let Some(path) = cfg.encoder.pretrained_weights.clone() {
            backbone::load_pretrained(&mut model.store, &path)?;
        }
        Ok(model)
    }

    pub fn input_size(&self) -> usize {
        self.cfg.encoder.input_size
    }

    /// Logits for one image and box, as an `(input_size², 1)` graph column.
    pub fn forward_var(&self, ctx: &mut Ctx, image: &ImageTensor, bbox: &BBox) -> Result<Var> {
        let enc = self.encoder.encode_var(ctx, image, self.adapters.as_ref())?;
        let prompt = self.decoder.encode_box_var(ctx, bbox)?;
        self.decoder.decode_var(ctx, enc.final_embedding, prompt)
    }

    pub fn predict(&self, image: &ImageTensor, bbox: &BBox) -> Result<MaskLogits> {
        let mut ctx = Ctx::new(&self.store);
        let v = self.forward_var(&mut ctx, image, bbox)?;
        let s = self.input_size();
        Ok(MaskLogits {
            logits: ctx.graph.value(v).clone().reshape(&[1, 1, s, s])?,
            threshold: 0.0,
        })
    }

    /// Freeze or unfreeze every decoder parameter except the fixed positional matrix.
    pub fn set_decoder_trainable(&mut self, trainable: bool) {
        self.store.set_trainable_prefix(DECODER_PREFIX, trainable);
        if let Some(id) = self.store.id("decoder.pe_gaussian") {
            self.store.set_trainable(id, false);
        }
    }

    pub fn encoder_param_count(&self) -> usize {
        self.store.count(|p| p.name.starts_with(ENCODER_PREFIX))
    }

    /// Parameters of the adapters and selector.
    pub fn adapter_param_count(&self) -> usize {
        self.store.count(|p| {
            p.name.starts_with(HFA_PREFIX) || p.name.starts_with(MSFA_PREFIX) || p.name.starts_with(SELECTOR_PREFIX)
        })
    }

    pub fn trainable_param_count(&self) -> usize {
        self.store.count(|p| p.trainable)
    }

    pub fn total_param_count(&self) -> usize {
        self.store.total_count()
    }
}

impl Segmenter for Model {
    fn input_size(&self) -> usize {
        Model::input_size(self)
    }

    fn predict(&self, image: &ImageTensor, bbox: &BBox) -> Result<MaskLogits> {
        Model::predict(self, image, bbox)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toggle_validation_and_parsing() {
        assert!(AdapterToggles::parse("hfa").is_ok());
        assert!(AdapterToggles::parse("hfa,msfa,selector,bias").is_ok());
        let t = AdapterToggles::parse("hfa+msfa+selector+!bias").unwrap();
        assert!(t.selector && !t.bias);
        assert!(matches!(AdapterToggles::parse("hfa,selector"), Err(Error::InvalidCombination(_))));
        assert!(matches!(AdapterToggles::parse("msfa,bias"), Err(Error::InvalidCombination(_))));
        assert!(AdapterToggles::parse("lora").is_err());
        assert_eq!(AdapterToggles::full().label(), "hfa+msfa+selector+bias");
    }

    #[test]
    fn encoder_frozen_after_construction() {
        let m = Model::new(&ModelConfig::for_encoder(EncoderConfig::desk32()), 0).unwrap();
        assert!(backbone::is_frozen(&m.store));
        assert!(m.trainable_param_count() > 0);
        let mut frozen_dec = ModelConfig::for_encoder(EncoderConfig::desk32());
        frozen_dec.freeze_decoder = true;
        let m2 = Model::new(&frozen_dec, 0).unwrap();
        assert_eq!(m2.trainable_param_count(), m2.adapter_param_count());
    }
}
