//! Frozen ViT-style image encoder with per-block feature taps and an injection hook.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::checkpoint::{Checkpoint, LoadReport};
use crate::error::{Error, Result};
use crate::model::AdapterBank;
use crate::nn::{Activation, Attention, Init, LayerNorm, Linear, Mlp};
use crate::params::{trunc_normal, Ctx, ParamId, ParamStore};
use crate::types::{FeatureMap, ImageTensor};

pub const ENCODER_PREFIX: &str = "encoder.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default)]
    pub pretrained_weights: Option<PathBuf>,
}

fn default_mlp_ratio() -> usize {
    4
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl EncoderConfig {
    /// Desk-scale geometry: 64px input, 8px patches, 96 channels, 4 blocks, 3 heads.
    pub fn toy() -> Self {
        Self {
            input_size: 64,
            patch_size: 8,
            embed_dim: 96,
            num_blocks: 4,
            num_heads: 3,
            mlp_ratio: 4,
            pretrained_weights: None,
        }
    }

    /// Small 32px geometry used for finite-difference gradient checks.
    pub fn desk32() -> Self {
        Self {
            input_size: 32,
            patch_size: 4,
            embed_dim: 16,
            num_blocks: 2,
            num_heads: 2,
            mlp_ratio: 2,
            pretrained_weights: None,
        }
    }

    /// ViT-B sized geometry for running against real pretrained weights.
    pub fn sam_vit_b() -> Self {
        Self {
            input_size: 1024,
            patch_size: 16,
            embed_dim: 768,
            num_blocks: 12,
            num_heads: 12,
            mlp_ratio: 4,
            pretrained_weights: None,
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "desk32" => Ok(Self::desk32()),
            "sam-vit-b" => Ok(Self::sam_vit_b()),
            other => Err(Error::Config(format!("unknown encoder profile `{other}`"))),
        }
    }

    pub fn grid(&self) -> usize {
        self.input_size / self.patch_size
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.input_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "input size {} not divisible by patch size {}",
                self.input_size, self.patch_size
            )));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.num_heads
            )));
        }
        if self.num_blocks == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("encoder needs at least one block".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Block {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    mlp: Mlp,
}

impl Block {
    fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let h = self.norm1.forward(ctx, x);
        let a = self.attn.forward(ctx, h, h, h);
        let x = ctx.graph.add(x, a);
        let h = self.norm2.forward(ctx, x);
        let m = self.mlp.forward(ctx, h);
        ctx.graph.add(x, m)
    }
}

/// Graph variables of one encoder pass: each block's post-injection tokens and the final embedding.
#[derive(Clone, Debug)]
pub struct EncodedVars {
    pub patch_embedding: Var,
    pub layers: Vec<Var>,
    pub final_embedding: Var,
}

/// Per-layer features `F_I^1 … F_I^K` plus the final (neck-normalized) embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerFeatures {
    pub layers: Vec<FeatureMap>,
    pub final_embedding: FeatureMap,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    patch_embed: Linear,
    pos_embed: ParamId,
    blocks: Vec<Block>,
    neck: LayerNorm,
}

impl Encoder {
    /// Registers randomly initialized encoder parameters under `encoder.`.
    pub fn new(store: &mut ParamStore, cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = cfg.embed_dim;
        let patch_embed = Linear::new(
            store,
            "encoder.patch_embed",
            cfg.patch_dim(),
            c,
            Init::FanIn,
            true,
            &mut rng,
        );
        let pos_embed = store.add(
            "encoder.pos_embed",
            trunc_normal(&mut rng, &[cfg.tokens(), c], 0.02),
            true,
        );
        let blocks = (0..cfg.num_blocks)
            .map(|k| {
                let name = format!("encoder.blocks.{k}");
                Block {
                    norm1: LayerNorm::new(store, &format!("{name}.norm1"), c, true),
                    attn: Attention::new(
                        store,
                        &format!("{name}.attn"),
                        c,
                        cfg.num_heads,
                        1,
                        Init::TruncNormal(0.02),
                        true,
                        &mut rng,
                    ),
                    norm2: LayerNorm::new(store, &format!("{name}.norm2"), c, true),
                    mlp: Mlp::new(
                        store,
                        &format!("{name}.mlp"),
                        c,
                        c * cfg.mlp_ratio,
                        c,
                        Activation::Gelu,
                        Init::TruncNormal(0.02),
                        true,
                        &mut rng,
                    ),
                }
            })
            .collect();
        let neck = LayerNorm::new(store, "encoder.neck.norm", c, true);
        Ok(Self {
            cfg: cfg.clone(),
            patch_embed,
            pos_embed,
            blocks,
            neck,
        })
    }

    pub fn grid(&self) -> usize {
        self.cfg.grid()
    }

    fn check_image(&self, image: &ImageTensor) -> Result<()> {
        let s = self.cfg.input_size;
        if image.channels() != 3 || image.height() != s || image.width() != s {
            return Err(Error::ShapeMismatch(format!(
                "encoder expects a 3x{s}x{s} image, got {}x{}x{}",
                image.channels(),
                image.height(),
                image.width()
            )));
        }
        Ok(())
    }

    /// Patch projection plus positional term, as `(tokens, C)`.
    pub fn patch_embed_var(&self, ctx: &mut Ctx, image: &ImageTensor) -> Result<Var> {
        self.check_image(image)?;
        let patches = ctx.constant(image.patchify(self.cfg.patch_size)?);
        let x = self.patch_embed.forward(ctx, patches);
        let pos = ctx.p(self.pos_embed);
        Ok(ctx.graph.add(x, pos))
    }

    pub fn patch_embed(&self, store: &ParamStore, image: &ImageTensor) -> Result<FeatureMap> {
        let mut ctx = Ctx::new(store);
        let v = self.patch_embed_var(&mut ctx, image)?;
        FeatureMap::from_tokens(ctx.graph.value(v), self.grid(), None)
    }

    /// Runs every block; with adapters, the fused feature for layer `k` is added to block `k`'s output.
    pub fn encode_var(
        &self,
        ctx: &mut Ctx,
        image: &ImageTensor,
        adapters: Option<&AdapterBank>,
    ) -> Result<EncodedVars> {
        let embed = self.patch_embed_var(ctx, image)?;
        let prepared = match adapters {
            Some(bank) => Some(bank.prepare(ctx, image, embed)?),
            None => None,
        };
        let expected = [self.cfg.tokens(), self.cfg.embed_dim];
        let mut x = embed;
        let mut layers = Vec::with_capacity(self.blocks.len());
        for (k, block) in self.blocks.iter().enumerate() {
            let out = block.forward(ctx, x);
            x = match (adapters, &prepared) {
                (Some(bank), Some(prep)) => match bank.fused(ctx, prep, k, x)? {
                    Some(f) => {
                        if ctx.graph.value(f).shape() != expected {
                            return Err(Error::ShapeMismatch(format!(
                                "adapter output {:?} at layer {k}, expected {:?}",
                                ctx.graph.value(f).shape(),
                                expected
                            )));
                        }
                        ctx.graph.add(out, f)
                    }
                    None => out,
                },
                _ => out,
            };
            layers.push(x);
        }
        let final_embedding = self.neck.forward(ctx, x);
        Ok(EncodedVars {
            patch_embedding: embed,
            layers,
            final_embedding,
        })
    }

    pub fn encode(
        &self,
        store: &ParamStore,
        image: &ImageTensor,
        adapters: Option<&AdapterBank>,
    ) -> Result<LayerFeatures> {
        let mut ctx = Ctx::new(store);
        let vars = self.encode_var(&mut ctx, image, adapters)?;
        let g = self.grid();
        let layers = vars
            .layers
            .iter()
            .enumerate()
            .map(|(k, &v)| FeatureMap::from_tokens(ctx.graph.value(v), g, Some(k + 1)))
            .collect::<Result<Vec<_>>>()?;
        let final_embedding = FeatureMap::from_tokens(ctx.graph.value(vars.final_embedding), g, None)?;
        Ok(LayerFeatures {
            layers,
            final_embedding,
        })
    }
}

/// Marks every encoder parameter non-trainable. Idempotent.
pub fn freeze(store: &mut ParamStore) {
    store.set_trainable_prefix(ENCODER_PREFIX, false);
}

pub fn is_frozen(store: &ParamStore) -> bool {
    store
        .iter()
        .filter(|(_, p)| p.name.starts_with(ENCODER_PREFIX))
        .all(|(_, p)| !p.trainable)
}

/// Hash of the encoder's parameters, used to prove they never move during training.
pub fn encoder_hash(store: &ParamStore) -> String {
    store.hash_prefix(ENCODER_PREFIX)
}

/// Loads `encoder.*` tensors from a checkpoint file into `store`.
pub fn load_pretrained(store: &mut ParamStore, path: &Path) -> Result<LoadReport> {
    let ckpt = Checkpoint::read(path)?;
    ckpt.apply(store, ENCODER_PREFIX)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(cfg: &EncoderConfig, f: impl Fn(usize, usize, usize) -> f64) -> ImageTensor {
        ImageTensor::from_fn(3, cfg.input_size, cfg.input_size, f)
    }

    #[test]
    fn patch_embed_shape_and_locality() {
        let cfg = EncoderConfig::toy();
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, &cfg, 1).unwrap();
        let a = image(&cfg, |c, y, x| ((c + 2 * y + 3 * x) as f64 * 0.1).sin());
        let fa = enc.patch_embed(&store, &a).unwrap();
        assert_eq!(fa.shape(), [1, 96, 8, 8]);

        // perturb one pixel inside patch (row 2, col 5)
        let b = image(&cfg, |c, y, x| {
            let v = ((c + 2 * y + 3 * x) as f64 * 0.1).sin();
            if c == 1 && y == 19 && x == 44 { v + 1.0 } else { v }
        });
        let fb = enc.patch_embed(&store, &b).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let differs = (0..96).any(|c| fa.get(c, y, x) != fb.get(c, y, x));
                assert_eq!(differs, (y, x) == (2, 5), "cell ({y},{x})");
            }
        }
    }

    #[test]
    fn zero_projection_leaves_positional_term() {
        let cfg = EncoderConfig::desk32();
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, &cfg, 3).unwrap();
        for name in ["encoder.patch_embed.weight", "encoder.patch_embed.bias"] {
            let id = store.id(name).unwrap();
            let shape = store.value(id).shape().to_vec();
            store.set_value(id, crate::tensor::Tensor::zeros(&shape)).unwrap();
        }
        let img = image(&cfg, |_, _, _| 0.0);
        let f = enc.patch_embed(&store, &img).unwrap();
        let pos = store.value(store.id("encoder.pos_embed").unwrap());
        assert_eq!(&f.to_tokens(), pos);
    }

    #[test]
    fn encode_shapes_and_determinism() {
        let cfg = EncoderConfig::desk32();
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, &cfg, 5).unwrap();
        let img = image(&cfg, |c, y, x| (c * y + x) as f64 / 50.0);
        let f1 = enc.encode(&store, &img, None).unwrap();
        let f2 = enc.encode(&store, &img, None).unwrap();
        assert_eq!(f1, f2);
        assert_eq!(f1.layers.len(), cfg.num_blocks);
        for (k, l) in f1.layers.iter().enumerate() {
            assert_eq!(l.shape(), [1, 16, 8, 8]);
            assert_eq!(l.layer, Some(k + 1));
        }
        let bad = ImageTensor::from_fn(3, 16, 16, |_, _, _| 0.0);
        assert!(matches!(enc.encode(&store, &bad, None), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn freeze_is_idempotent() {
        let mut store = ParamStore::new();
        Encoder::new(&mut store, &EncoderConfig::desk32(), 0).unwrap();
        assert!(!is_frozen(&store));
        freeze(&mut store);
        let once: Vec<bool> = store.iter().map(|(_, p)| p.trainable).collect();
        freeze(&mut store);
        let twice: Vec<bool> = store.iter().map(|(_, p)| p.trainable).collect();
        assert_eq!(once, twice);
        assert!(is_frozen(&store));
        assert!(store.trainable_ids().is_empty());
    }

    #[test]
    fn config_validation() {
        let mut c = EncoderConfig::toy();
        c.patch_size = 7;
        assert!(c.validate().is_err());
        let mut c = EncoderConfig::toy();
        c.num_heads = 5;
        assert!(c.validate().is_err());
        assert_eq!(EncoderConfig::profile("sam-vit-b").unwrap().grid(), 64);
    }
}
