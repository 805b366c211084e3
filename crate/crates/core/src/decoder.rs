//! Box-promptable mask decoder: random-Fourier box encoding, a two-way
//! token/image transformer, transposed-conv upscaling, and a hypernetwork head.

use std::f64::consts::PI;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{SpatialMap, Var};
use crate::error::{Error, Result};
use crate::ms_adapter::bilinear_map;
use crate::nn::{Activation, Attention, Init, LayerNorm, Linear, Mlp};
use crate::params::{to_f32_exact, trunc_normal, Ctx, ParamId, ParamStore};
use crate::prompts::BBox;
use crate::tensor::Tensor;
use crate::types::{FeatureMap, Mask};

pub const DECODER_PREFIX: &str = "decoder.";
/// Seed of the fixed random-Fourier positional matrix.
pub const PE_SEED: u64 = 0x5EED_B0C5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub num_heads: usize,
    pub mlp_dim: usize,
    pub depth: usize,
}

impl DecoderConfig {
    pub fn for_dim(embed_dim: usize) -> Self {
        Self {
            num_heads: if embed_dim >= 64 { 4 } else { 2 },
            mlp_dim: 2 * embed_dim,
            depth: 2,
        }
    }
}

/// Two `(1, C)` corner tokens: top-left then bottom-right.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptEmbedding {
    pub tokens: Tensor,
}

/// `(1, 1, size, size)` logits with the threshold used to binarize them.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskLogits {
    pub logits: Tensor,
    pub threshold: f64,
}

impl MaskLogits {
    pub fn size(&self) -> usize {
        self.logits.shape()[2]
    }

    pub fn binarize(&self) -> Mask {
        binarize(self, self.threshold)
    }
}

/// `mask = logits > threshold`.
pub fn binarize(logits: &MaskLogits, threshold: f64) -> Mask {
    let s = logits.size();
    Mask::new(s, s, logits.logits.data().iter().map(|&v| v > threshold).collect()).expect("square logits")
}

#[derive(Clone, Debug)]
struct TwoWayBlock {
    self_attn: Attention,
    norm1: LayerNorm,
    cross_t2i: Attention,
    norm2: LayerNorm,
    mlp: Mlp,
    norm3: LayerNorm,
    cross_i2t: Attention,
    norm4: LayerNorm,
    skip_first_pe: bool,
}

impl TwoWayBlock {
    fn forward(&self, ctx: &mut Ctx, queries: Var, keys: Var, query_pe: Var, key_pe: Var) -> (Var, Var) {
        let queries = if self.skip_first_pe {
            self.self_attn.forward(ctx, queries, queries, queries)
        } else {
            let q = ctx.graph.add(queries, query_pe);
            let a = self.self_attn.forward(ctx, q, q, queries);
            ctx.graph.add(queries, a)
        };
        let queries = self.norm1.forward(ctx, queries);

        let q = ctx.graph.add(queries, query_pe);
        let k = ctx.graph.add(keys, key_pe);
        let a = self.cross_t2i.forward(ctx, q, k, keys);
        let queries = ctx.graph.add(queries, a);
        let queries = self.norm2.forward(ctx, queries);

        let m = self.mlp.forward(ctx, queries);
        let queries = ctx.graph.add(queries, m);
        let queries = self.norm3.forward(ctx, queries);

        let q = ctx.graph.add(queries, query_pe);
        let k = ctx.graph.add(keys, key_pe);
        let a = self.cross_i2t.forward(ctx, k, q, queries);
        let keys = ctx.graph.add(keys, a);
        let keys = self.norm4.forward(ctx, keys);
        (queries, keys)
    }
}

#[derive(Clone, Debug)]
pub struct MaskDecoder {
    pub cfg: DecoderConfig,
    pub embed_dim: usize,
    pub grid: usize,
    pub input_size: usize,
    pe_gaussian: ParamId,
    corner_embed: ParamId,
    no_mask_embed: ParamId,
    mask_token: ParamId,
    blocks: Vec<TwoWayBlock>,
    final_attn: Attention,
    final_norm: LayerNorm,
    up1: Linear,
    up_norm: LayerNorm,
    up2: Linear,
    hyper1: Linear,
    hyper2: Linear,
    hyper3: Linear,
    pixel_shuffle1: Rc<Vec<usize>>,
    pixel_shuffle2: Rc<Vec<usize>>,
    resize: Rc<SpatialMap>,
}

/// Index map turning a `(h·w, 4·c)` transposed-conv output into `(2h·2w, c)`.
fn pixel_shuffle_index(h: usize, w: usize, c: usize) -> Vec<usize> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut idx = Vec::with_capacity(oh * ow * c);
    for oy in 0..oh {
        for ox in 0..ow {
            let (y, dy, x, dx) = (oy / 2, oy % 2, ox / 2, ox % 2);
            for ch in 0..c {
                idx.push((y * w + x) * 4 * c + (dy * 2 + dx) * c + ch);
            }
        }
    }
    idx
}

impl MaskDecoder {
    pub fn new(
        store: &mut ParamStore,
        cfg: &DecoderConfig,
        embed_dim: usize,
        grid: usize,
        input_size: usize,
        trainable: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let c = embed_dim;
        if c % 8 != 0 || c % 2 != 0 {
            return Err(Error::Config(format!("decoder needs embed_dim divisible by 8, got {c}")));
        }
        if (c / 2) % cfg.num_heads != 0 {
            return Err(Error::Config(format!("{} decoder heads do not divide {}", cfg.num_heads, c / 2)));
        }
        let t = trainable;
        let init = Init::TruncNormal(0.02);
        let mut pe_rng = ChaCha8Rng::seed_from_u64(PE_SEED);
        let gaussian = Tensor::from_fn(&[2, c / 2], |_| {
            let v: f64 = StandardNormal.sample(&mut pe_rng);
            to_f32_exact(v)
        });
        let pe_gaussian = store.add("decoder.pe_gaussian", gaussian, false);
        let corner_embed = store.add("decoder.corner_embed", trunc_normal(rng, &[2, c], 1.0), t);
        let no_mask_embed = store.add("decoder.no_mask_embed", trunc_normal(rng, &[c], 0.02), t);
        let mask_token = store.add("decoder.mask_token", trunc_normal(rng, &[1, c], 1.0), t);
        let blocks = (0..cfg.depth)
            .map(|i| {
                let n = format!("decoder.blocks.{i}");
                TwoWayBlock {
                    self_attn: Attention::new(store, &format!("{n}.self_attn"), c, cfg.num_heads, 1, init, t, rng),
                    norm1: LayerNorm::new(store, &format!("{n}.norm1"), c, t),
                    cross_t2i: Attention::new(store, &format!("{n}.cross_t2i"), c, cfg.num_heads, 2, init, t, rng),
                    norm2: LayerNorm::new(store, &format!("{n}.norm2"), c, t),
                    mlp: Mlp::new(store, &format!("{n}.mlp"), c, cfg.mlp_dim, c, Activation::Relu, init, t, rng),
                    norm3: LayerNorm::new(store, &format!("{n}.norm3"), c, t),
                    cross_i2t: Attention::new(store, &format!("{n}.cross_i2t"), c, cfg.num_heads, 2, init, t, rng),
                    norm4: LayerNorm::new(store, &format!("{n}.norm4"), c, t),
                    skip_first_pe: i == 0,
                }
            })
            .collect();
        let final_attn = Attention::new(store, "decoder.final_attn", c, cfg.num_heads, 2, init, t, rng);
        let final_norm = LayerNorm::new(store, "decoder.final_norm", c, t);
        let (c4, c8) = (c / 4, c / 8);
        let up1 = Linear::new(store, "decoder.upscale1", c, 4 * c4, Init::FanIn, t, rng);
        let up_norm = LayerNorm::new(store, "decoder.upscale_norm", c4, t);
        let up2 = Linear::new(store, "decoder.upscale2", c4, 4 * c8, Init::FanIn, t, rng);
        let hyper1 = Linear::new(store, "decoder.hyper.0", c, c, Init::FanIn, t, rng);
        let hyper2 = Linear::new(store, "decoder.hyper.1", c, c, Init::FanIn, t, rng);
        let hyper3 = Linear::new(store, "decoder.hyper.2", c, c8, Init::FanIn, t, rng);
        let up_grid = 4 * grid;
        Ok(Self {
            cfg: cfg.clone(),
            embed_dim: c,
            grid,
            input_size,
            pe_gaussian,
            corner_embed,
            no_mask_embed,
            mask_token,
            blocks,
            final_attn,
            final_norm,
            up1,
            up_norm,
            up2,
            hyper1,
            hyper2,
            hyper3,
            pixel_shuffle1: Rc::new(pixel_shuffle_index(grid, grid, c4)),
            pixel_shuffle2: Rc::new(pixel_shuffle_index(2 * grid, 2 * grid, c8)),
            resize: Rc::new(bilinear_map(up_grid, up_grid, input_size, input_size)),
        })
    }

    /// Random-Fourier encoding of a point in `[0, 1]²`.
    fn fourier(&self, store: &ParamStore, x: f64, y: f64) -> Vec<f64> {
        let g = store.value(self.pe_gaussian).data();
        let half = self.embed_dim / 2;
        let (u, v) = (2.0 * x - 1.0, 2.0 * y - 1.0);
        let proj: Vec<f64> = (0..half).map(|j| 2.0 * PI * (u * g[j] + v * g[half + j])).collect();
        proj.iter().map(|p| p.sin()).chain(proj.iter().map(|p| p.cos())).collect()
    }

    /// Positional encoding of every image token center, `(grid², C)`.
    pub fn dense_pe(&self, store: &ParamStore) -> Tensor {
        let g = self.grid;
        let mut data = Vec::with_capacity(g * g * self.embed_dim);
        for y in 0..g {
            for x in 0..g {
                data.extend(self.fourier(store, (x as f64 + 0.5) / g as f64, (y as f64 + 0.5) / g as f64));
            }
        }
        Tensor::new(&[g * g, self.embed_dim], data).unwrap()
    }

    fn check_box(&self, bbox: &BBox) -> Result<()> {
        let s = self.input_size as f64;
        let coords = bbox.coords();
        if coords.iter().any(|&v| !(0.0..=s).contains(&v)) {
            return Err(Error::OutOfFrame {
                coords,
                size: self.input_size,
            });
        }
        Ok(())
    }

    /// Corner positional encodings (constant part of the prompt tokens).
    fn corner_pe(&self, store: &ParamStore, bbox: &BBox) -> Tensor {
        let s = self.input_size as f64;
        let mut data = self.fourier(store, bbox.x0 / s, bbox.y0 / s);
        data.extend(self.fourier(store, bbox.x1 / s, bbox.y1 / s));
        Tensor::new(&[2, self.embed_dim], data).unwrap()
    }

    pub fn encode_box_var(&self, ctx: &mut Ctx, bbox: &BBox) -> Result<Var> {
        self.check_box(bbox)?;
        let pe = ctx.constant(self.corner_pe(ctx.store(), bbox));
        let corners = ctx.p(self.corner_embed);
        Ok(ctx.graph.add(pe, corners))
    }

    pub fn encode_box(&self, store: &ParamStore, bbox: &BBox) -> Result<PromptEmbedding> {
        let mut ctx = Ctx::new(store);
        let v = self.encode_box_var(&mut ctx, bbox)?;
        Ok(PromptEmbedding {
            tokens: ctx.graph.value(v).clone(),
        })
    }

    /// Logits as an `(input_size², 1)` column.
    pub fn decode_var(&self, ctx: &mut Ctx, features: Var, prompt: Var) -> Result<Var> {
        let n = self.grid * self.grid;
        if ctx.graph.value(features).shape() != [n, self.embed_dim] {
            return Err(Error::ShapeMismatch(format!(
                "decoder expects ({n}, {}) image tokens, got {:?}",
                self.embed_dim,
                ctx.graph.value(features).shape()
            )));
        }
        if ctx.graph.value(prompt).shape() != [2, self.embed_dim] {
            return Err(Error::ShapeMismatch("prompt must be two C-dim tokens".into()));
        }
        let mask_token = ctx.p(self.mask_token);
        let tokens = ctx.graph.concat_rows(&[mask_token, prompt]);
        let no_mask = ctx.p(self.no_mask_embed);
        let mut keys = ctx.graph.add(features, no_mask);
        let key_pe = ctx.constant(self.dense_pe(ctx.store()));
        let mut queries = tokens;
        for block in &self.blocks {
            let (q, k) = block.forward(ctx, queries, keys, tokens, key_pe);
            queries = q;
            keys = k;
        }
        let q = ctx.graph.add(queries, tokens);
        let k = ctx.graph.add(keys, key_pe);
        let a = self.final_attn.forward(ctx, q, k, keys);
        let queries = ctx.graph.add(queries, a);
        let queries = self.final_norm.forward(ctx, queries);

        let g = self.grid;
        let (c4, c8) = (self.embed_dim / 4, self.embed_dim / 8);
        let u = self.up1.forward(ctx, keys);
        let u = ctx.graph.gather(u, self.pixel_shuffle1.clone(), &[4 * g * g, c4]);
        let u = self.up_norm.forward(ctx, u);
        let u = ctx.graph.gelu(u);
        let u = self.up2.forward(ctx, u);
        let u = ctx.graph.gather(u, self.pixel_shuffle2.clone(), &[16 * g * g, c8]);
        let upscaled = ctx.graph.gelu(u);

        let mask_out = ctx.graph.slice_rows(queries, 0, 1);
        let h = self.hyper1.forward(ctx, mask_out);
        let h = ctx.graph.relu(h);
        let h = self.hyper2.forward(ctx, h);
        let h = ctx.graph.relu(h);
        let hyper = self.hyper3.forward(ctx, h);

        let low = ctx.graph.matmul_nt(upscaled, hyper);
        Ok(ctx.graph.spatial(low, self.resize.clone()))
    }

    pub fn decode_mask(&self, store: &ParamStore, features: &FeatureMap, prompt: &PromptEmbedding) -> Result<MaskLogits> {
        let mut ctx = Ctx::new(store);
        let f = ctx.constant(features.to_tokens());
        let p = ctx.constant(prompt.tokens.clone());
        let out = self.decode_var(&mut ctx, f, p)?;
        let s = self.input_size;
        Ok(MaskLogits {
            logits: ctx.graph.value(out).clone().reshape(&[1, 1, s, s])?,
            threshold: 0.0,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompts::{coarse_bbox, BoxKind};

    fn decoder(store: &mut ParamStore) -> MaskDecoder {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        MaskDecoder::new(store, &DecoderConfig::for_dim(16), 16, 8, 32, true, &mut rng).unwrap()
    }

    fn features() -> FeatureMap {
        FeatureMap::new(Tensor::from_fn(&[1, 16, 8, 8], |i| ((i * 7919) % 101) as f64 / 50.0 - 1.0), None).unwrap()
    }

    #[test]
    fn box_encoding_is_deterministic_and_rate_sensitive() {
        let mut store = ParamStore::new();
        let d = decoder(&mut store);
        let b = coarse_bbox(32, 32, 0.95).unwrap();
        assert_eq!(d.encode_box(&store, &b).unwrap(), d.encode_box(&store, &b).unwrap());
        let rates: Vec<f64> = (0..10).map(|i| 0.55 + 0.045 * i as f64).collect();
        let embs: Vec<Tensor> = rates
            .iter()
            .map(|&r| d.encode_box(&store, &coarse_bbox(32, 32, r).unwrap()).unwrap().tokens)
            .collect();
        for i in 0..embs.len() {
            for j in i + 1..embs.len() {
                assert!(embs[i].max_abs_diff(&embs[j]) > 1e-6, "rates {} and {}", rates[i], rates[j]);
            }
        }
        let bad = BBox {
            x0: -1.0,
            y0: 0.0,
            x1: 4.0,
            y1: 4.0,
            kind: BoxKind::Fine,
            rate: None,
        };
        assert!(matches!(d.encode_box(&store, &bad), Err(Error::OutOfFrame { .. })));
    }

    #[test]
    fn swapping_corners_swaps_type_vectors() {
        let mut store = ParamStore::new();
        let d = decoder(&mut store);
        let b = BBox {
            x0: 4.0,
            y0: 6.0,
            x1: 20.0,
            y1: 30.0,
            kind: BoxKind::Fine,
            rate: None,
        };
        let swapped = BBox {
            x0: b.x1,
            y0: b.y1,
            x1: b.x0,
            y1: b.y0,
            ..b
        };
        let e1 = d.encode_box(&store, &b).unwrap().tokens;
        let e2 = d.encode_box(&store, &swapped).unwrap().tokens;
        let corners = store.value(store.id("decoder.corner_embed").unwrap()).data();
        for j in 0..16 {
            // same positional term, different type vector
            let pe_tl = e1.data()[j] - corners[j];
            let pe_tl_swapped = e2.data()[16 + j] - corners[16 + j];
            assert!((pe_tl - pe_tl_swapped).abs() < 1e-12);
        }
        assert!(e1.max_abs_diff(&e2) > 1e-3);
    }

    #[test]
    fn decode_shape_and_prompt_sensitivity() {
        let mut store = ParamStore::new();
        let d = decoder(&mut store);
        let f = features();
        let p1 = d.encode_box(&store, &coarse_bbox(32, 32, 0.95).unwrap()).unwrap();
        let p2 = d.encode_box(&store, &coarse_bbox(32, 32, 0.6).unwrap()).unwrap();
        let l1 = d.decode_mask(&store, &f, &p1).unwrap();
        let l2 = d.decode_mask(&store, &f, &p2).unwrap();
        assert_eq!(l1.logits.shape(), &[1, 1, 32, 32]);
        assert!(l1.logits.max_abs_diff(&l2.logits) > 0.0);
        assert_eq!(l1, d.decode_mask(&store, &f, &p1).unwrap());
    }

    #[test]
    fn binarize_conventions() {
        let l = MaskLogits {
            logits: Tensor::full(&[1, 1, 4, 4], -1.0),
            threshold: 0.0,
        };
        assert!(l.binarize().is_empty());
        assert_eq!(binarize(&l, f64::NEG_INFINITY).count(), 16);
        let ramp = MaskLogits {
            logits: Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64 - 8.0),
            threshold: 0.0,
        };
        let lo = binarize(&ramp, -2.0);
        let hi = binarize(&ramp, 3.0);
        for (a, b) in lo.data().iter().zip(hi.data()) {
            assert!(!b || *a, "higher threshold must give a subset");
        }
    }

    #[test]
    fn pixel_shuffle_places_subpixels() {
        let idx = pixel_shuffle_index(1, 2, 1);
        // out (2x4): row 0 = [p0.s0, p0.s1, p1.s0, p1.s1], row 1 = [p0.s2, p0.s3, p1.s2, p1.s3]
        assert_eq!(idx, vec![0, 1, 4, 5, 2, 3, 6, 7]);
    }
}
