//! High-frequency adapter: FFT high-pass of the input image, a trainable patch
//! embedding of the result, and a small MLP turning it into a per-image clue.

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{Activation, Init, Linear, Mlp};
use crate::params::{Ctx, ParamStore};
use crate::types::{FeatureMap, ImageTensor};

pub const HFA_PREFIX: &str = "hfa.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HfaConfig {
    /// Side of the suppressed low-frequency square as a fraction of the shorter image side.
    pub tau: f64,
    pub hidden_dim: usize,
}

impl Default for HfaConfig {
    fn default() -> Self {
        Self {
            tau: 0.25,
            hidden_dim: 24,
        }
    }
}

impl HfaConfig {
    pub fn validate(&self) -> Result<()> {
        check_tau(self.tau)?;
        if self.hidden_dim == 0 {
            return Err(Error::Config("hfa hidden_dim must be >= 1".into()));
        }
        Ok(())
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidTau(tau))
    }
}

/// Half-width `h` of the suppressed square: signed frequencies with `|ky| <= h` and
/// `|kx| <= h` are removed. The square is centered on DC and conjugate-symmetric,
/// so the filtered image stays real.
pub fn suppressed_half_width(height: usize, width: usize, tau: f64) -> usize {
    let side = (tau * height.min(width) as f64).ceil() as usize;
    side / 2
}

/// Signed frequency of FFT bin `i` out of `n`.
fn signed_freq(i: usize, n: usize) -> i64 {
    if i <= n / 2 {
        i as i64
    } else {
        i as i64 - n as i64
    }
}

fn fft2(buf: &mut [Complex<f64>], h: usize, w: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let (row, col) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    for r in buf.chunks_mut(w) {
        row.process(r);
    }
    let mut column = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            column[y] = buf[y * w + x];
        }
        col.process(&mut column);
        for y in 0..h {
            buf[y * w + x] = column[y];
        }
    }
}

/// Per-channel high-pass: forward FFT, zero the centered low-frequency square, inverse FFT, real part.
pub fn extract_hfc(image: &ImageTensor, tau: f64) -> Result<ImageTensor> {
    check_tau(tau)?;
    let (c, h, w) = (image.channels(), image.height(), image.width());
    let half = suppressed_half_width(h, w, tau) as i64;
    let norm = 1.0 / (h * w) as f64;
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        let mut buf: Vec<Complex<f64>> =
            image.channel(ch).iter().map(|&v| Complex::new(v, 0.0)).collect();
        fft2(&mut buf, h, w, false);
        for y in 0..h {
            if signed_freq(y, h).abs() > half {
                continue;
            }
            for x in 0..w {
                if signed_freq(x, w).abs() <= half {
                    buf[y * w + x] = Complex::new(0.0, 0.0);
                }
            }
        }
        fft2(&mut buf, h, w, true);
        out.extend(buf.iter().map(|z| z.re * norm));
    }
    ImageTensor::new(c, h, w, out)
}

/// Trainable half of the adapter: the high-frequency patch embedding and the clue MLP.
#[derive(Clone, Debug)]
pub struct HfAdapter {
    pub cfg: HfaConfig,
    pub patch_size: usize,
    pub grid: usize,
    embed: Linear,
    mlp: Mlp,
}

impl HfAdapter {
    pub fn new(
        store: &mut ParamStore,
        cfg: &HfaConfig,
        patch_size: usize,
        grid: usize,
        embed_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let patch_dim = 3 * patch_size * patch_size;
        Ok(Self {
            cfg: cfg.clone(),
            patch_size,
            grid,
            embed: Linear::new(store, "hfa.embed", patch_dim, embed_dim, Init::FanIn, true, rng),
            mlp: Mlp::new(
                store,
                "hfa.mlp",
                embed_dim,
                cfg.hidden_dim,
                embed_dim,
                Activation::Gelu,
                Init::TruncNormal(0.02),
                true,
                rng,
            ),
        })
    }

    pub fn embed_var(&self, ctx: &mut Ctx, hf_image: &ImageTensor) -> Result<Var> {
        let expected = self.grid * self.patch_size;
        if hf_image.channels() != 3 || hf_image.height() != expected || hf_image.width() != expected {
            return Err(Error::ShapeMismatch(format!(
                "high-frequency image must be 3x{expected}x{expected}"
            )));
        }
        let patches = ctx.constant(hf_image.patchify(self.patch_size)?);
        Ok(self.embed.forward(ctx, patches))
    }

    /// `MLP(hf_embedding + image_embedding)` on `(tokens, C)` matrices.
    pub fn clue_var(&self, ctx: &mut Ctx, hf_embedding: Var, image_embedding: Var) -> Result<Var> {
        let (a, b) = (ctx.graph.value(hf_embedding).shape(), ctx.graph.value(image_embedding).shape());
        if a != b {
            return Err(Error::ShapeMismatch(format!("hf embedding {a:?} vs image embedding {b:?}")));
        }
        let sum = ctx.graph.add(hf_embedding, image_embedding);
        Ok(self.mlp.forward(ctx, sum))
    }

    /// Full adapter path from the raw image and its (frozen) patch embedding to `F_f`.
    pub fn forward_var(&self, ctx: &mut Ctx, image: &ImageTensor, image_embedding: Var) -> Result<Var> {
        let hf = extract_hfc(image, self.cfg.tau)?;
        let e = self.embed_var(ctx, &hf)?;
        self.clue_var(ctx, e, image_embedding)
    }

    pub fn hf_embed(&self, store: &ParamStore, hf_image: &ImageTensor) -> Result<FeatureMap> {
        let mut ctx = Ctx::new(store);
        let v = self.embed_var(&mut ctx, hf_image)?;
        FeatureMap::from_tokens(ctx.graph.value(v), self.grid, None)
    }

    pub fn hf_clue(
        &self,
        store: &ParamStore,
        hf_embedding: &FeatureMap,
        image_embedding: &FeatureMap,
    ) -> Result<FeatureMap> {
        if hf_embedding.shape() != image_embedding.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{:?} vs {:?}",
                hf_embedding.shape(),
                image_embedding.shape()
            )));
        }
        let mut ctx = Ctx::new(store);
        let a = ctx.constant(hf_embedding.to_tokens());
        let b = ctx.constant(image_embedding.to_tokens());
        let v = self.clue_var(&mut ctx, a, b)?;
        FeatureMap::from_tokens(ctx.graph.value(v), hf_embedding.grid(), None)
    }
}
