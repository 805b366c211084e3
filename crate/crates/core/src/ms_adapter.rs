//! Multi-scale features adapter: channel gating, a four-level adaptive
//! average-pooling pyramid, bilinear upsampling, and a per-channel projection.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{SpatialMap, Var};
use crate::error::{Error, Result};
use crate::nn::{Init, Linear};
use crate::params::{Ctx, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::types::FeatureMap;

pub const MSFA_PREFIX: &str = "msfa.";
pub const PYRAMID_SIZES: [usize; 4] = [1, 2, 4, 8];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamSharing {
    Shared,
    Independent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MsfaConfig {
    pub channel_reduction: usize,
    pub per_layer: ParamSharing,
}

impl Default for MsfaConfig {
    fn default() -> Self {
        Self {
            channel_reduction: 4,
            per_layer: ParamSharing::Shared,
        }
    }
}

/// Adaptive average pooling from `g x g` to `s x s`; bin `i` covers `[⌊i·g/s⌋, ⌊(i+1)·g/s⌋)`.
pub fn adaptive_pool_map(g: usize, s: usize) -> SpatialMap {
    let bins: Vec<(usize, usize)> = (0..s).map(|i| (i * g / s, ((i + 1) * g / s).max(i * g / s + 1))).collect();
    let mut entries = Vec::new();
    for (oy, &(y0, y1)) in bins.iter().enumerate() {
        for (ox, &(x0, x1)) in bins.iter().enumerate() {
            let w = 1.0 / ((y1 - y0) * (x1 - x0)) as f64;
            for y in y0..y1 {
                for x in x0..x1 {
                    entries.push((oy * s + ox, y * g + x, w));
                }
            }
        }
    }
    SpatialMap {
        in_positions: g * g,
        out_positions: s * s,
        entries,
    }
}

/// 1-D bilinear weights with half-pixel centers (no corner alignment).
fn linear_taps(n_in: usize, n_out: usize) -> Vec<[(usize, f64); 2]> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let t = src - i0 as f64;
            [(i0, 1.0 - t), (i1, t)]
        })
        .collect()
}

/// Bilinear resize from `h_in x w_in` to `h_out x w_out`, half-pixel aligned.
pub fn bilinear_map(h_in: usize, w_in: usize, h_out: usize, w_out: usize) -> SpatialMap {
    let ty = linear_taps(h_in, h_out);
    let tx = linear_taps(w_in, w_out);
    let mut entries = Vec::with_capacity(h_out * w_out * 4);
    for (oy, ys) in ty.iter().enumerate() {
        for (ox, xs) in tx.iter().enumerate() {
            for &(iy, wy) in ys {
                for &(ix, wx) in xs {
                    let w = wy * wx;
                    if w != 0.0 {
                        entries.push((oy * w_out + ox, iy * w_in + ix, w));
                    }
                }
            }
        }
    }
    SpatialMap {
        in_positions: h_in * w_in,
        out_positions: h_out * w_out,
        entries,
    }
}

#[derive(Clone, Debug)]
struct MsfaParams {
    fc1: Linear,
    fc2: Linear,
    proj_scale: ParamId,
    proj_bias: ParamId,
}

impl MsfaParams {
    fn new(store: &mut ParamStore, prefix: &str, c: usize, r: usize, rng: &mut impl Rng) -> Self {
        let hidden = (c / r).max(1);
        Self {
            fc1: Linear::new(store, &format!("{prefix}channel.fc1"), c, hidden, Init::FanIn, true, rng),
            fc2: Linear::new(store, &format!("{prefix}channel.fc2"), hidden, c, Init::FanIn, true, rng),
            proj_scale: store.add(format!("{prefix}proj.weight"), Tensor::full(&[c], 0.25), true),
            proj_bias: store.add(format!("{prefix}proj.bias"), Tensor::zeros(&[c]), true),
        }
    }
}

#[derive(Clone, Debug)]
pub struct MsAdapter {
    pub cfg: MsfaConfig,
    pub grid: usize,
    params: Vec<MsfaParams>,
    pool: Vec<Rc<SpatialMap>>,
    upsample: Vec<Rc<SpatialMap>>,
}

impl MsAdapter {
    pub fn new(
        store: &mut ParamStore,
        cfg: &MsfaConfig,
        grid: usize,
        embed_dim: usize,
        num_layers: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if grid < 8 {
            return Err(Error::GridTooSmall(grid));
        }
        if cfg.channel_reduction == 0 {
            return Err(Error::Config("channel_reduction must be >= 1".into()));
        }
        let params = match cfg.per_layer {
            ParamSharing::Shared => vec![MsfaParams::new(store, "msfa.", embed_dim, cfg.channel_reduction, rng)],
            ParamSharing::Independent => (0..num_layers)
                .map(|k| MsfaParams::new(store, &format!("msfa.{k}."), embed_dim, cfg.channel_reduction, rng))
                .collect(),
        };
        Ok(Self {
            cfg: cfg.clone(),
            grid,
            params,
            pool: PYRAMID_SIZES.iter().map(|&s| Rc::new(adaptive_pool_map(grid, s))).collect(),
            upsample: PYRAMID_SIZES.iter().map(|&s| Rc::new(bilinear_map(s, s, grid, grid))).collect(),
        })
    }

    fn layer_params(&self, layer: usize) -> &MsfaParams {
        match self.cfg.per_layer {
            ParamSharing::Shared => &self.params[0],
            ParamSharing::Independent => &self.params[layer],
        }
    }

    fn check(&self, ctx: &Ctx, x: Var) -> Result<()> {
        let rows = ctx.graph.value(x).rows();
        if rows != self.grid * self.grid {
            return Err(Error::ShapeMismatch(format!(
                "expected {} tokens, got {rows}",
                self.grid * self.grid
            )));
        }
        Ok(())
    }

    /// Sigmoid channel gate from the globally pooled features.
    pub fn gate_var(&self, ctx: &mut Ctx, layer: usize, x: Var) -> Result<Var> {
        self.check(ctx, x)?;
        let p = self.layer_params(layer).clone();
        let pooled = ctx.graph.mean_rows(x);
        let h = p.fc1.forward(ctx, pooled);
        let h = ctx.graph.relu(h);
        let s = p.fc2.forward(ctx, h);
        Ok(ctx.graph.sigmoid(s))
    }

    /// Channel-wise rescaling of `x` by a `(1, C)` gate.
    pub fn apply_gate(ctx: &mut Ctx, x: Var, gate: Var) -> Var {
        ctx.graph.mul(x, gate)
    }

    pub fn channel_process_var(&self, ctx: &mut Ctx, layer: usize, x: Var) -> Result<Var> {
        let gate = self.gate_var(ctx, layer, x)?;
        Ok(Self::apply_gate(ctx, x, gate))
    }

    pub fn pyramid_pool_var(&self, ctx: &mut Ctx, x: Var) -> Result<[Var; 4]> {
        self.check(ctx, x)?;
        Ok(std::array::from_fn(|i| ctx.graph.spatial(x, self.pool[i].clone())))
    }

    /// Upsample every level to the grid, sum, then apply the per-channel projection.
    pub fn fuse_pyramid_var(&self, ctx: &mut Ctx, layer: usize, levels: &[Var; 4]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for (i, &lvl) in levels.iter().enumerate() {
            let s = PYRAMID_SIZES[i];
            if ctx.graph.value(lvl).rows() != s * s {
                return Err(Error::ShapeMismatch(format!("pyramid level {i} is not {s}x{s}")));
            }
            let up = ctx.graph.spatial(lvl, self.upsample[i].clone());
            acc = Some(match acc {
                None => up,
                Some(a) => ctx.graph.add(a, up),
            });
        }
        let p = self.layer_params(layer);
        let (scale, bias) = (ctx.p(p.proj_scale), ctx.p(p.proj_bias));
        let y = ctx.graph.mul(acc.expect("four levels"), scale);
        Ok(ctx.graph.add(y, bias))
    }

    /// `F_p^k` from `F_I^k`.
    pub fn forward_var(&self, ctx: &mut Ctx, layer: usize, x: Var) -> Result<Var> {
        let gated = self.channel_process_var(ctx, layer, x)?;
        let levels = self.pyramid_pool_var(ctx, gated)?;
        self.fuse_pyramid_var(ctx, layer, &levels)
    }

    pub fn channel_process(&self, store: &ParamStore, feature: &FeatureMap) -> Result<FeatureMap> {
        let mut ctx = Ctx::new(store);
        let x = ctx.constant(feature.to_tokens());
        let y = self.channel_process_var(&mut ctx, 0, x)?;
        FeatureMap::from_tokens(ctx.graph.value(y), self.grid, feature.layer)
    }

    pub fn msfa_forward(&self, store: &ParamStore, feature: &FeatureMap) -> Result<FeatureMap> {
        let layer = feature.layer.map(|k| k.saturating_sub(1)).unwrap_or(0);
        let mut ctx = Ctx::new(store);
        let x = ctx.constant(feature.to_tokens());
        let y = self.forward_var(&mut ctx, layer, x)?;
        FeatureMap::from_tokens(ctx.graph.value(y), self.grid, feature.layer)
    }
}

/// Adaptive average pooling of a feature map to the four pyramid sizes.
///
/// Each bin is summed pairwise and divided by its pixel count, so constant maps stay
/// exactly constant whenever the bin sizes are powers of two.
pub fn pyramid_pool(feature: &FeatureMap) -> Result<Vec<FeatureMap>> {
    let g = feature.grid();
    if g < 8 {
        return Err(Error::GridTooSmall(g));
    }
    let c = feature.channels();
    PYRAMID_SIZES
        .iter()
        .map(|&s| {
            let bins: Vec<(usize, usize)> = (0..s).map(|i| (i * g / s, (i + 1) * g / s)).collect();
            let mut data = Vec::with_capacity(c * s * s);
            let mut bin = Vec::new();
            for ch in 0..c {
                for &(y0, y1) in &bins {
                    for &(x0, x1) in &bins {
                        bin.clear();
                        for y in y0..y1 {
                            bin.extend((x0..x1).map(|x| feature.get(ch, y, x)));
                        }
                        data.push(pairwise_sum(&bin) / bin.len() as f64);
                    }
                }
            }
            FeatureMap::new(Tensor::new(&[1, c, s, s], data)?, feature.layer)
        })
        .collect()
}

fn pairwise_sum(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        n => {
            let (a, b) = v.split_at(n / 2);
            pairwise_sum(a) + pairwise_sum(b)
        }
    }
}

/// Bilinear-upsamples each level to `target`, sums them, and applies `scale·x + bias` per channel.
pub fn fuse_pyramid(levels: &[FeatureMap], target: usize, scale: &[f64], bias: &[f64]) -> Result<FeatureMap> {
    if levels.len() != 4 || levels.iter().zip(PYRAMID_SIZES).any(|(l, s)| l.grid() != s) {
        return Err(Error::ShapeMismatch("expected pyramid levels 1, 2, 4, 8".into()));
    }
    let c = levels[0].channels();
    if scale.len() != c || bias.len() != c {
        return Err(Error::ShapeMismatch("projection width differs from channels".into()));
    }
    let mut acc = vec![0.0; target * target * c];
    for lvl in levels {
        let s = lvl.grid();
        let up = bilinear_map(s, s, target, target).apply(lvl.to_tokens().data(), c);
        for (a, u) in acc.iter_mut().zip(up) {
            *a += u;
        }
    }
    for (i, v) in acc.iter_mut().enumerate() {
        *v = *v * scale[i % c] + bias[i % c];
    }
    FeatureMap::from_tokens(&Tensor::new(&[target * target, c], acc)?, target, levels[0].layer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fm(c: usize, g: usize, f: impl Fn(usize, usize, usize) -> f64) -> FeatureMap {
        let mut data = Vec::new();
        for ch in 0..c {
            for y in 0..g {
                for x in 0..g {
                    data.push(f(ch, y, x));
                }
            }
        }
        FeatureMap::new(Tensor::new(&[1, c, g, g], data).unwrap(), Some(1)).unwrap()
    }

    fn adapter(c: usize, g: usize) -> (ParamStore, MsAdapter) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = MsAdapter::new(&mut store, &MsfaConfig::default(), g, c, 2, &mut rng).unwrap();
        (store, a)
    }

    #[test]
    fn pooling_examples() {
        let x = fm(1, 2, |_, y, x| (y * 2 + x + 1) as f64);
        let map = adaptive_pool_map(2, 1);
        assert_eq!(map.apply(x.to_tokens().data(), 1), vec![2.5]);
        let f = fm(3, 8, |c, y, x| (c * 64 + y * 8 + x) as f64);
        let levels = pyramid_pool(&f).unwrap();
        assert_eq!(levels[3], f);
        let k = fm(2, 8, |_, _, _| 1.75);
        for l in pyramid_pool(&k).unwrap() {
            assert!(l.tensor().data().iter().all(|&v| v == 1.75));
        }
        assert!(matches!(pyramid_pool(&fm(1, 4, |_, _, _| 0.0)), Err(Error::GridTooSmall(4))));
    }

    #[test]
    fn fuse_constant_levels() {
        let levels: Vec<FeatureMap> = PYRAMID_SIZES.iter().map(|&s| fm(2, s, |_, _, _| 1.5)).collect();
        let out = fuse_pyramid(&levels, 12, &[1.0, 1.0], &[0.0, 0.0]).unwrap();
        assert_eq!(out.shape(), [1, 2, 12, 12]);
        assert!(out.tensor().data().iter().all(|&v| (v - 6.0).abs() < 1e-12));
        let zeros: Vec<FeatureMap> = PYRAMID_SIZES.iter().map(|&s| fm(2, s, |_, _, _| 0.0)).collect();
        let out = fuse_pyramid(&zeros, 8, &[0.3, 0.7], &[0.0, 0.0]).unwrap();
        assert!(out.tensor().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gate_extremes_and_constant_input() {
        let (store, a) = adapter(4, 8);
        let x = fm(4, 8, |c, y, x| (c + y * x) as f64 * 0.1);
        let mut ctx = Ctx::new(&store);
        let xv = ctx.constant(x.to_tokens());
        let ones = ctx.constant(Tensor::full(&[1, 4], 1.0));
        let y = MsAdapter::apply_gate(&mut ctx, xv, ones);
        assert_eq!(ctx.graph.value(y), &x.to_tokens());
        let zeros = ctx.constant(Tensor::zeros(&[1, 4]));
        let z = MsAdapter::apply_gate(&mut ctx, xv, zeros);
        assert!(ctx.graph.value(z).data().iter().all(|&v| v == 0.0));

        let k = fm(4, 8, |c, _, _| c as f64 - 1.5);
        let out = a.channel_process(&store, &k).unwrap();
        for c in 0..4 {
            let v0 = out.get(c, 0, 0);
            assert!((0..8).all(|y| (0..8).all(|x| out.get(c, y, x) == v0)));
        }
    }

    #[test]
    fn forward_shape() {
        let (store, a) = adapter(8, 16);
        let x = fm(8, 16, |c, y, x| ((c * 3 + y + 2 * x) as f64).cos());
        let out = a.msfa_forward(&store, &x).unwrap();
        assert_eq!(out.shape(), x.shape());
        let (_, small) = adapter(8, 8);
        assert_eq!(small.grid, 8);
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            MsAdapter::new(&mut s, &MsfaConfig::default(), 4, 8, 1, &mut rng),
            Err(Error::GridTooSmall(4))
        ));
    }

    #[test]
    fn bilinear_preserves_constants_and_identity() {
        let m = bilinear_map(3, 3, 7, 7);
        let out = m.apply(&[2.0; 9], 1);
        assert!(out.iter().all(|v| (v - 2.0).abs() < 1e-12));
        let id = bilinear_map(5, 5, 5, 5);
        let x: Vec<f64> = (0..25).map(|i| i as f64).collect();
        assert_eq!(id.apply(&x, 1), x);
    }
}
