//! Selection module: softmax weights over the two adapter streams plus a learnable bias pair.
//!
//! `𝓕 = (w1·F_f + b1) + (w2·F_p + b2)`, with `(w1, w2) = softmax(Linear(GAP(F_I^k)))`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{Init, Linear};
use crate::params::{Ctx, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::types::FeatureMap;

pub const SELECTOR_PREFIX: &str = "selector.";
pub const BIAS_INIT: [f64; 2] = [0.0, 1.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectorConfig {
    /// One decision layer and bias pair shared by every encoder layer.
    #[serde(default)]
    pub shared: bool,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        Self { shared: false }
    }
}

#[derive(Clone, Debug)]
pub struct SelectorState {
    pub decision: Linear,
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct Selector {
    pub cfg: SelectorConfig,
    states: Vec<SelectorState>,
    learnable_bias: bool,
}

impl Selector {
    /// Registers `selector.<k>.decision.*` (zero-initialized) and `selector.<k>.bias = (0, 1)`.
    ///
    /// Without a learnable bias the pair is pinned at `(0, 0)` and excluded from training.
    pub fn new(
        store: &mut ParamStore,
        cfg: &SelectorConfig,
        embed_dim: usize,
        num_layers: usize,
        learnable_bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let count = if cfg.shared { 1 } else { num_layers };
        let states = (0..count)
            .map(|k| {
                let name = if cfg.shared { "selector.shared".to_string() } else { format!("selector.{k}") };
                let decision = Linear::new(store, &format!("{name}.decision"), embed_dim, 2, Init::Zeros, true, rng);
                let init = if learnable_bias { BIAS_INIT } else { [0.0, 0.0] };
                let bias = store.add(format!("{name}.bias"), Tensor::new(&[2], init.to_vec()).unwrap(), learnable_bias);
                SelectorState { decision, bias }
            })
            .collect();
        Self {
            cfg: cfg.clone(),
            states,
            learnable_bias,
        }
    }

    pub fn learnable_bias(&self) -> bool {
        self.learnable_bias
    }

    pub fn state(&self, layer: usize) -> &SelectorState {
        if self.cfg.shared {
            &self.states[0]
        } else {
            &self.states[layer]
        }
    }

    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    /// `(1, 2)` softmax weights from the pooled layer features.
    pub fn select_weights_var(&self, ctx: &mut Ctx, layer: usize, f_in: Var) -> Result<Var> {
        if !ctx.graph.value(f_in).all_finite() {
            return Err(Error::NonFiniteInput);
        }
        let st = self.state(layer).clone();
        let pooled = ctx.graph.mean_rows(f_in);
        let logits = st.decision.forward(ctx, pooled);
        Ok(ctx.graph.softmax_rows(logits))
    }

    pub fn forward_var(&self, ctx: &mut Ctx, layer: usize, f_in: Var, f_f: Var, f_p: Var) -> Result<Var> {
        let w = self.select_weights_var(ctx, layer, f_in)?;
        let b = ctx.p(self.state(layer).bias);
        fuse_var(ctx, f_f, f_p, w, Some(b))
    }

    pub fn select_weights(&self, store: &ParamStore, f_in: &FeatureMap) -> Result<(f64, f64)> {
        let layer = f_in.layer.map(|k| k.saturating_sub(1)).unwrap_or(0);
        let mut ctx = Ctx::new(store);
        let x = ctx.constant(f_in.to_tokens());
        let w = self.select_weights_var(&mut ctx, layer, x)?;
        let d = ctx.graph.value(w).data();
        Ok((d[0], d[1]))
    }

    pub fn selector_forward(
        &self,
        store: &ParamStore,
        f_in: &FeatureMap,
        f_f: &FeatureMap,
        f_p: &FeatureMap,
    ) -> Result<FeatureMap> {
        let layer = f_in.layer.map(|k| k.saturating_sub(1)).unwrap_or(0);
        let mut ctx = Ctx::new(store);
        let x = ctx.constant(f_in.to_tokens());
        let a = ctx.constant(f_f.to_tokens());
        let b = ctx.constant(f_p.to_tokens());
        let y = self.forward_var(&mut ctx, layer, x, a, b)?;
        FeatureMap::from_tokens(ctx.graph.value(y), f_f.grid(), f_in.layer)
    }
}

/// `(w1·F_f + b1) + (w2·F_p + b2)` on token matrices; `w` is `(1, 2)` and `b` a 2-vector.
pub fn fuse_var(ctx: &mut Ctx, f_f: Var, f_p: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let (sa, sb) = (ctx.graph.value(f_f).shape(), ctx.graph.value(f_p).shape());
    if sa != sb {
        return Err(Error::ShapeMismatch(format!("F_f {sa:?} vs F_p {sb:?}")));
    }
    let g = &mut ctx.graph;
    let w1 = g.select(w, 0);
    let w2 = g.select(w, 1);
    let mut hf = g.mul(f_f, w1);
    let mut ms = g.mul(f_p, w2);
    if let Some(b) = b {
        let b1 = g.select(b, 0);
        let b2 = g.select(b, 1);
        hf = g.add(hf, b1);
        ms = g.add(ms, b2);
    }
    Ok(g.add(hf, ms))
}

/// Value-level fusion on feature maps.
pub fn fuse(f_f: &FeatureMap, f_p: &FeatureMap, w: (f64, f64), b: (f64, f64)) -> Result<FeatureMap> {
    if f_f.shape() != f_p.shape() {
        return Err(Error::ShapeMismatch(format!("F_f {:?} vs F_p {:?}", f_f.shape(), f_p.shape())));
    }
    let data = f_f
        .tensor()
        .data()
        .iter()
        .zip(f_p.tensor().data())
        .map(|(&a, &p)| (w.0 * a + b.0) + (w.1 * p + b.1))
        .collect();
    FeatureMap::new(Tensor::new(f_f.tensor().shape(), data)?, f_f.layer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn constant(c: usize, g: usize, v: f64) -> FeatureMap {
        FeatureMap::new(Tensor::full(&[1, c, g, g], v), Some(1)).unwrap()
    }

    fn selector(store: &mut ParamStore, bias: bool) -> Selector {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Selector::new(store, &SelectorConfig::default(), 4, 3, bias, &mut rng)
    }

    #[test]
    fn init_is_uniform_with_bias_zero_one() {
        let mut store = ParamStore::new();
        let s = selector(&mut store, true);
        assert_eq!(s.num_states(), 3);
        let x = FeatureMap::new(Tensor::from_fn(&[1, 4, 2, 2], |i| i as f64 - 7.0), Some(2)).unwrap();
        assert_eq!(s.select_weights(&store, &x).unwrap(), (0.5, 0.5));
        for k in 0..3 {
            assert_eq!(store.value(s.state(k).bias).data(), &BIAS_INIT);
        }
        let ff = constant(4, 2, 2.0);
        let fp = constant(4, 2, 4.0);
        let out = s.selector_forward(&store, &x, &ff, &fp).unwrap();
        // 0.5·2 + 0.5·4 + 1
        assert!(out.tensor().data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn softmax_of_ln3_logits() {
        let mut store = ParamStore::new();
        let s = selector(&mut store, true);
        let b = s.state(0).decision.bias;
        store.set_value(b, Tensor::new(&[2], vec![3f64.ln(), 0.0]).unwrap()).unwrap();
        let (w1, w2) = s.select_weights(&store, &constant(4, 2, 1.0)).unwrap();
        assert!((w1 - 0.75).abs() < 1e-15 && (w2 - 0.25).abs() < 1e-15);
    }

    #[test]
    fn fuse_examples() {
        let ff = constant(1, 1, 2.0);
        let fp = constant(1, 1, 4.0);
        assert_eq!(fuse(&ff, &fp, (0.5, 0.5), (0.0, 1.0)).unwrap().tensor().data(), &[4.0]);
        let a = FeatureMap::new(Tensor::from_fn(&[1, 2, 3, 3], |i| i as f64 * 0.3), None).unwrap();
        let p = FeatureMap::new(Tensor::from_fn(&[1, 2, 3, 3], |i| -(i as f64)), None).unwrap();
        assert_eq!(fuse(&a, &p, (1.0, 0.0), (0.0, 0.0)).unwrap(), a);
        let mixed = fuse(&a, &a, (0.3, 0.7), (0.0, 0.0)).unwrap();
        assert!(mixed.tensor().max_abs_diff(a.tensor()) < 1e-12);
        assert!(fuse(&a, &constant(2, 2, 0.0), (0.5, 0.5), (0.0, 0.0)).is_err());
    }

    #[test]
    fn rejects_non_finite() {
        let mut store = ParamStore::new();
        let s = selector(&mut store, true);
        let mut t = Tensor::zeros(&[1, 4, 2, 2]);
        t.data_mut()[3] = f64::NAN;
        let x = FeatureMap::new(t, Some(1)).unwrap();
        assert!(matches!(s.select_weights(&store, &x), Err(Error::NonFiniteInput)));
    }

    #[test]
    fn frozen_bias_variant() {
        let mut store = ParamStore::new();
        let s = selector(&mut store, false);
        assert!(!store.get(s.state(0).bias).trainable);
        assert_eq!(store.value(s.state(0).bias).data(), &[0.0, 0.0]);
    }
}
