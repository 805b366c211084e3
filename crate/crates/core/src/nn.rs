//! Layer building blocks on top of [`Ctx`].

use rand::Rng;

use crate::autograd::Var;
use crate::params::{trunc_normal, uniform_fan_in, Ctx, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub enum Init {
    TruncNormal(f64),
    FanIn,
    Zeros,
}

impl Init {
    fn make(self, rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
        match self {
            Init::TruncNormal(std) => trunc_normal(rng, shape, std),
            Init::FanIn => uniform_fan_in(rng, shape, fan_in),
            Init::Zeros => Tensor::zeros(shape),
        }
    }
}

/// `y = x W + b` with `W: (in, out)`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
        trainable: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            init.make(rng, &[in_dim, out_dim], in_dim),
            trainable,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]), trainable);
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let w = ctx.p(self.weight);
        let b = ctx.p(self.bias);
        let y = ctx.graph.matmul(x, w);
        ctx.graph.add(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub weight: ParamId,
    pub bias: ParamId,
}

pub const LN_EPS: f64 = 1e-6;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, trainable: bool) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), Tensor::full(&[dim], 1.0), trainable),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim]), trainable),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let g = ctx.p(self.weight);
        let b = ctx.p(self.bias);
        ctx.graph.layer_norm(x, g, b, LN_EPS)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Relu,
}

/// Two-layer perceptron `in -> hidden -> out`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub act: Activation,
}

impl Mlp {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        act: Activation,
        init: Init,
        trainable: bool,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), in_dim, hidden, init, trainable, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, out_dim, init, trainable, rng),
            act,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let h = self.fc1.forward(ctx, x);
        let h = match self.act {
            Activation::Gelu => ctx.graph.gelu(h),
            Activation::Relu => ctx.graph.relu(h),
        };
        self.fc2.forward(ctx, h)
    }
}

/// Multi-head scaled dot-product attention with an optional internal width reduction.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub internal: usize,
}

impl Attention {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        downsample: usize,
        init: Init,
        trainable: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let internal = dim / downsample;
        assert!(internal % heads == 0, "heads must divide the attention width");
        Self {
            q: Linear::new(store, &format!("{name}.q"), dim, internal, init, trainable, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, internal, init, trainable, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, internal, init, trainable, rng),
            out: Linear::new(store, &format!("{name}.out"), internal, dim, init, trainable, rng),
            heads,
            internal,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, q: Var, k: Var, v: Var) -> Var {
        let q = self.q.forward(ctx, q);
        let k = self.k.forward(ctx, k);
        let v = self.v.forward(ctx, v);
        let dh = self.internal / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = ctx.graph.slice_cols(q, h * dh, dh);
            let kh = ctx.graph.slice_cols(k, h * dh, dh);
            let vh = ctx.graph.slice_cols(v, h * dh, dh);
            let s = ctx.graph.matmul_nt(qh, kh);
            let s = ctx.graph.scale(s, scale);
            let p = ctx.graph.softmax_rows(s);
            outs.push(ctx.graph.matmul(p, vh));
        }
        let o = if outs.len() == 1 {
            outs[0]
        } else {
            ctx.graph.concat_cols(&outs)
        };
        self.out.forward(ctx, o)
    }
}
