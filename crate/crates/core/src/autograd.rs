//! A small tape-based reverse-mode differentiator over [`Tensor`]s.
//!
//! Every op records its inputs on a [`Graph`]; [`Graph::backward`] walks the
//! tape in reverse and accumulates gradients for nodes that require them.
//! All matrices are row-major with the trailing axis as columns, so token
//! sequences are `(tokens, channels)`.

use std::rc::Rc;

use crate::tensor::{matmul, matmul_nt, matmul_tn, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the right-hand operand of a binary op broadcasts onto the left one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Scalar,
    Row,
}

/// A fixed linear map between two spatial grids, applied identically to every channel.
///
/// Used for adaptive pooling and bilinear resizing: `out[o, c] = Σ w · in[i, c]`.
#[derive(Clone, Debug)]
pub struct SpatialMap {
    pub in_positions: usize,
    pub out_positions: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl SpatialMap {
    pub fn apply(&self, x: &[f64], channels: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.out_positions * channels];
        for &(o, i, w) in &self.entries {
            let src = &x[i * channels..(i + 1) * channels];
            let dst = &mut out[o * channels..(o + 1) * channels];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += w * s;
            }
        }
        out
    }

    fn apply_transpose(&self, g: &[f64], channels: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.in_positions * channels];
        for &(o, i, w) in &self.entries {
            let src = &g[o * channels..(o + 1) * channels];
            let dst = &mut out[i * channels..(i + 1) * channels];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += w * s;
            }
        }
        out
    }
}

enum Op {
    Leaf,
    Add(Var, Var, Bcast),
    Sub(Var, Var),
    Mul(Var, Var, Bcast),
    Scale(Var, f64),
    AddConst(Var),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    MeanRows(Var),
    Gather(Var, Rc<Vec<usize>>),
    Reshape(Var),
    Spatial(Var, Rc<SpatialMap>),
    Select(Var, usize),
    Sum(Var),
    Mean(Var),
    BceLogits(Var, Rc<Vec<f64>>),
    Dice(Var, Rc<Vec<f64>>, f64),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn gelu(x: f64) -> f64 {
    const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (K * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const K: f64 = 0.797_884_560_802_865_4;
    let u = K * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = K * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf whose gradient will be tracked.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn bcast(&self, a: Var, b: Var) -> Bcast {
        let (na, nb) = (self.value(a).numel(), self.value(b).numel());
        if na == nb {
            Bcast::Same
        } else if nb == 1 {
            Bcast::Scalar
        } else if nb == self.value(a).cols() {
            Bcast::Row
        } else {
            panic!(
                "cannot broadcast {:?} onto {:?}",
                self.value(b).shape(),
                self.value(a).shape()
            )
        }
    }

    fn binary(&self, a: Var, b: Var, kind: Bcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let av = self.value(a);
        let bv = self.value(b).data();
        let cols = av.cols();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = match kind {
                    Bcast::Same => bv[i],
                    Bcast::Scalar => bv[0],
                    Bcast::Row => bv[i % cols],
                };
                f(x, y)
            })
            .collect();
        Tensor::new(av.shape(), data).expect("shape preserved")
    }

    /// Element-wise sum; `b` may match `a`, be a scalar, or be a row vector.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let kind = self.bcast(a, b);
        let value = self.binary(a, b, kind, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b, kind), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).numel(), self.value(b).numel(), "sub needs equal shapes");
        let value = self.binary(a, b, Bcast::Same, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    /// Element-wise product; `b` may match `a`, be a scalar, or be a row vector.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let kind = self.bcast(a, b);
        let value = self.binary(a, b, kind, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b, kind), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(value, Op::AddConst(a), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.rows(), av.cols());
        let n = bv.cols();
        assert_eq!(bv.rows(), k, "matmul inner dims {:?} x {:?}", av.shape(), bv.shape());
        let value = Tensor::new(&[m, n], matmul(av.data(), bv.data(), m, k, n)).unwrap();
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `a @ bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.rows(), av.cols());
        let n = bv.rows();
        assert_eq!(bv.cols(), k, "matmul_nt inner dims {:?} x {:?}", av.shape(), bv.shape());
        let value = Tensor::new(&[m, n], matmul_nt(av.data(), bv.data(), m, k, n)).unwrap();
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMulNt(a, b), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        let rg = self.rg(a);
        self.push(value, Op::Gelu(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let cols = av.cols();
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(cols) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let value = Tensor::new(av.shape(), data).unwrap();
        let rg = self.rg(a);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    /// Layer normalization over the trailing axis with affine `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let cols = xv.cols();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        assert_eq!(g.len(), cols);
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let value = Tensor::new(xv.shape(), out).unwrap();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        let (rows, cols) = (av.rows(), av.cols());
        assert!(start + len <= cols);
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&av.data()[r * cols + start..r * cols + start + len]);
        }
        let value = Tensor::new(&[rows, len], data).unwrap();
        let rg = self.rg(a);
        self.push(value, Op::SliceCols(a, start), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows);
            for r in 0..rows {
                data[r * total + off..r * total + off + w]
                    .copy_from_slice(&pv.data()[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let value = Tensor::new(&[rows, total], data).unwrap();
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        let cols = av.cols();
        assert!(start + len <= av.rows());
        let data = av.data()[start * cols..(start + len) * cols].to_vec();
        let value = Tensor::new(&[len, cols], data).unwrap();
        let rg = self.rg(a);
        self.push(value, Op::SliceRows(a, start), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), cols);
            rows += pv.rows();
            data.extend_from_slice(pv.data());
        }
        let value = Tensor::new(&[rows, cols], data).unwrap();
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Mean over rows: `(n, c) -> (1, c)`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (rows, cols) = (av.rows(), av.cols());
        let mut data = vec![0.0; cols];
        for r in 0..rows {
            for (d, v) in data.iter_mut().zip(&av.data()[r * cols..(r + 1) * cols]) {
                *d += v;
            }
        }
        for d in data.iter_mut() {
            *d /= rows as f64;
        }
        let value = Tensor::new(&[1, cols], data).unwrap();
        let rg = self.rg(a);
        self.push(value, Op::MeanRows(a), rg)
    }

    /// `out[i] = a.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, a: Var, index: Rc<Vec<usize>>, shape: &[usize]) -> Var {
        let av = self.value(a).data();
        let data = index.iter().map(|&i| av[i]).collect();
        let value = Tensor::new(shape, data).expect("gather shape");
        let rg = self.rg(a);
        self.push(value, Op::Gather(a, index), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self.value(a).clone().reshape(shape).expect("reshape");
        let rg = self.rg(a);
        self.push(value, Op::Reshape(a), rg)
    }

    /// Apply a [`SpatialMap`] to a `(positions, channels)` matrix.
    pub fn spatial(&mut self, a: Var, map: Rc<SpatialMap>) -> Var {
        let av = self.value(a);
        let cols = av.cols();
        assert_eq!(av.rows(), map.in_positions, "spatial map input size");
        let value = Tensor::new(&[map.out_positions, cols], map.apply(av.data(), cols)).unwrap();
        let rg = self.rg(a);
        self.push(value, Op::Spatial(a, map), rg)
    }

    /// Pick one element as a scalar.
    pub fn select(&mut self, a: Var, index: usize) -> Var {
        let value = Tensor::scalar(self.value(a).data()[index]);
        let rg = self.rg(a);
        self.push(value, Op::Select(a, index), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).mean());
        let rg = self.rg(a);
        self.push(value, Op::Mean(a), rg)
    }

    /// Mean binary cross-entropy of `logits` against `target ∈ {0, 1}`.
    pub fn bce_with_logits(&mut self, logits: Var, target: Rc<Vec<f64>>) -> Var {
        let lv = self.value(logits).data();
        assert_eq!(lv.len(), target.len());
        let total: f64 = lv
            .iter()
            .zip(target.iter())
            .map(|(&z, &t)| softplus(z) - t * z)
            .sum();
        let value = Tensor::scalar(total / lv.len() as f64);
        let rg = self.rg(logits);
        self.push(value, Op::BceLogits(logits, target), rg)
    }

    /// Soft Dice loss `1 − (2Σpg + ε)/(Σp + Σg + ε)` on probabilities.
    pub fn dice_loss(&mut self, probs: Var, target: Rc<Vec<f64>>, eps: f64) -> Var {
        let pv = self.value(probs).data();
        assert_eq!(pv.len(), target.len());
        let inter: f64 = pv.iter().zip(target.iter()).map(|(p, g)| p * g).sum();
        let denom = pv.iter().sum::<f64>() + target.iter().sum::<f64>();
        let value = Tensor::scalar(1.0 - (2.0 * inter + eps) / (denom + eps));
        let rg = self.rg(probs);
        self.push(value, Op::Dice(probs, target, eps), rg)
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let lv = self.value(loss);
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b, kind) => {
                self.acc(grads, *a, || g.clone());
                self.acc(grads, *b, || self.reduce_bcast(g, *b, *kind));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, || g.clone());
                self.acc(grads, *b, || g.map(|v| -v));
            }
            Op::Mul(a, b, kind) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let cols = av.cols();
                self.acc(grads, *a, || {
                    let bd = bv.data();
                    let data = gd
                        .iter()
                        .enumerate()
                        .map(|(i, gv)| {
                            gv * match kind {
                                Bcast::Same => bd[i],
                                Bcast::Scalar => bd[0],
                                Bcast::Row => bd[i % cols],
                            }
                        })
                        .collect();
                    Tensor::new(av.shape(), data).unwrap()
                });
                self.acc(grads, *b, || {
                    let prod = Tensor::new(
                        av.shape(),
                        gd.iter().zip(av.data()).map(|(x, y)| x * y).collect(),
                    )
                    .unwrap();
                    self.reduce_bcast(&prod, *b, *kind)
                });
            }
            Op::Scale(a, s) => self.acc(grads, *a, || g.map(|v| v * s)),
            Op::AddConst(a) => self.acc(grads, *a, || g.clone()),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                self.acc(grads, *a, || {
                    Tensor::new(av.shape(), matmul_nt(gd, bv.data(), m, n, k)).unwrap()
                });
                self.acc(grads, *b, || {
                    Tensor::new(bv.shape(), matmul_tn(av.data(), gd, m, k, n)).unwrap()
                });
            }
            Op::MatMulNt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                self.acc(grads, *a, || {
                    Tensor::new(av.shape(), matmul(gd, bv.data(), m, n, k)).unwrap()
                });
                self.acc(grads, *b, || {
                    Tensor::new(bv.shape(), matmul_tn(gd, av.data(), m, n, k)).unwrap()
                });
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                self.acc(grads, *a, || {
                    let data = gd.iter().zip(av.data()).map(|(g, &x)| g * gelu_grad(x)).collect();
                    Tensor::new(av.shape(), data).unwrap()
                });
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                self.acc(grads, *a, || {
                    let data = gd
                        .iter()
                        .zip(av.data())
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect();
                    Tensor::new(av.shape(), data).unwrap()
                });
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                self.acc(grads, *a, || {
                    let data = gd.iter().zip(y.data()).map(|(g, &s)| g * s * (1.0 - s)).collect();
                    Tensor::new(y.shape(), data).unwrap()
                });
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let cols = y.cols();
                self.acc(grads, *a, || {
                    let mut out = vec![0.0; y.numel()];
                    for ((o, yr), gr) in out
                        .chunks_mut(cols)
                        .zip(y.data().chunks(cols))
                        .zip(gd.chunks(cols))
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            o[c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    Tensor::new(y.shape(), out).unwrap()
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let cols = node.value.cols();
                let rows = node.value.rows();
                let gam = self.value(*gamma).data();
                self.acc(grads, *gamma, || {
                    let mut out = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            out[c] += gd[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                    Tensor::new(self.value(*gamma).shape(), out).unwrap()
                });
                self.acc(grads, *beta, || {
                    let mut out = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            out[c] += gd[r * cols + c];
                        }
                    }
                    Tensor::new(self.value(*beta).shape(), out).unwrap()
                });
                self.acc(grads, *x, || {
                    let mut out = vec![0.0; rows * cols];
                    let nf = cols as f64;
                    for r in 0..rows {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for c in 0..cols {
                            let dh = gd[r * cols + c] * gam[c];
                            sum_dh += dh;
                            sum_dh_h += dh * xhat[r * cols + c];
                        }
                        for c in 0..cols {
                            let dh = gd[r * cols + c] * gam[c];
                            out[r * cols + c] = rstd[r]
                                * (dh - sum_dh / nf - xhat[r * cols + c] * sum_dh_h / nf);
                        }
                    }
                    Tensor::new(self.value(*x).shape(), out).unwrap()
                });
            }
            Op::SliceCols(a, start) => {
                let av = self.value(*a);
                let (rows, cols) = (av.rows(), av.cols());
                let len = node.value.cols();
                self.acc(grads, *a, || {
                    let mut out = vec![0.0; rows * cols];
                    for r in 0..rows {
                        out[r * cols + start..r * cols + start + len]
                            .copy_from_slice(&gd[r * len..(r + 1) * len]);
                    }
                    Tensor::new(av.shape(), out).unwrap()
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    self.acc(grads, p, || {
                        let mut out = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            out.extend_from_slice(&gd[r * total + off..r * total + off + w]);
                        }
                        Tensor::new(self.value(p).shape(), out).unwrap()
                    });
                    off += w;
                }
            }
            Op::SliceRows(a, start) => {
                let av = self.value(*a);
                let cols = av.cols();
                self.acc(grads, *a, || {
                    let mut out = vec![0.0; av.numel()];
                    out[start * cols..start * cols + gd.len()].copy_from_slice(gd);
                    Tensor::new(av.shape(), out).unwrap()
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    self.acc(grads, p, || {
                        Tensor::new(self.value(p).shape(), gd[off..off + n].to_vec()).unwrap()
                    });
                    off += n;
                }
            }
            Op::MeanRows(a) => {
                let av = self.value(*a);
                let rows = av.rows() as f64;
                let cols = av.cols();
                self.acc(grads, *a, || {
                    Tensor::from_fn(av.shape(), |i| gd[i % cols] / rows)
                });
            }
            Op::Gather(a, index) => {
                let av = self.value(*a);
                self.acc(grads, *a, || {
                    let mut out = vec![0.0; av.numel()];
                    for (gv, &i) in gd.iter().zip(index.iter()) {
                        out[i] += gv;
                    }
                    Tensor::new(av.shape(), out).unwrap()
                });
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.acc(grads, *a, || g.clone().reshape(&shape).unwrap());
            }
            Op::Spatial(a, map) => {
                let av = self.value(*a);
                let cols = av.cols();
                self.acc(grads, *a, || {
                    Tensor::new(av.shape(), map.apply_transpose(gd, cols)).unwrap()
                });
            }
            Op::Select(a, index) => {
                let av = self.value(*a);
                self.acc(grads, *a, || {
                    let mut out = Tensor::zeros(av.shape());
                    out.data_mut()[*index] = gd[0];
                    out
                });
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.acc(grads, *a, || Tensor::full(&shape, gd[0]));
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                let n = av.numel() as f64;
                self.acc(grads, *a, || Tensor::full(av.shape(), gd[0] / n));
            }
            Op::BceLogits(a, target) => {
                let av = self.value(*a);
                let n = av.numel() as f64;
                self.acc(grads, *a, || {
                    let data = av
                        .data()
                        .iter()
                        .zip(target.iter())
                        .map(|(&z, &t)| gd[0] * (sigmoid(z) - t) / n)
                        .collect();
                    Tensor::new(av.shape(), data).unwrap()
                });
            }
            Op::Dice(a, target, eps) => {
                let pv = self.value(*a);
                let inter: f64 = pv.data().iter().zip(target.iter()).map(|(p, g)| p * g).sum();
                let denom = pv.sum() + target.iter().sum::<f64>() + eps;
                let num = 2.0 * inter + eps;
                self.acc(grads, *a, || {
                    let data = target
                        .iter()
                        .map(|&t| -gd[0] * (2.0 * t * denom - num) / (denom * denom))
                        .collect();
                    Tensor::new(pv.shape(), data).unwrap()
                });
            }
        }
    }

    fn reduce_bcast(&self, g: &Tensor, b: Var, kind: Bcast) -> Tensor {
        let bshape = self.value(b).shape();
        match kind {
            Bcast::Same => g.clone().reshape(bshape).unwrap(),
            Bcast::Scalar => Tensor::full(bshape, g.sum()),
            Bcast::Row => {
                let cols = g.cols();
                let mut out = vec![0.0; cols];
                for row in g.data().chunks(cols) {
                    for (o, v) in out.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                Tensor::new(bshape, out).unwrap()
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce() -> Tensor) {
        if !self.rg(v) {
            return;
        }
        let contrib = f();
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&contrib),
            slot @ None => *slot = Some(contrib),
        }
    }
}
