//! Image, feature-map, and mask containers.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A `(1, channels, height, width)` image with its declared value range.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    tensor: Tensor,
    pub value_range: (f64, f64),
}

impl ImageTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        let tensor = Tensor::new(&[1, channels, height, width], data)?;
        let (lo, hi) = tensor
            .data()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        Ok(Self {
            tensor,
            value_range: if lo <= hi { (lo, hi) } else { (0.0, 0.0) },
        })
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(channels, height, width, data).expect("consistent size")
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[3]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn data(&self) -> &[f64] {
        self.tensor.data()
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.height() * self.width();
        &self.tensor.data()[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.tensor.data()[(c * self.height() + y) * self.width() + x]
    }

    /// Non-overlapping `patch x patch` tiles as rows of a `(tokens, channels·patch²)` matrix.
    ///
    /// Tokens run row-major over the patch grid; each row is ordered `(channel, dy, dx)`.
    pub fn patchify(&self, patch: usize) -> Result<Tensor> {
        let (c, h, w) = (self.channels(), self.height(), self.width());
        if h % patch != 0 || w % patch != 0 {
            return Err(Error::ShapeMismatch(format!(
                "{h}x{w} image is not divisible into {patch}x{patch} patches"
            )));
        }
        let (gh, gw) = (h / patch, w / patch);
        let row_len = c * patch * patch;
        let mut out = vec![0.0; gh * gw * row_len];
        for py in 0..gh {
            for px in 0..gw {
                let base = (py * gw + px) * row_len;
                for ch in 0..c {
                    for dy in 0..patch {
                        for dx in 0..patch {
                            out[base + (ch * patch + dy) * patch + dx] =
                                self.get(ch, py * patch + dy, px * patch + dx);
                        }
                    }
                }
            }
        }
        Tensor::new(&[gh * gw, row_len], out)
    }
}

/// A `(1, channels, grid, grid)` feature map, optionally tagged with the encoder layer it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    tensor: Tensor,
    pub layer: Option<usize>,
}

impl FeatureMap {
    pub fn new(tensor: Tensor, layer: Option<usize>) -> Result<Self> {
        if tensor.rank() != 4 || tensor.shape()[0] != 1 || tensor.shape()[2] != tensor.shape()[3] {
            return Err(Error::ShapeMismatch(format!(
                "feature map must be (1, C, g, g), got {:?}",
                tensor.shape()
            )));
        }
        Ok(Self { tensor, layer })
    }

    /// Build from a `(g·g, C)` token matrix.
    pub fn from_tokens(tokens: &Tensor, grid: usize, layer: Option<usize>) -> Result<Self> {
        if tokens.rows() != grid * grid {
            return Err(Error::ShapeMismatch(format!(
                "{} tokens do not form a {grid}x{grid} grid",
                tokens.rows()
            )));
        }
        let t = tokens.transpose2().reshape(&[1, tokens.cols(), grid, grid])?;
        Self::new(t, layer)
    }

    /// The `(g·g, C)` token matrix view.
    pub fn to_tokens(&self) -> Tensor {
        let (c, g) = (self.channels(), self.grid());
        self.tensor
            .clone()
            .reshape(&[c, g * g])
            .expect("rank-4 feature map")
            .transpose2()
    }

    pub fn shape(&self) -> [usize; 4] {
        let s = self.tensor.shape();
        [s[0], s[1], s[2], s[3]]
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn grid(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        let g = self.grid();
        self.tensor.data()[(c * g + y) * g + x]
    }
}

/// A binary `height x width` mask.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "{width}x{height} mask needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![true; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn same_shape(&self, other: &Mask) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// 0/1 values as `f64`, row-major.
    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}
