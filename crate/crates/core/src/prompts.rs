//! Bounding-box prompts: the image-agnostic coarse box, the tight box around a
//! ground-truth mask, and the four train/test prompt settings.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::SegSample;
use crate::types::Mask;

/// Default coarse-box rate.
pub const DEFAULT_BBOX_RATE: f64 = 0.95;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoxKind {
    Coarse,
    Fine,
}

/// `[x0, y0, x1, y1]` in pixels of the resized image; the upper edge is exclusive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    pub kind: BoxKind,
    /// Set only for coarse boxes.
    pub rate: Option<f64>,
}

impl BBox {
    pub fn coords(&self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Pixels whose centers fall inside the box.
    pub fn rasterize(&self, width: usize, height: usize) -> Mask {
        Mask::from_fn(width, height, |x, y| {
            let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
            cx > self.x0 && cx < self.x1 && cy > self.y0 && cy < self.y1
        })
    }
}

/// Validates a coarse-box rate against `(0.5, 1.0]`.
pub fn check_rate(rate: f64) -> Result<()> {
    if rate.is_nan() || rate > 1.0 {
        Err(Error::InvalidRate(rate))
    } else if rate <= 0.5 {
        Err(Error::DegenerateBox(rate))
    } else {
        Ok(())
    }
}

/// Centered box whose corners sit `offset = rate · width` from the origin.
///
/// The result does not depend on image content at all.
pub fn coarse_bbox(width: usize, height: usize, rate: f64) -> Result<BBox> {
    if width != height {
        return Err(Error::NonSquareImage { width, height });
    }
    check_rate(rate)?;
    let (w, h) = (width as f64, height as f64);
    let offset = rate * w;
    Ok(BBox {
        x0: w - offset,
        y0: h - offset,
        x1: offset,
        y1: offset,
        kind: BoxKind::Coarse,
        rate: Some(rate),
    })
}

/// Tight axis-aligned box around the foreground of `mask`.
pub fn fine_bbox(mask: &Mask) -> Result<BBox> {
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(x, y) {
                bounds = Some(match bounds {
                    None => (x, y, x, y),
                    Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                });
            }
        }
    }
    let (x0, y0, x1, y1) = bounds.ok_or(Error::EmptyMask)?;
    Ok(BBox {
        x0: x0 as f64,
        y0: y0 as f64,
        x1: (x1 + 1) as f64,
        y1: (y1 + 1) as f64,
        kind: BoxKind::Fine,
        rate: None,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PromptSetting {
    /// fine at train, fine at test
    A,
    /// fine at train, coarse at test
    B,
    /// coarse at train, fine at test
    C,
    /// coarse at train, coarse at test
    D,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Test,
}

impl PromptSetting {
    pub const ALL: [PromptSetting; 4] = [Self::A, Self::B, Self::C, Self::D];

    pub fn train_kind(self) -> BoxKind {
        match self {
            Self::A | Self::B => BoxKind::Fine,
            Self::C | Self::D => BoxKind::Coarse,
        }
    }

    pub fn test_kind(self) -> BoxKind {
        match self {
            Self::A | Self::C => BoxKind::Fine,
            Self::B | Self::D => BoxKind::Coarse,
        }
    }

    pub fn kind(self, phase: Phase) -> BoxKind {
        match phase {
            Phase::Train => self.train_kind(),
            Phase::Test => self.test_kind(),
        }
    }

    pub fn from_kinds(train: BoxKind, test: BoxKind) -> Self {
        match (train, test) {
            (BoxKind::Fine, BoxKind::Fine) => Self::A,
            (BoxKind::Fine, BoxKind::Coarse) => Self::B,
            (BoxKind::Coarse, BoxKind::Fine) => Self::C,
            (BoxKind::Coarse, BoxKind::Coarse) => Self::D,
        }
    }

    pub fn label(self) -> char {
        match self {
            Self::A => 'A',
            Self::B => 'B',
            Self::C => 'C',
            Self::D => 'D',
        }
    }
}

impl fmt::Display for PromptSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.label())
    }
}

impl FromStr for PromptSetting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "A" | "a" => Ok(Self::A),
            "B" | "b" => Ok(Self::B),
            "C" | "c" => Ok(Self::C),
            "D" | "d" => Ok(Self::D),
            other => Err(Error::Config(format!("unknown prompt setting `{other}`"))),
        }
    }
}

/// The box a given setting prescribes for this phase. Coarse boxes never read the mask.
pub fn make_prompt(setting: PromptSetting, phase: Phase, sample: &SegSample, rate: f64) -> Result<BBox> {
    match setting.kind(phase) {
        BoxKind::Fine => fine_bbox(&sample.mask),
        BoxKind::Coarse => coarse_bbox(sample.image.width(), sample.image.height(), rate),
    }
}
