//! Data ingestion and preprocessing: volume slicing, intensity scaling, non-zero
//! normalization, resizing, exemplar sampling, and the synthetic blob corpus.

mod io;
mod synthetic;

pub use io::{load_corpus, load_image_pair, load_image_dir, load_nifti, save_corpus, CorpusManifest};
pub use synthetic::{gen_synthetic, gen_synthetic_with_blobs, Ellipse, MIN_SYNTH_SIZE};

use std::collections::BTreeMap;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ms_adapter::bilinear_map;
use crate::types::{ImageTensor, Mask};

/// Window of the axial sliding-window tiler.
pub const DEFAULT_WINDOW: usize = 256;
/// CT/MRI intensity window mapped onto `[0, 255]`.
pub const DEFAULT_INTENSITY_RANGE: (f64, f64) = (-1000.0, 2000.0);

/// Preprocessing stages in their only valid order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    IntensityScale,
    NormalizeNonzero,
    Slice,
    Resize,
}

/// Rejects any stage list that is not a strictly increasing subsequence of the canonical order.
pub fn validate_stage_order(stages: &[Stage]) -> Result<()> {
    for pair in stages.windows(2) {
        if pair[1] <= pair[0] {
            return Err(Error::Config(format!(
                "preprocessing stage {:?} may not follow {:?}",
                pair[1], pair[0]
            )));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub dataset: String,
    pub volume: String,
    pub slice: Option<usize>,
    /// Top-left corner `(x, y)` of the tile inside its slice.
    pub tile: Option<(usize, usize)>,
    /// Millimetres per pixel at native resolution.
    pub spacing: Option<f64>,
    /// `(width, height)` before any resize.
    pub native_size: (usize, usize),
    /// Current size over native size.
    pub scale: f64,
    pub stages: Vec<Stage>,
    /// Set when non-zero normalization had no spread to divide by.
    pub degenerate_stats: bool,
}

impl SampleMeta {
    pub fn new(dataset: impl Into<String>, volume: impl Into<String>, native_size: (usize, usize)) -> Self {
        Self {
            dataset: dataset.into(),
            volume: volume.into(),
            slice: None,
            tile: None,
            spacing: None,
            native_size,
            scale: 1.0,
            stages: Vec::new(),
            degenerate_stats: false,
        }
    }

    /// Metadata of the `index`-th generated sample; each sample is its own group.
    pub fn synthetic(index: usize) -> Self {
        Self::new("synthetic", format!("synth-{index:05}"), (0, 0))
    }

    pub fn id(&self) -> String {
        let mut id = format!("{}/{}", self.dataset, self.volume);
        if let Some(z) = self.slice {
            id.push_str(&format!("/z{z}"));
        }
        if let Some((x, y)) = self.tile {
            id.push_str(&format!("/t{x}_{y}"));
        }
        id
    }

    pub fn push_stage(&mut self, stage: Stage) -> Result<()> {
        self.stages.push(stage);
        validate_stage_order(&self.stages).inspect_err(|_| {
            self.stages.pop();
        })
    }
}

/// One 3-channel image, its binary mask, and provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub image: ImageTensor,
    pub mask: Mask,
    pub meta: SampleMeta,
    /// Ground truth at native resolution, kept once the sample has been resized.
    pub native_mask: Option<Mask>,
}

impl SegSample {
    pub fn new(image: ImageTensor, mask: Mask, mut meta: SampleMeta) -> Result<Self> {
        if image.width() != mask.width() || image.height() != mask.height() {
            return Err(Error::ShapeMismatch(format!(
                "image {}x{} vs mask {}x{}",
                image.width(),
                image.height(),
                mask.width(),
                mask.height()
            )));
        }
        if meta.native_size == (0, 0) {
            meta.native_size = (mask.width(), mask.height());
        }
        Ok(Self {
            image,
            mask,
            meta,
            native_mask: None,
        })
    }

    /// Ground truth at the resolution metrics are reported in.
    pub fn native_ground_truth(&self) -> &Mask {
        self.native_mask.as_ref().unwrap_or(&self.mask)
    }
}

/// A dense 3-D scalar field indexed `(x, y, z)` with `x` fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub data: Vec<f64>,
    /// Voxel size in millimetres along x, y, z.
    pub spacing: Option<[f64; 3]>,
}

impl Volume {
    pub fn new(dims: [usize; 3], data: Vec<f64>) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::ShapeMismatch(format!("volume dims {dims:?} vs {} voxels", data.len())));
        }
        Ok(Self {
            dims,
            data,
            spacing: None,
        })
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        Self::new(dims, vec![0.0; dims.iter().product()]).unwrap()
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[x + self.dims[0] * (y + self.dims[1] * z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f64) {
        let i = x + self.dims[0] * (y + self.dims[1] * z);
        self.data[i] = v;
    }
}

/// Linear map of `[lo, hi]` onto `[0, 255]` with clipping.
pub fn intensity_scale(x: &[f64], range: (f64, f64)) -> Result<Vec<f64>> {
    let (lo, hi) = range;
    if lo == hi {
        return Err(Error::DegenerateRange(lo));
    }
    Ok(x.iter().map(|&v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0).collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
    /// No non-zero entries, or all of them equal; only the mean was removed.
    pub degenerate: bool,
}

/// Standardizes non-zero entries with their own mean and standard deviation; zeros stay zero.
pub fn normalize_nonzero(x: &[f64]) -> (Vec<f64>, NormStats) {
    let nz: Vec<f64> = x.iter().copied().filter(|&v| v != 0.0).collect();
    if nz.is_empty() {
        let stats = NormStats {
            mean: 0.0,
            std: 0.0,
            degenerate: true,
        };
        return (x.to_vec(), stats);
    }
    let n = nz.len() as f64;
    let mean = nz.iter().sum::<f64>() / n;
    let std = (nz.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let degenerate = std == 0.0;
    let out = x
        .iter()
        .map(|&v| match (v == 0.0, degenerate) {
            (true, _) => 0.0,
            (false, true) => v - mean,
            (false, false) => (v - mean) / std,
        })
        .collect();
    (out, NormStats { mean, std, degenerate })
}

/// Window origins along an axis of length `len`; the last window may overhang and is zero-padded.
pub fn tile_origins(len: usize, window: usize) -> Vec<usize> {
    (0..len.div_ceil(window)).map(|i| i * window).collect()
}

/// Cuts every axial slice into non-overlapping `window²` tiles and keeps those with foreground.
pub fn slice_volume(
    volume: &Volume,
    labels: &Volume,
    window: usize,
    dataset: &str,
    volume_id: &str,
) -> Result<Vec<SegSample>> {
    if volume.dims != labels.dims {
        return Err(Error::ShapeMismatch(format!(
            "volume {:?} vs labels {:?}",
            volume.dims, labels.dims
        )));
    }
    if window == 0 {
        return Err(Error::Config("window must be positive".into()));
    }
    let [nx, ny, nz] = volume.dims;
    let mut out = Vec::new();
    for z in 0..nz {
        for &ty in &tile_origins(ny, window) {
            for &tx in &tile_origins(nx, window) {
                let inside = |x: usize, y: usize| tx + x < nx && ty + y < ny;
                let mask = Mask::from_fn(window, window, |x, y| {
                    inside(x, y) && labels.get(tx + x, ty + y, z) != 0.0
                });
                if mask.is_empty() {
                    continue;
                }
                let image = ImageTensor::from_fn(3, window, window, |_, y, x| {
                    if inside(x, y) {
                        volume.get(tx + x, ty + y, z)
                    } else {
                        0.0
                    }
                });
                let mut meta = SampleMeta::new(dataset, volume_id, (window, window));
                meta.slice = Some(z);
                meta.tile = Some((tx, ty));
                meta.spacing = volume.spacing.map(|s| s[0]);
                meta.push_stage(Stage::Slice)?;
                out.push(SegSample::new(image, mask, meta)?);
            }
        }
    }
    Ok(out)
}

/// Volume preprocessing recipe applied before slicing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumePrep {
    /// Intensity window, `None` for data already in 8-bit range.
    pub intensity_range: Option<(f64, f64)>,
    pub normalize_nonzero: bool,
    pub window: usize,
}

impl Default for VolumePrep {
    fn default() -> Self {
        Self {
            intensity_range: Some(DEFAULT_INTENSITY_RANGE),
            normalize_nonzero: true,
            window: DEFAULT_WINDOW,
        }
    }
}

/// intensity_scale → normalize_nonzero → slice, with every applied stage recorded on the samples.
pub fn preprocess_volume(
    volume: &Volume,
    labels: &Volume,
    prep: &VolumePrep,
    dataset: &str,
    volume_id: &str,
) -> Result<Vec<SegSample>> {
    let mut v = volume.clone();
    let mut stages = Vec::new();
    if let Some(range) = prep.intensity_range {
        v.data = intensity_scale(&v.data, range)?;
        stages.push(Stage::IntensityScale);
    }
    let mut degenerate = false;
    if prep.normalize_nonzero {
        let (data, stats) = normalize_nonzero(&v.data);
        v.data = data;
        degenerate = stats.degenerate;
        stages.push(Stage::NormalizeNonzero);
    }
    let mut samples = slice_volume(&v, labels, prep.window, dataset, volume_id)?;
    for s in &mut samples {
        let mut all = stages.clone();
        all.extend(s.meta.stages.iter().copied());
        validate_stage_order(&all)?;
        s.meta.stages = all;
        s.meta.degenerate_stats = degenerate;
    }
    Ok(samples)
}

fn resize_channel(src: &[f64], h_in: usize, w_in: usize, size: usize) -> Vec<f64> {
    bilinear_map(h_in, w_in, size, size).apply(src, 1)
}

/// Nearest-neighbour resize with half-pixel alignment.
pub fn resize_mask(mask: &Mask, width: usize, height: usize) -> Mask {
    let (w_in, h_in) = (mask.width(), mask.height());
    let pick = |d: usize, n_in: usize, n_out: usize| (((d as f64 + 0.5) * n_in as f64 / n_out as f64) as usize).min(n_in - 1);
    Mask::from_fn(width, height, |x, y| mask.get(pick(x, w_in, width), pick(y, h_in, height)))
}

/// Bilinear image resize and nearest mask resize to `size²`; the native mask is retained.
pub fn resize_to_model(sample: &SegSample, size: usize) -> Result<SegSample> {
    let (w, h) = (sample.image.width(), sample.image.height());
    let mut meta = sample.meta.clone();
    meta.push_stage(Stage::Resize)?;
    if (w, h) == (size, size) {
        let mut out = sample.clone();
        out.meta = meta;
        return Ok(out);
    }
    let c = sample.image.channels();
    let mut data = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        data.extend(resize_channel(sample.image.channel(ch), h, w, size));
    }
    let image = ImageTensor::new(c, size, size, data)?;
    let mask = resize_mask(&sample.mask, size, size);
    meta.scale = size as f64 / meta.native_size.0 as f64;
    Ok(SegSample {
        image,
        mask,
        native_mask: Some(sample.native_ground_truth().clone()),
        meta,
    })
}

/// Training exemplar groups plus the evaluation remainder.
#[derive(Clone, Debug)]
pub struct ExemplarSet {
    /// One group per chosen volume (or image for 2-D data), in draw order.
    pub groups: Vec<Vec<SegSample>>,
    pub eval: Vec<SegSample>,
    pub n: usize,
    pub seed: u64,
}

impl ExemplarSet {
    pub fn train_samples(&self) -> Vec<SegSample> {
        self.groups.iter().flatten().cloned().collect()
    }

    pub fn train_volumes(&self) -> Vec<String> {
        self.groups.iter().filter_map(|g| g.first().map(|s| s.meta.volume.clone())).collect()
    }
}

/// Groups samples by `(dataset, volume)` in sorted key order.
pub fn group_by_volume(samples: &[SegSample]) -> Vec<Vec<SegSample>> {
    let mut groups: BTreeMap<(String, String), Vec<SegSample>> = BTreeMap::new();
    for s in samples {
        groups
            .entry((s.meta.dataset.clone(), s.meta.volume.clone()))
            .or_default()
            .push(s.clone());
    }
    groups.into_values().collect()
}

/// Draws `n` volume groups without replacement; everything else becomes the evaluation split.
pub fn sample_exemplars(samples: &[SegSample], n: usize, seed: u64) -> Result<ExemplarSet> {
    let mut groups: Vec<Option<Vec<SegSample>>> = group_by_volume(samples).into_iter().map(Some).collect();
    if n > groups.len() || n == 0 {
        return Err(Error::NotEnoughData {
            needed: n.max(1),
            available: groups.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen = index::sample(&mut rng, groups.len(), n).into_vec();
    let train = chosen.iter().map(|&i| groups[i].take().unwrap()).collect();
    let eval = groups.into_iter().flatten().flatten().collect();
    Ok(ExemplarSet {
        groups: train,
        eval,
        n,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn intensity_examples() {
        let y = intensity_scale(&[-1000.0, 2000.0, 500.0, -5000.0, 9000.0], DEFAULT_INTENSITY_RANGE).unwrap();
        assert_eq!(y, vec![0.0, 255.0, 127.5, 0.0, 255.0]);
        assert!(matches!(intensity_scale(&[1.0], (3.0, 3.0)), Err(Error::DegenerateRange(_))));
    }

    #[test]
    fn normalize_examples() {
        let (y, s) = normalize_nonzero(&[0.0, 2.0, 0.0, 4.0]);
        assert_eq!(y, vec![0.0, -1.0, 0.0, 1.0]);
        assert!(!s.degenerate);
        let (y, s) = normalize_nonzero(&[0.0; 5]);
        assert_eq!(y, vec![0.0; 5]);
        assert!(s.degenerate);
        let (y, s) = normalize_nonzero(&[0.0, 3.0, 3.0]);
        assert_eq!(y, vec![0.0, 0.0, 0.0]);
        assert!(s.degenerate);
    }

    #[test]
    fn stage_order() {
        use Stage::*;
        assert!(validate_stage_order(&[IntensityScale, NormalizeNonzero, Slice, Resize]).is_ok());
        assert!(validate_stage_order(&[Slice, Resize]).is_ok());
        assert!(validate_stage_order(&[Resize, Slice]).is_err());
        assert!(validate_stage_order(&[NormalizeNonzero, IntensityScale]).is_err());
        let mut m = SampleMeta::synthetic(0);
        m.push_stage(Resize).unwrap();
        assert!(m.push_stage(Resize).is_err());
        assert_eq!(m.stages, vec![Resize]);
    }

    #[test]
    fn tiling_arithmetic() {
        assert_eq!(tile_origins(512, 256), vec![0, 256]);
        assert_eq!(tile_origins(240, 256), vec![0]);
        assert_eq!(tile_origins(257, 256), vec![0, 256]);
    }

    #[test]
    fn nearest_round_trip_is_exact_for_integer_factors() {
        let m = Mask::from_fn(16, 16, |x, y| (x * 7 + y * 3) % 5 == 0);
        let back = resize_mask(&resize_mask(&m, 64, 64), 16, 16);
        assert_eq!(back, m);
    }
}
