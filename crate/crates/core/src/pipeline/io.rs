//! NIfTI volumes, 8-bit image/mask pairs, and the on-disk synthetic corpus.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use nifti::{IntoNdArray, NiftiObject, ReaderOptions};
use serde::{Deserialize, Serialize};

use super::{SampleMeta, SegSample, Volume};
use crate::error::{Error, Result};
use crate::types::{ImageTensor, Mask};

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::FileNotFound(path.to_path_buf()))
    }
}

/// Reads a 3-D NIfTI file (`.nii` or `.nii.gz`) into a volume with its voxel spacing.
pub fn load_nifti(path: &Path) -> Result<Volume> {
    require(path)?;
    let obj = ReaderOptions::new().read_file(path)?;
    let pixdim = obj.header().pixdim;
    let arr = obj.into_volume().into_ndarray::<f64>()?;
    let shape = arr.shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::ShapeMismatch(format!("expected a 3-D volume, got dims {shape:?}")));
    }
    let dims = [shape[0], shape[1], shape[2]];
    let mut data = Vec::with_capacity(dims.iter().product());
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                data.push(arr[[x, y, z].as_slice()]);
            }
        }
    }
    let mut vol = Volume::new(dims, data)?;
    let sp = [pixdim[1] as f64, pixdim[2] as f64, pixdim[3] as f64];
    if sp.iter().all(|&s| s > 0.0) {
        vol.spacing = Some(sp);
    }
    Ok(vol)
}

fn image_from_rgb(img: &RgbImage) -> ImageTensor {
    let (w, h) = img.dimensions();
    ImageTensor::from_fn(3, h as usize, w as usize, |c, y, x| {
        img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    })
}

fn mask_from_gray(img: &GrayImage) -> Mask {
    let (w, h) = img.dimensions();
    Mask::from_fn(w as usize, h as usize, |x, y| img.get_pixel(x as u32, y as u32)[0] > 127)
}

/// One 8-bit PNG/JPEG image and its mask; intensities map to `[0, 1]`, mask pixels above 127 are foreground.
pub fn load_image_pair(image_path: &Path, mask_path: &Path, dataset: &str, id: &str) -> Result<SegSample> {
    require(image_path)?;
    require(mask_path)?;
    let image = image_from_rgb(&image::open(image_path)?.to_rgb8());
    let mask = mask_from_gray(&image::open(mask_path)?.to_luma8());
    SegSample::new(image, mask, SampleMeta::new(dataset, id, (0, 0)))
}

/// Pairs every image in `images` with the mask in `masks` that has the same file stem.
pub fn load_image_dir(images: &Path, masks: &Path, dataset: &str) -> Result<Vec<SegSample>> {
    require(images)?;
    require(masks)?;
    let mut files: Vec<PathBuf> = fs::read_dir(images)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                Some("png" | "jpg" | "jpeg")
            )
        })
        .collect();
    files.sort();
    let mut out = Vec::with_capacity(files.len());
    for f in files {
        let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let mask = ["png", "jpg", "jpeg"]
            .iter()
            .map(|ext| masks.join(format!("{stem}.{ext}")))
            .find(|p| p.exists())
            .ok_or_else(|| Error::FileNotFound(masks.join(format!("{stem}.png"))))?;
        out.push(load_image_pair(&f, &mask, dataset, &stem)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub image: String,
    pub mask: String,
    pub meta: SampleMeta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub count: usize,
    pub size: usize,
    pub seed: Option<u64>,
    pub samples: Vec<CorpusEntry>,
}

fn to_rgb8(image: &ImageTensor) -> RgbImage {
    let (w, h) = (image.width() as u32, image.height() as u32);
    ImageBuffer::from_fn(w, h, |x, y| {
        let px = |c| (image.get(c, y as usize, x as usize) * 255.0).round().clamp(0.0, 255.0) as u8;
        Rgb([px(0), px(1), px(2)])
    })
}

fn to_gray8(mask: &Mask) -> GrayImage {
    ImageBuffer::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        Luma([if mask.get(x as usize, y as usize) { 255 } else { 0 }])
    })
}

/// Writes `images/NNNNN.png`, `masks/NNNNN.png`, and `manifest.json` under `dir`.
pub fn save_corpus(dir: &Path, samples: &[SegSample], seed: Option<u64>) -> Result<CorpusManifest> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let image = format!("images/{i:05}.png");
        let mask = format!("masks/{i:05}.png");
        to_rgb8(&s.image).save(dir.join(&image))?;
        to_gray8(&s.mask).save(dir.join(&mask))?;
        entries.push(CorpusEntry {
            image,
            mask,
            meta: s.meta.clone(),
        });
    }
    let manifest = CorpusManifest {
        count: samples.len(),
        size: samples.first().map(|s| s.image.width()).unwrap_or(0),
        seed,
        samples: entries,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_corpus(dir: &Path) -> Result<Vec<SegSample>> {
    let path = dir.join("manifest.json");
    require(&path)?;
    let manifest: CorpusManifest = serde_json::from_str(&fs::read_to_string(&path)?)?;
    manifest
        .samples
        .into_iter()
        .map(|e| {
            let image = image_from_rgb(&image::open(dir.join(&e.image))?.to_rgb8());
            let mask = mask_from_gray(&image::open(dir.join(&e.mask))?.to_luma8());
            SegSample::new(image, mask, e.meta)
        })
        .collect()
}
