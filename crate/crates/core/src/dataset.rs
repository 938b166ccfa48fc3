//! On-disk dataset layout and tensor conversion.
//!
//! A dataset directory holds three parallel subdirectories indexed by a
//! five-digit, zero-based counter:
//!
//! ```text
//! images/00000.png       8-bit RGB
//! masks/00000.png        8-bit grayscale, values 0/128/255
//! provenance/00000.json  generation record
//! ```
//!
//! Mask bytes map to class labels 0/1/2 (background, source, tampered);
//! any other byte is a validation error, not a silent remap.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::synth::{ForgerySample, Provenance};
use crate::tensor::{Shape4, Tensor4};

const MASK_BYTES: [u8; 3] = [0, 128, 255];

#[derive(Debug)]
pub struct DatasetSample {
    pub image: RgbImage,
    /// Row-major class labels, one of 0/1/2 per pixel.
    pub truth: Vec<u8>,
}

impl DatasetSample {
    pub fn size(&self) -> usize {
        self.image.width() as usize
    }
}

/// Class labels 0/1/2 to mask bytes 0/128/255.
pub fn encode_labels(labels: &[u8]) -> Result<Vec<u8>> {
    labels
        .iter()
        .map(|&l| {
            MASK_BYTES
                .get(l as usize)
                .copied()
                .ok_or_else(|| Error::Dataset(format!("class label {} outside 0..=2", l)))
        })
        .collect()
}

/// Mask bytes 0/128/255 back to class labels.
pub fn decode_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    bytes
        .iter()
        .map(|&b| {
            MASK_BYTES
                .iter()
                .position(|&m| m == b)
                .map(|p| p as u8)
                .ok_or_else(|| Error::Dataset(format!("mask byte {} is not 0/128/255", b)))
        })
        .collect()
}

fn stem(index: usize) -> String {
    format!("{:05}", index)
}

fn subpaths(dir: &Path, index: usize) -> (PathBuf, PathBuf, PathBuf) {
    let s = stem(index);
    (
        dir.join("images").join(format!("{s}.png")),
        dir.join("masks").join(format!("{s}.png")),
        dir.join("provenance").join(format!("{s}.json")),
    )
}

/// Write samples under `dir`, creating the three subdirectories.
pub fn write_dataset(dir: &Path, samples: &[ForgerySample]) -> Result<()> {
    for sub in ["images", "masks", "provenance"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(p.display().to_string(), e))?;
    }
    for (i, sample) in samples.iter().enumerate() {
        let (img, mask, prov) = subpaths(dir, i);
        sample
            .image
            .save(&img)
            .map_err(|e| Error::Image(format!("{}: {e}", img.display())))?;
        let bytes = encode_labels(&sample.truth)?;
        let gray = GrayImage::from_vec(sample.image.width(), sample.image.height(), bytes)
            .ok_or_else(|| Error::Dataset("mask length disagrees with image size".into()))?;
        gray.save(&mask)
            .map_err(|e| Error::Image(format!("{}: {e}", mask.display())))?;
        let json = serde_json::to_string_pretty(&sample.provenance)
            .map_err(|e| Error::Dataset(format!("provenance encode: {e}")))?;
        fs::write(&prov, json + "\n").map_err(|e| Error::io(prov.display().to_string(), e))?;
    }
    Ok(())
}

/// Number of samples implied by the images directory; indices must be
/// contiguous from zero.
pub fn sample_count(dir: &Path) -> Result<usize> {
    let images = dir.join("images");
    let entries = fs::read_dir(&images).map_err(|e| Error::io(images.display().to_string(), e))?;
    let mut indices = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(images.display().to_string(), e))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        let Some(idx) = name
            .strip_suffix(".png")
            .filter(|s| s.len() == 5)
            .and_then(|s| s.parse::<usize>().ok())
        else {
            return Err(Error::Dataset(format!(
                "unexpected file {} in images/ (want NNNNN.png)",
                name
            )));
        };
        indices.push(idx);
    }
    indices.sort_unstable();
    for (want, &got) in indices.iter().enumerate() {
        if want != got {
            return Err(Error::Dataset(format!(
                "images/ indices not contiguous: expected {:05}, found {:05}",
                want, got
            )));
        }
    }
    Ok(indices.len())
}

pub fn read_sample(dir: &Path, index: usize) -> Result<DatasetSample> {
    let (img_path, mask_path, _) = subpaths(dir, index);
    let image = image::open(&img_path)
        .map_err(|e| Error::Image(format!("{}: {e}", img_path.display())))?
        .to_rgb8();
    let mask = image::open(&mask_path)
        .map_err(|e| Error::Image(format!("{}: {e}", mask_path.display())))?
        .to_luma8();
    if mask.dimensions() != image.dimensions() {
        return Err(Error::Dataset(format!(
            "sample {:05}: mask {}x{} does not match image {}x{}",
            index,
            mask.width(),
            mask.height(),
            image.width(),
            image.height()
        )));
    }
    let truth = decode_labels(mask.as_raw())
        .map_err(|e| Error::Dataset(format!("sample {:05}: {e}", index)))?;
    Ok(DatasetSample { image, truth })
}

/// Read the whole directory; empty or malformed layouts are errors.
pub fn read_dataset(dir: &Path) -> Result<Vec<DatasetSample>> {
    let count = sample_count(dir)?;
    if count == 0 {
        return Err(Error::Dataset(format!(
            "no samples under {}",
            dir.display()
        )));
    }
    (0..count).map(|i| read_sample(dir, i)).collect()
}

pub fn read_provenance(dir: &Path, index: usize) -> Result<Provenance> {
    let (_, _, path) = subpaths(dir, index);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
}

/// One image as a (1, S, S, 3) tensor scaled to [0, 1]. Pixel order matches
/// the raw RGB buffer, so this is a straight elementwise rescale.
pub fn image_to_tensor<T: Scalar>(image: &RgbImage) -> Result<Tensor4<T>> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let data = image
        .as_raw()
        .iter()
        .map(|&v| T::from_f64(v as f64 / 255.0))
        .collect();
    Tensor4::from_vec(Shape4::new(1, h, w, 3), data)
}

/// Stack same-sized samples into a (B, S, S, 3) batch plus flat labels.
pub fn batch_tensors<T: Scalar>(samples: &[&DatasetSample]) -> Result<(Tensor4<T>, Vec<u8>)> {
    let first = samples.first().ok_or_else(|| Error::InvalidArgument {
        op: "batch_tensors",
        reason: "empty batch".into(),
    })?;
    let (w, h) = (first.image.width(), first.image.height());
    let mut data = Vec::with_capacity(samples.len() * (w * h * 3) as usize);
    let mut labels = Vec::with_capacity(samples.len() * (w * h) as usize);
    for s in samples {
        if s.image.dimensions() != (w, h) {
            return Err(Error::InvalidArgument {
                op: "batch_tensors",
                reason: format!(
                    "mixed sizes in batch: {}x{} vs {}x{}",
                    s.image.width(),
                    s.image.height(),
                    w,
                    h
                ),
            });
        }
        data.extend(s.image.as_raw().iter().map(|&v| T::from_f64(v as f64 / 255.0)));
        labels.extend_from_slice(&s.truth);
    }
    let images = Tensor4::from_vec(
        Shape4::new(samples.len(), h as usize, w as usize, 3),
        data,
    )?;
    Ok((images, labels))
}
