//! Dataset model: samples, parsing masks, manifests and batch construction.

use std::collections::BTreeSet;
use std::path::Path;

use image::{GrayImage, RgbImage};

use crate::error::{Error, Result};

mod manifest;
mod sampler;
pub mod toy;

pub use manifest::{
    load_manifest, save_manifest, write_manifest, DatasetManifest, ManifestRecord, Split,
};
pub use sampler::{pk_sample_indices, IdentityBatch};

/// Semantic label classes designating cloth-related mask regions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClothingLabels(BTreeSet<u8>);

impl ClothingLabels {
    pub fn new(labels: impl IntoIterator<Item = u8>) -> Self {
        Self(labels.into_iter().collect())
    }

    pub fn contains(&self, label: u8) -> bool {
        self.0.contains(&label)
    }

    pub fn iter(&self) -> impl Iterator<Item = u8> + '_ {
        self.0.iter().copied()
    }
}

impl Default for ClothingLabels {
    /// Garment classes of the built-in label vocabulary, excluding shoes.
    fn default() -> Self {
        Self::new([toy::LABEL_UPPER, toy::LABEL_PANTS])
    }
}

/// Per-pixel semantic labeling aligned with a pedestrian image.
#[derive(Clone, Debug)]
pub struct ParsingMask {
    pub labels: GrayImage,
    pub clothing: ClothingLabels,
}

impl ParsingMask {
    pub fn is_clothing(&self, x: u32, y: u32) -> bool {
        self.clothing.contains(self.labels.get_pixel(x, y).0[0])
    }

    /// Number of clothing-labeled pixels.
    pub fn clothing_pixel_count(&self) -> usize {
        self.labels
            .pixels()
            .filter(|p| self.clothing.contains(p.0[0]))
            .count()
    }
}

/// One pedestrian image with identity, camera and outfit annotations.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: RgbImage,
    /// Dense training label.
    pub identity: u32,
    /// Label as it appeared in the source manifest.
    pub original_identity: u32,
    pub camera: u32,
    pub clothes_id: u32,
    /// Absent at inference time; required by mask-guided augmentation.
    pub mask: Option<ParsingMask>,
}

impl Sample {
    /// Checks the mask/image alignment invariant.
    pub fn validate(&self) -> Result<()> {
        if let Some(mask) = &self.mask {
            let (iw, ih) = self.image.dimensions();
            let (mw, mh) = mask.labels.dimensions();
            if (iw, ih) != (mw, mh) {
                return Err(Error::MaskMismatch {
                    img_w: iw,
                    img_h: ih,
                    mask_w: mw,
                    mask_h: mh,
                });
            }
        }
        Ok(())
    }

    pub fn mask_ref(&self) -> Result<&ParsingMask> {
        self.mask.as_ref().ok_or(Error::MaskRequired)
    }
}

/// A manifest together with its decoded images, held in memory.
pub struct LoadedDataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<Sample>,
}

impl LoadedDataset {
    pub fn load(manifest: DatasetManifest, clothing: &ClothingLabels) -> Result<Self> {
        Self::load_with_masks(manifest, clothing, true)
    }

    /// Loads images, optionally skipping mask decoding (inference needs none).
    pub fn load_with_masks(
        manifest: DatasetManifest,
        clothing: &ClothingLabels,
        with_masks: bool,
    ) -> Result<Self> {
        let mut samples = Vec::with_capacity(manifest.records.len());
        for rec in &manifest.records {
            let img_path = manifest.resolve(&rec.image_path);
            let image = open_rgb(&img_path)?;
            let mask = if with_masks {
                let mask_path = manifest.resolve(&rec.mask_path);
                Some(ParsingMask {
                    labels: open_gray(&mask_path)?,
                    clothing: clothing.clone(),
                })
            } else {
                None
            };
            let sample = Sample {
                image,
                identity: rec.identity,
                original_identity: rec.original_identity,
                camera: rec.camera,
                clothes_id: rec.clothes_id,
                mask,
            };
            sample.validate()?;
            samples.push(sample);
        }
        Ok(Self { manifest, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Identity-balanced batch of P identities with K samples each.
    pub fn pk_batch(&self, p: usize, k: usize, seed: u64) -> Result<IdentityBatch> {
        let indices = pk_sample_indices(&self.manifest, p, k, seed)?;
        let samples = indices.iter().map(|&i| self.samples[i].clone()).collect();
        let batch = IdentityBatch { samples, p, k };
        batch.validate()?;
        Ok(batch)
    }
}

pub(crate) fn open_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8())
}

pub(crate) fn open_gray(path: &Path) -> Result<GrayImage> {
    Ok(image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8())
}
