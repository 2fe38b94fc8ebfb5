//! Clothing-aware and standard image augmentations.
//!
//! The clothes diversity augmentation permutes RGB channels inside the
//! parsing-mask clothing region only, enriching clothing color while leaving
//! texture and identity regions (head, skin) untouched. The erasure
//! augmentation zeroes the clothing region to build the black-clothing input
//! of the second stream. Geometric augmentations (flip, crop) transform image
//! and mask together; random erasing touches the image only.

use image::{GrayImage, Rgb, RgbImage};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::{ParsingMask, Sample};
use crate::error::{Error, Result};

/// Permutation of the RGB channels: output channel `c` reads source channel
/// `order[c]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ChannelPermutation {
    pub order: [usize; 3],
}

impl ChannelPermutation {
    pub const IDENTITY: Self = Self { order: [0, 1, 2] };

    /// All six channel orders, identity included.
    pub const ALL: [Self; 6] = [
        Self { order: [0, 1, 2] },
        Self { order: [0, 2, 1] },
        Self { order: [1, 0, 2] },
        Self { order: [1, 2, 0] },
        Self { order: [2, 0, 1] },
        Self { order: [2, 1, 0] },
    ];

    pub fn is_identity(&self) -> bool {
        self.order == [0, 1, 2]
    }

    pub fn apply(&self, px: [u8; 3]) -> [u8; 3] {
        [px[self.order[0]], px[self.order[1]], px[self.order[2]]]
    }
}

/// Uniform draw over all six channel orders.
pub fn sample_permutation(rng: &mut ChaCha8Rng) -> ChannelPermutation {
    ChannelPermutation::ALL[rng.random_range(0..6)]
}

#[derive(Clone, Debug)]
pub struct AugmentConfig {
    pub cda_enabled: bool,
    /// Probability a training sample receives the channel permutation.
    pub cda_prob: f64,
    pub flip_prob: f64,
    /// Zero-padding applied before the random crop back to the target size.
    pub crop_padding: u32,
    /// Crop target; `None` keeps the source dimensions.
    pub crop_size: Option<(u32, u32)>,
    pub erase_prob: f64,
    pub erase_area: (f64, f64),
    pub erase_aspect: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            cda_enabled: true,
            cda_prob: 1.0,
            flip_prob: 0.5,
            crop_padding: 4,
            crop_size: None,
            erase_prob: 0.5,
            erase_area: (0.02, 0.4),
            erase_aspect: (0.3, 3.33),
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("augment.cda_prob", self.cda_prob),
            ("augment.flip_prob", self.flip_prob),
            ("augment.erase_prob", self.erase_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidConfig {
                    msg: format!("{name} must lie in [0,1], got {p}"),
                });
            }
        }
        Ok(())
    }
}

fn require_aligned_mask(sample: &Sample) -> Result<&ParsingMask> {
    let mask = sample.mask_ref()?;
    sample.validate()?;
    Ok(mask)
}

/// Recolors the clothing region by permuting its RGB channels; all other
/// pixels and all metadata stay bit-identical.
pub fn apply_cda(sample: &Sample, perm: ChannelPermutation) -> Result<Sample> {
    let mask = require_aligned_mask(sample)?;
    let mut out = sample.clone();
    let (w, h) = sample.image.dimensions();
    for y in 0..h {
        for x in 0..w {
            if mask.is_clothing(x, y) {
                let px = sample.image.get_pixel(x, y).0;
                out.image.put_pixel(x, y, Rgb(perm.apply(px)));
            }
        }
    }
    Ok(out)
}

/// Sets every clothing-region pixel to black, producing the erased-stream
/// input.
pub fn erase_clothes(sample: &Sample) -> Result<Sample> {
    let mask = require_aligned_mask(sample)?;
    let mut out = sample.clone();
    let (w, h) = sample.image.dimensions();
    for y in 0..h {
        for x in 0..w {
            if mask.is_clothing(x, y) {
                out.image.put_pixel(x, y, Rgb([0, 0, 0]));
            }
        }
    }
    Ok(out)
}

fn flip_horizontal(sample: &mut Sample) {
    sample.image = image::imageops::flip_horizontal(&sample.image);
    if let Some(mask) = &mut sample.mask {
        mask.labels = image::imageops::flip_horizontal(&mask.labels);
    }
}

fn pad_and_crop(sample: &Sample, pad: u32, target: (u32, u32), dx: u32, dy: u32) -> Sample {
    let (w, h) = sample.image.dimensions();
    let (tw, th) = target;
    let mut img = RgbImage::new(tw, th);
    let mut msk = sample
        .mask
        .as_ref()
        .map(|m| (GrayImage::new(tw, th), m.clothing.clone()));
    for y in 0..th {
        for x in 0..tw {
            // coordinates in the padded frame, shifted by the crop offset
            let sx = (x + dx) as i64 - pad as i64;
            let sy = (y + dy) as i64 - pad as i64;
            if sx >= 0 && sy >= 0 && (sx as u32) < w && (sy as u32) < h {
                img.put_pixel(x, y, *sample.image.get_pixel(sx as u32, sy as u32));
                if let (Some((m, _)), Some(src)) = (&mut msk, &sample.mask) {
                    m.put_pixel(x, y, *src.labels.get_pixel(sx as u32, sy as u32));
                }
            }
        }
    }
    Sample {
        image: img,
        mask: msk.map(|(labels, clothing)| ParsingMask { labels, clothing }),
        ..sample.clone()
    }
}

/// Geometric augmentations shared by both streams: horizontal flip and
/// pad-then-crop, applied identically to image and mask.
pub fn flip_crop(sample: &Sample, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Result<Sample> {
    sample.validate()?;
    let (w, h) = sample.image.dimensions();
    let target = cfg.crop_size.unwrap_or((w, h));
    let (avail_w, avail_h) = (w + 2 * cfg.crop_padding, h + 2 * cfg.crop_padding);
    if target.0 > avail_w || target.1 > avail_h {
        return Err(Error::CropTooLarge {
            crop_h: target.1 as usize,
            crop_w: target.0 as usize,
            avail_h: avail_h as usize,
            avail_w: avail_w as usize,
        });
    }
    let mut out = sample.clone();
    if rng.random::<f64>() < cfg.flip_prob {
        flip_horizontal(&mut out);
    }
    let max_dx = avail_w - target.0;
    let max_dy = avail_h - target.1;
    let dx = if max_dx > 0 {
        rng.random_range(0..=max_dx)
    } else {
        0
    };
    let dy = if max_dy > 0 {
        rng.random_range(0..=max_dy)
    } else {
        0
    };
    if cfg.crop_padding == 0 && target == (w, h) {
        return Ok(out);
    }
    Ok(pad_and_crop(&out, cfg.crop_padding, target, dx, dy))
}

/// Random erasing on the image only; the mask is left untouched.
pub fn random_erase(sample: &Sample, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Sample {
    let mut out = sample.clone();
    if rng.random::<f64>() >= cfg.erase_prob {
        return out;
    }
    let (w, h) = out.image.dimensions();
    let area = (w * h) as f64;
    for _ in 0..100 {
        let target = area * rng.random_range(cfg.erase_area.0..cfg.erase_area.1);
        let aspect = rng.random_range(cfg.erase_aspect.0..cfg.erase_aspect.1);
        let eh = (target * aspect).sqrt().round() as u32;
        let ew = (target / aspect).sqrt().round() as u32;
        if eh == 0 || ew == 0 || eh >= h || ew >= w {
            continue;
        }
        let y0 = rng.random_range(0..=h - eh);
        let x0 = rng.random_range(0..=w - ew);
        for y in y0..y0 + eh {
            for x in x0..x0 + ew {
                out.image.put_pixel(x, y, Rgb([0, 0, 0]));
            }
        }
        break;
    }
    out
}

/// Flip + crop (image and mask together) followed by random erasing (image
/// only). Deterministic given the generator state.
pub fn standard_augment(
    sample: &Sample,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Sample> {
    cfg.validate()?;
    let geo = flip_crop(sample, cfg, rng)?;
    Ok(random_erase(&geo, cfg, rng))
}

/// Side-by-side preview row: raw, the five non-identity channel orders, then
/// the erased image.
pub fn preview_grid(sample: &Sample) -> Result<RgbImage> {
    let (w, h) = sample.image.dimensions();
    let gap = 2u32;
    let cols = 7u32;
    let mut grid = RgbImage::from_pixel(cols * w + (cols - 1) * gap, h, Rgb([255, 255, 255]));
    let mut paste = |img: &RgbImage, col: u32| {
        let x0 = col * (w + gap);
        for y in 0..h {
            for x in 0..w {
                grid.put_pixel(x0 + x, y, *img.get_pixel(x, y));
            }
        }
    };
    paste(&sample.image, 0);
    let mut col = 1;
    for perm in ChannelPermutation::ALL {
        if perm.is_identity() {
            continue;
        }
        paste(&apply_cda(sample, perm)?.image, col);
        col += 1;
    }
    paste(&erase_clothes(sample)?.image, col);
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ClothingLabels;
    use crate::rng::derive;
    use image::Luma;

    fn sample_with_clothing_band() -> Sample {
        // 8x8 image, rows 3..5 are "clothing"
        let mut img = RgbImage::new(8, 8);
        let mut mask = GrayImage::new(8, 8);
        for y in 0..8 {
            for x in 0..8 {
                img.put_pixel(x, y, Rgb([(10 + x) as u8, (20 + y) as u8, 30]));
                let label = if (3..5).contains(&y) { 2 } else { 0 };
                mask.put_pixel(x, y, Luma([label]));
            }
        }
        Sample {
            image: img,
            identity: 0,
            original_identity: 0,
            camera: 0,
            clothes_id: 0,
            mask: Some(ParsingMask {
                labels: mask,
                clothing: ClothingLabels::new([2]),
            }),
        }
    }

    #[test]
    fn identity_permutation_is_a_no_op() {
        let s = sample_with_clothing_band();
        let out = apply_cda(&s, ChannelPermutation::IDENTITY).unwrap();
        assert_eq!(out.image.as_raw(), s.image.as_raw());
    }

    #[test]
    fn permutation_semantics_match_the_definition() {
        let mut s = sample_with_clothing_band();
        s.image.put_pixel(1, 3, Rgb([10, 20, 30])); // clothing row
        s.image.put_pixel(1, 0, Rgb([10, 20, 30])); // non-clothing row
        let perm = ChannelPermutation { order: [2, 1, 0] }; // (R,G,B) -> (B,G,R)
        let out = apply_cda(&s, perm).unwrap();
        assert_eq!(out.image.get_pixel(1, 3).0, [30, 20, 10]);
        assert_eq!(out.image.get_pixel(1, 0).0, [10, 20, 30]);
    }

    #[test]
    fn cda_changes_exactly_the_masked_pixels_and_preserves_channel_multisets() {
        // per-pixel oracle over random images/masks/permutations
        let mut rng = derive(11, &[1]);
        for trial in 0..100 {
            let mut img = RgbImage::new(6, 7);
            let mut mask = GrayImage::new(6, 7);
            for y in 0..7 {
                for x in 0..6 {
                    img.put_pixel(x, y, Rgb([rng.random(), rng.random(), rng.random()]));
                    mask.put_pixel(x, y, Luma([rng.random_range(0..3)]));
                }
            }
            let s = Sample {
                image: img,
                identity: 0,
                original_identity: 0,
                camera: 0,
                clothes_id: 0,
                mask: Some(ParsingMask {
                    labels: mask,
                    clothing: ClothingLabels::new([2]),
                }),
            };
            let perm = sample_permutation(&mut rng);
            let out = apply_cda(&s, perm).unwrap();
            let m = s.mask.as_ref().unwrap();
            for y in 0..7 {
                for x in 0..6 {
                    let a = s.image.get_pixel(x, y).0;
                    let b = out.image.get_pixel(x, y).0;
                    if m.is_clothing(x, y) {
                        let expected = [a[perm.order[0]], a[perm.order[1]], a[perm.order[2]]];
                        assert_eq!(b, expected, "trial {trial}");
                        let mut sa = a.to_vec();
                        let mut sb = b.to_vec();
                        sa.sort_unstable();
                        sb.sort_unstable();
                        assert_eq!(sa, sb, "channel multiset must be preserved");
                    } else {
                        assert_eq!(a, b, "non-clothing pixel changed");
                    }
                }
            }
        }
    }

    #[test]
    fn erase_zeroes_exactly_the_clothing_region_and_is_idempotent() {
        let s = sample_with_clothing_band();
        let erased = erase_clothes(&s).unwrap();
        let m = s.mask.as_ref().unwrap();
        let mut zeroed = 0usize;
        for y in 0..8 {
            for x in 0..8 {
                if m.is_clothing(x, y) {
                    assert_eq!(erased.image.get_pixel(x, y).0, [0, 0, 0]);
                    zeroed += 1;
                } else {
                    assert_eq!(erased.image.get_pixel(x, y), s.image.get_pixel(x, y));
                }
            }
        }
        assert_eq!(zeroed, m.clothing_pixel_count());
        let twice = erase_clothes(&erased).unwrap();
        assert_eq!(twice.image.as_raw(), erased.image.as_raw());
    }

    #[test]
    fn erase_after_cda_equals_erase_alone() {
        let s = sample_with_clothing_band();
        for perm in ChannelPermutation::ALL {
            let via_cda = erase_clothes(&apply_cda(&s, perm).unwrap()).unwrap();
            let direct = erase_clothes(&s).unwrap();
            assert_eq!(via_cda.image.as_raw(), direct.image.as_raw());
        }
    }

    #[test]
    fn empty_clothing_region_means_no_change() {
        let mut s = sample_with_clothing_band();
        s.mask.as_mut().unwrap().clothing = ClothingLabels::new([9]);
        let out = erase_clothes(&s).unwrap();
        assert_eq!(out.image.as_raw(), s.image.as_raw());
    }

    #[test]
    fn flip_with_probability_one_is_an_involution() {
        let s = sample_with_clothing_band();
        let cfg = AugmentConfig {
            flip_prob: 1.0,
            crop_padding: 0,
            erase_prob: 0.0,
            ..Default::default()
        };
        let once = standard_augment(&s, &cfg, &mut derive(3, &[0])).unwrap();
        let twice = standard_augment(&once, &cfg, &mut derive(3, &[1])).unwrap();
        assert_eq!(twice.image.as_raw(), s.image.as_raw());
    }

    #[test]
    fn flip_mirrors_the_mask_clothing_coordinates() {
        let mut s = sample_with_clothing_band();
        // make the clothing region asymmetric
        s.mask.as_mut().unwrap().labels.put_pixel(0, 0, Luma([2]));
        let cfg = AugmentConfig {
            flip_prob: 1.0,
            crop_padding: 0,
            erase_prob: 0.0,
            ..Default::default()
        };
        let out = standard_augment(&s, &cfg, &mut derive(4, &[0])).unwrap();
        let (w, h) = s.image.dimensions();
        let src = s.mask.as_ref().unwrap();
        let dst = out.mask.as_ref().unwrap();
        for y in 0..h {
            for x in 0..w {
                assert_eq!(
                    src.is_clothing(x, y),
                    dst.is_clothing(w - 1 - x, y),
                    "clothing coordinates must mirror"
                );
            }
        }
    }

    #[test]
    fn all_zero_probabilities_and_full_frame_crop_is_identity() {
        let s = sample_with_clothing_band();
        let cfg = AugmentConfig {
            cda_enabled: false,
            cda_prob: 0.0,
            flip_prob: 0.0,
            crop_padding: 0,
            crop_size: None,
            erase_prob: 0.0,
            ..Default::default()
        };
        let out = standard_augment(&s, &cfg, &mut derive(5, &[0])).unwrap();
        assert_eq!(out.image.as_raw(), s.image.as_raw());
        assert_eq!(
            out.mask.as_ref().unwrap().labels.as_raw(),
            s.mask.as_ref().unwrap().labels.as_raw()
        );
    }

    #[test]
    fn oversized_crop_is_an_error() {
        let s = sample_with_clothing_band();
        let cfg = AugmentConfig {
            crop_padding: 0,
            crop_size: Some((20, 20)),
            ..Default::default()
        };
        assert!(matches!(
            standard_augment(&s, &cfg, &mut derive(6, &[0])),
            Err(Error::CropTooLarge { .. })
        ));
    }

    #[test]
    fn permutation_support_is_exactly_six() {
        use std::collections::HashSet;
        let set: HashSet<_> = ChannelPermutation::ALL.iter().map(|p| p.order).collect();
        assert_eq!(set.len(), 6);
        let mut rng = derive(7, &[0]);
        let drawn: HashSet<_> = (0..200)
            .map(|_| sample_permutation(&mut rng).order)
            .collect();
        assert_eq!(drawn.len(), 6, "all six permutations must be reachable");
    }

    #[test]
    fn fixed_rng_state_gives_the_same_permutation() {
        let a = sample_permutation(&mut derive(9, &[1, 2]));
        let b = sample_permutation(&mut derive(9, &[1, 2]));
        assert_eq!(a, b);
    }
}
