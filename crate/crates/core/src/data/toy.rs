//! Procedural toy dataset: flat-colored "pedestrians" with exact parsing
//! masks, built so that cloth-changing retrieval is solvable from
//! non-clothing regions alone (head/skin colors and body proportions carry
//! the identity; clothing colors are outfit-specific).
//!
//! Per identity the figure geometry and head/skin colors are fixed; per
//! outfit the clothing colors change; per image only the background varies,
//! plus the camera assignment alternates. Masks are exact by construction:
//! every labeled pixel is written in the same loop as the image pixel.

use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::manifest::{load_manifest, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::rng::{derive, PURPOSE_TOY};

pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_HEAD: u8 = 1;
pub const LABEL_UPPER: u8 = 2;
pub const LABEL_PANTS: u8 = 3;
pub const LABEL_SKIN: u8 = 4;

/// Number of cameras the generator round-robins images over.
pub const TOY_CAMERAS: u32 = 2;

pub const MIN_HEIGHT: usize = 32;
pub const MIN_WIDTH: usize = 16;

#[derive(Clone, Debug)]
pub struct ToyConfig {
    pub n_ids: usize,
    pub outfits_per_id: usize,
    pub images_per_outfit: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            n_ids: 8,
            outfits_per_id: 2,
            images_per_outfit: 8,
            height: 64,
            width: 32,
            seed: 0,
        }
    }
}

/// Generated manifests. `train` holds every outfit except the last; `query`
/// is the held-out outfit seen by camera 0; `gallery` is everything else, so
/// cross-camera and cross-outfit ground truth both exist.
pub struct ToyDataset {
    pub dir: PathBuf,
    pub all: DatasetManifest,
    pub train: DatasetManifest,
    pub query: DatasetManifest,
    pub gallery: DatasetManifest,
}

#[derive(Clone, Copy)]
struct Rect {
    x0: u32,
    y0: u32,
    x1: u32,
    y1: u32,
}

struct Figure {
    head: Rect,
    torso: Rect,
    arms: [Rect; 2],
    pants: Rect,
    legs: [Rect; 2],
    head_color: [u8; 3],
    skin_color: [u8; 3],
}

fn hsv(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let i = h.floor() as i32 % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    let (r, g, b) = match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [
        (r * 255.0).round() as u8,
        (g * 255.0).round() as u8,
        (b * 255.0).round() as u8,
    ]
}

fn identity_figure(cfg: &ToyConfig, id: usize) -> Figure {
    let mut rng = derive(cfg.seed, &[PURPOSE_TOY, 1, id as u64]);
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let u = |rng: &mut ChaCha8Rng| rng.random::<f64>();

    let head_s = ((w * (0.30 + 0.10 * u(&mut rng))).round() as u32).max(3);
    let torso_w = ((w * (0.55 + 0.15 * u(&mut rng))).round() as u32).max(head_s + 2);
    let torso_h = ((h * (0.26 + 0.08 * u(&mut rng))).round() as u32).max(4);
    let pants_h = ((h * (0.18 + 0.08 * u(&mut rng))).round() as u32).max(3);
    let arm_w = ((cfg.width / 10) as u32).max(1);
    let leg_w = (torso_w / 4).max(2);

    let cx = cfg.width as u32 / 2;
    let top = ((cfg.height / 25) as u32).max(1);
    let head = Rect {
        x0: cx - head_s / 2,
        y0: top,
        x1: cx - head_s / 2 + head_s,
        y1: top + head_s,
    };
    let torso = Rect {
        x0: cx - torso_w / 2,
        y0: head.y1,
        x1: cx - torso_w / 2 + torso_w,
        y1: head.y1 + torso_h,
    };
    let arms = [
        Rect {
            x0: torso.x0.saturating_sub(arm_w),
            y0: torso.y0,
            x1: torso.x0,
            y1: torso.y1,
        },
        Rect {
            x0: torso.x1,
            y0: torso.y0,
            x1: (torso.x1 + arm_w).min(cfg.width as u32),
            y1: torso.y1,
        },
    ];
    let pants = Rect {
        x0: torso.x0 + 1,
        y0: torso.y1,
        x1: torso.x1 - 1,
        y1: torso.y1 + pants_h,
    };
    let bottom = (cfg.height as u32 * 24 / 25).max(pants.y1 + 2);
    let legs = [
        Rect {
            x0: pants.x0 + 1,
            y0: pants.y1,
            x1: pants.x0 + 1 + leg_w,
            y1: bottom,
        },
        Rect {
            x0: pants.x1.saturating_sub(1 + leg_w),
            y0: pants.y1,
            x1: pants.x1.saturating_sub(1),
            y1: bottom,
        },
    ];

    let base_hue = id as f64 * 360.0 / cfg.n_ids as f64;
    Figure {
        head,
        torso,
        arms,
        pants,
        legs,
        head_color: hsv(base_hue, 0.90, 0.95),
        skin_color: hsv(base_hue + 25.0, 0.35, 0.85),
    }
}

fn outfit_colors(cfg: &ToyConfig, id: usize, outfit: usize) -> ([u8; 3], [u8; 3]) {
    let mut rng = derive(cfg.seed, &[PURPOSE_TOY, 2, id as u64, outfit as u64]);
    let spacing = 360.0 / cfg.outfits_per_id as f64;
    let base: f64 = rng.random_range(0.0..360.0);
    let hue = base.rem_euclid(spacing) + outfit as f64 * spacing;
    let upper = hsv(hue, 0.85, 0.90);
    let pants = hsv(hue + 60.0, 0.80, 0.55);
    (upper, pants)
}

fn fill(img: &mut RgbImage, mask: &mut GrayImage, rect: Rect, color: [u8; 3], label: u8) {
    let (w, h) = img.dimensions();
    for y in rect.y0..rect.y1.min(h) {
        for x in rect.x0..rect.x1.min(w) {
            img.put_pixel(x, y, image::Rgb(color));
            mask.put_pixel(x, y, image::Luma([label]));
        }
    }
}

fn render(cfg: &ToyConfig, id: usize, outfit: usize, img_idx: usize) -> (RgbImage, GrayImage) {
    let (w, h) = (cfg.width as u32, cfg.height as u32);
    let mut rng = derive(
        cfg.seed,
        &[PURPOSE_TOY, 3, id as u64, outfit as u64, img_idx as u64],
    );
    let camera = img_idx as u32 % TOY_CAMERAS;
    let base: i32 = 30 + 25 * camera as i32 + rng.random_range(0..20);
    let mut img = RgbImage::new(w, h);
    let mut mask = GrayImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let n: i32 = rng.random_range(-8..=8);
            let v = (base + n).clamp(0, 255) as u8;
            img.put_pixel(x, y, image::Rgb([v, v, v]));
            mask.put_pixel(x, y, image::Luma([LABEL_BACKGROUND]));
        }
    }
    let fig = identity_figure(cfg, id);
    let (upper, pants) = outfit_colors(cfg, id, outfit);
    fill(&mut img, &mut mask, fig.head, fig.head_color, LABEL_HEAD);
    fill(&mut img, &mut mask, fig.torso, upper, LABEL_UPPER);
    for arm in fig.arms {
        fill(&mut img, &mut mask, arm, fig.skin_color, LABEL_SKIN);
    }
    fill(&mut img, &mut mask, fig.pants, pants, LABEL_PANTS);
    for leg in fig.legs {
        fill(&mut img, &mut mask, leg, fig.skin_color, LABEL_SKIN);
    }
    (img, mask)
}

/// Renders the dataset under `dir` and writes `all/train/query/gallery`
/// manifests. Deterministic in `cfg.seed`.
pub fn generate_toy_dataset(cfg: &ToyConfig, dir: &Path) -> Result<ToyDataset> {
    if cfg.n_ids < 2 || cfg.outfits_per_id < 2 {
        return Err(Error::InvalidConfig {
            msg: format!(
                "toy dataset needs n_ids >= 2 and outfits_per_id >= 2, got {} and {}",
                cfg.n_ids, cfg.outfits_per_id
            ),
        });
    }
    if cfg.images_per_outfit < 2 {
        return Err(Error::InvalidConfig {
            msg: "toy dataset needs images_per_outfit >= 2 for cross-camera ground truth"
                .to_string(),
        });
    }
    if cfg.height < MIN_HEIGHT || cfg.width < MIN_WIDTH {
        return Err(Error::ImageTooSmall {
            h: cfg.height,
            w: cfg.width,
            min_h: MIN_HEIGHT,
            min_w: MIN_WIDTH,
        });
    }

    let images_dir = dir.join("images");
    let masks_dir = dir.join("masks");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    std::fs::create_dir_all(&masks_dir).map_err(|e| Error::io(&masks_dir, e))?;

    let mut all_lines = String::new();
    let mut train_lines = String::new();
    let mut query_lines = String::new();
    let mut gallery_lines = String::new();
    let held_out = cfg.outfits_per_id - 1;

    for id in 0..cfg.n_ids {
        for outfit in 0..cfg.outfits_per_id {
            for img_idx in 0..cfg.images_per_outfit {
                let (img, mask) = render(cfg, id, outfit, img_idx);
                let camera = img_idx as u32 % TOY_CAMERAS;
                let stem = format!("p{id:03}_o{outfit}_c{camera}_i{img_idx:02}.png");
                let img_rel = format!("images/{stem}");
                let mask_rel = format!("masks/{stem}");
                let img_path = dir.join(&img_rel);
                let mask_path = dir.join(&mask_rel);
                img.save(&img_path).map_err(|e| Error::Image {
                    path: img_path.clone(),
                    source: e,
                })?;
                mask.save(&mask_path).map_err(|e| Error::Image {
                    path: mask_path.clone(),
                    source: e,
                })?;
                let clothes_id = (id * cfg.outfits_per_id + outfit) as u32;
                let line = format!("{img_rel}\t{id}\t{camera}\t{clothes_id}\t{mask_rel}\n");
                all_lines.push_str(&line);
                if outfit != held_out {
                    train_lines.push_str(&line);
                    gallery_lines.push_str(&line);
                } else if camera == 0 {
                    query_lines.push_str(&line);
                } else {
                    gallery_lines.push_str(&line);
                }
            }
        }
    }

    let write = |name: &str, body: &str| -> Result<PathBuf> {
        let p = dir.join(name);
        std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    };
    let all_p = write("all.tsv", &all_lines)?;
    let train_p = write("train.tsv", &train_lines)?;
    let query_p = write("query.tsv", &query_lines)?;
    let gallery_p = write("gallery.tsv", &gallery_lines)?;

    Ok(ToyDataset {
        dir: dir.to_path_buf(),
        all: load_manifest(&all_p, Split::Train)?,
        train: load_manifest(&train_p, Split::Train)?,
        query: load_manifest(&query_p, Split::Query)?,
        gallery: load_manifest(&gallery_p, Split::Gallery)?,
    })
}
