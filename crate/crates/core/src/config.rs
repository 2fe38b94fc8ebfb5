//! Run configuration: flat `key = value` text files layered over named
//! presets. Presets fully resolve every key; the file overrides individual
//! keys; unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::augment::AugmentConfig;
use crate::backbone::{BackboneConfig, BlockKind};
use crate::cam::CamConfig;
use crate::data::toy::ToyConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::trainer::{Schedule, Trainer};

pub const PRESETS: [&str; 6] = [
    "ltcc",
    "prcc",
    "vcclothes",
    "deepchange",
    "market1501",
    "toy",
];

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub preset: String,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub train_manifest: Option<PathBuf>,
    pub query_manifest: Option<PathBuf>,
    pub gallery_manifest: Option<PathBuf>,
    pub clothing_labels: Vec<u8>,
    pub input_hw: (usize, usize),
    pub block: BlockKind,
    pub stage_widths: [usize; 5],
    pub stage_depths: [usize; 4],
    pub last_stage_stride: usize,
    pub mcb_enabled: bool,
    pub mcb_taps: Vec<usize>,
    pub mcb_teacher_mode: bool,
    pub cam_enabled: bool,
    pub cam_reduction: usize,
    pub cam_counterfactual: bool,
    pub sac_enabled: bool,
    pub augment: AugmentConfig,
    pub weights: LossWeights,
    pub schedule: Schedule,
    pub weight_decay: f64,
    pub p: usize,
    pub k: usize,
    pub checkpoint_every: usize,
    pub dump_rankings: bool,
    pub toy: ToyConfig,
}

impl RunConfig {
    /// Fully resolved configuration for a named preset.
    pub fn preset(name: &str) -> Result<Self> {
        let full_scale = |lambda1: f64, lambda2: f64| RunConfig {
            preset: name.to_string(),
            seed: 0,
            out_dir: PathBuf::from("runs/out"),
            train_manifest: None,
            query_manifest: None,
            gallery_manifest: None,
            clothing_labels: vec![crate::data::toy::LABEL_UPPER, crate::data::toy::LABEL_PANTS],
            input_hw: (384, 192),
            block: BlockKind::Bottleneck,
            stage_widths: [64, 256, 512, 1024, 2048],
            stage_depths: [3, 4, 6, 3],
            last_stage_stride: 1,
            mcb_enabled: true,
            mcb_taps: vec![3, 4, 5],
            mcb_teacher_mode: false,
            cam_enabled: true,
            cam_reduction: 8,
            cam_counterfactual: true,
            sac_enabled: true,
            augment: AugmentConfig {
                crop_padding: 10,
                ..AugmentConfig::default()
            },
            weights: LossWeights {
                lambda1,
                lambda2,
                margin: 0.3,
            },
            schedule: Schedule::default(),
            weight_decay: 5e-4,
            p: 16,
            k: 8,
            checkpoint_every: 10,
            dump_rankings: false,
            toy: ToyConfig::default(),
        };
        match name {
            "ltcc" | "vcclothes" | "market1501" => Ok(full_scale(0.01, 0.1)),
            "prcc" => Ok(full_scale(0.05, 0.1)),
            "deepchange" => Ok(full_scale(0.01, 0.01)),
            "toy" => {
                let mut cfg = full_scale(0.01, 0.1);
                cfg.input_hw = (64, 32);
                cfg.block = BlockKind::Basic;
                cfg.stage_widths = [8, 16, 32, 64, 128];
                cfg.stage_depths = [1, 1, 1, 1];
                // stages 4 and 5 emit 4x2 maps at this input size, too small
                // for the 4x4 pyramid grid, so only stage 3 is tapped
                cfg.mcb_taps = vec![3];
                cfg.augment.crop_padding = 4;
                cfg.p = 4;
                cfg.k = 4;
                cfg.schedule = Schedule {
                    base_lr: 3.5e-3,
                    warmup_start: 3.5e-4,
                    warmup_epochs: 5,
                    decay_epochs: vec![50, 65],
                    decay_factor: 10.0,
                    total_epochs: 75,
                };
                cfg.checkpoint_every = 25;
                Ok(cfg)
            }
            other => Err(Error::BadConfigValue {
                key: "preset".to_string(),
                msg: format!("unknown preset `{other}`; valid: {}", PRESETS.join(", ")),
            }),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs: Vec<(String, String)> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::InvalidConfig {
                    msg: format!("line {}: expected `key = value`, got `{line}`", lineno + 1),
                });
            };
            pairs.push((key.trim().to_string(), value.trim().to_string()));
        }
        let preset = pairs
            .iter()
            .find(|(k, _)| k == "preset")
            .map(|(_, v)| v.clone())
            .unwrap_or_else(|| "toy".to_string());
        let mut cfg = Self::preset(&preset)?;
        for (key, value) in pairs {
            cfg.apply(&key, &value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |msg: String| Error::BadConfigValue {
            key: key.to_string(),
            msg,
        };
        let parse_usize = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| bad(format!("`{v}` is not a non-negative integer")))
        };
        let parse_f64 = |v: &str| {
            v.parse::<f64>()
                .map_err(|_| bad(format!("`{v}` is not a number")))
        };
        let parse_bool = |v: &str| match v {
            "true" | "1" | "on" | "yes" => Ok(true),
            "false" | "0" | "off" | "no" => Ok(false),
            _ => Err(bad(format!("`{v}` is not a boolean"))),
        };
        let parse_list = |v: &str| -> Result<Vec<usize>> {
            if v.is_empty() {
                return Ok(vec![]);
            }
            v.split(',')
                .map(|s| {
                    s.trim()
                        .parse::<usize>()
                        .map_err(|_| bad(format!("`{s}` is not an integer")))
                })
                .collect()
        };
        match key {
            "preset" => {} // consumed before apply
            "seed" => {
                self.seed = value
                    .parse()
                    .map_err(|_| bad(format!("`{value}` is not a seed")))?
            }
            "out" => self.out_dir = PathBuf::from(value),
            "data.train" => self.train_manifest = non_empty_path(value),
            "data.query" => self.query_manifest = non_empty_path(value),
            "data.gallery" => self.gallery_manifest = non_empty_path(value),
            "data.clothing_labels" => {
                self.clothing_labels = value
                    .split(',')
                    .map(|s| {
                        s.trim()
                            .parse::<u8>()
                            .map_err(|_| bad(format!("`{s}` is not a label byte")))
                    })
                    .collect::<Result<_>>()?
            }
            "input.height" => self.input_hw.0 = parse_usize(value)?,
            "input.width" => self.input_hw.1 = parse_usize(value)?,
            "backbone.block" => {
                self.block = match value {
                    "basic" => BlockKind::Basic,
                    "bottleneck" => BlockKind::Bottleneck,
                    _ => return Err(bad(format!("`{value}` is not basic|bottleneck"))),
                }
            }
            "backbone.widths" => {
                let list = parse_list(value)?;
                self.stage_widths = list
                    .try_into()
                    .map_err(|_| bad("need exactly 5 widths".to_string()))?
            }
            "backbone.depths" => {
                let list = parse_list(value)?;
                self.stage_depths = list
                    .try_into()
                    .map_err(|_| bad("need exactly 4 depths".to_string()))?
            }
            "backbone.last_stage_stride" => self.last_stage_stride = parse_usize(value)?,
            "mcb.enabled" => self.mcb_enabled = parse_bool(value)?,
            "mcb.taps" => self.mcb_taps = parse_list(value)?,
            "mcb.teacher_mode" => self.mcb_teacher_mode = parse_bool(value)?,
            "cam.enabled" => self.cam_enabled = parse_bool(value)?,
            "cam.reduction" => self.cam_reduction = parse_usize(value)?,
            "cam.counterfactual" => self.cam_counterfactual = parse_bool(value)?,
            "sac.enabled" => self.sac_enabled = parse_bool(value)?,
            "augment.cda" => self.augment.cda_enabled = parse_bool(value)?,
            "augment.cda_prob" => self.augment.cda_prob = parse_f64(value)?,
            "augment.flip_prob" => self.augment.flip_prob = parse_f64(value)?,
            "augment.crop_padding" => self.augment.crop_padding = parse_usize(value)? as u32,
            "augment.erase_prob" => self.augment.erase_prob = parse_f64(value)?,
            "loss.lambda1" => self.weights.lambda1 = parse_f64(value)?,
            "loss.lambda2" => self.weights.lambda2 = parse_f64(value)?,
            "loss.margin" => self.weights.margin = parse_f64(value)?,
            "optim.weight_decay" => self.weight_decay = parse_f64(value)?,
            "sched.base_lr" => self.schedule.base_lr = parse_f64(value)?,
            "sched.warmup_start" => self.schedule.warmup_start = parse_f64(value)?,
            "sched.warmup_epochs" => self.schedule.warmup_epochs = parse_usize(value)?,
            "sched.decay_epochs" => self.schedule.decay_epochs = parse_list(value)?,
            "sched.decay_factor" => self.schedule.decay_factor = parse_f64(value)?,
            "sched.total_epochs" => self.schedule.total_epochs = parse_usize(value)?,
            "sampler.p" => self.p = parse_usize(value)?,
            "sampler.k" => self.k = parse_usize(value)?,
            "train.checkpoint_every" => self.checkpoint_every = parse_usize(value)?,
            "eval.dump_rankings" => self.dump_rankings = parse_bool(value)?,
            "toy.n_ids" => self.toy.n_ids = parse_usize(value)?,
            "toy.outfits" => self.toy.outfits_per_id = parse_usize(value)?,
            "toy.images" => self.toy.images_per_outfit = parse_usize(value)?,
            unknown => {
                return Err(Error::UnknownConfigKey {
                    key: unknown.to_string(),
                })
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone_config().validate()?;
        self.schedule.validate()?;
        self.weights.validate()?;
        self.augment.validate()?;
        if self.cam_enabled {
            let c = self.stage_widths[4];
            if self.cam_reduction == 0
                || c < self.cam_reduction
                || !c.is_multiple_of(self.cam_reduction)
            {
                return Err(Error::BadChannelCount {
                    c,
                    reduction: self.cam_reduction,
                });
            }
        }
        if self.p == 0 || self.k < 2 {
            return Err(Error::InvalidConfig {
                msg: format!("sampler needs p >= 1 and k >= 2, got {}x{}", self.p, self.k),
            });
        }
        Ok(())
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig {
            block: self.block,
            stage_widths: self.stage_widths,
            stage_depths: self.stage_depths,
            last_stage_stride: self.last_stage_stride,
            mcb_taps: if self.mcb_enabled {
                self.mcb_taps.clone()
            } else {
                vec![]
            },
            input_hw: self.input_hw,
        }
    }

    pub fn model_config(&self, num_identities: usize) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone_config(),
            cam: self.cam_enabled.then_some(CamConfig {
                reduction: self.cam_reduction,
                counterfactual: self.cam_counterfactual,
            }),
            mcb_enabled: self.mcb_enabled,
            mcb_teacher_mode: self.mcb_teacher_mode,
            sac_enabled: self.sac_enabled,
            num_identities,
        }
    }

    pub fn build_trainer(&self, num_identities: usize, train_size: usize) -> Result<Trainer> {
        Trainer::new(
            self.model_config(num_identities),
            self.schedule.clone(),
            self.weights,
            self.augment.clone(),
            self.p,
            self.k,
            self.weight_decay,
            self.seed,
            train_size,
        )
    }

    /// Canonical text form: every key, sorted, one per line.
    pub fn to_text(&self) -> String {
        let join = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut map = BTreeMap::new();
        map.insert("preset", self.preset.clone());
        map.insert("seed", self.seed.to_string());
        map.insert("out", self.out_dir.display().to_string());
        map.insert(
            "data.train",
            self.train_manifest
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
        );
        map.insert(
            "data.query",
            self.query_manifest
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
        );
        map.insert(
            "data.gallery",
            self.gallery_manifest
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
        );
        map.insert(
            "data.clothing_labels",
            self.clothing_labels
                .iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        map.insert("input.height", self.input_hw.0.to_string());
        map.insert("input.width", self.input_hw.1.to_string());
        map.insert(
            "backbone.block",
            match self.block {
                BlockKind::Basic => "basic".to_string(),
                BlockKind::Bottleneck => "bottleneck".to_string(),
            },
        );
        map.insert("backbone.widths", join(&self.stage_widths));
        map.insert("backbone.depths", join(&self.stage_depths));
        map.insert(
            "backbone.last_stage_stride",
            self.last_stage_stride.to_string(),
        );
        map.insert("mcb.enabled", self.mcb_enabled.to_string());
        map.insert("mcb.taps", join(&self.mcb_taps));
        map.insert("mcb.teacher_mode", self.mcb_teacher_mode.to_string());
        map.insert("cam.enabled", self.cam_enabled.to_string());
        map.insert("cam.reduction", self.cam_reduction.to_string());
        map.insert("cam.counterfactual", self.cam_counterfactual.to_string());
        map.insert("sac.enabled", self.sac_enabled.to_string());
        map.insert("augment.cda", self.augment.cda_enabled.to_string());
        map.insert("augment.cda_prob", self.augment.cda_prob.to_string());
        map.insert("augment.flip_prob", self.augment.flip_prob.to_string());
        map.insert(
            "augment.crop_padding",
            self.augment.crop_padding.to_string(),
        );
        map.insert("augment.erase_prob", self.augment.erase_prob.to_string());
        map.insert("loss.lambda1", self.weights.lambda1.to_string());
        map.insert("loss.lambda2", self.weights.lambda2.to_string());
        map.insert("loss.margin", self.weights.margin.to_string());
        map.insert("optim.weight_decay", self.weight_decay.to_string());
        map.insert("sched.base_lr", self.schedule.base_lr.to_string());
        map.insert("sched.warmup_start", self.schedule.warmup_start.to_string());
        map.insert(
            "sched.warmup_epochs",
            self.schedule.warmup_epochs.to_string(),
        );
        map.insert("sched.decay_epochs", join(&self.schedule.decay_epochs));
        map.insert("sched.decay_factor", self.schedule.decay_factor.to_string());
        map.insert("sched.total_epochs", self.schedule.total_epochs.to_string());
        map.insert("sampler.p", self.p.to_string());
        map.insert("sampler.k", self.k.to_string());
        map.insert("train.checkpoint_every", self.checkpoint_every.to_string());
        map.insert("eval.dump_rankings", self.dump_rankings.to_string());
        map.insert("toy.n_ids", self.toy.n_ids.to_string());
        map.insert("toy.outfits", self.toy.outfits_per_id.to_string());
        map.insert("toy.images", self.toy.images_per_outfit.to_string());
        let mut out = String::new();
        for (k, v) in map {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}

fn non_empty_path(value: &str) -> Option<PathBuf> {
    if value.is_empty() {
        None
    } else {
        Some(PathBuf::from(value))
    }
}
