//! Five-stage convolutional backbone with shared weights across the two
//! streams (sharing is structural: one parameter set, forwarded twice), plus
//! the per-stream classifier head.
//!
//! The stride pattern follows the standard residual-network layout: a
//! stride-2 stem convolution and stride-2 max pool (stage 1), an unstrided
//! stage 2 and stride-2 stages 3 and 4. Stage 5's downsampling is cancelled
//! by default so the final map keeps 1/16 resolution.

use ndarray::IxDyn;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Arr, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, FwdCtx};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    /// Two 3x3 convolutions per block (width-reduced desk configuration).
    Basic,
    /// 1x1 / 3x3 / 1x1 bottleneck with 4x expansion (ResNet50 topology).
    Bottleneck,
}

#[derive(Clone, Debug)]
pub struct BackboneConfig {
    pub block: BlockKind,
    /// Output channels of stages 1..=5.
    pub stage_widths: [usize; 5],
    /// Residual blocks per stage for stages 2..=5.
    pub stage_depths: [usize; 4],
    /// 1 cancels the last stage's downsampling; 2 keeps it.
    pub last_stage_stride: usize,
    /// Stages whose outputs feed multi-scale constraint blocks.
    pub mcb_taps: Vec<usize>,
    /// Expected input resolution (H, W).
    pub input_hw: (usize, usize),
}

impl BackboneConfig {
    /// Width-reduced configuration for desk-scale experiments.
    pub fn reduced(input_hw: (usize, usize)) -> Self {
        Self {
            block: BlockKind::Basic,
            stage_widths: [8, 16, 32, 64, 128],
            stage_depths: [1, 1, 1, 1],
            last_stage_stride: 1,
            mcb_taps: vec![3],
            input_hw,
        }
    }

    /// Full ResNet50 topology (for use with externally trained weights).
    pub fn resnet50(input_hw: (usize, usize)) -> Self {
        Self {
            block: BlockKind::Bottleneck,
            stage_widths: [64, 256, 512, 1024, 2048],
            stage_depths: [3, 4, 6, 3],
            last_stage_stride: 1,
            mcb_taps: vec![3, 4, 5],
            input_hw,
        }
    }

    /// Cumulative spatial stride from input to the final map.
    pub fn total_stride(&self) -> usize {
        16 * self.last_stage_stride
    }

    pub fn final_channels(&self) -> usize {
        self.stage_widths[4]
    }

    pub fn validate(&self) -> Result<()> {
        if self.last_stage_stride != 1 && self.last_stage_stride != 2 {
            return Err(Error::InvalidConfig {
                msg: format!(
                    "last_stage_stride must be 1 or 2, got {}",
                    self.last_stage_stride
                ),
            });
        }
        if self.stage_widths.contains(&0) || self.stage_depths.contains(&0) {
            return Err(Error::InvalidConfig {
                msg: "stage widths and depths must be positive".to_string(),
            });
        }
        let mut seen = std::collections::BTreeSet::new();
        for &t in &self.mcb_taps {
            if !(1..=5).contains(&t) {
                return Err(Error::InvalidConfig {
                    msg: format!("mcb tap {t} outside 1..=5"),
                });
            }
            if !seen.insert(t) {
                return Err(Error::InvalidConfig {
                    msg: format!("duplicate mcb tap {t}"),
                });
            }
        }
        if self.block == BlockKind::Bottleneck && self.stage_widths[1..].iter().any(|&w| w % 4 != 0)
        {
            return Err(Error::InvalidConfig {
                msg: "bottleneck stage widths must be divisible by 4".to_string(),
            });
        }
        let (h, w) = self.input_hw;
        let stride = self.total_stride();
        if h == 0 || w == 0 || h % stride != 0 || w % stride != 0 {
            return Err(Error::BadInputSize { h, w });
        }
        Ok(())
    }
}

struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    proj: Option<(Conv2d, BatchNorm2d)>,
}

impl BasicBlock {
    fn new(
        store: &mut ParamStore,
        name: &str,
        ci: usize,
        co: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let proj = (stride != 1 || ci != co).then(|| {
            (
                Conv2d::new(
                    store,
                    &format!("{name}.proj"),
                    ci,
                    co,
                    1,
                    stride,
                    0,
                    false,
                    rng,
                ),
                BatchNorm2d::new(store, &format!("{name}.proj_bn"), co),
            )
        });
        Self {
            conv1: Conv2d::new(
                store,
                &format!("{name}.conv1"),
                ci,
                co,
                3,
                stride,
                1,
                false,
                rng,
            ),
            bn1: BatchNorm2d::new(store, &format!("{name}.bn1"), co),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), co, co, 3, 1, 1, false, rng),
            bn2: BatchNorm2d::new(store, &format!("{name}.bn2"), co),
            proj: None.or(proj),
        }
    }

    fn forward(&self, ctx: &FwdCtx<'_>, x: Var) -> Var {
        let t = ctx.tape;
        let mut y = t.relu(self.bn1.forward(ctx, self.conv1.forward(ctx, x)));
        y = self.bn2.forward(ctx, self.conv2.forward(ctx, y));
        let skip = match &self.proj {
            Some((conv, bn)) => bn.forward(ctx, conv.forward(ctx, x)),
            None => x,
        };
        t.relu(t.add(y, skip))
    }
}

struct BottleneckBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    conv3: Conv2d,
    bn3: BatchNorm2d,
    proj: Option<(Conv2d, BatchNorm2d)>,
}

impl BottleneckBlock {
    fn new(
        store: &mut ParamStore,
        name: &str,
        ci: usize,
        co: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mid = co / 4;
        let proj = (stride != 1 || ci != co).then(|| {
            (
                Conv2d::new(
                    store,
                    &format!("{name}.proj"),
                    ci,
                    co,
                    1,
                    stride,
                    0,
                    false,
                    rng,
                ),
                BatchNorm2d::new(store, &format!("{name}.proj_bn"), co),
            )
        });
        Self {
            conv1: Conv2d::new(
                store,
                &format!("{name}.conv1"),
                ci,
                mid,
                1,
                1,
                0,
                false,
                rng,
            ),
            bn1: BatchNorm2d::new(store, &format!("{name}.bn1"), mid),
            conv2: Conv2d::new(
                store,
                &format!("{name}.conv2"),
                mid,
                mid,
                3,
                stride,
                1,
                false,
                rng,
            ),
            bn2: BatchNorm2d::new(store, &format!("{name}.bn2"), mid),
            conv3: Conv2d::new(
                store,
                &format!("{name}.conv3"),
                mid,
                co,
                1,
                1,
                0,
                false,
                rng,
            ),
            bn3: BatchNorm2d::new(store, &format!("{name}.bn3"), co),
            proj,
        }
    }

    fn forward(&self, ctx: &FwdCtx<'_>, x: Var) -> Var {
        let t = ctx.tape;
        let mut y = t.relu(self.bn1.forward(ctx, self.conv1.forward(ctx, x)));
        y = t.relu(self.bn2.forward(ctx, self.conv2.forward(ctx, y)));
        y = self.bn3.forward(ctx, self.conv3.forward(ctx, y));
        let skip = match &self.proj {
            Some((conv, bn)) => bn.forward(ctx, conv.forward(ctx, x)),
            None => x,
        };
        t.relu(t.add(y, skip))
    }
}

enum Block {
    Basic(BasicBlock),
    Bottleneck(BottleneckBlock),
}

impl Block {
    fn forward(&self, ctx: &FwdCtx<'_>, x: Var) -> Var {
        match self {
            Block::Basic(b) => b.forward(ctx, x),
            Block::Bottleneck(b) => b.forward(ctx, x),
        }
    }
}

pub struct Backbone {
    pub cfg: BackboneConfig,
    stem_conv: Conv2d,
    stem_bn: BatchNorm2d,
    stages: Vec<Vec<Block>>,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, cfg: BackboneConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let stem_k = match cfg.block {
            BlockKind::Basic => 3,
            BlockKind::Bottleneck => 7,
        };
        let stem_conv = Conv2d::new(
            store,
            "backbone.stem.conv",
            3,
            cfg.stage_widths[0],
            stem_k,
            2,
            stem_k / 2,
            false,
            rng,
        );
        let stem_bn = BatchNorm2d::new(store, "backbone.stem.bn", cfg.stage_widths[0]);
        let mut stages = Vec::with_capacity(4);
        let mut ci = cfg.stage_widths[0];
        for (s, (&co, &depth)) in cfg
            .stage_widths
            .iter()
            .skip(1)
            .zip(cfg.stage_depths.iter())
            .enumerate()
        {
            let stage_idx = s + 2; // stages 2..=5
            let stride = match stage_idx {
                2 => 1,
                5 => cfg.last_stage_stride,
                _ => 2,
            };
            let mut blocks = Vec::with_capacity(depth);
            for b in 0..depth {
                let name = format!("backbone.stage{stage_idx}.block{b}");
                let (in_ch, st) = if b == 0 { (ci, stride) } else { (co, 1) };
                blocks.push(match cfg.block {
                    BlockKind::Basic => {
                        Block::Basic(BasicBlock::new(store, &name, in_ch, co, st, rng))
                    }
                    BlockKind::Bottleneck => {
                        Block::Bottleneck(BottleneckBlock::new(store, &name, in_ch, co, st, rng))
                    }
                });
            }
            stages.push(blocks);
            ci = co;
        }
        Ok(Self {
            cfg,
            stem_conv,
            stem_bn,
            stages,
        })
    }

    /// Runs the five stages, returning the tapped stage outputs (in tap
    /// order) and the final feature map.
    pub fn forward_stages(&self, ctx: &FwdCtx<'_>, images: Var) -> Result<(Vec<Var>, Var)> {
        let shape = ctx.tape.shape(images);
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::ShapeMismatch {
                op: "forward_stages",
                msg: format!("expected (N,3,H,W) input, got {shape:?}"),
            });
        }
        let (h, w) = (shape[2], shape[3]);
        let stride = self.cfg.total_stride();
        if h % stride != 0 || w % stride != 0 {
            return Err(Error::BadInputSize { h, w });
        }
        let t = ctx.tape;
        let mut stage_outputs = Vec::with_capacity(5);
        let mut x = t.relu(
            self.stem_bn
                .forward(ctx, self.stem_conv.forward(ctx, images)),
        );
        x = t.maxpool2d(x, 3, 2, 1);
        stage_outputs.push(x);
        for blocks in &self.stages {
            for block in blocks {
                x = block.forward(ctx, x);
            }
            stage_outputs.push(x);
        }
        let taps = self
            .cfg
            .mcb_taps
            .iter()
            .map(|&s| stage_outputs[s - 1])
            .collect();
        Ok((taps, stage_outputs[4]))
    }
}

/// Batch norm, 1x1 convolution to identity logits, global average pooling.
/// The pre-pooling maps are the class activation maps consumed by the
/// semantic alignment constraint.
pub struct ClassifierHead {
    pub bn: BatchNorm2d,
    pub conv: Conv2d,
    channels: usize,
    classes: usize,
}

impl ClassifierHead {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), channels),
            conv: Conv2d::new(
                store,
                &format!("{name}.conv"),
                channels,
                classes,
                1,
                1,
                0,
                true,
                rng,
            ),
            channels,
            classes,
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Returns `(logits (N,I), activation maps (N,I,H,W))`; logits are the
    /// spatial means of the maps.
    pub fn classify(&self, ctx: &FwdCtx<'_>, features: Var) -> Result<(Var, Var)> {
        let shape = ctx.tape.shape(features);
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::ShapeMismatch {
                op: "classify",
                msg: format!("expected (N,{},H,W) features, got {shape:?}", self.channels),
            });
        }
        let maps = self.conv.forward(ctx, self.bn.forward(ctx, features));
        let logits = ctx.tape.gap_nchw(maps);
        Ok((logits, maps))
    }
}

/// Converts a batch of byte images to a `(N,3,H,W)` tensor scaled to `[0,1]`.
pub fn images_to_tensor(images: &[&image::RgbImage]) -> Result<Arr> {
    let (w, h) = images
        .first()
        .map(|i| i.dimensions())
        .ok_or(Error::BatchTooSmall(0))?;
    let mut out = Arr::zeros(IxDyn(&[images.len(), 3, h as usize, w as usize]));
    for (n, img) in images.iter().enumerate() {
        if img.dimensions() != (w, h) {
            return Err(Error::ShapeMismatch {
                op: "images_to_tensor",
                msg: "images in a batch must share dimensions".to_string(),
            });
        }
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                out[[n, c, y as usize, x as usize]] = px.0[c] as f64 / 255.0;
            }
        }
    }
    Ok(out)
}
