//! Full dual-stream model: shared-weight backbone, optional attention
//! module, and one classifier head per stream. The erased stream exists only
//! at training time; inference runs the raw stream alone.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamStore, Var};
use crate::backbone::{Backbone, BackboneConfig, ClassifierHead};
use crate::cam::{CamConfig, CamModule};
use crate::error::Result;
use crate::nn::FwdCtx;

#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// `None` disables the attention module entirely.
    pub cam: Option<CamConfig>,
    pub mcb_enabled: bool,
    pub mcb_teacher_mode: bool,
    pub sac_enabled: bool,
    pub num_identities: usize,
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub enum StreamKind {
    Raw,
    Erased,
}

/// Everything one stream's forward pass produces.
pub struct StreamForward {
    /// Tapped stage outputs for the multi-scale constraint blocks.
    pub taps: Vec<Var>,
    /// Final backbone map.
    pub final_map: Var,
    /// Post-attention feature map (equals `final_map` with the module off).
    pub features: Var,
    /// Globally pooled feature, the retrieval embedding.
    pub embedding: Var,
    pub logits: Var,
    /// Pre-pooling class activation maps.
    pub class_maps: Var,
    /// Pooled counterfactual-effect (or attention-output) feature for the
    /// contrastive loss; absent when the attention module is off.
    pub effect_pooled: Option<Var>,
}

pub struct Model {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub cam: Option<CamModule>,
    pub head_raw: ClassifierHead,
    pub head_erased: ClassifierHead,
}

impl Model {
    pub fn new(store: &mut ParamStore, cfg: ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let backbone = Backbone::new(store, cfg.backbone.clone(), rng)?;
        let channels = cfg.backbone.final_channels();
        let cam = match &cfg.cam {
            Some(c) => Some(CamModule::new(store, "cam", channels, c.reduction, rng)?),
            None => None,
        };
        let head_raw = ClassifierHead::new(store, "head_raw", channels, cfg.num_identities, rng);
        let head_erased =
            ClassifierHead::new(store, "head_erased", channels, cfg.num_identities, rng);
        Ok(Self {
            cfg,
            backbone,
            cam,
            head_raw,
            head_erased,
        })
    }

    /// Forward one stream. `noise` supplies the per-sample counterfactual
    /// attention maps `(N,H,W)`; pass `None` at inference or with the
    /// intervention disabled.
    pub fn forward_stream(
        &self,
        ctx: &FwdCtx<'_>,
        images: Var,
        stream: StreamKind,
        noise: Option<Var>,
    ) -> Result<StreamForward> {
        let t = ctx.tape;
        let (taps, final_map) = self.backbone.forward_stages(ctx, images)?;
        let (features, effect_pooled) = match (&self.cam, noise) {
            (Some(cam), Some(noise)) => {
                let (y, effect) = cam.counterfactual_effect(ctx, final_map, noise)?;
                (y, Some(t.gap_nchw(effect)))
            }
            (Some(cam), None) => {
                let y = cam.forward(ctx, final_map, None)?;
                (y, Some(t.gap_nchw(y)))
            }
            (None, _) => (final_map, None),
        };
        let embedding = t.gap_nchw(features);
        let head = match stream {
            StreamKind::Raw => &self.head_raw,
            StreamKind::Erased => &self.head_erased,
        };
        let (logits, class_maps) = head.classify(ctx, features)?;
        Ok(StreamForward {
            taps,
            final_map,
            features,
            embedding,
            logits,
            class_maps,
            effect_pooled,
        })
    }
}
