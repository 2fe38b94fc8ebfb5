//! Counterfactual-guided attention: channel attention (squeeze/excite with
//! 1/8 reduction), spatial attention (two 1x1 convolutions down to one map),
//! residual fusion, counterfactual intervention on the spatial map and the
//! cloth-agnostic contrastive loss on pooled effect features.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, FwdCtx, Linear};

#[derive(Clone, Copy, Debug)]
pub struct CamConfig {
    /// Channel reduction of both attention branches.
    pub reduction: usize,
    /// Whether the counterfactual intervention drives the contrastive loss.
    pub counterfactual: bool,
}

impl Default for CamConfig {
    fn default() -> Self {
        Self {
            reduction: 8,
            counterfactual: true,
        }
    }
}

pub struct CamModule {
    fc1: Linear,
    fc2: Linear,
    sconv1: Conv2d,
    sconv2: Conv2d,
    channels: usize,
}

impl CamModule {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        reduction: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if reduction == 0 || channels < reduction || !channels.is_multiple_of(reduction) {
            return Err(Error::BadChannelCount {
                c: channels,
                reduction,
            });
        }
        let hidden = channels / reduction;
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.ca.fc1"), channels, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.ca.fc2"), hidden, channels, rng),
            sconv1: Conv2d::new(
                store,
                &format!("{name}.sa.conv1"),
                channels,
                hidden,
                1,
                1,
                0,
                true,
                rng,
            ),
            sconv2: Conv2d::new(
                store,
                &format!("{name}.sa.conv2"),
                hidden,
                1,
                1,
                1,
                0,
                true,
                rng,
            ),
            channels,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Squeeze-excite weights in `(0,1)`: pool, reduce, rectify, expand,
    /// squash. Returns `(N,C)`.
    pub fn channel_attention(&self, ctx: &FwdCtx<'_>, f: Var) -> Var {
        let t = ctx.tape;
        let pooled = t.gap_nchw(f);
        let h = t.relu(self.fc1.forward(ctx, pooled));
        t.sigmoid(self.fc2.forward(ctx, h))
    }

    /// Spatial map in `(0,1)`: 1x1 conv to the reduced width, rectify, 1x1
    /// conv to one channel, squash. Returns `(N,H,W)`.
    pub fn spatial_attention(&self, ctx: &FwdCtx<'_>, x: Var) -> Var {
        let t = ctx.tape;
        let h = t.relu(self.sconv1.forward(ctx, x));
        let m = t.sigmoid(self.sconv2.forward(ctx, h));
        let shape = t.shape(m);
        t.reshape(m, &[shape[0], shape[2], shape[3]])
    }

    /// Residual attention fusion. With `supplied` absent the learned spatial
    /// map is used; a supplied map replaces the spatial attention output
    /// while the channel-scaled feature is retained.
    pub fn forward(&self, ctx: &FwdCtx<'_>, f: Var, supplied: Option<Var>) -> Result<Var> {
        let t = ctx.tape;
        let fshape = t.shape(f);
        let ca = self.channel_attention(ctx, f);
        let x = t.scale_channels(f, ca);
        let map = match supplied {
            Some(m) => {
                let mshape = t.shape(m);
                if mshape != [fshape[0], fshape[2], fshape[3]] {
                    return Err(Error::ShapeMismatch {
                        op: "cam_forward",
                        msg: format!("supplied map {mshape:?} does not match feature {fshape:?}"),
                    });
                }
                m
            }
            None => self.spatial_attention(ctx, x),
        };
        Ok(t.add(f, t.scale_spatial(x, map)))
    }

    /// Output under learned attention and its counterfactual effect: the
    /// difference against the same computation with the spatial map replaced
    /// by `noise` (no gradient flows into the noise). Both terms share every
    /// parameter and the channel-scaled feature.
    pub fn counterfactual_effect(
        &self,
        ctx: &FwdCtx<'_>,
        f: Var,
        noise: Var,
    ) -> Result<(Var, Var)> {
        let t = ctx.tape;
        let fshape = t.shape(f);
        let nshape = t.shape(noise);
        if nshape != [fshape[0], fshape[2], fshape[3]] {
            return Err(Error::ShapeMismatch {
                op: "counterfactual_effect",
                msg: format!("noise {nshape:?} does not match feature {fshape:?}"),
            });
        }
        let ca = self.channel_attention(ctx, f);
        let x = t.scale_channels(f, ca);
        let sa = self.spatial_attention(ctx, x);
        let y = t.add(f, t.scale_spatial(x, sa));
        let y_bar = t.add(f, t.scale_spatial(x, noise));
        let effect = t.sub(y, y_bar);
        Ok((y, effect))
    }
}

/// Cloth-agnostic contrastive loss on pooled effect features: rows are
/// L2-normalized so dot products are cosine similarities, then each anchor
/// contrasts its positives against all its negatives.
pub fn cc_loss(tape: &Tape, pooled: Var, labels: &[u32]) -> Result<Var> {
    let shape = tape.shape(pooled);
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "cc_loss",
            msg: format!(
                "expected (N,D) embeddings for {} labels, got {shape:?}",
                labels.len()
            ),
        });
    }
    if labels.len() < 2 {
        return Err(Error::BatchTooSmall(labels.len()));
    }
    let z = tape.l2_normalize_rows(pooled)?;
    let sim = tape.matmul_nt(z, z);
    Ok(tape.contrastive_from_similarity(sim, labels))
}
