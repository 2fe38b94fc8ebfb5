//! Multi-scale constraint block: pyramid max pooling of an intermediate
//! feature map into a `C x 21` descriptor and the hierarchical matching loss
//! that pulls the two streams' descriptors together.
//!
//! The block has no learned parameters and its outputs never feed the next
//! backbone stage; it only adds a loss term.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// Pyramid grids: whole map, 2x2 and 4x4.
pub const PYRAMID_GRIDS: [usize; 3] = [1, 2, 4];
/// Descriptor parts per channel: 1 + 4 + 16.
pub const DESCRIPTOR_PARTS: usize = 21;

/// Pools `(N,C,H,W)` into `(N,C,21)`: max over the whole map, a 2x2 grid and
/// a 4x4 grid, concatenated in that order, row-major within each grid.
pub fn multiscale_pool(tape: &Tape, feature: Var) -> Result<Var> {
    let shape = tape.shape(feature);
    if shape.len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "multiscale_pool",
            msg: format!("expected (N,C,H,W), got {shape:?}"),
        });
    }
    let (h, w) = (shape[2], shape[3]);
    if h < 4 || w < 4 {
        return Err(Error::SpatialTooSmall { h, w });
    }
    Ok(tape.pyramid_max_pool(feature, &PYRAMID_GRIDS))
}

/// Hierarchical matching loss: mean over the batch of the per-stage mean
/// squared difference between raw and erased descriptors, summed over stages.
/// With `teacher_mode` the erased stream is treated as a fixed target.
pub fn hm_loss(tape: &Tape, raw: &[Var], erased: &[Var], teacher_mode: bool) -> Result<Var> {
    if raw.is_empty() || raw.len() != erased.len() {
        return Err(Error::ShapeMismatch {
            op: "hm_loss",
            msg: format!(
                "need matching non-empty descriptor lists, got {} and {}",
                raw.len(),
                erased.len()
            ),
        });
    }
    let mut total: Option<Var> = None;
    for (&fr, &fb) in raw.iter().zip(erased) {
        if tape.shape(fr) != tape.shape(fb) {
            return Err(Error::ShapeMismatch {
                op: "hm_loss",
                msg: format!(
                    "descriptor shapes differ: {:?} vs {:?}",
                    tape.shape(fr),
                    tape.shape(fb)
                ),
            });
        }
        let fb = if teacher_mode {
            tape.stop_gradient(fb)
        } else {
            fb
        };
        let d = tape.sub(fr, fb);
        let term = tape.mean_all(tape.mul(d, d));
        total = Some(match total {
            Some(acc) => tape.add(acc, term),
            None => term,
        });
    }
    Ok(total.unwrap())
}
