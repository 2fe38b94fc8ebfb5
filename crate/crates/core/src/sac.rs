//! Semantic alignment constraint: composes a supervision signal from both
//! streams' true-class activation maps (pixelwise max, treated as a fixed
//! target) and pulls both streams' saliency maps toward it.

use crate::autodiff::{Arr, Tape, Var};
use crate::error::{Error, Result};

/// Pixelwise max of the two true-class activation maps, per sample:
/// `g[n,h,w] = max(g_raw[n, label_n, h, w], g_erased[n, label_n, h, w])`.
/// Computed outside the tape; the result is a constant target.
pub fn supervision_signal(g_raw: &Arr, g_erased: &Arr, labels: &[usize]) -> Result<Arr> {
    if g_raw.shape() != g_erased.shape() || g_raw.ndim() != 4 {
        return Err(Error::ShapeMismatch {
            op: "supervision_signal",
            msg: format!(
                "activation maps must share (N,I,H,W): {:?} vs {:?}",
                g_raw.shape(),
                g_erased.shape()
            ),
        });
    }
    let (n, classes, h, w) = (
        g_raw.shape()[0],
        g_raw.shape()[1],
        g_raw.shape()[2],
        g_raw.shape()[3],
    );
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            op: "supervision_signal",
            msg: format!("{} labels for batch of {n}", labels.len()),
        });
    }
    let mut g = Arr::zeros(ndarray::IxDyn(&[n, h, w]));
    for (i, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        for hh in 0..h {
            for ww in 0..w {
                g[[i, hh, ww]] = g_raw[[i, label, hh, ww]].max(g_erased[[i, label, hh, ww]]);
            }
        }
    }
    Ok(g)
}

/// Saliency of a feature map: mean over the channel dimension, `(N,H,W)`.
pub fn saliency(tape: &Tape, features: Var) -> Var {
    tape.channel_mean(features)
}

/// Semantic consistency loss: per squared term the mean over pixels, then
/// the two stream terms summed and averaged over the batch. `g` must be a
/// gradient-free target (use a tape input).
pub fn sc_loss(tape: &Tape, g: Var, s_raw: Var, s_erased: Var) -> Result<Var> {
    let gs = tape.shape(g);
    if gs != tape.shape(s_raw) || gs != tape.shape(s_erased) {
        return Err(Error::ShapeMismatch {
            op: "sc_loss",
            msg: format!(
                "supervision {gs:?} vs saliency {:?} / {:?}",
                tape.shape(s_raw),
                tape.shape(s_erased)
            ),
        });
    }
    let dr = tape.sub(g, s_raw);
    let db = tape.sub(g, s_erased);
    let term_r = tape.mean_all(tape.mul(dr, dr));
    let term_b = tape.mean_all(tape.mul(db, db));
    Ok(tape.add(term_r, term_b))
}
