//! Identity classification loss, batch-hard triplet loss and the weighted
//! total objective combining every stream's terms.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    /// Weights the hierarchical matching and semantic consistency terms.
    pub lambda1: f64,
    /// Weights the cloth-agnostic contrastive terms.
    pub lambda2: f64,
    /// Triplet margin.
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.01,
            lambda2: 0.1,
            margin: 0.3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || self.margin < 0.0 {
            return Err(Error::InvalidConfig {
                msg: "loss weights and margin must be non-negative".to_string(),
            });
        }
        Ok(())
    }
}

/// Every loss term of one training step, plus the weighted total.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossBundle {
    pub id_raw: f64,
    pub id_erased: f64,
    pub tri_raw: f64,
    pub tri_erased: f64,
    pub cc_raw: f64,
    pub cc_erased: f64,
    pub hm: f64,
    pub sc: f64,
    pub total: f64,
}

impl LossBundle {
    /// Errors on the first non-finite term, naming it.
    pub fn check_finite(&self) -> Result<()> {
        for (term, value) in [
            ("id_raw", self.id_raw),
            ("id_erased", self.id_erased),
            ("tri_raw", self.tri_raw),
            ("tri_erased", self.tri_erased),
            ("cc_raw", self.cc_raw),
            ("cc_erased", self.cc_erased),
            ("hm", self.hm),
            ("sc", self.sc),
            ("total", self.total),
        ] {
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { term, value });
            }
        }
        Ok(())
    }
}

/// Cross-entropy identity loss over `(N,I)` logits.
pub fn identity_loss(tape: &Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.shape(logits);
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "identity_loss",
            msg: format!("expected ({},I) logits, got {shape:?}", labels.len()),
        });
    }
    let classes = shape[1];
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let logp = tape.log_softmax_rows(logits);
    Ok(tape.nll_rows(logp, labels))
}

/// Batch-hard triplet loss: hinge at `margin` between each anchor's farthest
/// positive and closest negative, Euclidean distances, unnormalized features.
pub fn triplet_loss(tape: &Tape, features: Var, labels: &[u32], margin: f64) -> Result<Var> {
    let shape = tape.shape(features);
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "triplet_loss",
            msg: format!("expected ({},D) features, got {shape:?}", labels.len()),
        });
    }
    tape.triplet_batch_hard(features, labels, margin)
}

/// The weighted objective:
/// `lambda1*(hm + sc) + sum over streams of (lambda2*cc + id + tri)`.
/// Pure arithmetic on already-computed parts; the training step assembles
/// the same expression on the tape for backpropagation.
pub fn total_loss(b: &LossBundle, w: &LossWeights) -> f64 {
    w.lambda1 * (b.hm + b.sc)
        + (w.lambda2 * b.cc_raw + b.id_raw + b.tri_raw)
        + (w.lambda2 * b.cc_erased + b.id_erased + b.tri_erased)
}
