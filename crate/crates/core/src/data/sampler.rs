//! Identity-balanced PK batch sampling.

use rand::seq::SliceRandom;
use rand::Rng;

use super::manifest::DatasetManifest;
use super::Sample;
use crate::error::{Error, Result};
use crate::rng::{derive, PURPOSE_PK};

/// Batch of `P` identities with exactly `K` samples each, `N = P*K`.
pub struct IdentityBatch {
    pub samples: Vec<Sample>,
    pub p: usize,
    pub k: usize,
}

impl IdentityBatch {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<u32> {
        self.samples.iter().map(|s| s.identity).collect()
    }

    /// Checks P distinct identities, K samples per identity, N = P*K.
    pub fn validate(&self) -> Result<()> {
        let mut counts = std::collections::HashMap::new();
        for s in &self.samples {
            *counts.entry(s.identity).or_insert(0usize) += 1;
        }
        let ok = self.samples.len() == self.p * self.k
            && counts.len() == self.p
            && counts.values().all(|&c| c == self.k);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig {
                msg: format!(
                    "batch violates PK structure: {} samples, {} identities, expected {}x{}",
                    self.samples.len(),
                    counts.len(),
                    self.p,
                    self.k
                ),
            })
        }
    }
}

/// Draws record indices for a PK batch: `p` identities without replacement,
/// `k` samples per identity (with replacement only when the identity has
/// fewer than `k` records). Deterministic in `seed`.
pub fn pk_sample_indices(
    manifest: &DatasetManifest,
    p: usize,
    k: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::KTooSmall(k));
    }
    if p > manifest.identity_count || p == 0 {
        return Err(Error::NotEnoughIdentities {
            requested: p,
            available: manifest.identity_count,
        });
    }
    let mut rng = derive(seed, &[PURPOSE_PK]);
    let groups = manifest.groups_by_identity();
    let mut ids: Vec<usize> = (0..manifest.identity_count).collect();
    ids.shuffle(&mut rng);
    ids.truncate(p);

    let mut out = Vec::with_capacity(p * k);
    for id in ids {
        let group = &groups[id];
        debug_assert!(!group.is_empty(), "identity {id} has no records");
        if group.len() >= k {
            let mut local = group.clone();
            local.shuffle(&mut rng);
            out.extend_from_slice(&local[..k]);
        } else {
            for _ in 0..k {
                out.push(group[rng.random_range(0..group.len())]);
            }
        }
    }
    Ok(out)
}
