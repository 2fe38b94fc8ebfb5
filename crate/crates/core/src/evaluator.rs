//! Retrieval evaluation: pairwise distances, protocol-dependent gallery
//! filtering and multi-shot CMC / mAP.
//!
//! Ties in distance are broken by gallery index so that independent
//! implementations can agree exactly. Queries left without any valid positive
//! after filtering are dropped from the averages and reported.

use std::str::FromStr;

use ndarray::Array2;

use crate::error::{Error, Result};

/// Identity/camera/outfit annotations of one retrieval item. Identities are
/// the source labels (not the per-split dense relabeling) so query and
/// gallery share a label space.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RetrievalMeta {
    pub identity: u32,
    pub camera: u32,
    pub clothes_id: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProtocolFilter {
    /// Same-identity same-camera gallery entries are excluded.
    General,
    /// Additionally excludes same-identity same-clothes entries.
    ClothChanging,
    /// Only cloth-consistent ground truth counts: same-identity entries with
    /// different clothes are excluded too.
    SameClothes,
}

impl ProtocolFilter {
    pub const ALL: [Self; 3] = [Self::General, Self::ClothChanging, Self::SameClothes];

    pub fn name(&self) -> &'static str {
        match self {
            Self::General => "general",
            Self::ClothChanging => "cloth-changing",
            Self::SameClothes => "same-clothes",
        }
    }
}

impl FromStr for ProtocolFilter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('_', "-").as_str() {
            "general" => Ok(Self::General),
            "cloth-changing" => Ok(Self::ClothChanging),
            "same-clothes" => Ok(Self::SameClothes),
            other => Err(Error::InvalidConfig {
                msg: format!(
                    "unknown evaluation setting `{other}`; valid options: general, cloth-changing, same-clothes"
                ),
            }),
        }
    }
}

/// Pairwise Euclidean distances between query and gallery embeddings.
pub fn distance_matrix(q: &Array2<f64>, g: &Array2<f64>) -> Result<Array2<f64>> {
    if q.ncols() != g.ncols() {
        return Err(Error::ShapeMismatch {
            op: "distance_matrix",
            msg: format!("embedding dims differ: {} vs {}", q.ncols(), g.ncols()),
        });
    }
    let mut out = Array2::zeros((q.nrows(), g.nrows()));
    for (i, qrow) in q.rows().into_iter().enumerate() {
        for (j, grow) in g.rows().into_iter().enumerate() {
            let d: f64 = qrow
                .iter()
                .zip(grow.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            out[[i, j]] = d.sqrt();
        }
    }
    Ok(out)
}

/// Which gallery entries may be ranked for this query under the filter.
/// Entries of a different identity are always valid.
pub fn valid_gallery_mask(
    query: &RetrievalMeta,
    gallery: &[RetrievalMeta],
    filter: ProtocolFilter,
) -> Vec<bool> {
    gallery
        .iter()
        .map(|g| {
            if g.identity != query.identity {
                return true;
            }
            let same_camera = g.camera == query.camera;
            let same_clothes = g.clothes_id == query.clothes_id;
            match filter {
                ProtocolFilter::General => !same_camera,
                ProtocolFilter::ClothChanging => !same_camera && !same_clothes,
                ProtocolFilter::SameClothes => !same_camera && same_clothes,
            }
        })
        .collect()
}

/// CMC curve, mAP and retention counters for one protocol.
#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub setting: ProtocolFilter,
    /// `cmc[k-1]` = fraction of retained queries with a positive in top-k.
    pub cmc: Vec<f64>,
    pub map: f64,
    pub retained_queries: usize,
    pub dropped_queries: usize,
    /// Top-ranked valid gallery indices per retained query (up to 10).
    pub top_ranked: Vec<Vec<usize>>,
}

impl EvalOutcome {
    pub fn rank_k(&self, k: usize) -> f64 {
        if self.cmc.is_empty() {
            return 0.0;
        }
        self.cmc[(k - 1).min(self.cmc.len() - 1)]
    }

    pub fn rank1(&self) -> f64 {
        self.rank_k(1)
    }
}

/// Multi-shot CMC and mAP. Per query the valid gallery is sorted by distance
/// ascending (index-tiebroken); CMC@k counts queries with a positive in the
/// top k; AP averages precision at each positive's rank.
pub fn cmc_map(
    distances: &Array2<f64>,
    query_meta: &[RetrievalMeta],
    gallery_meta: &[RetrievalMeta],
    filter: ProtocolFilter,
) -> Result<EvalOutcome> {
    if distances.nrows() != query_meta.len() || distances.ncols() != gallery_meta.len() {
        return Err(Error::ShapeMismatch {
            op: "cmc_map",
            msg: format!(
                "distance matrix {}x{} vs {} queries, {} gallery",
                distances.nrows(),
                distances.ncols(),
                query_meta.len(),
                gallery_meta.len()
            ),
        });
    }
    let mut first_pos_ranks: Vec<usize> = Vec::new();
    let mut aps: Vec<f64> = Vec::new();
    let mut top_ranked: Vec<Vec<usize>> = Vec::new();
    let mut dropped = 0usize;
    let mut max_valid = 0usize;

    for (qi, qm) in query_meta.iter().enumerate() {
        let mask = valid_gallery_mask(qm, gallery_meta, filter);
        let mut order: Vec<usize> = (0..gallery_meta.len()).filter(|&j| mask[j]).collect();
        order.sort_by(|&a, &b| {
            distances[[qi, a]]
                .partial_cmp(&distances[[qi, b]])
                .unwrap()
                .then(a.cmp(&b))
        });
        let positives: Vec<usize> = order
            .iter()
            .enumerate()
            .filter(|(_, &j)| gallery_meta[j].identity == qm.identity)
            .map(|(rank, _)| rank)
            .collect();
        if positives.is_empty() {
            dropped += 1;
            continue;
        }
        max_valid = max_valid.max(order.len());
        first_pos_ranks.push(positives[0] + 1);
        let ap: f64 = positives
            .iter()
            .enumerate()
            .map(|(i, &rank)| (i + 1) as f64 / (rank + 1) as f64)
            .sum::<f64>()
            / positives.len() as f64;
        aps.push(ap);
        top_ranked.push(order.iter().copied().take(10).collect());
    }

    let retained = first_pos_ranks.len();
    if retained == 0 {
        return Err(Error::NoRetainedQueries);
    }
    let mut counts = vec![0usize; max_valid];
    for &rank in &first_pos_ranks {
        counts[rank - 1] += 1;
    }
    let mut cmc = Vec::with_capacity(max_valid);
    let mut acc = 0usize;
    for c in counts {
        acc += c;
        cmc.push(acc as f64 / retained as f64);
    }
    let map = aps.iter().sum::<f64>() / retained as f64;
    Ok(EvalOutcome {
        setting: filter,
        cmc,
        map,
        retained_queries: retained,
        dropped_queries: dropped,
        top_ranked,
    })
}

/// Deterministic text report:
/// `setting  rank1  rank5  rank10  mAP  retained_queries  dropped_queries`.
pub fn format_report(outcome: &EvalOutcome) -> String {
    format!(
        "setting\trank1\trank5\trank10\tmAP\tretained_queries\tdropped_queries\n{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}\n",
        outcome.setting.name(),
        outcome.rank_k(1),
        outcome.rank_k(5),
        outcome.rank_k(10),
        outcome.map,
        outcome.retained_queries,
        outcome.dropped_queries
    )
}

/// Per-query top-10 ranking dump, one line per retained query.
pub fn format_rankings(outcome: &EvalOutcome) -> String {
    let mut s = String::new();
    for (qi, row) in outcome.top_ranked.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|j| j.to_string()).collect();
        s.push_str(&format!("{qi}\t{}\n", cells.join("\t")));
    }
    s
}
