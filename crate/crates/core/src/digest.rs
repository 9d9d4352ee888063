//! Per-block key digests and query-aware top-k block selection.
//!
//! A min/max digest stores the channel-wise extremes of a block's keys. Its
//! score against a query, `Σ_c max(q_c·lo_c, q_c·hi_c)`, is an upper bound on
//! every `q·k` inside the block, so ranking by it never hides a block holding
//! a large logit. The mean digest is the cheaper pooled variant.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::numerics::{dot, Mat};

/// Dense, creation-ordered id of a sealed block within one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BlockId(pub usize);

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

pub type BlockIdSet = BTreeSet<BlockId>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DigestMethod {
    #[default]
    MinMax,
    Mean,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DigestSummary {
    MinMax { lo: Vec<f64>, hi: Vec<f64> },
    Mean(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockDigest {
    pub layer: usize,
    pub block_id: BlockId,
    pub summary: DigestSummary,
}

impl BlockDigest {
    pub fn method(&self) -> DigestMethod {
        match self.summary {
            DigestSummary::MinMax { .. } => DigestMethod::MinMax,
            DigestSummary::Mean(_) => DigestMethod::Mean,
        }
    }

    pub fn dim(&self) -> usize {
        match &self.summary {
            DigestSummary::MinMax { lo, .. } => lo.len(),
            DigestSummary::Mean(m) => m.len(),
        }
    }
}

pub fn build_digest(
    layer: usize,
    block_id: BlockId,
    keys: &Mat,
    method: DigestMethod,
) -> Result<BlockDigest> {
    if keys.is_empty() {
        return Err(Error::Empty("build_digest"));
    }
    let summary = match method {
        DigestMethod::MinMax => {
            let mut lo = keys.row(0).to_vec();
            let mut hi = lo.clone();
            for row in keys.iter_rows().skip(1) {
                for ((l, h), &x) in lo.iter_mut().zip(hi.iter_mut()).zip(row) {
                    *l = l.min(x);
                    *h = h.max(x);
                }
            }
            DigestSummary::MinMax { lo, hi }
        }
        DigestMethod::Mean => {
            let mut mean = vec![0.0; keys.cols()];
            for row in keys.iter_rows() {
                for (m, x) in mean.iter_mut().zip(row) {
                    *m += x;
                }
            }
            let n = keys.rows() as f64;
            mean.iter_mut().for_each(|m| *m /= n);
            DigestSummary::Mean(mean)
        }
    };
    Ok(BlockDigest {
        layer,
        block_id,
        summary,
    })
}

pub fn digest_score(q: &[f64], digest: &BlockDigest) -> Result<f64> {
    check_dim("digest_score", digest.dim(), q.len())?;
    Ok(match &digest.summary {
        DigestSummary::MinMax { lo, hi } => q
            .iter()
            .zip(lo.iter().zip(hi))
            .map(|(qc, (l, h))| (qc * l).max(qc * h))
            .sum(),
        DigestSummary::Mean(mean) => dot(q, mean),
    })
}

/// Ids of the `k` highest-scoring digests. Equal scores prefer the lower id.
pub fn select_topk(q: &[f64], digests: &[BlockDigest], k: usize) -> Result<BlockIdSet> {
    if k == 0 {
        return Ok(BlockIdSet::new());
    }
    let mut scored = digests
        .iter()
        .map(|d| Ok((digest_score(q, d)?, d.block_id)))
        .collect::<Result<Vec<_>>>()?;
    if k < scored.len() {
        // partition first so the full sort only touches the winners
        scored.select_nth_unstable_by(k - 1, rank_order);
        scored.truncate(k);
    }
    Ok(scored.into_iter().map(|(_, id)| id).collect())
}

fn rank_order(a: &(f64, BlockId), b: &(f64, BlockId)) -> std::cmp::Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}
