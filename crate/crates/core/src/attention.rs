//! Exact single-head attention and the mergeable partial accumulator.
//!
//! A [`PartialAttention`] holds the unnormalized triple `(o_acc, m, l)` over
//! some token subset:
//!
//! ```text
//! m     = max_j s_j
//! l     = Σ_j exp(s_j - m)
//! o_acc = Σ_j exp(s_j - m) · v_j
//! ```
//!
//! Two partials over disjoint token sets combine with the log-sum-exp rescale
//! and the result is the partial over their union, so attention over a block
//! set can be split across workers and merged in any order.

use crate::error::{check_dim, Error, Result};
use crate::kv_store::KvBlock;
use crate::numerics::{dot, softmax, Mat};

pub fn default_scale(head_dim: usize) -> f64 {
    1.0 / (head_dim as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartialAttention {
    o_acc: Vec<f64>,
    m: f64,
    l: f64,
    token_count: usize,
}

impl PartialAttention {
    /// The identity element for [`merge`].
    pub fn empty(dim: usize) -> Self {
        Self {
            o_acc: vec![0.0; dim],
            m: f64::NEG_INFINITY,
            l: 0.0,
            token_count: 0,
        }
    }

    /// Accumulate over `(key, value)` row pairs.
    pub fn from_rows<'a, I>(q: &[f64], rows: I, scale: f64) -> Self
    where
        I: IntoIterator<Item = (&'a [f64], &'a [f64])>,
    {
        let rows: Vec<_> = rows.into_iter().collect();
        let mut out = Self::empty(q.len());
        if rows.is_empty() {
            return out;
        }
        let scores: Vec<f64> = rows.iter().map(|(k, _)| scale * dot(q, k)).collect();
        let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (s, (_, v)) in scores.iter().zip(&rows) {
            let p = (s - m).exp();
            out.l += p;
            for (o, x) in out.o_acc.iter_mut().zip(v.iter()) {
                *o += p * x;
            }
        }
        out.m = m;
        out.token_count = rows.len();
        out
    }

    pub fn over_mat(q: &[f64], keys: &Mat, values: &Mat, scale: f64) -> Result<Self> {
        check_dim("PartialAttention::over_mat", keys.rows(), values.rows())?;
        if !keys.is_empty() {
            check_dim("PartialAttention::over_mat", q.len(), keys.cols())?;
        }
        Ok(Self::from_rows(
            q,
            keys.iter_rows().zip(values.iter_rows()),
            scale,
        ))
    }

    pub fn is_empty(&self) -> bool {
        self.token_count == 0
    }

    pub fn dim(&self) -> usize {
        self.o_acc.len()
    }

    pub fn max_logit(&self) -> f64 {
        self.m
    }

    pub fn denominator(&self) -> f64 {
        self.l
    }

    pub fn accumulator(&self) -> &[f64] {
        &self.o_acc
    }

    pub fn token_count(&self) -> usize {
        self.token_count
    }

    pub fn finalize(&self) -> Result<Vec<f64>> {
        if self.is_empty() || self.l <= 0.0 {
            return Err(Error::Empty("finalize"));
        }
        let inv = 1.0 / self.l;
        Ok(self.o_acc.iter().map(|o| o * inv).collect())
    }
}

/// Combine two partials over disjoint token sets.
///
/// Panics if the head dimensions differ.
pub fn merge(a: &PartialAttention, b: &PartialAttention) -> PartialAttention {
    assert_eq!(a.dim(), b.dim(), "merging partials of different head dims");
    if b.is_empty() {
        return a.clone();
    }
    if a.is_empty() {
        return b.clone();
    }
    let m = a.m.max(b.m);
    let (fa, fb) = ((a.m - m).exp(), (b.m - m).exp());
    PartialAttention {
        o_acc: a
            .o_acc
            .iter()
            .zip(&b.o_acc)
            .map(|(x, y)| x * fa + y * fb)
            .collect(),
        m,
        l: a.l * fa + b.l * fb,
        token_count: a.token_count + b.token_count,
    }
}

/// `softmax(scale · K q) · V`, the oracle every sparse path is checked against.
pub fn exact_attention(q: &[f64], keys: &Mat, values: &Mat, scale: f64) -> Result<Vec<f64>> {
    if keys.is_empty() {
        return Err(Error::Empty("exact_attention"));
    }
    check_dim("exact_attention", keys.rows(), values.rows())?;
    check_dim("exact_attention", keys.cols(), q.len())?;
    let scores: Vec<f64> = keys.iter_rows().map(|k| scale * dot(q, k)).collect();
    let weights = softmax(&scores)?;
    let mut out = vec![0.0; values.cols()];
    for (w, v) in weights.iter().zip(values.iter_rows()) {
        for (o, x) in out.iter_mut().zip(v) {
            *o += w * x;
        }
    }
    Ok(out)
}

/// Partial over every token of `blocks`.
pub fn partial_attention<'a, I>(q: &[f64], blocks: I, scale: f64) -> PartialAttention
where
    I: IntoIterator<Item = &'a KvBlock>,
{
    PartialAttention::from_rows(
        q,
        blocks
            .into_iter()
            .flat_map(|b| b.keys.iter_rows().zip(b.values.iter_rows())),
        scale,
    )
}
