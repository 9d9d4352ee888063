//! Synthetic single-head decoder used to generate residual streams.
//!
//! Each layer applies two residual branches to a hidden state `x` of width `h`:
//!
//! ```text
//! x ← x + α · Attn(rms(x)) · W_O
//! x ← x + α · FFN(rms(x))
//! ```
//!
//! Weights are drawn from `N(0, 1/fan_in)` with a ChaCha stream keyed by the
//! seed, so the whole model is reproducible bit for bit. `α` is the knob that
//! controls how far consecutive layer inputs drift apart.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::{default_scale, PartialAttention};
use crate::error::{check_dim, Error, Result};
use crate::kv_store::TieredKvCache;
use crate::numerics::{cosine_similarity, rms_normalize, Mat};

/// Weight of the previous embedding when deriving the next decode token.
pub const FEEDBACK_MOMENTUM: f64 = 0.9;

const WEIGHT_STREAM: u64 = 0;
const EMBEDDING_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub head_dim: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 8,
            hidden_dim: 128,
            head_dim: 64,
            alpha: 0.1,
            seed: 17,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.hidden_dim == 0 || self.head_dim == 0 {
            return Err(Error::InvalidInput(format!(
                "decoder dimensions must be nonzero: {self:?}"
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidInput(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
    pub w_up: Mat,
    pub w_down: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDecoder {
    config: DecoderConfig,
    layers: Vec<LayerWeights>,
    feedback: Mat,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Mat {
    let std = 1.0 / (fan_in as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect();
    Mat::from_vec(rows, cols, data).expect("shape matches by construction")
}

impl ToyDecoder {
    pub fn new(config: DecoderConfig) -> Result<Self> {
        config.validate()?;
        let (h, d) = (config.hidden_dim, config.head_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(WEIGHT_STREAM);
        let layers = (0..config.num_layers)
            .map(|_| LayerWeights {
                wq: gaussian(&mut rng, h, d, h),
                wk: gaussian(&mut rng, h, d, h),
                wv: gaussian(&mut rng, h, d, h),
                wo: gaussian(&mut rng, d, h, d),
                w_up: gaussian(&mut rng, h, 2 * h, h),
                w_down: gaussian(&mut rng, 2 * h, h, 2 * h),
            })
            .collect();
        let feedback = gaussian(&mut rng, h, h, h);
        Ok(Self {
            config,
            layers,
            feedback,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn num_layers(&self) -> usize {
        self.config.num_layers
    }

    pub fn hidden_dim(&self) -> usize {
        self.config.hidden_dim
    }

    pub fn head_dim(&self) -> usize {
        self.config.head_dim
    }

    pub fn weights(&self, layer: usize) -> &LayerWeights {
        &self.layers[layer]
    }

    pub fn scale(&self) -> f64 {
        default_scale(self.config.head_dim)
    }

    /// Query of `layer` for layer input `x`.
    pub fn query(&self, layer: usize, x: &[f64]) -> Result<Vec<f64>> {
        predict_next_query(x, &self.layers[layer].wq)
    }

    /// Query, key and value of `layer` for layer input `x`.
    pub fn project(&self, layer: usize, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        check_dim("ToyDecoder::project", self.config.hidden_dim, x.len())?;
        let w = &self.layers[layer];
        let xn = rms_normalize(x);
        Ok((w.wq.vec_mul(&xn)?, w.wk.vec_mul(&xn)?, w.wv.vec_mul(&xn)?))
    }

    /// Apply the attention branch output and then the FFN branch.
    pub fn finish_layer(&self, layer: usize, x: &[f64], attn_out: &[f64]) -> Result<Vec<f64>> {
        let w = &self.layers[layer];
        let a = self.config.alpha;
        let o = w.wo.vec_mul(attn_out)?;
        let mut x: Vec<f64> = x.iter().zip(&o).map(|(xi, oi)| xi + a * oi).collect();
        let mut up = w.w_up.vec_mul(&rms_normalize(&x))?;
        up.iter_mut().for_each(|u| *u = u.max(0.0));
        let down = w.w_down.vec_mul(&up)?;
        x.iter_mut().zip(&down).for_each(|(xi, f)| *xi += a * f);
        Ok(x)
    }

    /// `n` random unit-RMS token embeddings drawn from the seed.
    pub fn embeddings(&self, n: usize) -> Mat {
        let h = self.config.hidden_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(EMBEDDING_STREAM);
        let mut m = Mat::with_cols(h);
        for _ in 0..n {
            let row: Vec<f64> = (0..h).map(|_| StandardNormal.sample(&mut rng)).collect();
            m.push_row(&rms_normalize(&row)).expect("width h");
        }
        m
    }

    /// Next decode token: a momentum blend of the previous embedding and a
    /// fixed projection of the last final hidden state.
    pub fn next_embedding(&self, prev: &[f64], final_hidden: &[f64]) -> Result<Vec<f64>> {
        check_dim("ToyDecoder::next_embedding", self.config.hidden_dim, prev.len())?;
        let fed = rms_normalize(&self.feedback.vec_mul(&rms_normalize(final_hidden))?);
        let mixed: Vec<f64> = prev
            .iter()
            .zip(&fed)
            .map(|(p, f)| FEEDBACK_MOMENTUM * p + (1.0 - FEEDBACK_MOMENTUM) * f)
            .collect();
        Ok(rms_normalize(&mixed))
    }
}

/// Predicted query for the next layer: its query projection applied to the
/// current layer's normalized input.
pub fn predict_next_query(x: &[f64], wq_next: &Mat) -> Result<Vec<f64>> {
    check_dim("predict_next_query", wq_next.rows(), x.len())?;
    wq_next.vec_mul(&rms_normalize(x))
}

/// Per-layer layer inputs `X^i` and true queries `Q^i`, one row per position.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualTrace {
    pub hidden: Vec<Mat>,
    pub queries: Vec<Mat>,
    /// Output of the last layer, one row per position.
    pub output: Mat,
}

impl ResidualTrace {
    pub fn new(num_layers: usize, hidden_dim: usize, head_dim: usize) -> Self {
        Self {
            hidden: vec![Mat::with_cols(hidden_dim); num_layers],
            queries: vec![Mat::with_cols(head_dim); num_layers],
            output: Mat::with_cols(hidden_dim),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.hidden.len()
    }

    pub fn positions(&self) -> usize {
        self.output.rows()
    }
}

/// Run every embedding through the decoder with exact causal attention,
/// appending each layer's keys and values to `cache`.
pub fn prefill(decoder: &ToyDecoder, embeddings: &Mat, cache: &mut TieredKvCache) -> Result<ResidualTrace> {
    let cfg = decoder.config();
    check_dim("prefill", cfg.hidden_dim, embeddings.cols())?;
    check_dim("prefill", cfg.num_layers, cache.config().layers)?;
    check_dim("prefill", cfg.head_dim, cache.config().head_dim)?;
    let n = embeddings.rows();
    let mut trace = ResidualTrace::new(cfg.num_layers, cfg.hidden_dim, cfg.head_dim);
    let mut x = embeddings.clone();
    for layer in 0..cfg.num_layers {
        let (mut keys, mut values) = (Mat::with_cols(cfg.head_dim), Mat::with_cols(cfg.head_dim));
        let mut queries = Vec::with_capacity(n);
        for row in x.iter_rows() {
            let (q, k, v) = decoder.project(layer, row)?;
            keys.push_row(&k)?;
            values.push_row(&v)?;
            queries.push(q);
        }
        let mut next = Mat::with_cols(cfg.hidden_dim);
        for (t, q) in queries.iter().enumerate() {
            let prefix = (0..=t).map(|j| (keys.row(j), values.row(j)));
            let out = PartialAttention::from_rows(q, prefix, decoder.scale()).finalize()?;
            next.push_row(&decoder.finish_layer(layer, x.row(t), &out)?)?;
            trace.queries[layer].push_row(q)?;
            cache.append_token(layer, keys.row(t), values.row(t))?;
        }
        trace.hidden[layer] = std::mem::replace(&mut x, next);
    }
    trace.output = x;
    Ok(trace)
}

/// For each boundary `i → i+1`, the mean over positions of
/// `cos(Q_pred^{i+1}, Q^{i+1})`. Positions where either query is zero count
/// as similarity 1 when both are zero and 0 otherwise.
pub fn measure_query_similarity(trace: &ResidualTrace, decoder: &ToyDecoder) -> Result<Vec<f64>> {
    check_dim("measure_query_similarity", decoder.num_layers(), trace.num_layers())?;
    let positions = trace.hidden[0].rows();
    if positions == 0 {
        return Err(Error::Empty("measure_query_similarity"));
    }
    (0..trace.num_layers().saturating_sub(1))
        .map(|i| {
            check_dim("measure_query_similarity", positions, trace.queries[i + 1].rows())?;
            let mut total = 0.0;
            for (x, q_true) in trace.hidden[i].iter_rows().zip(trace.queries[i + 1].iter_rows()) {
                let q_pred = decoder.query(i + 1, x)?;
                total += match cosine_similarity(&q_pred, q_true) {
                    Ok(c) => c,
                    Err(_) if q_pred.iter().chain(q_true).all(|v| *v == 0.0) => 1.0,
                    Err(_) => 0.0,
                };
            }
            Ok(total / positions as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::digest::DigestMethod;
    use crate::kv_store::CacheConfig;
    use crate::numerics::{dot, max_relative_error};

    fn small(alpha: f64, seed: u64) -> ToyDecoder {
        ToyDecoder::new(DecoderConfig {
            num_layers: 4,
            hidden_dim: 32,
            head_dim: 16,
            alpha,
            seed,
        })
        .unwrap()
    }

    fn cache_for(d: &ToyDecoder) -> TieredKvCache {
        TieredKvCache::new(CacheConfig {
            layers: d.num_layers(),
            head_dim: d.head_dim(),
            block_size: 8,
            fast_capacity: 1000,
            digest_method: DigestMethod::MinMax,
        })
        .unwrap()
    }

    #[test]
    fn weight_shapes() {
        let d = small(0.1, 1);
        let w = d.weights(2);
        assert_eq!((w.wq.rows(), w.wq.cols()), (32, 16));
        assert_eq!((w.wo.rows(), w.wo.cols()), (16, 32));
        assert_eq!((w.w_up.rows(), w.w_up.cols()), (32, 64));
        assert_eq!((w.w_down.rows(), w.w_down.cols()), (64, 32));
    }

    #[test]
    fn construction_is_deterministic() {
        assert_eq!(small(0.1, 4), small(0.1, 4));
        assert_ne!(small(0.1, 4).weights(0).wq, small(0.1, 5).weights(0).wq);
    }

    #[test]
    fn rejects_bad_config() {
        let bad = DecoderConfig {
            alpha: 1.5,
            ..DecoderConfig::default()
        };
        assert!(ToyDecoder::new(bad).is_err());
    }

    #[test]
    fn embeddings_have_unit_rms() {
        let e = small(0.1, 2).embeddings(10);
        for row in e.iter_rows() {
            assert!((dot(row, row) / 32.0 - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn one_token_prefill_shapes() {
        let d = small(0.1, 3);
        let mut cache = cache_for(&d);
        let trace = prefill(&d, &d.embeddings(1), &mut cache).unwrap();
        assert_eq!(trace.num_layers(), 4);
        assert_eq!(trace.positions(), 1);
        for l in 0..4 {
            assert_eq!(cache.token_count(l).unwrap(), 1);
        }
    }

    #[test]
    fn prefill_rejects_wrong_width() {
        let d = small(0.1, 3);
        let mut cache = cache_for(&d);
        assert!(prefill(&d, &Mat::zeros(3, 31), &mut cache).is_err());
    }

    #[test]
    fn alpha_zero_passes_residual_through() {
        let d = small(0.0, 3);
        let mut cache = cache_for(&d);
        let trace = prefill(&d, &d.embeddings(20), &mut cache).unwrap();
        for l in 1..4 {
            assert_eq!(trace.hidden[l], trace.hidden[0]);
        }
        for s in measure_query_similarity(&trace, &d).unwrap() {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn prefill_matches_direct_recomputation() {
        let d = small(0.2, 8);
        let mut cache = cache_for(&d);
        let emb = d.embeddings(24);
        let trace = prefill(&d, &emb, &mut cache).unwrap();
        // recompute layer 0's output at position 5 straight from the weights
        let w = d.weights(0);
        let rows: Vec<_> = (0..=5).map(|t| rms_normalize(emb.row(t))).collect();
        let q = w.wq.vec_mul(&rows[5]).unwrap();
        let logits: Vec<f64> = rows
            .iter()
            .map(|r| dot(&q, &w.wk.vec_mul(r).unwrap()) * d.scale())
            .collect();
        let p = crate::numerics::softmax(&logits).unwrap();
        let mut a = vec![0.0; 16];
        for (pi, r) in p.iter().zip(&rows) {
            for (ai, vi) in a.iter_mut().zip(w.wv.vec_mul(r).unwrap()) {
                *ai += pi * vi;
            }
        }
        let want = d.finish_layer(0, emb.row(5), &a).unwrap();
        assert!(max_relative_error(trace.hidden[1].row(5), &want) <= 1e-12);
        for row in trace.output.iter_rows() {
            assert!(row.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn prediction_is_linear_and_exact_on_identical_inputs() {
        let d = small(0.1, 2);
        assert!(predict_next_query(&[0.0; 32], &d.weights(1).wq)
            .unwrap()
            .iter()
            .all(|v| *v == 0.0));
        let x = d.embeddings(1).row(0).to_vec();
        assert_eq!(d.query(1, &x).unwrap(), predict_next_query(&x, &d.weights(1).wq).unwrap());
        assert!(predict_next_query(&x[..10], &d.weights(1).wq).is_err());
    }

    #[test]
    fn orthogonal_replacement_has_near_zero_similarity() {
        let d = small(0.1, 6);
        let mut cache = cache_for(&d);
        let mut trace = prefill(&d, &d.embeddings(16), &mut cache).unwrap();
        // replace each true query with one orthogonal to its prediction
        for i in 0..3 {
            for t in 0..16 {
                let p = d.query(i + 1, trace.hidden[i].row(t)).unwrap();
                let mut o = vec![0.0; 16];
                o[0] = p[1];
                o[1] = -p[0];
                trace.queries[i + 1].row_mut(t).copy_from_slice(&o);
            }
        }
        for s in measure_query_similarity(&trace, &d).unwrap() {
            assert!(s.abs() < 1e-12);
        }
    }
}
