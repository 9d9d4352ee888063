//! Shared fixtures and test-side oracles.

#![allow(dead_code)]

use std::sync::Arc;

use scout_core::digest::{digest_score, BlockId, BlockIdSet};
use scout_core::engine::{Engine, EngineConfig, StepOutput};
use scout_core::kv_store::TieredKvCache;
use scout_core::model_sim::{DecoderConfig, ToyDecoder};
use scout_core::numerics::{dot, max_relative_error};

pub const PREFILL_TOKENS: usize = 1024;

pub fn decoder(alpha: f64) -> Arc<ToyDecoder> {
    Arc::new(
        ToyDecoder::new(DecoderConfig {
            alpha,
            ..DecoderConfig::default()
        })
        .unwrap(),
    )
}

pub fn prefilled(decoder: Arc<ToyDecoder>, config: EngineConfig) -> Engine {
    let emb = decoder.embeddings(PREFILL_TOKENS);
    let mut e = Engine::new(decoder, config).unwrap();
    e.prefill(&emb).unwrap();
    e
}

pub fn default_engine(alpha: f64, serial: bool) -> Engine {
    prefilled(
        decoder(alpha),
        EngineConfig {
            deterministic_serial: serial,
            ..EngineConfig::default()
        },
    )
}

/// Top-k by a full sort of digest scores, ties to the lower id.
pub fn sorted_topk(cache: &TieredKvCache, layer: usize, q: &[f64], k: usize) -> BlockIdSet {
    let mut scored: Vec<(f64, usize)> = cache
        .digests(layer)
        .unwrap()
        .iter()
        .map(|d| (digest_score(q, d).unwrap(), d.block_id.0))
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    scored.into_iter().take(k).map(|(_, i)| BlockId(i)).collect()
}

/// `(key, value, query)` rows with the query used to score each row.
fn rows_of<'a>(
    cache: &'a TieredKvCache,
    layer: usize,
    ids: &BlockIdSet,
    q: &'a [f64],
    out: &mut Vec<(Vec<f64>, Vec<f64>, &'a [f64])>,
) {
    for id in ids {
        let b = cache.block(layer, *id).unwrap();
        for r in 0..b.keys.rows() {
            out.push((b.keys.row(r).to_vec(), b.values.row(r).to_vec(), q));
        }
    }
}

/// Softmax-weighted value sum where every row carries its own query.
fn mixed_softmax(rows: &[(Vec<f64>, Vec<f64>, &[f64])], scale: f64) -> Vec<f64> {
    let logits: Vec<f64> = rows.iter().map(|(k, _, q)| scale * dot(q, k)).collect();
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|s| (s - m).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut out = vec![0.0; rows[0].1.len()];
    for (wi, (_, v, _)) in w.iter().zip(rows) {
        for (o, x) in out.iter_mut().zip(v) {
            *o += wi / total * x;
        }
    }
    out
}

pub struct OracleReport {
    pub outputs: Vec<StepOutput>,
    /// Per (step, layer): residual against exact attention over the true-query top-k.
    pub block_sparse: Vec<f64>,
    /// Per (step, layer): residual against the hybrid-query reference.
    pub hybrid: Vec<f64>,
}

impl OracleReport {
    pub fn max_block_sparse(&self) -> f64 {
        self.block_sparse.iter().copied().fold(0.0, f64::max)
    }

    pub fn max_hybrid(&self) -> f64 {
        self.hybrid.iter().copied().fold(0.0, f64::max)
    }
}

/// Decode `steps` tokens, checking every layer's attention output against
/// oracles rebuilt from a copy of the cache taken at the step boundary.
pub fn decode_with_oracles(engine: &mut Engine, steps: usize) -> OracleReport {
    let decoder = Arc::new(engine.decoder().clone());
    let k = engine.config().k_blocks;
    let scale = decoder.scale();
    let mut report = OracleReport {
        outputs: Vec::new(),
        block_sparse: Vec::new(),
        hybrid: Vec::new(),
    };
    for _ in 0..steps {
        let step = engine.step() + 1;
        let mut snap = engine.cache().clone();
        snap.complete_recalls(step).unwrap();
        let x0 = engine.next_token().unwrap();
        let out = engine.decode_step(&x0).unwrap();
        let trace = engine.decode_trace();
        let pos = (step - 1) as usize;
        for layer in 0..decoder.num_layers() {
            let x = trace.hidden[layer].row(pos);
            let (q, kk, vv) = decoder.project(layer, x).unwrap();
            let open = snap.open_block(layer).unwrap();
            let mut tail: Vec<(Vec<f64>, Vec<f64>, &[f64])> = (0..open.keys.rows())
                .map(|r| (open.keys.row(r).to_vec(), open.values.row(r).to_vec(), &q[..]))
                .collect();
            tail.push((kk.clone(), vv.clone(), &q[..]));

            let mut rows = Vec::new();
            rows_of(&snap, layer, &sorted_topk(&snap, layer, &q, k), &q, &mut rows);
            rows.extend(tail.iter().cloned());
            let got = &out.attention[layer];
            report.block_sparse.push(max_relative_error(got, &mixed_softmax(&rows, scale)));

            let q_pred = if layer == 0 {
                q.clone()
            } else {
                decoder.query(layer, trace.hidden[layer - 1].row(pos)).unwrap()
            };
            let selection = sorted_topk(&snap, layer, &q_pred, k);
            let resident = snap.residency_set(layer).unwrap();
            let gpu: BlockIdSet = selection.intersection(&resident).copied().collect();
            let cpu: BlockIdSet = selection.difference(&resident).copied().collect();
            let mut rows = Vec::new();
            rows_of(&snap, layer, &gpu, &q, &mut rows);
            rows_of(&snap, layer, &cpu, &q_pred, &mut rows);
            rows.extend(tail);
            report.hybrid.push(max_relative_error(got, &mixed_softmax(&rows, scale)));
        }
        report.outputs.push(out);
    }
    report
}
