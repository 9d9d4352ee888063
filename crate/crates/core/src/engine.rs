//! Layer-ahead sparse decode over the two-tier cache.
//!
//! While layer `i` runs on the resident side, the engine predicts layer
//! `i+1`'s query from layer `i`'s input, picks that layer's top-k blocks, and
//! hands the non-resident ones to a coprocessor task. Layer `i+1` then only
//! has to attend its resident share with the true query and merge the task's
//! partial result.
//!
//! Layer 0 has no earlier layer to predict from, so its blocks are pinned in
//! the fast tier and it selects with its own query.
//!
//! Sealed blocks are the only thing that is ever selected. The open trailing
//! block and the current token are always attended on the resident side.

use std::collections::VecDeque;
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::Arc;
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};

use crate::attention::{merge, partial_attention, PartialAttention};
use crate::digest::{select_topk, BlockIdSet, DigestMethod};
use crate::error::{check_dim, Error, Result};
use crate::kv_store::{CacheConfig, KvBlock, TieredKvCache, Tier};
use crate::model_sim::{measure_query_similarity, prefill, ResidualTrace, ToyDecoder};
use crate::numerics::{cosine_similarity, dot, max_relative_error, softmax, Mat};
use crate::recall::{RatioTrace, RecallPolicy, RecallSchedule, DEFAULT_BETA};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GpuSidePolicy {
    /// Attend `B_pred ∩ resident` so the two sides together cover exactly `B_pred`.
    #[default]
    PredictedTopkIntersectResident,
    /// Attend every resident block.
    AllResident,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub k_blocks: usize,
    pub block_size: usize,
    /// Fast-tier blocks per layer; defaults to `k_blocks`.
    pub fast_capacity: Option<usize>,
    pub gpu_side_policy: GpuSidePolicy,
    pub beta: f64,
    /// Per-layer recall intervals. `None` disables periodic recall.
    pub recall_intervals: Option<Vec<usize>>,
    pub deterministic_serial: bool,
    pub digest_method: DigestMethod,
    /// Recompute every layer's output with the hybrid-query oracle.
    pub verify_oracle: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            k_blocks: 16,
            block_size: 32,
            fast_capacity: None,
            gpu_side_policy: GpuSidePolicy::default(),
            beta: DEFAULT_BETA,
            recall_intervals: None,
            deterministic_serial: false,
            digest_method: DigestMethod::MinMax,
            verify_oracle: true,
        }
    }
}

impl EngineConfig {
    pub fn fast_capacity(&self) -> usize {
        self.fast_capacity.unwrap_or(self.k_blocks)
    }

    pub fn budget_tokens(&self) -> usize {
        self.k_blocks * self.block_size
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if self.k_blocks == 0 {
            return Err(Error::InvalidInput("k_blocks must be ≥ 1".into()));
        }
        if self.block_size == 0 {
            return Err(Error::InvalidInput("block_size must be ≥ 1".into()));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::InvalidInput(format!("beta must lie in (0, 1), got {}", self.beta)));
        }
        if let Some(n) = &self.recall_intervals {
            if n.len() != num_layers || n.contains(&0) {
                return Err(Error::InvalidInput(format!(
                    "recall_intervals needs {num_layers} entries, each ≥ 1"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum EngineEvent {
    StepBegin { step: u64 },
    RecallCompleted { step: u64, layer: usize, ticket: u64 },
    TaskSubmitted { step: u64, layer: usize },
    AttentionComplete { step: u64, layer: usize },
    RecallIssued { step: u64, layer: usize, ticket: u64, blocks: usize },
}

/// Check that every recall was issued after its layer's attention finished
/// and landed no earlier than the start of the following step.
pub fn check_event_order(events: &[EngineEvent]) -> Vec<String> {
    use std::collections::BTreeMap;
    let mut violations = Vec::new();
    let mut attention_done = std::collections::BTreeSet::new();
    let mut issued: BTreeMap<u64, (u64, usize)> = BTreeMap::new();
    let mut current_step = 0;
    for (pos, e) in events.iter().enumerate() {
        match *e {
            EngineEvent::StepBegin { step } => current_step = step,
            EngineEvent::AttentionComplete { step, layer } => {
                attention_done.insert((step, layer));
            }
            EngineEvent::RecallIssued { step, layer, ticket, .. } => {
                if !attention_done.contains(&(step, layer)) {
                    violations.push(format!(
                        "event {pos}: recall {ticket} issued before attention of ({step}, {layer}) completed"
                    ));
                }
                issued.insert(ticket, (step, layer));
            }
            EngineEvent::RecallCompleted { step, layer, ticket } => match issued.get(&ticket) {
                None => violations.push(format!("event {pos}: recall {ticket} completed but never issued")),
                Some(&(s, l)) => {
                    if l != layer || step < s + 1 || current_step < s + 1 {
                        violations.push(format!(
                            "event {pos}: recall {ticket} issued at ({s}, {l}) landed at ({step}, {layer})"
                        ));
                    }
                    if attention_done.contains(&(s + 1, l)) {
                        violations.push(format!(
                            "event {pos}: recall {ticket} landed after attention of ({}, {l})",
                            s + 1
                        ));
                    }
                }
            },
            EngineEvent::TaskSubmitted { .. } => {}
        }
    }
    violations
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerMetrics {
    pub step: u64,
    pub layer: usize,
    pub predicted_blocks: usize,
    pub gpu_blocks: usize,
    pub cpu_blocks: usize,
    pub gpu_tokens: usize,
    pub cpu_tokens: usize,
    /// Open-block rows plus the current token.
    pub tail_tokens: usize,
    pub budget_tokens: usize,
    pub cpu_ratio: f64,
    /// Change fraction of the selection versus the previous step.
    pub drift: Option<f64>,
    /// Cosine between the predicted and true query.
    pub query_similarity: Option<f64>,
    pub recall_blocks: usize,
    pub oracle_residual: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub step: u64,
    pub hidden: Vec<f64>,
    /// Attention output of every layer.
    pub attention: Vec<Vec<f64>>,
    pub layers: Vec<LayerMetrics>,
}

struct PrecomputeTask {
    layer: usize,
    step: u64,
    q_pred: Vec<f64>,
    blocks: Vec<Arc<KvBlock>>,
    scale: f64,
}

struct TaskResult {
    layer: usize,
    step: u64,
    partial: PartialAttention,
}

fn run_task(task: PrecomputeTask) -> TaskResult {
    TaskResult {
        layer: task.layer,
        step: task.step,
        partial: partial_attention(&task.q_pred, task.blocks.iter().map(|b| b.as_ref()), task.scale),
    }
}

/// The coprocessor side: inline in serial mode, a worker thread otherwise.
enum Coprocessor {
    Serial(VecDeque<TaskResult>),
    Threaded {
        tx: Option<Sender<PrecomputeTask>>,
        rx: Receiver<TaskResult>,
        worker: Option<JoinHandle<()>>,
        outstanding: usize,
    },
}

impl Coprocessor {
    fn new(serial: bool) -> Self {
        if serial {
            return Coprocessor::Serial(VecDeque::new());
        }
        let (task_tx, task_rx) = mpsc::channel::<PrecomputeTask>();
        let (result_tx, result_rx) = mpsc::channel();
        let worker = std::thread::spawn(move || {
            for task in task_rx {
                if result_tx.send(run_task(task)).is_err() {
                    break;
                }
            }
        });
        Coprocessor::Threaded {
            tx: Some(task_tx),
            rx: result_rx,
            worker: Some(worker),
            outstanding: 0,
        }
    }

    fn submit(&mut self, task: PrecomputeTask) -> Result<()> {
        match self {
            Coprocessor::Serial(queue) => queue.push_back(run_task(task)),
            Coprocessor::Threaded { tx, outstanding, .. } => {
                tx.as_ref()
                    .and_then(|tx| tx.send(task).ok())
                    .ok_or_else(|| Error::Sequencing("coprocessor worker is gone".into()))?;
                *outstanding += 1;
            }
        }
        Ok(())
    }

    fn await_result(&mut self, layer: usize, step: u64) -> Result<PartialAttention> {
        let result = match self {
            Coprocessor::Serial(queue) => queue.pop_front(),
            Coprocessor::Threaded { rx, outstanding, .. } => {
                if *outstanding == 0 {
                    None
                } else {
                    *outstanding -= 1;
                    rx.recv().ok()
                }
            }
        };
        match result {
            Some(r) if r.layer == layer && r.step == step => Ok(r.partial),
            Some(r) => Err(Error::Sequencing(format!(
                "expected task result for ({step}, {layer}), got ({}, {})",
                r.step, r.layer
            ))),
            None => Err(Error::Sequencing(format!("no task result for ({step}, {layer})"))),
        }
    }

    fn is_idle(&self) -> bool {
        match self {
            Coprocessor::Serial(queue) => queue.is_empty(),
            Coprocessor::Threaded { outstanding, .. } => *outstanding == 0,
        }
    }
}

impl Drop for Coprocessor {
    fn drop(&mut self) {
        if let Coprocessor::Threaded { tx, worker, .. } = self {
            drop(tx.take());
            if let Some(w) = worker.take() {
                let _ = w.join();
            }
        }
    }
}

/// Keys and values of the open block followed by the current token.
fn tail_rows(cache: &TieredKvCache, layer: usize, k: &[f64], v: &[f64]) -> Result<(Mat, Mat)> {
    let open = cache.open_block(layer)?;
    let (mut keys, mut values) = (open.keys.clone(), open.values.clone());
    keys.push_row(k)?;
    values.push_row(v)?;
    Ok((keys, values))
}

fn gather(cache: &TieredKvCache, layer: usize, ids: &BlockIdSet, keys: &mut Mat, values: &mut Mat) -> Result<()> {
    for &id in ids {
        let b = cache.block(layer, id)?;
        for (kr, vr) in b.keys.iter_rows().zip(b.values.iter_rows()) {
            keys.push_row(kr)?;
            values.push_row(vr)?;
        }
    }
    Ok(())
}

/// Exact attention over the `k` blocks selected with `q`, plus the open
/// block and the current token's `(key, value)`.
pub fn reference_block_sparse(
    cache: &TieredKvCache,
    layer: usize,
    q: &[f64],
    k: usize,
    current: (&[f64], &[f64]),
    scale: f64,
) -> Result<Vec<f64>> {
    let ids = select_topk(q, cache.digests(layer)?, k)?;
    let d = q.len();
    let (mut keys, mut values) = (Mat::with_cols(d), Mat::with_cols(d));
    gather(cache, layer, &ids, &mut keys, &mut values)?;
    let (tk, tv) = tail_rows(cache, layer, current.0, current.1)?;
    gather_mat(&tk, &tv, &mut keys, &mut values)?;
    crate::attention::exact_attention(q, &keys, &values, scale)
}

fn gather_mat(k: &Mat, v: &Mat, keys: &mut Mat, values: &mut Mat) -> Result<()> {
    for (kr, vr) in k.iter_rows().zip(v.iter_rows()) {
        keys.push_row(kr)?;
        values.push_row(vr)?;
    }
    Ok(())
}

/// One softmax over two token groups scored with different queries: `q_true`
/// for `resident` blocks and the tail, `q_pred` for `offloaded` blocks.
#[allow(clippy::too_many_arguments)]
pub fn hybrid_reference(
    cache: &TieredKvCache,
    layer: usize,
    q_true: &[f64],
    q_pred: &[f64],
    resident: &BlockIdSet,
    offloaded: &BlockIdSet,
    current: (&[f64], &[f64]),
    scale: f64,
) -> Result<Vec<f64>> {
    let d = q_true.len();
    let (mut rk, mut rv) = (Mat::with_cols(d), Mat::with_cols(d));
    gather(cache, layer, resident, &mut rk, &mut rv)?;
    let (tk, tv) = tail_rows(cache, layer, current.0, current.1)?;
    gather_mat(&tk, &tv, &mut rk, &mut rv)?;
    let (mut ok, mut ov) = (Mat::with_cols(d), Mat::with_cols(d));
    gather(cache, layer, offloaded, &mut ok, &mut ov)?;
    let logits: Vec<f64> = rk
        .iter_rows()
        .map(|k| scale * dot(q_true, k))
        .chain(ok.iter_rows().map(|k| scale * dot(q_pred, k)))
        .collect();
    let weights = softmax(&logits)?;
    let mut out = vec![0.0; d];
    for (w, v) in weights.iter().zip(rv.iter_rows().chain(ov.iter_rows())) {
        for (o, x) in out.iter_mut().zip(v) {
            *o += w * x;
        }
    }
    Ok(out)
}

/// `|S_t \ S_{t+1}| / k` for each consecutive pair.
pub fn measure_block_drift(selections: &[BlockIdSet]) -> Result<Vec<f64>> {
    let Some(first) = selections.first() else {
        return Ok(Vec::new());
    };
    let k = first.len();
    if selections.iter().any(|s| s.len() != k) {
        return Err(Error::InvalidInput("selections differ in cardinality".into()));
    }
    if k == 0 {
        return Ok(vec![0.0; selections.len() - 1]);
    }
    Ok(selections
        .windows(2)
        .map(|w| w[0].difference(&w[1]).count() as f64 / k as f64)
        .collect())
}

pub struct Engine {
    decoder: Arc<ToyDecoder>,
    config: EngineConfig,
    cache: TieredKvCache,
    recall: Option<RecallPolicy>,
    coprocessor: Coprocessor,
    step: u64,
    embedding: Vec<f64>,
    last_hidden: Vec<f64>,
    trace: ResidualTrace,
    ratios: RatioTrace,
    events: Vec<EngineEvent>,
    selections: Vec<Vec<BlockIdSet>>,
    prefilled: bool,
}

impl Engine {
    pub fn new(decoder: Arc<ToyDecoder>, config: EngineConfig) -> Result<Self> {
        let layers = decoder.num_layers();
        config.validate(layers)?;
        let cache = TieredKvCache::new(CacheConfig {
            layers,
            head_dim: decoder.head_dim(),
            block_size: config.block_size,
            fast_capacity: config.fast_capacity(),
            digest_method: config.digest_method,
        })?;
        let recall = config.recall_intervals.clone().map(RecallPolicy::new).transpose()?;
        let trace = ResidualTrace::new(layers, decoder.hidden_dim(), decoder.head_dim());
        Ok(Self {
            coprocessor: Coprocessor::new(config.deterministic_serial),
            cache,
            recall,
            step: 0,
            embedding: Vec::new(),
            last_hidden: Vec::new(),
            trace,
            ratios: RatioTrace::new(layers),
            events: Vec::new(),
            selections: vec![Vec::new(); layers],
            prefilled: false,
            decoder,
            config,
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn decoder(&self) -> &ToyDecoder {
        &self.decoder
    }

    pub fn cache(&self) -> &TieredKvCache {
        &self.cache
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn events(&self) -> &[EngineEvent] {
        &self.events
    }

    /// Ratio samples of every decode step so far.
    pub fn ratio_trace(&self) -> &RatioTrace {
        &self.ratios
    }

    /// Layer inputs and true queries of every decode step so far.
    pub fn decode_trace(&self) -> &ResidualTrace {
        &self.trace
    }

    /// Per-layer selections (`B_pred`, or the true top-k for layer 0) by step.
    pub fn selections(&self, layer: usize) -> &[BlockIdSet] {
        &self.selections[layer]
    }

    /// Per-layer mean query similarity over the decode trace.
    pub fn query_similarity(&self) -> Result<Vec<f64>> {
        measure_query_similarity(&self.trace, &self.decoder)
    }

    /// Replace the recall schedule. `None` disables periodic recall.
    pub fn set_recall_schedule(&mut self, schedule: Option<&RecallSchedule>) -> Result<()> {
        self.recall = match schedule {
            Some(s) => {
                check_dim("set_recall_schedule", self.decoder.num_layers(), s.intervals.len())?;
                Some(RecallPolicy::new(s.intervals.clone())?)
            }
            None => None,
        };
        self.config.recall_intervals = schedule.map(|s| s.intervals.clone());
        Ok(())
    }

    /// Prefill the cache, pin layer 0 and place every other layer's blocks by
    /// the last prompt token's query.
    pub fn prefill(&mut self, embeddings: &Mat) -> Result<ResidualTrace> {
        if self.prefilled {
            return Err(Error::Sequencing("prefill called twice".into()));
        }
        if embeddings.is_empty() {
            return Err(Error::Empty("Engine::prefill"));
        }
        let trace = prefill(&self.decoder, embeddings, &mut self.cache)?;
        let last = embeddings.rows() - 1;
        self.cache.pin_layer(0)?;
        for layer in 1..self.decoder.num_layers() {
            self.cache.place_initial(layer, trace.queries[layer].row(last))?;
        }
        self.embedding = embeddings.row(last).to_vec();
        self.last_hidden = trace.output.row(last).to_vec();
        self.prefilled = true;
        Ok(trace)
    }

    /// An independent copy of the current state with its own coprocessor.
    pub fn fork(&self) -> Result<Self> {
        if !self.coprocessor.is_idle() {
            return Err(Error::Sequencing("fork with a task outstanding".into()));
        }
        Ok(Self {
            decoder: Arc::clone(&self.decoder),
            config: self.config.clone(),
            cache: self.cache.clone(),
            recall: self.recall.clone(),
            coprocessor: Coprocessor::new(self.config.deterministic_serial),
            step: self.step,
            embedding: self.embedding.clone(),
            last_hidden: self.last_hidden.clone(),
            trace: self.trace.clone(),
            ratios: self.ratios.clone(),
            events: self.events.clone(),
            selections: self.selections.clone(),
            prefilled: self.prefilled,
        })
    }

    /// The embedding the next decode step would consume.
    pub fn next_token(&self) -> Result<Vec<f64>> {
        if !self.prefilled {
            return Err(Error::Sequencing("decode before prefill".into()));
        }
        self.decoder.next_embedding(&self.embedding, &self.last_hidden)
    }

    /// Decode `steps` tokens, each derived from the previous output.
    pub fn decode(&mut self, steps: usize) -> Result<Vec<StepOutput>> {
        (0..steps)
            .map(|_| {
                let x0 = self.next_token()?;
                self.decode_step(&x0)
            })
            .collect()
    }

    /// Run one token through every layer.
    pub fn decode_step(&mut self, x0: &[f64]) -> Result<StepOutput> {
        if !self.prefilled {
            return Err(Error::Sequencing("decode before prefill".into()));
        }
        check_dim("decode_step", self.decoder.hidden_dim(), x0.len())?;
        let step = self.step + 1;
        self.events.push(EngineEvent::StepBegin { step });
        for done in self.cache.complete_recalls(step)? {
            for &ticket in &done.tickets {
                self.events.push(EngineEvent::RecallCompleted {
                    step,
                    layer: done.layer,
                    ticket,
                });
            }
        }

        let decoder = Arc::clone(&self.decoder);
        let layers = decoder.num_layers();
        let k = self.config.k_blocks;
        let budget = self.config.budget_tokens();
        let scale = decoder.scale();
        let mut x = x0.to_vec();
        let mut attention = Vec::with_capacity(layers);
        let mut metrics = Vec::with_capacity(layers);
        // B_pred and Q_pred for the next layer, produced one layer early
        let mut predicted: Option<(BlockIdSet, Vec<f64>)> = None;

        for layer in 0..layers {
            let current = predicted.take();
            let (q, kv_k, kv_v) = decoder.project(layer, &x)?;
            self.trace.hidden[layer].push_row(&x)?;
            self.trace.queries[layer].push_row(&q)?;

            if layer + 1 < layers {
                let q_next = decoder.query(layer + 1, &x)?;
                let b_next = select_topk(&q_next, self.cache.digests(layer + 1)?, k)?;
                let resident = self.cache.residency_set(layer + 1)?;
                let offload: BlockIdSet = b_next.difference(&resident).copied().collect();
                let blocks = self.cache.fetch_blocks(layer + 1, &offload, Tier::Slow)?;
                self.coprocessor.submit(PrecomputeTask {
                    layer: layer + 1,
                    step,
                    q_pred: q_next.clone(),
                    blocks,
                    scale,
                })?;
                self.events.push(EngineEvent::TaskSubmitted { step, layer: layer + 1 });
                predicted = Some((b_next, q_next));
            }

            let resident = self.cache.residency_set(layer)?;
            let (selection, q_pred, cpu_partial) = if layer == 0 {
                (select_topk(&q, self.cache.digests(0)?, k)?, None, PartialAttention::empty(q.len()))
            } else {
                let (sel, qp) = current.ok_or_else(|| {
                    Error::Sequencing(format!("no prediction for ({step}, {layer})"))
                })?;
                let cpu = self.coprocessor.await_result(layer, step)?;
                (sel, Some(qp), cpu)
            };
            let gpu_ids: BlockIdSet = match self.config.gpu_side_policy {
                GpuSidePolicy::PredictedTopkIntersectResident => {
                    selection.intersection(&resident).copied().collect()
                }
                GpuSidePolicy::AllResident => resident.clone(),
            };
            let cpu_ids: BlockIdSet = selection.difference(&resident).copied().collect();
            if !gpu_ids.is_disjoint(&cpu_ids) {
                return Err(Error::Invariant(format!("layer {layer}: resident and offloaded sets overlap")));
            }
            let bs = self.config.block_size;
            if cpu_partial.token_count() != cpu_ids.len() * bs {
                return Err(Error::Invariant(format!(
                    "layer {layer}: task covered {} tokens, expected {}",
                    cpu_partial.token_count(),
                    cpu_ids.len() * bs
                )));
            }
            if self.config.gpu_side_policy == GpuSidePolicy::PredictedTopkIntersectResident {
                let union: BlockIdSet = gpu_ids.union(&cpu_ids).copied().collect();
                if union != selection {
                    return Err(Error::Invariant(format!("layer {layer}: split does not cover the selection")));
                }
            }

            let gpu_blocks = self.cache.fetch_blocks(layer, &gpu_ids, Tier::Fast)?;
            let (tail_k, tail_v) = tail_rows(&self.cache, layer, &kv_k, &kv_v)?;
            let resident_partial = merge(
                &partial_attention(&q, gpu_blocks.iter().map(|b| b.as_ref()), scale),
                &PartialAttention::over_mat(&q, &tail_k, &tail_v, scale)?,
            );
            let out = merge(&resident_partial, &cpu_partial).finalize()?;
            self.events.push(EngineEvent::AttentionComplete { step, layer });

            let oracle_residual = if self.config.verify_oracle {
                let reference = hybrid_reference(
                    &self.cache,
                    layer,
                    &q,
                    q_pred.as_deref().unwrap_or(&q),
                    &gpu_ids,
                    &cpu_ids,
                    (&kv_k, &kv_v),
                    scale,
                )?;
                Some(max_relative_error(&out, &reference))
            } else {
                None
            };
            let query_similarity = match &q_pred {
                Some(qp) => cosine_similarity(qp, &q).ok(),
                None => None,
            };
            let drift = self.selections[layer]
                .last()
                .and_then(|prev| measure_block_drift(&[prev.clone(), selection.clone()]).ok())
                .map(|d| d[0]);

            let mut recall_blocks = 0;
            if let (Some(policy), false) = (self.recall.as_mut(), self.cache.is_pinned(layer)?) {
                let mut occupied = resident.clone();
                occupied.extend(self.cache.in_flight(layer)?.keys().copied());
                if let Some(req) = policy.maybe_schedule_recall(layer, step, &selection, &occupied) {
                    if !req.blocks.is_empty() {
                        let ticket = self.cache.schedule_recall(layer, &req.blocks, step, layer)?;
                        recall_blocks = req.blocks.len();
                        self.events.push(EngineEvent::RecallIssued {
                            step,
                            layer,
                            ticket: ticket.id,
                            blocks: recall_blocks,
                        });
                    }
                }
            }
            self.cache.mark_selected(layer, &selection, step)?;

            let cpu_tokens = cpu_partial.token_count();
            let cpu_ratio = self.ratios.record(layer, step, cpu_tokens, budget)?;
            metrics.push(LayerMetrics {
                step,
                layer,
                predicted_blocks: selection.len(),
                gpu_blocks: gpu_ids.len(),
                cpu_blocks: cpu_ids.len(),
                gpu_tokens: gpu_ids.len() * bs,
                cpu_tokens,
                tail_tokens: tail_k.rows(),
                budget_tokens: budget,
                cpu_ratio,
                drift,
                query_similarity,
                recall_blocks,
                oracle_residual,
            });
            self.selections[layer].push(selection);

            x = decoder.finish_layer(layer, &x, &out)?;
            self.cache.append_token(layer, &kv_k, &kv_v)?;
            attention.push(out);
        }

        self.trace.output.push_row(&x)?;
        self.embedding = x0.to_vec();
        self.last_hidden = x.clone();
        self.step = step;
        Ok(StepOutput {
            step,
            hidden: x,
            attention,
            layers: metrics,
        })
    }
}
