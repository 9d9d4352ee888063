//! Discrete-event timing model of one decode pipeline on three devices:
//! the accelerator (`gpu`), the host cores (`cpu`) and the host link (`link`).
//!
//! Parameters are given in microseconds and GB/s. Events are placed on an
//! integer nanosecond grid so per-device busy and idle time add up to the
//! total exactly.
//!
//! Four strategies are modelled:
//!
//! * `full_kv`: the whole cache stays on the accelerator. Attention scales
//!   with context, and the batch is capped by free accelerator memory.
//! * `recall_prefetch`: each layer's missing KV share is copied over the link
//!   one layer ahead, and the accelerator waits for it.
//! * `co_attention`: the host attends the offloaded share in parallel with
//!   the accelerator's attention, and the accelerator waits at the merge.
//! * `scout`: the host task for layer `i+1` starts right after layer `i`'s
//!   digest scan and has the whole layer window to finish. Periodic recall
//!   transfers are due one step after they are issued.

use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::recall::{calibrate_intervals, RatioTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    FullKv,
    RecallPrefetch,
    CoAttention,
    Scout,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::FullKv,
        Strategy::RecallPrefetch,
        Strategy::CoAttention,
        Strategy::Scout,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::FullKv => "full_kv",
            Strategy::RecallPrefetch => "recall_prefetch",
            Strategy::CoAttention => "co_attention",
            Strategy::Scout => "scout",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown strategy {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostParams {
    /// Attention time per layer over the sparse budget at `reference_batch`.
    pub layer_attention_us: f64,
    /// Whole-layer time at `reference_batch`.
    pub layer_total_us: f64,
    pub gpu_cpu_compute_ratio: f64,
    /// `(granularity bytes, GB/s)` anchors, strictly increasing in granularity.
    pub bandwidth_table: Vec<(f64, f64)>,
    pub token_kv_bytes: f64,
    pub hbm_bandwidth_gbps: f64,
    pub batch: usize,
    /// Batch at which the layer times were measured.
    pub reference_batch: usize,
    pub layers: usize,
    pub context_tokens: usize,
    pub budget_tokens: usize,
    pub block_size: usize,
    pub steps: usize,
    /// Accelerator memory left for the KV cache in `full_kv`.
    pub free_bytes: f64,
    /// Accelerator stall at each merge with a host result.
    pub sync_overhead_us: f64,
    /// Share of the budget `recall_prefetch` has to move per layer.
    pub prefetch_fraction: f64,
    pub prefetch_granularity_bytes: f64,
    /// Share of the budget `co_attention` leaves on the host.
    pub co_attention_cpu_share: f64,
    pub beta: f64,
    /// Recall-free ratio per step since the last recall. Empty selects the
    /// built-in linear profile.
    pub cpu_ratio_series: Vec<f64>,
    pub precompute: bool,
    pub periodic_recall: bool,
}

impl Default for CostParams {
    fn default() -> Self {
        Self {
            layer_attention_us: 300.0,
            layer_total_us: 900.0,
            gpu_cpu_compute_ratio: 20.0,
            bandwidth_table: vec![(4096.0, 0.8), (131072.0, 15.0)],
            token_kv_bytes: 4096.0,
            hbm_bandwidth_gbps: 1900.0,
            batch: 40,
            reference_batch: 40,
            layers: 40,
            context_tokens: 32768,
            budget_tokens: 2048,
            block_size: 32,
            steps: 32,
            free_bytes: 45e9,
            sync_overhead_us: 50.0,
            prefetch_fraction: 0.10,
            prefetch_granularity_bytes: 131072.0,
            co_attention_cpu_share: 0.25,
            beta: 0.12,
            cpu_ratio_series: Vec::new(),
            precompute: true,
            periodic_recall: true,
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("{name} must be positive, got {v}")))
    }
}

fn fraction(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("{name} must lie in (0, 1], got {v}")))
    }
}

impl CostParams {
    pub fn validate(&self) -> Result<()> {
        positive("layer_attention_us", self.layer_attention_us)?;
        positive("layer_total_us", self.layer_total_us)?;
        if self.layer_total_us < self.layer_attention_us {
            return Err(Error::InvalidInput(
                "layer_total_us must be at least layer_attention_us".into(),
            ));
        }
        positive("gpu_cpu_compute_ratio", self.gpu_cpu_compute_ratio)?;
        positive("token_kv_bytes", self.token_kv_bytes)?;
        positive("hbm_bandwidth_gbps", self.hbm_bandwidth_gbps)?;
        positive("free_bytes", self.free_bytes)?;
        positive("prefetch_granularity_bytes", self.prefetch_granularity_bytes)?;
        if !(self.sync_overhead_us >= 0.0 && self.sync_overhead_us.is_finite()) {
            return Err(Error::InvalidInput("sync_overhead_us must be non-negative".into()));
        }
        fraction("prefetch_fraction", self.prefetch_fraction)?;
        fraction("co_attention_cpu_share", self.co_attention_cpu_share)?;
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::InvalidInput(format!("beta must lie in (0, 1), got {}", self.beta)));
        }
        for (name, v) in [
            ("batch", self.batch),
            ("reference_batch", self.reference_batch),
            ("layers", self.layers),
            ("context_tokens", self.context_tokens),
            ("budget_tokens", self.budget_tokens),
            ("block_size", self.block_size),
            ("steps", self.steps),
        ] {
            if v == 0 {
                return Err(Error::InvalidInput(format!("{name} must be positive")));
            }
        }
        if self.bandwidth_table.is_empty() {
            return Err(Error::Empty("bandwidth_table"));
        }
        for &(g, bw) in &self.bandwidth_table {
            positive("bandwidth_table granularity", g)?;
            positive("bandwidth_table bandwidth", bw)?;
        }
        if self.bandwidth_table.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::InvalidInput(
                "bandwidth_table granularities must be strictly increasing".into(),
            ));
        }
        if self.cpu_ratio_series.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::InvalidInput("cpu_ratio_series values must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Recall-free ratio profile, at least `steps` long.
    pub fn ratio_profile(&self) -> Vec<f64> {
        let mut p = if self.cpu_ratio_series.is_empty() {
            (0..self.steps).map(|s| (0.045 + 0.01 * s as f64).min(1.0)).collect()
        } else {
            self.cpu_ratio_series.clone()
        };
        let last = *p.last().expect("profile is non-empty");
        p.resize(p.len().max(self.steps), last);
        p
    }

    /// Recall interval calibrated from the ratio profile against `beta`.
    pub fn recall_interval(&self) -> Result<usize> {
        let mut trace = RatioTrace::new(1);
        for (s, r) in self.ratio_profile().iter().enumerate() {
            // parts per million keeps the integer sample interface exact enough
            trace.record(0, s as u64 + 1, (r * 1e6).round() as usize, 1_000_000)?;
        }
        Ok(calibrate_intervals(&trace, self.beta)?.intervals[0])
    }

    /// Largest batch whose full cache fits in `free_bytes`.
    pub fn full_kv_batch_cap(&self) -> usize {
        let per_seq = self.context_tokens as f64 * self.token_kv_bytes * self.layers as f64;
        (self.free_bytes / per_seq).floor() as usize
    }
}

/// Log-log interpolation between bandwidth anchors, clamped at both ends.
pub fn effective_bandwidth(params: &CostParams, granularity_bytes: f64) -> Result<f64> {
    let table = &params.bandwidth_table;
    let (&(g0, b0), &(gn, bn)) = match (table.first(), table.last()) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::Empty("bandwidth_table")),
    };
    if !(granularity_bytes > 0.0) {
        return Err(Error::InvalidInput(format!(
            "granularity must be positive, got {granularity_bytes}"
        )));
    }
    if granularity_bytes <= g0 {
        return Ok(b0);
    }
    if granularity_bytes >= gn {
        return Ok(bn);
    }
    let i = table.partition_point(|&(g, _)| g <= granularity_bytes);
    let ((ga, ba), (gb, bb)) = (table[i - 1], table[i]);
    let t = (granularity_bytes.ln() - ga.ln()) / (gb.ln() - ga.ln());
    Ok((ba.ln() + t * (bb.ln() - ba.ln())).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Device {
    Gpu,
    Cpu,
    Link,
}

impl Device {
    pub const ALL: [Device; 3] = [Device::Gpu, Device::Cpu, Device::Link];

    pub fn name(self) -> &'static str {
        match self {
            Device::Gpu => "gpu",
            Device::Cpu => "cpu",
            Device::Link => "link",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Interval {
    pub start_ns: u64,
    pub end_ns: u64,
    pub label: String,
}

impl Interval {
    pub fn duration_ns(&self) -> u64 {
        self.end_ns - self.start_ns
    }
}

/// A periodic recall transfer and the attention start it had to beat.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RecallRecord {
    pub step: usize,
    pub layer: usize,
    /// End of the issuing layer's attention.
    pub attention_end_ns: u64,
    pub start_ns: u64,
    pub end_ns: u64,
    pub bytes: u64,
    /// Attention start of the same layer one step later, if simulated.
    pub deadline_ns: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Timeline {
    pub strategy: Strategy,
    pub steps: usize,
    /// Effective batch, after any memory cap.
    pub batch: usize,
    pub gpu: Vec<Interval>,
    pub cpu: Vec<Interval>,
    pub link: Vec<Interval>,
    pub recalls: Vec<RecallRecord>,
}

impl Timeline {
    pub fn intervals(&self, device: Device) -> &[Interval] {
        match device {
            Device::Gpu => &self.gpu,
            Device::Cpu => &self.cpu,
            Device::Link => &self.link,
        }
    }

    pub fn total_ns(&self) -> u64 {
        Device::ALL
            .iter()
            .filter_map(|d| self.intervals(*d).last().map(|i| i.end_ns))
            .max()
            .unwrap_or(0)
    }

    pub fn busy_ns(&self, device: Device) -> u64 {
        self.intervals(device).iter().map(Interval::duration_ns).sum()
    }

    pub fn idle_ns(&self, device: Device) -> u64 {
        self.total_ns() - self.busy_ns(device)
    }

    pub fn idle_fraction(&self, device: Device) -> f64 {
        match self.total_ns() {
            0 => 0.0,
            t => self.idle_ns(device) as f64 / t as f64,
        }
    }

    pub fn step_time_ns(&self) -> f64 {
        self.total_ns() as f64 / self.steps as f64
    }

    /// Generated tokens per second.
    pub fn throughput(&self) -> f64 {
        self.batch as f64 / (self.step_time_ns() * 1e-9)
    }

    /// Recalls that arrived after their deadline.
    pub fn recall_stalls(&self) -> usize {
        self.recalls
            .iter()
            .filter(|r| r.deadline_ns.is_some_and(|d| r.end_ns > d))
            .count()
    }

    /// Intervals ordered, non-empty and non-overlapping on every device.
    pub fn check(&self) -> Result<()> {
        for d in Device::ALL {
            let iv = self.intervals(d);
            if iv.iter().any(|i| i.end_ns <= i.start_ns) {
                return Err(Error::Invariant(format!("{}: empty or inverted interval", d.name())));
            }
            if iv.windows(2).any(|w| w[1].start_ns < w[0].end_ns) {
                return Err(Error::Invariant(format!("{}: overlapping intervals", d.name())));
            }
        }
        Ok(())
    }

    /// `device,start,end,label` in nanoseconds, devices in a fixed order.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("device,start,end,label\n");
        for d in Device::ALL {
            for i in self.intervals(d) {
                let _ = writeln!(out, "{},{},{},{}", d.name(), i.start_ns, i.end_ns, i.label);
            }
        }
        out
    }

    /// `key=value` lines.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "strategy={}", self.strategy);
        let _ = writeln!(out, "steps={}", self.steps);
        let _ = writeln!(out, "batch={}", self.batch);
        let _ = writeln!(out, "total_ns={}", self.total_ns());
        let _ = writeln!(out, "step_time_ms={:.6}", self.step_time_ns() * 1e-6);
        let _ = writeln!(out, "throughput_tok_s={:.6}", self.throughput());
        for d in Device::ALL {
            let _ = writeln!(out, "idle_fraction_{}={:.6}", d.name(), self.idle_fraction(d));
        }
        let _ = writeln!(out, "recalls={}", self.recalls.len());
        let _ = writeln!(out, "recall_stalls={}", self.recall_stalls());
        out
    }
}

fn ns(us: f64) -> u64 {
    (us * 1e3).round() as u64
}

fn transfer_ns(params: &CostParams, bytes: f64, granularity: f64) -> Result<u64> {
    let bw = effective_bandwidth(params, granularity)?;
    Ok((bytes / bw).round() as u64)
}

/// One device's FIFO queue of work.
#[derive(Default)]
struct Lane {
    free: u64,
    intervals: Vec<Interval>,
}

impl Lane {
    fn run(&mut self, earliest: u64, duration: u64, label: impl FnOnce() -> String) -> (u64, u64) {
        let start = earliest.max(self.free);
        let end = start + duration;
        if duration > 0 {
            self.intervals.push(Interval {
                start_ns: start,
                end_ns: end,
                label: label(),
            });
            self.free = end;
        }
        (start, end)
    }
}

struct Lanes {
    gpu: Lane,
    cpu: Lane,
    link: Lane,
}

impl Lanes {
    fn new() -> Self {
        Self {
            gpu: Lane::default(),
            cpu: Lane::default(),
            link: Lane::default(),
        }
    }

    fn finish(self, strategy: Strategy, params: &CostParams, batch: usize, recalls: Vec<RecallRecord>) -> Timeline {
        Timeline {
            strategy,
            steps: params.steps,
            batch,
            gpu: self.gpu.intervals,
            cpu: self.cpu.intervals,
            link: self.link.intervals,
            recalls,
        }
    }
}

pub fn simulate_strategy(strategy: Strategy, params: &CostParams) -> Result<Timeline> {
    params.validate()?;
    let timeline = match strategy {
        Strategy::FullKv => simulate_full_kv(params)?,
        Strategy::RecallPrefetch => simulate_recall_prefetch(params)?,
        Strategy::CoAttention => simulate_co_attention(params)?,
        Strategy::Scout => simulate_scout(params)?,
    };
    timeline.check()?;
    Ok(timeline)
}

/// Attention time over the sparse budget at `batch`.
fn sparse_attention_us(p: &CostParams, batch: usize) -> f64 {
    p.layer_attention_us * batch as f64 / p.reference_batch as f64
}

fn other_us(p: &CostParams) -> f64 {
    p.layer_total_us - p.layer_attention_us
}

fn simulate_full_kv(p: &CostParams) -> Result<Timeline> {
    let batch = p.batch.min(p.full_kv_batch_cap());
    if batch == 0 {
        return Err(Error::InvalidInput(format!(
            "a {}-token cache does not fit in free_bytes",
            p.context_tokens
        )));
    }
    let attn = ns(sparse_attention_us(p, batch) * p.context_tokens as f64 / p.budget_tokens as f64);
    let other = ns(other_us(p));
    let mut lanes = Lanes::new();
    for s in 1..=p.steps {
        for l in 0..p.layers {
            lanes.gpu.run(0, attn, || format!("s{s}/l{l}/attn"));
            lanes.gpu.run(0, other, || format!("s{s}/l{l}/other"));
        }
    }
    Ok(lanes.finish(Strategy::FullKv, p, batch, Vec::new()))
}

fn simulate_recall_prefetch(p: &CostParams) -> Result<Timeline> {
    let bytes = p.prefetch_fraction * p.budget_tokens as f64 * p.token_kv_bytes * p.batch as f64;
    let xfer = transfer_ns(p, bytes, p.prefetch_granularity_bytes)?;
    let (attn, other) = (ns(sparse_attention_us(p, p.batch)), ns(other_us(p)));
    let mut lanes = Lanes::new();
    // accelerator start of the layer before the one being fetched
    let mut prev_layer_start = 0;
    for s in 1..=p.steps {
        for l in 0..p.layers {
            let (_, arrived) = lanes.link.run(prev_layer_start, xfer, || format!("s{s}/l{l}/fetch"));
            let (start, _) = lanes.gpu.run(arrived, attn, || format!("s{s}/l{l}/attn"));
            lanes.gpu.run(0, other, || format!("s{s}/l{l}/other"));
            prev_layer_start = start;
        }
    }
    Ok(lanes.finish(Strategy::RecallPrefetch, p, p.batch, Vec::new()))
}

fn simulate_co_attention(p: &CostParams) -> Result<Timeline> {
    let a = sparse_attention_us(p, p.batch);
    let (attn, other, sync) = (ns(a), ns(other_us(p)), ns(p.sync_overhead_us));
    let cpu_task = ns(p.co_attention_cpu_share * a * p.gpu_cpu_compute_ratio);
    let mut lanes = Lanes::new();
    for s in 1..=p.steps {
        for l in 0..p.layers {
            let (start, attn_end) = lanes.gpu.run(0, attn, || format!("s{s}/l{l}/attn"));
            let (_, cpu_end) = lanes.cpu.run(start, cpu_task, || format!("s{s}/l{l}/cpu_attn"));
            lanes.gpu.run(attn_end.max(cpu_end) + sync, other, || format!("s{s}/l{l}/other"));
        }
    }
    Ok(lanes.finish(Strategy::CoAttention, p, p.batch, Vec::new()))
}

fn simulate_scout(p: &CostParams) -> Result<Timeline> {
    let b = p.batch;
    let a = sparse_attention_us(p, b);
    let (attn, other, sync) = (ns(a), ns(other_us(p)), ns(p.sync_overhead_us));
    let blocks = p.context_tokens.div_ceil(p.block_size) as f64;
    let scan = (blocks * p.token_kv_bytes * b as f64 / p.hbm_bandwidth_gbps).round() as u64;
    let profile = p.ratio_profile();
    let n = p.recall_interval()?;
    let ratio = |s: usize, l: usize| -> f64 {
        if p.periodic_recall {
            profile[(s - 1 + l % n) % n]
        } else {
            profile[(s - 1).min(profile.len() - 1)]
        }
    };
    let cpu_task = |s: usize, l: usize| ns(ratio(s, l) * a * p.gpu_cpu_compute_ratio);
    let granularity = p.block_size as f64 * p.token_kv_bytes;

    let mut lanes = Lanes::new();
    let mut recalls: Vec<RecallRecord> = Vec::new();
    // completion time of the host task for the next layer
    let mut pending_cpu_end: Option<u64> = None;
    for s in 1..=p.steps {
        for l in 0..p.layers {
            let (_, scan_end) = lanes.gpu.run(0, scan, || format!("s{s}/l{l}/scan"));
            let next_task = if p.precompute && l + 1 < p.layers {
                let (_, end) = lanes.cpu.run(scan_end, cpu_task(s, l + 1), || {
                    format!("s{s}/l{}/cpu_precompute", l + 1)
                });
                Some(end)
            } else {
                None
            };
            let due = recalls
                .iter()
                .filter(|r| r.step + 1 == s && r.layer == l)
                .map(|r| r.end_ns)
                .max()
                .unwrap_or(0);
            let (attn_start, attn_end) = lanes.gpu.run(due, attn, || format!("s{s}/l{l}/attn"));
            for r in recalls.iter_mut().filter(|r| r.step + 1 == s && r.layer == l) {
                r.deadline_ns = Some(attn_start);
            }
            let cpu_end = if l == 0 {
                None
            } else if p.precompute {
                pending_cpu_end
            } else {
                let (_, end) = lanes.cpu.run(attn_start, cpu_task(s, l), || format!("s{s}/l{l}/cpu_attn"));
                Some(end)
            };
            let merge_at = match cpu_end {
                Some(end) => attn_end.max(end) + sync,
                None => attn_end,
            };
            lanes.gpu.run(merge_at, other, || format!("s{s}/l{l}/other"));
            pending_cpu_end = next_task;

            let due_now = p.periodic_recall && l > 0 && s < p.steps && (s + l % n) % n == 0;
            if due_now {
                let bytes = ratio(s, l) * p.budget_tokens as f64 * p.token_kv_bytes * b as f64;
                let (start, end) = lanes.link.run(attn_end, transfer_ns(p, bytes, granularity)?, || {
                    format!("s{s}/l{l}/recall")
                });
                recalls.push(RecallRecord {
                    step: s,
                    layer: l,
                    attention_end_ns: attn_end,
                    start_ns: start,
                    end_ns: end,
                    bytes: bytes.round() as u64,
                    deadline_ns: None,
                });
            }
        }
    }
    Ok(lanes.finish(Strategy::Scout, p, b, recalls))
}

/// Sweepable cost-model axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Context,
    Batch,
    BlockSize,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "context" => Ok(SweepAxis::Context),
            "batch" => Ok(SweepAxis::Batch),
            "block_size" => Ok(SweepAxis::BlockSize),
            _ => Err(Error::InvalidInput(format!("unknown sweep axis {s:?}"))),
        }
    }
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Context => "context",
            SweepAxis::Batch => "batch",
            SweepAxis::BlockSize => "block_size",
        }
    }

    pub fn apply(self, params: &CostParams, value: usize) -> CostParams {
        let mut p = params.clone();
        match self {
            SweepAxis::Context => p.context_tokens = value,
            SweepAxis::Batch => p.batch = value,
            SweepAxis::BlockSize => p.block_size = value,
        }
        p
    }
}

/// Throughput of every strategy plus the two scout ablations.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub full_kv: f64,
    pub recall_prefetch: f64,
    pub co_attention: f64,
    pub scout: f64,
    /// Scout with pre-computation but without periodic recall.
    pub scout_no_recall: f64,
    /// Scout with neither pre-computation nor periodic recall.
    pub scout_baseline: f64,
}

impl Comparison {
    pub fn speedup_over_full_kv(&self) -> f64 {
        self.scout / self.full_kv
    }

    /// Scout over the better of the two offloading baselines.
    pub fn speedup_over_offloading(&self) -> f64 {
        self.scout / self.recall_prefetch.max(self.co_attention)
    }

    pub fn precompute_effect(&self) -> f64 {
        self.scout_no_recall / self.scout_baseline
    }

    pub fn recall_effect(&self) -> f64 {
        self.scout / self.scout_no_recall
    }
}

pub fn compare(params: &CostParams) -> Result<Comparison> {
    let thr = |st: Strategy, p: &CostParams| simulate_strategy(st, p).map(|t| t.throughput());
    let no_recall = CostParams {
        periodic_recall: false,
        ..params.clone()
    };
    let baseline = CostParams {
        precompute: false,
        ..no_recall.clone()
    };
    Ok(Comparison {
        full_kv: thr(Strategy::FullKv, params)?,
        recall_prefetch: thr(Strategy::RecallPrefetch, params)?,
        co_attention: thr(Strategy::CoAttention, params)?,
        scout: thr(Strategy::Scout, params)?,
        scout_no_recall: thr(Strategy::Scout, &no_recall)?,
        scout_baseline: thr(Strategy::Scout, &baseline)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn bandwidth_anchors_and_clamp() {
        let p = CostParams::default();
        assert_eq!(effective_bandwidth(&p, 4096.0).unwrap(), 0.8);
        assert_eq!(effective_bandwidth(&p, 131072.0).unwrap(), 15.0);
        assert_eq!(effective_bandwidth(&p, 1048576.0).unwrap(), 15.0);
        assert_eq!(effective_bandwidth(&p, 100.0).unwrap(), 0.8);
        // halfway in log space is the geometric mean
        let mid = effective_bandwidth(&p, (4096.0f64 * 131072.0).sqrt()).unwrap();
        assert!(close(mid, (0.8f64 * 15.0).sqrt(), 1e-12));
        let empty = CostParams {
            bandwidth_table: Vec::new(),
            ..CostParams::default()
        };
        assert!(effective_bandwidth(&empty, 4096.0).is_err());
    }

    #[test]
    fn co_attention_hand_case() {
        // 1 ms layer that is all attention, 3 ms host task, no sync
        let p = CostParams {
            layer_attention_us: 1000.0,
            layer_total_us: 1000.0,
            co_attention_cpu_share: 0.15,
            sync_overhead_us: 0.0,
            layers: 4,
            steps: 2,
            ..CostParams::default()
        };
        let t = simulate_strategy(Strategy::CoAttention, &p).unwrap();
        assert_eq!(t.step_time_ns(), 4.0 * 3e6);
        assert!(close(t.idle_fraction(Device::Gpu), 2.0 / 3.0, 1e-12));
    }

    #[test]
    fn recall_prefetch_twice_layer_time() {
        // transfer of 1.8 ms against a 0.9 ms layer
        let layers = 10;
        let p = CostParams {
            layers,
            steps: 1,
            prefetch_fraction: 1.0,
            budget_tokens: 1,
            batch: 1,
            reference_batch: 1,
            token_kv_bytes: 1.8e6 * 15.0 / 1.0,
            ..CostParams::default()
        };
        let t = simulate_strategy(Strategy::RecallPrefetch, &p).unwrap();
        // cold start adds one transfer ahead of the first layer
        let want = (layers as f64 + 1.0) / (2.0 * layers as f64 + 1.0);
        assert!(close(t.idle_fraction(Device::Gpu), want, 1e-9), "{}", t.idle_fraction(Device::Gpu));
    }

    #[test]
    fn scout_without_host_work_never_idles() {
        let p = CostParams {
            cpu_ratio_series: vec![0.0; 32],
            sync_overhead_us: 0.0,
            ..CostParams::default()
        };
        let t = simulate_strategy(Strategy::Scout, &p).unwrap();
        assert_eq!(t.idle_ns(Device::Gpu), 0);
        assert_eq!(t.recall_stalls(), 0);
    }

    #[test]
    fn throughput_is_batch_over_step_time() {
        let p = CostParams {
            layers: 36,
            layer_attention_us: 1000.0,
            layer_total_us: 1000.0,
            batch: 36,
            reference_batch: 36,
            budget_tokens: 1024,
            context_tokens: 1024,
            free_bytes: 1e15,
            ..CostParams::default()
        };
        let t = simulate_strategy(Strategy::FullKv, &p).unwrap();
        assert!(close(t.throughput(), 1000.0, 1e-9));
        let doubled = Timeline { batch: 72, ..t };
        assert!(close(doubled.throughput(), 2000.0, 1e-9));
    }

    #[test]
    fn full_kv_batch_cap() {
        let p = CostParams::default();
        assert_eq!(p.full_kv_batch_cap(), 8);
        let t = simulate_strategy(Strategy::FullKv, &p).unwrap();
        assert_eq!(t.batch, 8);
        let huge = CostParams {
            context_tokens: 1 << 24,
            ..CostParams::default()
        };
        assert!(simulate_strategy(Strategy::FullKv, &huge).is_err());
    }

    #[test]
    fn default_profile_calibrates_to_eight() {
        let p = CostParams::default();
        assert_eq!(p.recall_interval().unwrap(), 8);
        let mean: f64 = p.ratio_profile()[..8].iter().sum::<f64>() / 8.0;
        assert!(close(mean, 0.08, 1e-12));
    }

    #[test]
    fn conservation_and_determinism() {
        let p = CostParams::default();
        for st in Strategy::ALL {
            let t = simulate_strategy(st, &p).unwrap();
            for d in Device::ALL {
                assert_eq!(t.busy_ns(d) + t.idle_ns(d), t.total_ns());
                assert!((0.0..=1.0).contains(&t.idle_fraction(d)));
            }
            assert_eq!(t, simulate_strategy(st, &p).unwrap());
        }
    }

    #[test]
    fn validation() {
        let bad = [
            CostParams { batch: 0, ..CostParams::default() },
            CostParams { beta: 1.0, ..CostParams::default() },
            CostParams { bandwidth_table: vec![(10.0, 1.0), (10.0, 2.0)], ..CostParams::default() },
            CostParams { layer_total_us: 100.0, ..CostParams::default() },
        ];
        for p in bad {
            assert!(simulate_strategy(Strategy::Scout, &p).is_err());
        }
        assert!("nope".parse::<Strategy>().is_err());
        assert_eq!("co_attention".parse::<Strategy>().unwrap(), Strategy::CoAttention);
    }
}
