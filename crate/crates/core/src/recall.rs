//! Coprocessor compute-ratio tracking and periodic recall scheduling.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::digest::BlockIdSet;
use crate::error::{Error, Result};

pub const DEFAULT_BETA: f64 = 0.12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioSample {
    pub cpu_tokens: usize,
    pub budget_tokens: usize,
    pub ratio: f64,
}

/// Per-layer `cpu_tokens / budget_tokens` samples keyed by decode step.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RatioTrace {
    layers: Vec<BTreeMap<u64, RatioSample>>,
}

impl RatioTrace {
    pub fn new(num_layers: usize) -> Self {
        Self {
            layers: vec![BTreeMap::new(); num_layers],
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn record(&mut self, layer: usize, step: u64, cpu_tokens: usize, budget_tokens: usize) -> Result<f64> {
        if budget_tokens == 0 {
            return Err(Error::InvalidInput("budget_tokens must be positive".into()));
        }
        let samples = self
            .layers
            .get_mut(layer)
            .ok_or_else(|| Error::InvalidInput(format!("layer {layer} out of range")))?;
        if samples.contains_key(&step) {
            return Err(Error::InvalidInput(format!(
                "duplicate ratio sample for layer {layer}, step {step}"
            )));
        }
        let ratio = cpu_tokens as f64 / budget_tokens as f64;
        samples.insert(
            step,
            RatioSample {
                cpu_tokens,
                budget_tokens,
                ratio,
            },
        );
        Ok(ratio)
    }

    pub fn samples(&self, layer: usize) -> &BTreeMap<u64, RatioSample> {
        &self.layers[layer]
    }

    pub fn ratios(&self, layer: usize) -> Vec<f64> {
        self.layers[layer].values().map(|s| s.ratio).collect()
    }

    pub fn mean_ratio(&self, layer: usize) -> Option<f64> {
        let r = self.ratios(layer);
        (!r.is_empty()).then(|| r.iter().sum::<f64>() / r.len() as f64)
    }

    /// `layer,step,cpu_tokens,budget_tokens,ratio`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,step,cpu_tokens,budget_tokens,ratio\n");
        for (l, samples) in self.layers.iter().enumerate() {
            for (step, s) in samples {
                let _ = writeln!(out, "{l},{step},{},{},{}", s.cpu_tokens, s.budget_tokens, s.ratio);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallSchedule {
    pub intervals: Vec<usize>,
    pub beta: f64,
    /// Largest ratio seen within each layer's calibrated window.
    pub observed_max: Vec<f64>,
}

impl RecallSchedule {
    pub fn mean_interval(&self) -> f64 {
        self.intervals.iter().sum::<usize>() as f64 / self.intervals.len().max(1) as f64
    }

    /// `layer,interval,max_ratio`, one line per layer.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,interval,max_ratio\n");
        for (l, (n, m)) in self.intervals.iter().zip(&self.observed_max).enumerate() {
            let _ = writeln!(out, "{l},{n},{m}");
        }
        out
    }

    pub fn from_csv(text: &str, beta: f64) -> Result<Self> {
        let mut intervals = Vec::new();
        let mut observed_max = Vec::new();
        for (i, line) in text.lines().skip(1).filter(|l| !l.trim().is_empty()).enumerate() {
            let bad = || Error::InvalidInput(format!("malformed schedule line {}: {line:?}", i + 2));
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let [layer, n, m] = fields[..] else {
                return Err(bad());
            };
            if layer.parse::<usize>().map_err(|_| bad())? != i {
                return Err(bad());
            }
            let n: usize = n.parse().map_err(|_| bad())?;
            if n == 0 {
                return Err(bad());
            }
            intervals.push(n);
            observed_max.push(m.parse().map_err(|_| bad())?);
        }
        if intervals.is_empty() {
            return Err(Error::Empty("RecallSchedule::from_csv"));
        }
        Ok(Self {
            intervals,
            beta,
            observed_max,
        })
    }
}

/// For each layer, the largest `n` such that the first `n` recall-free
/// steps all have ratio ≤ `beta`, with a floor of 1.
pub fn calibrate_intervals(trace: &RatioTrace, beta: f64) -> Result<RecallSchedule> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::InvalidInput(format!("beta must lie in (0, 1), got {beta}")));
    }
    let mut intervals = Vec::with_capacity(trace.num_layers());
    let mut observed_max = Vec::with_capacity(trace.num_layers());
    for layer in 0..trace.num_layers() {
        let samples = trace.samples(layer);
        if samples.is_empty() {
            return Err(Error::InvalidInput(format!("no ratio samples for layer {layer}")));
        }
        if samples.keys().zip(1u64..).any(|(s, want)| *s != want) {
            return Err(Error::InvalidInput(format!(
                "ratio samples for layer {layer} must cover steps 1..=n densely"
            )));
        }
        let ratios: Vec<f64> = samples.values().map(|s| s.ratio).collect();
        let n = ratios.iter().take_while(|r| **r <= beta).count().max(1);
        intervals.push(n);
        observed_max.push(ratios[..n].iter().copied().fold(0.0, f64::max));
    }
    Ok(RecallSchedule {
        intervals,
        beta,
        observed_max,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecallRequest {
    pub layer: usize,
    pub step: u64,
    pub blocks: BlockIdSet,
}

/// Fires a recall for a layer every `n_l` steps, counting from step 0.
#[derive(Debug, Clone, PartialEq)]
pub struct RecallPolicy {
    intervals: Vec<usize>,
    last_recall: Vec<u64>,
}

impl RecallPolicy {
    pub fn new(intervals: Vec<usize>) -> Result<Self> {
        if intervals.contains(&0) {
            return Err(Error::InvalidInput("recall intervals must be ≥ 1".into()));
        }
        let last_recall = vec![0; intervals.len()];
        Ok(Self {
            intervals,
            last_recall,
        })
    }

    pub fn intervals(&self) -> &[usize] {
        &self.intervals
    }

    pub fn last_recall(&self, layer: usize) -> u64 {
        self.last_recall[layer]
    }

    /// When the layer is due, returns `predicted \ occupied` (possibly empty)
    /// and restarts its interval. `occupied` should hold every block already
    /// resident or in flight.
    pub fn maybe_schedule_recall(
        &mut self,
        layer: usize,
        step: u64,
        predicted: &BlockIdSet,
        occupied: &BlockIdSet,
    ) -> Option<RecallRequest> {
        let n = *self.intervals.get(layer)? as u64;
        if step < self.last_recall[layer] + n {
            return None;
        }
        self.last_recall[layer] = step;
        Some(RecallRequest {
            layer,
            step,
            blocks: predicted.difference(occupied).copied().collect(),
        })
    }
}
