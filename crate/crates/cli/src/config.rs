//! TOML run configuration. Every section and field is optional; unknown keys
//! are rejected.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use scout_core::cost_model::CostParams;
use scout_core::digest::DigestMethod;
use scout_core::engine::{EngineConfig, GpuSidePolicy};
use scout_core::model_sim::DecoderConfig;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderSection {
    #[serde(rename = "L")]
    pub num_layers: usize,
    pub h: usize,
    pub d: usize,
    pub alpha: f64,
    pub seed: u64,
    pub block_size: usize,
}

impl Default for DecoderSection {
    fn default() -> Self {
        let d = DecoderConfig::default();
        Self {
            num_layers: d.num_layers,
            h: d.hidden_dim,
            d: d.head_dim,
            alpha: d.alpha,
            seed: d.seed,
            block_size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineSection {
    pub k_blocks: usize,
    pub beta: f64,
    pub gpu_side_policy: GpuSidePolicy,
    pub deterministic_serial: bool,
    pub fast_capacity: Option<usize>,
    pub digest_method: DigestMethod,
    /// Explicit per-layer intervals; takes precedence over `schedule`.
    pub recall_intervals: Option<Vec<usize>>,
    /// Schedule file written by `calibrate`.
    pub schedule: Option<PathBuf>,
    /// Calibrate and apply a recall schedule when none is given.
    pub periodic_recall: bool,
    /// Recall-free steps used for calibration; defaults to `decode_steps`.
    pub calibration_steps: Option<usize>,
    pub verify_oracle: bool,
}

impl Default for EngineSection {
    fn default() -> Self {
        let e = EngineConfig::default();
        Self {
            k_blocks: e.k_blocks,
            beta: e.beta,
            gpu_side_policy: e.gpu_side_policy,
            deterministic_serial: e.deterministic_serial,
            fast_capacity: None,
            digest_method: e.digest_method,
            recall_intervals: None,
            schedule: None,
            periodic_recall: true,
            calibration_steps: None,
            verify_oracle: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadSection {
    pub prefill_tokens: usize,
    pub decode_steps: usize,
}

impl Default for WorkloadSection {
    fn default() -> Self {
        Self {
            prefill_tokens: 1024,
            decode_steps: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub decoder: DecoderSection,
    pub engine: EngineSection,
    pub workload: WorkloadSection,
    pub cost: CostParams,
    pub output: OutputSection,
}

fn bad(key: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{key}: {msg}"))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    /// Check every section before any work starts.
    pub fn validate(&self) -> Result<(), CliError> {
        let d = &self.decoder;
        for (key, v) in [("decoder.L", d.num_layers), ("decoder.h", d.h), ("decoder.d", d.d), ("decoder.block_size", d.block_size)] {
            if v == 0 {
                return Err(bad(key, "must be ≥ 1"));
            }
        }
        if !(0.0..=1.0).contains(&d.alpha) {
            return Err(bad("decoder.alpha", format!("must lie in [0, 1], got {}", d.alpha)));
        }
        let e = &self.engine;
        if e.k_blocks == 0 {
            return Err(bad("engine.k_blocks", "must be ≥ 1"));
        }
        if !(e.beta > 0.0 && e.beta < 1.0) {
            return Err(bad("engine.beta", format!("must lie in (0, 1), got {}", e.beta)));
        }
        if e.fast_capacity == Some(0) {
            return Err(bad("engine.fast_capacity", "must be ≥ 1"));
        }
        if let Some(n) = &e.recall_intervals {
            if n.len() != d.num_layers || n.contains(&0) {
                return Err(bad(
                    "engine.recall_intervals",
                    format!("needs {} entries, each ≥ 1", d.num_layers),
                ));
            }
        }
        if self.workload.prefill_tokens == 0 {
            return Err(bad("workload.prefill_tokens", "must be ≥ 1"));
        }
        self.cost.validate().map_err(|e| bad("cost", e))?;
        Ok(())
    }

    pub fn decoder_config(&self) -> DecoderConfig {
        DecoderConfig {
            num_layers: self.decoder.num_layers,
            hidden_dim: self.decoder.h,
            head_dim: self.decoder.d,
            alpha: self.decoder.alpha,
            seed: self.decoder.seed,
        }
    }

    /// Engine settings without any recall schedule; the caller decides that.
    pub fn engine_config(&self) -> EngineConfig {
        EngineConfig {
            k_blocks: self.engine.k_blocks,
            block_size: self.decoder.block_size,
            fast_capacity: self.engine.fast_capacity,
            gpu_side_policy: self.engine.gpu_side_policy,
            beta: self.engine.beta,
            recall_intervals: None,
            deterministic_serial: self.engine.deterministic_serial,
            digest_method: self.engine.digest_method,
            verify_oracle: self.engine.verify_oracle,
        }
    }

    pub fn calibration_steps(&self) -> usize {
        self.engine.calibration_steps.unwrap_or(self.workload.decode_steps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c = RunConfig::from_toml("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.decoder.num_layers, 8);
        assert_eq!(c.engine.k_blocks, 16);
        c.validate().unwrap();
    }

    #[test]
    fn sections_parse() {
        let c = RunConfig::from_toml(
            r#"
            [decoder]
            L = 4
            alpha = 0.0
            [engine]
            gpu_side_policy = "all_resident"
            recall_intervals = [1, 2, 3, 4]
            [cost]
            batch = 16
            bandwidth_table = [[4096.0, 0.8], [131072.0, 15.0]]
            "#,
        )
        .unwrap();
        assert_eq!(c.decoder.num_layers, 4);
        assert_eq!(c.engine.gpu_side_policy, GpuSidePolicy::AllResident);
        assert_eq!(c.cost.batch, 16);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_toml("[engine]\nk_blockz = 3\n").unwrap_err();
        assert!(err.to_string().contains("k_blockz"), "{err}");
    }

    #[test]
    fn invalid_value_is_named() {
        let c = RunConfig::from_toml("[engine]\nbeta = 1.5\n").unwrap();
        assert!(c.validate().unwrap_err().to_string().contains("engine.beta"));
        let c = RunConfig::from_toml("[engine]\nrecall_intervals = [1]\n").unwrap();
        assert!(c.validate().unwrap_err().to_string().contains("engine.recall_intervals"));
    }
}
