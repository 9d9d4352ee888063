//! The four subcommands. Each writes its files into an output directory and
//! returns a short human-readable report for stdout.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use scout_core::cost_model::{compare, simulate_strategy, CostParams, Device, Strategy, SweepAxis};
use scout_core::engine::{check_event_order, Engine, StepOutput};
use scout_core::model_sim::ToyDecoder;
use scout_core::recall::{calibrate_intervals, RecallSchedule};

use crate::{CliError, RunConfig};

/// Largest oracle residual a run may report and still succeed.
pub const ORACLE_TOLERANCE: f64 = 1e-10;

fn write(dir: &Path, name: &str, contents: &str) -> Result<(), CliError> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|source| CliError::Io { path, source })
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|source| CliError::Io {
        path: dir.to_path_buf(),
        source,
    })
}

/// A prefilled engine with no recall schedule.
fn prefilled_engine(cfg: &RunConfig) -> Result<Engine, CliError> {
    let decoder = Arc::new(ToyDecoder::new(cfg.decoder_config())?);
    let embeddings = decoder.embeddings(cfg.workload.prefill_tokens);
    let mut engine = Engine::new(decoder, cfg.engine_config())?;
    engine.prefill(&embeddings)?;
    Ok(engine)
}

/// Run `steps` recall-free decode steps on a fork and calibrate from them.
fn calibrate_from(engine: &Engine, steps: usize, beta: f64) -> Result<(RecallSchedule, Engine), CliError> {
    let mut profile = engine.fork()?;
    profile.set_recall_schedule(None)?;
    profile.decode(steps)?;
    let schedule = calibrate_intervals(profile.ratio_trace(), beta)?;
    Ok((schedule, profile))
}

/// Pick the schedule a run uses: explicit intervals, then a schedule file,
/// then internal calibration when periodic recall is enabled.
fn resolve_schedule(cfg: &RunConfig, engine: &Engine) -> Result<Option<RecallSchedule>, CliError> {
    let e = &cfg.engine;
    if let Some(intervals) = &e.recall_intervals {
        return Ok(Some(RecallSchedule {
            intervals: intervals.clone(),
            beta: e.beta,
            observed_max: vec![f64::NAN; intervals.len()],
        }));
    }
    if let Some(path) = &e.schedule {
        let text = fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.clone(),
            source,
        })?;
        let s = RecallSchedule::from_csv(&text, e.beta)
            .map_err(|err| CliError::Config(format!("engine.schedule: {err}")))?;
        if s.intervals.len() != cfg.decoder.num_layers {
            return Err(CliError::Config(format!(
                "engine.schedule: {} layers in file, decoder has {}",
                s.intervals.len(),
                cfg.decoder.num_layers
            )));
        }
        return Ok(Some(s));
    }
    let steps = cfg.calibration_steps();
    if !e.periodic_recall || steps == 0 {
        return Ok(None);
    }
    Ok(Some(calibrate_from(engine, steps, e.beta)?.0))
}

fn mean(xs: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".to_string(), |v| v.to_string())
}

fn metrics_jsonl(outputs: &[StepOutput]) -> Result<String, CliError> {
    let mut out = String::new();
    for m in outputs.iter().flat_map(|o| &o.layers) {
        let line = serde_json::to_string(m).map_err(|e| CliError::Check(format!("metrics serialisation: {e}")))?;
        out.push_str(&line);
        out.push('\n');
    }
    Ok(out)
}

fn drift_csv(outputs: &[StepOutput]) -> String {
    let mut out = String::from("step,layer,drift\n");
    for m in outputs.iter().flat_map(|o| &o.layers) {
        if let Some(d) = m.drift {
            let _ = writeln!(out, "{},{},{}", m.step, m.layer, d);
        }
    }
    out
}

fn similarity_csv(similarity: &[f64]) -> String {
    let mut out = String::from("layer,similarity\n");
    for (i, s) in similarity.iter().enumerate() {
        let _ = writeln!(out, "{},{}", i + 1, s);
    }
    out
}

/// Decode the configured workload and write every run artefact.
///
/// Files are written before the self-checks are evaluated, so a failing run
/// still leaves its evidence behind.
pub fn cmd_run(cfg: &RunConfig) -> Result<String, CliError> {
    cfg.validate()?;
    let dir = &cfg.output.dir;
    create_dir(dir)?;

    let mut engine = prefilled_engine(cfg)?;
    let schedule = resolve_schedule(cfg, &engine)?;
    engine.set_recall_schedule(schedule.as_ref())?;
    let outputs = engine.decode(cfg.workload.decode_steps)?;

    let similarity = if outputs.is_empty() {
        Vec::new()
    } else {
        engine.query_similarity()?
    };
    let violations = check_event_order(engine.events());
    let layers: Vec<_> = outputs.iter().flat_map(|o| &o.layers).collect();
    let max_residual = layers.iter().filter_map(|m| m.oracle_residual).fold(None, |acc: Option<f64>, r| {
        Some(acc.map_or(r, |a| a.max(r)))
    });
    let recalls = layers.iter().filter(|m| m.recall_blocks > 0).count();
    let recalled_blocks: usize = layers.iter().map(|m| m.recall_blocks).sum();

    write(dir, "metrics.jsonl", &metrics_jsonl(&outputs)?)?;
    write(dir, "ratio.csv", &engine.ratio_trace().to_csv())?;
    write(dir, "drift.csv", &drift_csv(&outputs))?;
    write(dir, "similarity.csv", &similarity_csv(&similarity))?;
    write(dir, "residency.txt", &engine.cache().snapshot())?;
    if let Some(s) = &schedule {
        write(dir, "schedule.csv", &s.to_csv())?;
    }

    let num_layers = cfg.decoder.num_layers;
    let mut summary = String::new();
    let _ = writeln!(summary, "layers={num_layers}");
    let _ = writeln!(summary, "prefill_tokens={}", cfg.workload.prefill_tokens);
    let _ = writeln!(summary, "decode_steps={}", cfg.workload.decode_steps);
    let _ = writeln!(summary, "k_blocks={}", cfg.engine.k_blocks);
    let _ = writeln!(summary, "budget_tokens={}", engine.config().budget_tokens());
    let _ = writeln!(summary, "fast_capacity={}", engine.config().fast_capacity());
    let _ = writeln!(
        summary,
        "recall_intervals={}",
        schedule.as_ref().map_or_else(
            || "none".to_string(),
            |s| s.intervals.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
        )
    );
    for layer in 0..num_layers {
        let _ = writeln!(summary, "mean_cpu_ratio_layer{layer}={}", opt(engine.ratio_trace().mean_ratio(layer)));
    }
    let _ = writeln!(summary, "mean_cpu_ratio={}", opt(mean(layers.iter().map(|m| m.cpu_ratio))));
    let _ = writeln!(summary, "mean_drift={}", opt(mean(layers.iter().filter_map(|m| m.drift))));
    let _ = writeln!(summary, "mean_query_similarity={}", opt(mean(similarity.iter().copied())));
    let _ = writeln!(summary, "recalls_issued={recalls}");
    let _ = writeln!(summary, "recalled_blocks={recalled_blocks}");
    let _ = writeln!(summary, "max_oracle_residual={}", max_residual.map_or_else(|| "-".to_string(), |r| format!("{r:e}")));
    let _ = writeln!(summary, "order_violations={}", violations.len());

    let mut failures = Vec::new();
    if let Some(r) = max_residual {
        if !(r <= ORACLE_TOLERANCE) {
            failures.push(format!("oracle residual {r:e} exceeds {ORACLE_TOLERANCE:e}"));
        }
    }
    if let Some(v) = violations.first() {
        failures.push(format!("{} ordering violations, first: {v}", violations.len()));
    }
    let _ = writeln!(summary, "status={}", if failures.is_empty() { "ok" } else { "fail" });
    write(dir, "summary.txt", &summary)?;

    if failures.is_empty() {
        Ok(summary)
    } else {
        Err(CliError::Check(failures.join("; ")))
    }
}

/// Profile recall-free decoding and write the calibrated schedule.
pub fn cmd_calibrate(cfg: &RunConfig) -> Result<String, CliError> {
    cfg.validate()?;
    let steps = cfg.calibration_steps();
    if steps == 0 {
        return Err(CliError::Config(
            "engine.calibration_steps: calibration needs at least one decode step".into(),
        ));
    }
    let dir = &cfg.output.dir;
    create_dir(dir)?;
    let engine = prefilled_engine(cfg)?;
    let (schedule, profile) = calibrate_from(&engine, steps, cfg.engine.beta)?;
    write(dir, "schedule.csv", &schedule.to_csv())?;
    write(dir, "ratio_profile.csv", &profile.ratio_trace().to_csv())?;

    let mut report = String::new();
    let _ = writeln!(report, "beta={}", schedule.beta);
    let _ = writeln!(report, "calibration_steps={steps}");
    for (layer, n) in schedule.intervals.iter().enumerate() {
        let _ = writeln!(report, "interval_layer{layer}={n}");
    }
    let _ = writeln!(report, "mean_interval={}", schedule.mean_interval());
    Ok(report)
}

/// Simulate the chosen strategies plus the scout ablations.
pub fn cmd_simulate(cfg: &RunConfig, strategies: &[Strategy]) -> Result<String, CliError> {
    cfg.validate()?;
    let strategies: Vec<Strategy> = if strategies.is_empty() {
        Strategy::ALL.to_vec()
    } else {
        strategies.to_vec()
    };
    let dir = &cfg.output.dir;
    create_dir(dir)?;
    let params = &cfg.cost;
    let full_kv = simulate_strategy(Strategy::FullKv, params)?.throughput();

    let mut runs: Vec<(String, CostParams, Strategy)> =
        strategies.iter().map(|&s| (s.name().to_string(), params.clone(), s)).collect();
    if strategies.contains(&Strategy::Scout) {
        let no_recall = CostParams {
            periodic_recall: false,
            ..params.clone()
        };
        let no_precompute = CostParams {
            precompute: false,
            ..params.clone()
        };
        let baseline = CostParams {
            precompute: false,
            ..no_recall.clone()
        };
        runs.push(("scout_no_recall".into(), no_recall, Strategy::Scout));
        runs.push(("scout_no_precompute".into(), no_precompute, Strategy::Scout));
        runs.push(("scout_baseline".into(), baseline, Strategy::Scout));
    }

    let mut table = String::from(
        "strategy,step_time_ms,throughput_tok_s,speedup_vs_full_kv,idle_gpu,idle_cpu,idle_link,recall_stalls\n",
    );
    for (name, p, strategy) in &runs {
        let timeline = simulate_strategy(*strategy, p)?;
        timeline.check()?;
        if strategies.contains(strategy) && name == strategy.name() {
            write(dir, &format!("timeline_{name}.csv"), &timeline.to_csv())?;
            write(dir, &format!("summary_{name}.txt"), &timeline.summary())?;
        }
        let _ = writeln!(
            table,
            "{name},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            timeline.step_time_ns() * 1e-6,
            timeline.throughput(),
            timeline.throughput() / full_kv,
            timeline.idle_fraction(Device::Gpu),
            timeline.idle_fraction(Device::Cpu),
            timeline.idle_fraction(Device::Link),
            timeline.recall_stalls(),
        );
    }
    write(dir, "comparison.csv", &table)?;
    Ok(table)
}

/// Sweep one cost-model axis and tabulate every strategy's throughput.
pub fn cmd_sweep(cfg: &RunConfig, axis: SweepAxis, values: &[usize]) -> Result<String, CliError> {
    cfg.validate()?;
    if values.is_empty() {
        return Err(CliError::Config("sweep needs at least one value".into()));
    }
    let dir = &cfg.output.dir;
    create_dir(dir)?;
    let mut table = format!(
        "{},full_kv,recall_prefetch,co_attention,scout,scout_no_recall,scout_baseline,speedup_vs_full_kv,speedup_vs_offloading\n",
        axis.name()
    );
    for &v in values {
        let params = axis.apply(&cfg.cost, v);
        params
            .validate()
            .map_err(|e| CliError::Config(format!("sweep value {v} for {}: {e}", axis.name())))?;
        let c = compare(&params)?;
        let _ = writeln!(
            table,
            "{v},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            c.full_kv,
            c.recall_prefetch,
            c.co_attention,
            c.scout,
            c.scout_no_recall,
            c.scout_baseline,
            c.speedup_over_full_kv(),
            c.speedup_over_offloading(),
        );
    }
    write(dir, &format!("sweep_{}.csv", axis.name()), &table)?;
    Ok(table)
}
