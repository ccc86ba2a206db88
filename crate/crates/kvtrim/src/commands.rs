//! `run`, `analyze` and `report`.
//!
//! Each command loads the config, does all of its work in memory (heads in
//! parallel on a rayon pool) and writes its artifacts at the end. Artifacts
//! only depend on the config and the seed, never on the thread count or the
//! output location.

use std::fs;
use std::path::{Path, PathBuf};

use kvtrim_core::analysis::{attention_energy, magnitude_map};
use kvtrim_core::attention::{dense_attention, prefill, zero_masked_attention, HeadCache};
use kvtrim_core::evictor::PolicyKind;
use kvtrim_core::memory::{batch_size_headroom, report as memory_report, MemoryReport};
use kvtrim_core::pruner::Criterion;
use kvtrim_core::{CacheConfig, Matrix};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{PolicySection, QuantSection, RunConfig, WorkloadSection};
use crate::error::CliError;
use crate::export::{energy_csv, matrix_csv};
use crate::snapshot::{self, Header};
use crate::workload::{generate, HeadWorkload};

pub const RUN_REPORT: &str = "run_report.json";
pub const SNAPSHOT: &str = "cache.kvtr";
pub const ENERGY_CSV: &str = "energy.csv";
pub const KEY_MAGNITUDE_CSV: &str = "magnitude_keys.csv";
pub const VALUE_MAGNITUDE_CSV: &str = "magnitude_values.csv";
pub const MEMORY_REPORT: &str = "memory_report.json";

/// Decode outputs must match the zero-masked reference this closely.
pub const ZERO_MASKED_TOLERANCE: f64 = 1e-10;
/// Uncompressed runs must match dense attention this closely.
pub const IDENTITY_TOLERANCE: f64 = 1e-12;

/// Command-line overrides.
#[derive(Clone, Debug, Default)]
pub struct Options {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    /// Worker threads; `None` lets rayon decide.
    pub threads: Option<usize>,
}

/// Reads `KVTRIM_THREADS`; unset or empty means no cap.
pub fn threads_from_env() -> Result<Option<usize>, CliError> {
    match std::env::var("KVTRIM_THREADS") {
        Ok(v) if v.trim().is_empty() => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Config(format!("KVTRIM_THREADS must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(None),
    }
}

fn pool(threads: Option<usize>) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Config(format!("cannot start thread pool: {e}")))
}

fn load(config: &Path, opts: &Options) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(seed) = opts.seed {
        cfg.workload.seed = seed;
    }
    Ok(cfg)
}

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
    fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(CliError::io(&path))?;
    Ok(path)
}

fn to_json(value: &impl Serialize) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("report types serialize");
    out.push(b'\n');
    out
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Echo of the settings that determine a run's artifacts.
#[derive(Clone, Debug, Serialize)]
pub struct RunSettings {
    pub cache: CacheConfig,
    pub policy: PolicySection,
    pub criterion: Criterion,
    pub quantization: Option<QuantSection>,
    pub workload: WorkloadSection,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepDeviation {
    pub step: usize,
    pub vs_dense: f64,
    pub vs_zero_masked: f64,
}

/// Multiply-add counts summed over all heads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Flops {
    /// Channel scoring at prefill.
    pub scoring: u64,
    /// Segmented decode steps.
    pub decode: u64,
    /// The same steps against an uncompressed, unevicted cache.
    pub dense_decode: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub observed: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub settings: RunSettings,
    pub memory: MemoryReport,
    /// Bytes of the caches actually built, summed over heads.
    pub measured_bytes: u64,
    pub retained_tokens: usize,
    pub key_kept: usize,
    pub value_kept: usize,
    pub max_deviation_vs_dense: f64,
    pub max_deviation_vs_zero_masked: f64,
    pub steps: Vec<StepDeviation>,
    pub flops: Flops,
    pub checks: Vec<Check>,
    pub passed: bool,
}

struct HeadOutcome {
    cache: HeadCache,
    retained: usize,
    vs_dense: Vec<f64>,
    vs_masked: Vec<f64>,
    flops: Flops,
}

fn run_head(cfg: &RunConfig, cache_cfg: &CacheConfig, head: u64) -> Result<HeadOutcome, CliError> {
    let seq = cache_cfg.seq_len;
    let dim = cache_cfg.head_dim;
    let steps = cfg.workload.decode_steps;
    let w = generate(cfg.workload.generator, cfg.workload.seed, head, seq + steps, dim, cfg.workload.query_group);
    let HeadWorkload { queries, keys, values } = &w;
    let prompt = w.prefix(seq);

    let pre = prefill(
        cache_cfg,
        &prompt.queries,
        &prompt.keys,
        &prompt.values,
        &cfg.eviction_policy()?,
        cfg.criterion,
        cfg.quant()?,
    )?;
    let mut cache = pre.cache;
    let (kmask, vmask) = (cache.key_mask(), cache.value_mask());
    // full-width rows in cache order, for the zero-masked reference
    let mut ref_keys = prompt.keys.gather_rows(&pre.retained)?;
    let mut ref_values = prompt.values.gather_rows(&pre.retained)?;

    let mut flops = Flops { scoring: pre.scoring_flops, ..Flops::default() };
    let (mut vs_dense, mut vs_masked) = (Vec::with_capacity(steps), Vec::with_capacity(steps));
    for t in 0..steps {
        let pos = seq + t;
        let (mut dev_dense, mut dev_masked) = (0.0f64, 0.0f64);
        let (past_k, past_v) = (keys.slice_rows(0, pos), values.slice_rows(0, pos));
        for q in queries {
            let query = q.row(pos);
            flops.decode += cache.decode_flops();
            flops.dense_decode += 4 * (pos * dim) as u64;
            let out = cache.attend(query)?.output;
            let dense = dense_attention(&Matrix::new(1, dim, query.to_vec())?, &past_k, &past_v)?;
            let masked = zero_masked_attention(query, &ref_keys, &ref_values, cache.keys.frozen_len(), &kmask, &vmask)?;
            dev_dense = dev_dense.max(max_abs_diff(&out, dense.as_slice()));
            dev_masked = dev_masked.max(max_abs_diff(&out, &masked));
        }
        vs_dense.push(dev_dense);
        vs_masked.push(dev_masked);
        cache.append(keys.row(pos), values.row(pos))?;
        ref_keys.push_row(keys.row(pos))?;
        ref_values.push_row(values.row(pos))?;
    }
    Ok(HeadOutcome { cache, retained: pre.retained.len(), vs_dense, vs_masked, flops })
}

/// Runs prefill and decode for every head, checks the results and writes
/// `run_report.json` and `cache.kvtr`. Artifacts are written even when a
/// check fails; the failure is then returned as [`CliError::Check`].
pub fn run(config: &Path, opts: &Options) -> Result<RunReport, CliError> {
    let cfg = load(config, opts)?;
    cfg.validate_pipeline()?;
    let cache_cfg = cfg.cache_config()?;
    let quant = cfg.quant()?;
    let steps = cfg.workload.decode_steps;

    let heads = cache_cfg.head_count() as u64;
    let outcomes: Vec<HeadOutcome> = pool(opts.threads)?
        .install(|| (0..heads).into_par_iter().map(|h| run_head(&cfg, &cache_cfg, h)).collect::<Result<_, _>>())?;

    let memory = memory_report(&cache_cfg, quant, steps)?;
    let measured_bytes: u64 = outcomes.iter().map(|o| o.cache.cache_bytes() as u64).sum();
    let step_max = |f: fn(&HeadOutcome) -> &Vec<f64>, t: usize| outcomes.iter().map(|o| f(o)[t]).fold(0.0, f64::max);
    let steps_dev: Vec<StepDeviation> = (0..steps)
        .map(|t| StepDeviation {
            step: t,
            vs_dense: step_max(|o| &o.vs_dense, t),
            vs_zero_masked: step_max(|o| &o.vs_masked, t),
        })
        .collect();
    let max_dense = steps_dev.iter().map(|s| s.vs_dense).fold(0.0, f64::max);
    let max_masked = steps_dev.iter().map(|s| s.vs_zero_masked).fold(0.0, f64::max);
    let flops = outcomes.iter().fold(Flops::default(), |a, o| Flops {
        scoring: a.scoring + o.flops.scoring,
        decode: a.decode + o.flops.decode,
        dense_decode: a.dense_decode + o.flops.dense_decode,
    });

    let mut checks = vec![Check {
        name: "analytic_bytes_equal_measured".into(),
        observed: measured_bytes as f64 - memory.total_bytes as f64,
        tolerance: 0.0,
        passed: measured_bytes == memory.total_bytes,
    }];
    if quant.is_none() {
        checks.push(Check {
            name: "decode_matches_zero_masked_reference".into(),
            observed: max_masked,
            tolerance: ZERO_MASKED_TOLERANCE,
            passed: max_masked <= ZERO_MASKED_TOLERANCE,
        });
        let uncompressed = cfg.policy.kind == PolicyKind::None
            && cache_cfg.key_kept()? == cache_cfg.head_dim
            && cache_cfg.value_kept()? == cache_cfg.head_dim;
        if uncompressed {
            checks.push(Check {
                name: "decode_matches_dense_attention".into(),
                observed: max_dense,
                tolerance: IDENTITY_TOLERANCE,
                passed: max_dense <= IDENTITY_TOLERANCE,
            });
        }
    }
    let passed = checks.iter().all(|c| c.passed);

    let caches: Vec<HeadCache> = outcomes.iter().map(|o| o.cache.clone()).collect();
    let report = RunReport {
        settings: RunSettings {
            cache: cache_cfg,
            policy: cfg.policy,
            criterion: cfg.criterion,
            quantization: cfg.quantization,
            workload: cfg.workload,
        },
        memory,
        measured_bytes,
        retained_tokens: outcomes[0].retained,
        key_kept: cache_cfg.key_kept()?,
        value_kept: cache_cfg.value_kept()?,
        max_deviation_vs_dense: max_dense,
        max_deviation_vs_zero_masked: max_masked,
        steps: steps_dev,
        flops,
        checks,
        passed,
    };

    let to_u32 = |n: usize| u32::try_from(n).map_err(|_| CliError::Config(format!("{n} exceeds the snapshot format")));
    let header = Header {
        batch: to_u32(cache_cfg.batch)?,
        tokens: to_u32(caches[0].len())?,
        layers: to_u32(cache_cfg.layers)?,
        heads: to_u32(cache_cfg.heads)?,
        head_dim: to_u32(cache_cfg.head_dim)?,
        key_kept: to_u32(report.key_kept)?,
    };
    let mut blob = Vec::new();
    snapshot::write(&mut blob, &header, &caches).map_err(|e| CliError::Check(format!("snapshot: {e}")))?;

    let dir = cfg.output_dir(opts.out.as_deref());
    write_file(&dir, RUN_REPORT, &to_json(&report))?;
    write_file(&dir, SNAPSHOT, &blob)?;

    if let Some(failed) = report.checks.iter().find(|c| !c.passed) {
        return Err(CliError::Check(format!(
            "{}: observed {:e}, tolerance {:e}",
            failed.name, failed.observed, failed.tolerance
        )));
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Analysis {
    pub spectrum: kvtrim_core::analysis::EnergySpectrum,
    pub key_magnitude: Matrix,
    pub value_magnitude: Matrix,
}

/// Spectrum of the prefill attention of the first query head of the first
/// KV head, plus magnitude maps of its prefill keys and values. Writes
/// `energy.csv`, `magnitude_keys.csv` and `magnitude_values.csv`.
pub fn analyze(config: &Path, opts: &Options) -> Result<Analysis, CliError> {
    let cfg = load(config, opts)?;
    let cache_cfg = cfg.cache_config()?;
    let w = generate(cfg.workload.generator, cfg.workload.seed, 0, cache_cfg.seq_len, cache_cfg.head_dim, 1);
    let analysis = pool(opts.threads)?.install(|| -> Result<Analysis, CliError> {
        let (spectrum, (key_magnitude, value_magnitude)) = rayon::join(
            || attention_energy(&w.queries[0], &w.keys),
            || (magnitude_map(&w.keys), magnitude_map(&w.values)),
        );
        Ok(Analysis { spectrum: spectrum?, key_magnitude, value_magnitude })
    })?;
    let sum: f64 = analysis.spectrum.energy.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(CliError::Check(format!("energy sums to {sum}")));
    }
    let dir = cfg.output_dir(opts.out.as_deref());
    write_file(&dir, ENERGY_CSV, energy_csv(&analysis.spectrum).as_bytes())?;
    write_file(&dir, KEY_MAGNITUDE_CSV, matrix_csv(&analysis.key_magnitude).as_bytes())?;
    write_file(&dir, VALUE_MAGNITUDE_CSV, matrix_csv(&analysis.value_magnitude).as_bytes())?;
    Ok(analysis)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepEntry {
    pub key_prune_ratio: f64,
    pub memory: MemoryReport,
    /// Sequences that fit next to the weights, when a device is configured.
    pub batch_headroom: Option<u64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepReport {
    pub cache: CacheConfig,
    pub quantization: Option<QuantSection>,
    pub decode_steps: usize,
    pub entries: Vec<SweepEntry>,
}

/// Memory report for every key pruning ratio in the sweep, written to
/// `memory_report.json`.
pub fn report(config: &Path, opts: &Options) -> Result<SweepReport, CliError> {
    let cfg = load(config, opts)?;
    if cfg.sweep.is_empty() {
        return Err(CliError::Config("sweep must list at least one key pruning ratio".into()));
    }
    let cache_cfg = cfg.cache_config()?;
    let quant = cfg.quant()?;
    let steps = cfg.workload.decode_steps;
    let entries = pool(opts.threads)?.install(|| {
        cfg.sweep
            .par_iter()
            .map(|&ratio| -> Result<SweepEntry, CliError> {
                let memory = memory_report(&CacheConfig { key_prune_ratio: ratio, ..cache_cfg }, quant, steps)?;
                let batch_headroom = match cfg.device {
                    Some(d) => {
                        let per_seq = memory.total_bytes.div_ceil(cache_cfg.batch as u64);
                        Some(batch_size_headroom(d.total_bytes, d.weight_bytes, per_seq)?)
                    }
                    None => None,
                };
                Ok(SweepEntry { key_prune_ratio: ratio, memory, batch_headroom })
            })
            .collect::<Result<Vec<_>, _>>()
    })?;
    let out = SweepReport { cache: cache_cfg, quantization: cfg.quantization, decode_steps: steps, entries };
    write_file(&cfg.output_dir(opts.out.as_deref()), MEMORY_REPORT, &to_json(&out))?;
    Ok(out)
}
