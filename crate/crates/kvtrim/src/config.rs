//! JSON run configuration.
//!
//! ```json
//! {
//!   "cache": { "batch": 1, "seq_len": 160, "layers": 2, "heads": 4, "head_dim": 64,
//!              "key_prune_ratio": 0.4, "obs_window": 32, "residual_len": 128, "kv_budget": 160 },
//!   "policy": { "kind": "snapkv", "pool_kernel": 7 },
//!   "criterion": "query",
//!   "quantization": { "bits_k": 4, "bits_v": 4, "group_size": 32 },
//!   "workload": { "seed": 7, "decode_steps": 32, "generator": { "kind": "gaussian" } },
//!   "sweep": [0.0, 0.4, 0.5, 0.6],
//!   "output_dir": "out"
//! }
//! ```
//!
//! Only `cache` is required. Every other section has a default; see the
//! field docs.

use std::path::{Path, PathBuf};

use kvtrim_core::evictor::{EvictionPolicy, PolicyKind};
use kvtrim_core::pruner::Criterion;
use kvtrim_core::quant::{KvQuant, QuantBits, QuantSpec, DEFAULT_GROUP_SIZE};
use kvtrim_core::CacheConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

const DEFAULT_POOL_KERNEL: usize = 7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub cache: CacheSection,
    #[serde(default)]
    pub policy: PolicySection,
    #[serde(default = "default_criterion")]
    pub criterion: Criterion,
    /// `null` or absent keeps every frozen row at dtype width.
    #[serde(default)]
    pub quantization: Option<QuantSection>,
    #[serde(default)]
    pub workload: WorkloadSection,
    /// Key pruning ratios evaluated by `report`.
    #[serde(default)]
    pub sweep: Vec<f64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Device memory for batch-size headroom in `report`.
    #[serde(default)]
    pub device: Option<DeviceSection>,
}

fn default_criterion() -> Criterion {
    Criterion::QueryDriven
}

/// Cache geometry. `heads` counts KV heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheSection {
    pub batch: usize,
    pub seq_len: usize,
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    #[serde(default = "default_dtype_bits")]
    pub dtype_bits: usize,
    #[serde(default)]
    pub key_prune_ratio: f64,
    #[serde(default)]
    pub value_prune_ratio: f64,
    /// Defaults to `min(32, seq_len)`.
    #[serde(default)]
    pub obs_window: Option<usize>,
    #[serde(default = "default_residual_len")]
    pub residual_len: usize,
    /// Defaults to `seq_len`; must be `seq_len` when no eviction policy is set.
    #[serde(default)]
    pub kv_budget: Option<usize>,
}

fn default_dtype_bits() -> usize {
    16
}

fn default_residual_len() -> usize {
    32
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySection {
    #[serde(default)]
    pub kind: PolicyKind,
    #[serde(default = "default_pool_kernel")]
    pub pool_kernel: usize,
}

impl Default for PolicySection {
    fn default() -> Self {
        Self { kind: PolicyKind::None, pool_kernel: DEFAULT_POOL_KERNEL }
    }
}

fn default_pool_kernel() -> usize {
    DEFAULT_POOL_KERNEL
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantSection {
    pub bits_k: u8,
    pub bits_v: u8,
    #[serde(default = "default_group_size")]
    pub group_size: usize,
}

fn default_group_size() -> usize {
    DEFAULT_GROUP_SIZE
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Generator {
    /// I.i.d. standard normal queries, keys and values.
    Gaussian,
    /// Causal attention of rank `rank`: queries live in a random
    /// `rank`-dimensional subspace, the first `rank` keys are strongly aligned
    /// "sink" directions of that subspace and the remaining keys are
    /// orthogonal to it.
    Lowrank { rank: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSection {
    #[serde(default)]
    pub seed: u64,
    /// Prompt length; defaults to `cache.seq_len` and must agree with it.
    #[serde(default)]
    pub prefill_len: Option<usize>,
    #[serde(default)]
    pub decode_steps: usize,
    #[serde(default = "default_generator")]
    pub generator: Generator,
    /// Query heads per KV head.
    #[serde(default = "default_query_group")]
    pub query_group: usize,
}

impl Default for WorkloadSection {
    fn default() -> Self {
        Self { seed: 0, prefill_len: None, decode_steps: 0, generator: Generator::Gaussian, query_group: 1 }
    }
}

fn default_generator() -> Generator {
    Generator::Gaussian
}

fn default_query_group() -> usize {
    1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSection {
    pub total_bytes: u64,
    pub weight_bytes: u64,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks everything that does not depend on the command.
    pub fn validate(&self) -> Result<(), CliError> {
        let cache = self.cache_config()?;
        cache.validate().map_err(config_err)?;
        if cache.head_count() == 0 || cache.seq_len == 0 {
            return Err(CliError::Config("batch, layers, heads and seq_len must be positive".into()));
        }
        self.eviction_policy()?.validate().map_err(config_err)?;
        self.quant()?;
        let w = &self.workload;
        if w.query_group == 0 {
            return Err(CliError::Config("workload.query_group must be at least 1".into()));
        }
        if let Generator::Lowrank { rank } = w.generator {
            if rank == 0 || rank > cache.head_dim || rank > cache.seq_len {
                return Err(CliError::Config(format!(
                    "lowrank rank {rank} must be in 1..={}",
                    cache.head_dim.min(cache.seq_len)
                )));
            }
        }
        if let Some(d) = self.device {
            if d.weight_bytes >= d.total_bytes {
                return Err(CliError::Config("device.weight_bytes must be below device.total_bytes".into()));
            }
        }
        for &ratio in &self.sweep {
            CacheConfig { key_prune_ratio: ratio, ..cache }.validate().map_err(config_err)?;
        }
        Ok(())
    }

    /// Extra requirements of the prefill/decode pipeline.
    pub fn validate_pipeline(&self) -> Result<(), CliError> {
        let cache = self.cache_config()?;
        if matches!(self.criterion, Criterion::QueryDriven | Criterion::ValueDriven) && cache.obs_window == 0 {
            return Err(CliError::Config(format!("criterion {:?} needs obs_window >= 1", self.criterion)));
        }
        Ok(())
    }

    /// The core cache configuration with defaults resolved.
    pub fn cache_config(&self) -> Result<CacheConfig, CliError> {
        let c = &self.cache;
        if let Some(p) = self.workload.prefill_len {
            if p != c.seq_len {
                return Err(CliError::Config(format!(
                    "workload.prefill_len {p} disagrees with cache.seq_len {}",
                    c.seq_len
                )));
            }
        }
        let kv_budget = match (self.policy.kind, c.kv_budget) {
            (_, None) => c.seq_len,
            (PolicyKind::None, Some(b)) if b != c.seq_len => {
                return Err(CliError::Config(format!(
                    "kv_budget {b} below seq_len {} needs an eviction policy",
                    c.seq_len
                )))
            }
            (_, Some(b)) => b,
        };
        Ok(CacheConfig {
            batch: c.batch,
            seq_len: c.seq_len,
            layers: c.layers,
            heads: c.heads,
            head_dim: c.head_dim,
            dtype_bits: c.dtype_bits,
            key_prune_ratio: c.key_prune_ratio,
            value_prune_ratio: c.value_prune_ratio,
            obs_window: c.obs_window.unwrap_or(32.min(c.seq_len)),
            residual_len: c.residual_len,
            kv_budget,
        })
    }

    pub fn eviction_policy(&self) -> Result<EvictionPolicy, CliError> {
        let cache = self.cache_config()?;
        Ok(match self.policy.kind {
            PolicyKind::None => EvictionPolicy::none(),
            kind => EvictionPolicy {
                kind,
                kv_budget: cache.kv_budget,
                obs_window: cache.obs_window,
                pool_kernel: self.policy.pool_kernel,
            },
        })
    }

    pub fn quant(&self) -> Result<Option<KvQuant>, CliError> {
        let Some(q) = self.quantization else { return Ok(None) };
        if q.group_size == 0 {
            return Err(CliError::Config("quantization.group_size must be positive".into()));
        }
        let spec = |bits| QuantBits::from_bits(bits).map(|bits| QuantSpec { bits, group_size: q.group_size });
        Ok(Some(KvQuant { keys: spec(q.bits_k).map_err(config_err)?, values: spec(q.bits_v).map_err(config_err)? }))
    }

    /// `--out` wins over `output_dir`, which defaults to the working directory.
    pub fn output_dir(&self, overridden: Option<&Path>) -> PathBuf {
        overridden.map(Path::to_path_buf).or_else(|| self.output_dir.clone()).unwrap_or_else(|| PathBuf::from("."))
    }
}

fn config_err(e: kvtrim_core::Error) -> CliError {
    CliError::Config(e.to_string())
}
