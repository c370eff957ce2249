//! Pipeline configuration: one JSON file, defaults for everything it leaves
//! out, and `CLAIMCRAFT_<A>__<B>=value` environment overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use claimcraft_core::eval_expenditure::{SampleAggregation, Thresholds};
use claimcraft_core::eval_onset::{Aggregation, DEFAULT_CONTROL_RATIO, DEFAULT_HORIZONS};
use claimcraft_core::model::{ModelConfig, SamplingConfig};
use claimcraft_core::rwe::{Caliper, LassoConfig, Pooling};
use claimcraft_core::seed::labeled_seed;
use claimcraft_core::synthgen::{CohortSpec, InclusionCriteria};
use claimcraft_core::training::TrainSpec;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const ENV_PREFIX: &str = "CLAIMCRAFT_";

/// Transformer shape; the vocabulary size comes from the tokenize stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelShape {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub ffn_size: usize,
    pub max_positions: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        let d = ModelConfig::desk(1);
        ModelShape { d_model: d.d_model, n_layers: d.n_layers, n_heads: d.n_heads, n_kv_heads: d.n_kv_heads, ffn_size: d.ffn_size, max_positions: d.max_positions }
    }
}

impl ModelShape {
    pub fn config(&self, vocab_size: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            n_kv_heads: self.n_kv_heads,
            ffn_size: self.ffn_size,
            max_positions: self.max_positions,
            vocab_size,
            seed,
            ..ModelConfig::desk(vocab_size)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    /// Share of enrollees held out from training and used for evaluation.
    pub holdout_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { holdout_fraction: 0.2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub train: TrainSpec,
    /// Stop once held-out cross-entropy falls below the unigram entropy.
    pub stop_below_unigram: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { train: TrainSpec { total_steps: 2000, ..Default::default() }, stop_below_unigram: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PosttrainConfig {
    pub train: TrainSpec,
    /// Number of instruction pairs; defaults to one per twenty training sequences.
    pub pairs: Option<usize>,
}

impl Default for PosttrainConfig {
    fn default() -> Self {
        PosttrainConfig { train: TrainSpec { total_steps: 500, ..Default::default() }, pairs: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OnsetConfig {
    /// Diagnosis codes (e.g. `Q71.0`) or major stems; empty selects the most
    /// frequent major diagnoses.
    pub endpoints: Vec<String>,
    pub min_count: usize,
    pub max_endpoints: usize,
    pub horizons_days: Vec<f64>,
    pub control_ratio: usize,
    pub aggregation: Aggregation,
    /// Horizon at which the two models are compared endpoint by endpoint.
    pub compare_horizon_days: f64,
    pub bootstrap_resamples: usize,
}

impl Default for OnsetConfig {
    fn default() -> Self {
        OnsetConfig {
            endpoints: Vec::new(),
            min_count: 20,
            max_endpoints: 20,
            horizons_days: DEFAULT_HORIZONS.to_vec(),
            control_ratio: DEFAULT_CONTROL_RATIO,
            aggregation: Aggregation::Unweighted,
            compare_horizon_days: 365.25,
            bootstrap_resamples: 2000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    pub n_samples: usize,
    pub max_new: usize,
    pub aggregation: SampleAggregation,
    pub sampling: SamplingConfig,
    pub thresholds: Thresholds,
    /// Cap on evaluated instances (lowest enrollee ids first); 0 means all.
    pub max_instances: usize,
}

impl Default for CostConfig {
    fn default() -> Self {
        CostConfig {
            n_samples: 20,
            max_new: 384,
            aggregation: SampleAggregation::Mean,
            sampling: SamplingConfig::default(),
            thresholds: Thresholds::default(),
            max_instances: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RweConfig {
    /// Study definition JSON; without one a study is derived from the cohort.
    pub study_file: Option<PathBuf>,
    pub n_primary: usize,
    pub n_nco: usize,
    pub pooling: Pooling,
    pub caliper: Caliper,
    pub lasso: LassoConfig,
    pub level: f64,
}

impl Default for RweConfig {
    fn default() -> Self {
        RweConfig { study_file: None, n_primary: 3, n_nco: 30, pooling: Pooling::LastToken, caliper: Caliper::None, lasso: LassoConfig::default(), level: 0.95 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Relative paths resolve against the config file's directory.
    pub work_dir: PathBuf,
    /// Every stage seed is derived from this one.
    pub seed: u64,
    pub cohort: CohortSpec,
    pub inclusion: InclusionCriteria,
    pub split: SplitConfig,
    pub model: ModelShape,
    pub pretrain: PretrainConfig,
    pub posttrain: PosttrainConfig,
    pub onset: OnsetConfig,
    pub cost: CostConfig,
    pub rwe: RweConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            work_dir: PathBuf::from("work"),
            seed: 0,
            cohort: CohortSpec::default(),
            inclusion: InclusionCriteria::default(),
            split: SplitConfig::default(),
            model: ModelShape::default(),
            pretrain: PretrainConfig::default(),
            posttrain: PosttrainConfig::default(),
            onset: OnsetConfig::default(),
            cost: CostConfig::default(),
            rwe: RweConfig::default(),
        }
    }
}

/// Recursively overlays `patch` on `base`; objects merge key by key,
/// anything else replaces.
pub fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies `CLAIMCRAFT_A__B=value` pairs: the path is lower-cased and split
/// on `__`; values parse as JSON when they can and stay strings otherwise.
pub fn apply_env_overrides<I: IntoIterator<Item = (String, String)>>(root: &mut Value, vars: I) -> Result<Vec<String>> {
    let mut applied = Vec::new();
    let mut vars: Vec<(String, String)> = vars.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    vars.sort();
    for (key, raw) in vars {
        let path: Vec<String> = key[ENV_PREFIX.len()..].split("__").map(str::to_ascii_lowercase).collect();
        if path.iter().any(String::is_empty) {
            bail!("malformed override {key}");
        }
        let value = serde_json::from_str(&raw).unwrap_or(Value::String(raw.clone()));
        let mut node = &mut *root;
        for (i, part) in path.iter().enumerate() {
            let Value::Object(map) = node else { bail!("override {key}: {} is not an object", path[..i].join(".")) };
            if i + 1 == path.len() {
                if !map.contains_key(part) {
                    bail!("override {key}: unknown field {}", path.join("."));
                }
                map.insert(part.clone(), value.clone());
                break;
            }
            node = map.get_mut(part).with_context(|| format!("override {key}: unknown field {}", path[..=i].join(".")))?;
        }
        applied.push(path.join("."));
    }
    Ok(applied)
}

impl PipelineConfig {
    /// Defaults, then the file, then environment overrides.
    pub fn load(path: &Path, env: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let user: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if !user.is_object() {
            bail!("{}: top level must be an object", path.display());
        }
        let mut v = serde_json::to_value(PipelineConfig::default())?;
        merge(&mut v, user);
        apply_env_overrides(&mut v, env)?;
        let mut cfg: PipelineConfig = serde_json::from_value(v).with_context(|| format!("invalid configuration in {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.work_dir.is_relative() {
            cfg.work_dir = base.join(&cfg.work_dir);
        }
        if let Some(f) = &cfg.rwe.study_file {
            if f.is_relative() {
                cfg.rwe.study_file = Some(base.join(f));
            }
        }
        Ok(cfg)
    }

    /// Overwrites per-stage seeds with ones derived from the global seed.
    pub fn propagate_seed(&mut self) {
        let s = self.seed;
        self.cohort.seed = labeled_seed(s, "cohort");
        self.pretrain.train.seed = labeled_seed(s, "pretrain");
        self.posttrain.train.seed = labeled_seed(s, "posttrain");
        self.rwe.lasso.seed = labeled_seed(s, "rwe-lasso");
    }

    pub fn stage_seed(&self, label: &str) -> u64 {
        labeled_seed(self.seed, label)
    }

    pub fn validate(&self) -> Result<()> {
        self.cohort.validate()?;
        self.pretrain.train.validate().context("pretrain.train")?;
        self.posttrain.train.validate().context("posttrain.train")?;
        self.model.config(16, 0).validate().context("model")?;
        if !(self.split.holdout_fraction > 0.0 && self.split.holdout_fraction < 1.0) {
            bail!("split.holdout_fraction must lie strictly between 0 and 1");
        }
        if self.onset.horizons_days.is_empty() || self.onset.horizons_days.iter().any(|h| !(*h > 0.0)) {
            bail!("onset.horizons_days must be non-empty and positive");
        }
        if !self.onset.horizons_days.contains(&self.onset.compare_horizon_days) {
            bail!("onset.compare_horizon_days must be one of onset.horizons_days");
        }
        if self.pretrain.train.window > self.model.max_positions {
            bail!("pretrain.train.window exceeds model.max_positions");
        }
        if self.onset.control_ratio == 0 {
            bail!("onset.control_ratio must be at least 1");
        }
        if self.cost.n_samples == 0 || self.cost.max_new == 0 {
            bail!("cost.n_samples and cost.max_new must be positive");
        }
        let t = &self.cost.thresholds;
        if !(t.low_mid < t.mid_high) {
            bail!("cost.thresholds must satisfy low_mid < mid_high");
        }
        if !(self.rwe.level > 0.0 && self.rwe.level < 1.0) {
            bail!("rwe.level must lie strictly between 0 and 1");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn env_override_nested_and_typed() {
        let mut v = serde_json::to_value(PipelineConfig::default()).unwrap();
        let env = vec![
            ("CLAIMCRAFT_COHORT__N_ENROLLEES".to_string(), "77".to_string()),
            ("CLAIMCRAFT_WORK_DIR".to_string(), "elsewhere".to_string()),
            ("OTHER".to_string(), "1".to_string()),
        ];
        let applied = apply_env_overrides(&mut v, env).unwrap();
        assert_eq!(applied, vec!["cohort.n_enrollees", "work_dir"]);
        let c: PipelineConfig = serde_json::from_value(v).unwrap();
        assert_eq!(c.cohort.n_enrollees, 77);
        assert_eq!(c.work_dir, PathBuf::from("elsewhere"));
    }

    #[test]
    fn env_override_rejects_unknown_fields() {
        let mut v = serde_json::to_value(PipelineConfig::default()).unwrap();
        assert!(apply_env_overrides(&mut v, vec![("CLAIMCRAFT_COHORT__NOPE".into(), "1".into())]).is_err());
        assert!(apply_env_overrides(&mut v, vec![("CLAIMCRAFT_SEED__X".into(), "1".into())]).is_err());
    }

    #[test]
    fn merge_keeps_unmentioned_defaults() {
        let mut v = serde_json::to_value(PipelineConfig::default()).unwrap();
        merge(&mut v, serde_json::json!({"model": {"d_model": 32}}));
        let c: PipelineConfig = serde_json::from_value(v).unwrap();
        assert_eq!(c.model.d_model, 32);
        assert_eq!(c.model.n_layers, ModelShape::default().n_layers);
    }
}
