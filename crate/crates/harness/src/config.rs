//! The single JSON configuration document driving every subcommand, with
//! defaults matching the desk-scale blob benchmark.

use purbench_core::attack::{AttackConfig, Norm, TimestepStrategy};
use purbench_core::{CoreError, Result};
use serde::{Deserialize, Serialize};

use crate::dataset::{DataKind, DatasetSpec};
use crate::train::TrainConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchConfig {
    #[serde(default = "default_version")]
    pub format_version: u32,
    /// Master seed; per-seed sweeps use `seed + s` for `s` in `eval.seeds`.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_dataset")]
    pub dataset: DatasetSpec,
    #[serde(default = "default_train_points")]
    pub train_points: usize,
    #[serde(default = "default_schedule")]
    pub schedule: ScheduleConfig,
    #[serde(default = "default_purifier")]
    pub purifier: PurifierSection,
    #[serde(default = "default_model")]
    pub model: ModelSection,
    #[serde(default = "default_classifier")]
    pub classifier: ClassifierSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub attack: AttackSection,
    #[serde(default)]
    pub eval: EvalSection,
}

fn default_version() -> u32 {
    CONFIG_VERSION
}

fn default_dataset() -> DatasetSpec {
    DatasetSpec {
        kind: DataKind::Blobs,
        n_points: 768,
        noise_scale: 0.05,
        seed: 1,
        data_dim: 2,
        num_classes: 2,
    }
}

fn default_train_points() -> usize {
    512
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub t_max: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

fn default_schedule() -> ScheduleConfig {
    ScheduleConfig {
        t_max: 50,
        beta_min: 1e-3,
        beta_max: 5e-2,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PurifierSection {
    pub kind: String,
    pub t_star: usize,
    #[serde(default = "default_eot_samples")]
    pub eot_samples: usize,
}

fn default_eot_samples() -> usize {
    1
}

fn default_purifier() -> PurifierSection {
    PurifierSection {
        kind: "ddpm".into(),
        t_star: 8,
        eot_samples: 1,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    pub time_embed_dim: usize,
}

fn default_model() -> ModelSection {
    ModelSection {
        hidden: vec![64, 64],
        time_embed_dim: 8,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifierSection {
    pub hidden: Vec<usize>,
}

fn default_classifier() -> ClassifierSection {
    ClassifierSection {
        hidden: vec![32, 32],
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackSection {
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_norm")]
    pub norm: String,
    #[serde(default = "default_n_iter")]
    pub n_iter: usize,
    #[serde(default = "default_eot")]
    pub eot: usize,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub step_size: Option<f64>,
    #[serde(default = "default_strategy")]
    pub timestep_strategy: String,
    #[serde(default)]
    pub timestep_count: Option<usize>,
    #[serde(default)]
    pub random_start: bool,
    #[serde(default = "default_spsa_samples")]
    pub spsa_samples: usize,
    #[serde(default = "default_spsa_delta")]
    pub spsa_delta: f64,
    #[serde(default = "default_methods")]
    pub methods: Vec<String>,
}

fn default_eps() -> f64 {
    0.08
}
fn default_norm() -> String {
    "linf".into()
}
fn default_n_iter() -> usize {
    40
}
fn default_eot() -> usize {
    8
}
fn default_momentum() -> f64 {
    0.75
}
fn default_lambda() -> f64 {
    1.0
}
fn default_strategy() -> String {
    "uniform".into()
}
fn default_spsa_samples() -> usize {
    16
}
fn default_spsa_delta() -> f64 {
    0.01
}
fn default_methods() -> Vec<String> {
    vec![
        "diffattack".into(),
        "lambda0".into(),
        "bpda".into(),
        "spsa".into(),
    ]
}

impl Default for AttackSection {
    fn default() -> Self {
        AttackSection {
            eps: default_eps(),
            norm: default_norm(),
            n_iter: default_n_iter(),
            eot: default_eot(),
            momentum: default_momentum(),
            lambda: default_lambda(),
            step_size: None,
            timestep_strategy: default_strategy(),
            timestep_count: None,
            random_start: false,
            spsa_samples: default_spsa_samples(),
            spsa_delta: default_spsa_delta(),
            methods: default_methods(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSection {
    #[serde(default = "default_eval_points")]
    pub n_points: usize,
    #[serde(default = "default_eval_draws")]
    pub n_eval_draws: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

fn default_eval_points() -> usize {
    256
}
fn default_eval_draws() -> usize {
    5
}
fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            n_points: default_eval_points(),
            n_eval_draws: default_eval_draws(),
            seeds: default_seeds(),
        }
    }
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            format_version: CONFIG_VERSION,
            seed: 0,
            dataset: default_dataset(),
            train_points: default_train_points(),
            schedule: default_schedule(),
            purifier: default_purifier(),
            model: default_model(),
            classifier: default_classifier(),
            train: TrainConfig::default(),
            attack: AttackSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl BenchConfig {
    pub fn parse_norm(&self) -> Result<Norm> {
        match self.attack.norm.as_str() {
            "linf" => Ok(Norm::Linf),
            "l2" => Ok(Norm::L2),
            other => Err(CoreError::Config(format!("unknown norm '{other}'"))),
        }
    }

    pub fn parse_strategy(&self) -> Result<TimestepStrategy> {
        match self.attack.timestep_strategy.as_str() {
            "uniform" => Ok(TimestepStrategy::Uniform),
            "initial_third" => Ok(TimestepStrategy::InitialThird),
            "final_third" => Ok(TimestepStrategy::FinalThird),
            other => Err(CoreError::Config(format!(
                "unknown timestep strategy '{other}'"
            ))),
        }
    }

    /// The attack configuration this document describes.
    pub fn attack_config(&self) -> Result<AttackConfig> {
        let mut cfg = AttackConfig::new(self.attack.eps, self.parse_norm()?);
        cfg.n_iter = self.attack.n_iter;
        cfg.eot = self.attack.eot;
        cfg.momentum = self.attack.momentum;
        cfg.lambda = self.attack.lambda;
        cfg.step_size = self.attack.step_size;
        cfg.timestep_strategy = self.parse_strategy()?;
        cfg.timestep_count = self.attack.timestep_count;
        cfg.random_start = self.attack.random_start;
        cfg.spsa_samples = self.attack.spsa_samples;
        cfg.spsa_delta = self.attack.spsa_delta;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != CONFIG_VERSION {
            return Err(CoreError::Config(format!(
                "config format version {} is not the supported version {CONFIG_VERSION}",
                self.format_version
            )));
        }
        if self.train_points >= self.dataset.n_points {
            return Err(CoreError::Config(
                "train_points must leave room for a test split".into(),
            ));
        }
        if self.purifier.kind != "ddpm" && self.purifier.kind != "vpsde" {
            return Err(CoreError::Config(format!(
                "unknown purifier kind '{}'",
                self.purifier.kind
            )));
        }
        if self.purifier.t_star > self.schedule.t_max {
            return Err(CoreError::Config(
                "purifier.t_star exceeds schedule.t_max".into(),
            ));
        }
        if self.eval.seeds.is_empty() {
            return Err(CoreError::Config("eval.seeds must be nonempty".into()));
        }
        self.attack_config()?;
        Ok(())
    }
}

/// Loads a config file, applies `key=value` overrides on top-level (dotted)
/// paths, and validates. The file (and the overrides) are deep-merged over
/// the defaults, so partial documents are fine; a missing path means pure
/// defaults.
pub fn load_config(path: Option<&str>, overrides: &[String]) -> Result<BenchConfig> {
    let mut value = serde_json::to_value(BenchConfig::default()).expect("defaults serialize");
    if let Some(p) = path {
        let text = std::fs::read_to_string(p)
            .map_err(|e| CoreError::Config(format!("cannot read config '{p}': {e}")))?;
        let file = serde_json::from_str::<serde_json::Value>(&text)
            .map_err(|e| CoreError::Config(format!("config parse error: {e}")))?;
        deep_merge(&mut value, file);
    }
    for ov in overrides {
        apply_override(&mut value, ov)?;
    }
    let cfg: BenchConfig = serde_json::from_value(value)
        .map_err(|e| CoreError::Config(format!("config schema error: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Overlays `patch` onto `base`: objects merge recursively, everything else
/// replaces.
fn deep_merge(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => deep_merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies one `dotted.path=json-value` override.
fn apply_override(value: &mut serde_json::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| CoreError::Config(format!("override '{spec}' is not key=value")))?;
    let parsed: serde_json::Value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut cursor = value;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !cursor.is_object() {
            return Err(CoreError::Config(format!(
                "override '{path}': '{part}' is not an object"
            )));
        }
        let map = cursor.as_object_mut().expect("checked above");
        if i + 1 == parts.len() {
            map.insert(part.to_string(), parsed);
            return Ok(());
        }
        cursor = map
            .entry(part.to_string())
            .or_insert_with(|| serde_json::json!({}));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        BenchConfig::default().validate().unwrap();
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let cfg = load_config(
            None,
            &[
                "seed=7".to_string(),
                "purifier.t_star=15".to_string(),
                "attack.norm=l2".to_string(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.purifier.t_star, 15);
        assert_eq!(cfg.attack.norm, "l2");
    }

    #[test]
    fn partial_nested_sections_merge_over_defaults() {
        let dir = std::env::temp_dir().join(format!("purbench-cfg-{}", std::process::id()));
        std::fs::write(&dir, "{\"purifier\": {\"t_star\": 3}}").unwrap();
        let cfg = load_config(dir.to_str(), &[]).unwrap();
        std::fs::remove_file(&dir).unwrap();
        assert_eq!(cfg.purifier.t_star, 3);
        assert_eq!(cfg.purifier.kind, "ddpm");
    }

    #[test]
    fn bad_configs_are_rejected() {
        let mut cfg = BenchConfig::default();
        cfg.purifier.kind = "magic".into();
        assert!(cfg.validate().is_err());

        let mut cfg = BenchConfig::default();
        cfg.purifier.t_star = 99;
        assert!(cfg.validate().is_err());

        let mut cfg = BenchConfig::default();
        cfg.attack.norm = "l7".into();
        assert!(cfg.validate().is_err());

        let mut cfg = BenchConfig::default();
        cfg.format_version = 3;
        assert!(cfg.validate().is_err());
    }
}
