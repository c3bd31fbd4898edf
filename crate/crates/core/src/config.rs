//! Run configuration. On disk it is a flat JSON object with dotted keys
//! (`"objective.rho1": 1.0`); in memory it is a nested struct.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::nn::Activation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregatorKind {
    Mlp,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    Learned,
    /// Frozen to the dataset's ground-truth dependency mask.
    GroundTruth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZPolicy {
    /// `z = 0`, the prior mean.
    Fixed,
    /// `z ~ N(0, I)` per image.
    Sampled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub path: Option<String>,
    pub side: usize,
    pub n: usize,
    /// Held-out samples, drawn from the same stream after the training ones.
    pub test_n: usize,
    pub with_shape: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            side: 16,
            n: 5000,
            test_n: 1000,
            with_shape: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub latents: usize,
    pub residual: usize,
    pub hidden: usize,
    pub depth: usize,
    pub aggregator: AggregatorKind,
    pub aggregator_hidden: usize,
    pub mask: MaskMode,
    /// Initial value of every learned mask logit.
    pub mask_init: f64,
    pub head_hidden: usize,
    pub head_depth: usize,
    pub head_activation: Activation,
    pub lip_target: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latents: 8,
            residual: 8,
            hidden: 256,
            depth: 2,
            aggregator: AggregatorKind::Mlp,
            aggregator_hidden: 32,
            mask: MaskMode::Learned,
            mask_init: 0.0,
            head_hidden: 32,
            head_depth: 2,
            head_activation: Activation::Tanh,
            lip_target: 0.97,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub rho1: f64,
    pub rho2: f64,
    pub lambda3: f64,
    pub lambda_mask: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            rho1: 1.0,
            rho2: 1.0,
            lambda3: 1.0,
            lambda_mask: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    /// Learning rate for the mask logits.
    pub mask_lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub tau_start: f64,
    pub tau_end: f64,
    pub power_iters: usize,
    pub certify_iters: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            mask_lr: 1e-2,
            epochs: 30,
            batch: 64,
            tau_start: 1.0,
            tau_end: 0.1,
            power_iters: 1,
            certify_iters: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub mu: f64,
    pub restarts: usize,
    pub steps: usize,
    pub lr: f64,
    pub rounds: usize,
    pub z_policy: ZPolicy,
    pub invert_tol: f64,
    pub invert_max_iter: usize,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            mu: 0.1,
            restarts: 8,
            steps: 500,
            lr: 0.05,
            rounds: 4,
            z_policy: ZPolicy::Fixed,
            invert_tol: 1e-10,
            invert_max_iter: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub bins: usize,
    pub battery: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { bins: 16, battery: 25 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub out: Option<String>,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub objective: ObjectiveConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub generate: GenerateConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Defaults everywhere except the seed, which is never implicit.
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            out: None,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            objective: ObjectiveConfig::default(),
            train: TrainConfig::default(),
            generate: GenerateConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let o = &self.objective;
        let weights = [
            ("objective.rho1", o.rho1),
            ("objective.rho2", o.rho2),
            ("objective.lambda3", o.lambda3),
            ("objective.lambda_mask", o.lambda_mask),
            ("generate.mu", self.generate.mu),
        ];
        for (k, v) in weights {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "{k} must be a finite non-negative weight, got {v}"
                )));
            }
        }
        let t = &self.train;
        if !(t.tau_start > 0.0 && t.tau_end > 0.0) {
            return Err(Error::InvalidArgument("temperatures must be positive".into()));
        }
        if t.batch < 2 {
            return Err(Error::InvalidArgument("batch size must be at least 2".into()));
        }
        if !(t.lr > 0.0 && t.mask_lr > 0.0) || t.power_iters == 0 || t.certify_iters == 0 {
            return Err(Error::InvalidArgument(
                "learning rate and power iterations must be positive".into(),
            ));
        }
        let c = self.model.lip_target;
        if !(c > 0.0 && c < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "model.lip_target must lie in (0, 1), got {c}"
            )));
        }
        if self.model.latents == 0 || self.model.residual == 0 || self.model.hidden == 0 {
            return Err(Error::InvalidArgument("model widths must be positive".into()));
        }
        if self.eval.bins < 8 {
            return Err(Error::InvalidArgument("eval.bins must be at least 8".into()));
        }
        Ok(())
    }

    pub fn from_flat(flat: &Map<String, Value>) -> Result<Self> {
        let cfg: Self = serde_json::from_value(unflatten(flat)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_flat(&self) -> Map<String, Value> {
        let mut out = Map::new();
        flatten("", &serde_json::to_value(self).expect("config serializes"), &mut out);
        out
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        match serde_json::from_str::<Value>(s)? {
            Value::Object(m) => Self::from_flat(&m),
            _ => Err(Error::format("config", "top level must be an object")),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&s)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&Value::Object(self.to_flat())).expect("config serializes")
    }

    /// Applies `key=value` overrides. Values are parsed as JSON, falling
    /// back to a plain string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut flat = self.to_flat();
        for o in overrides {
            let (k, v) = o
                .as_ref()
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("override `{}` is not key=value", o.as_ref())))?;
            if !flat.contains_key(k) && !optional_key(k) {
                return Err(Error::InvalidArgument(format!("unknown config key `{k}`")));
            }
            let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
            flat.insert(k.to_string(), value);
        }
        Self::from_flat(&flat)
    }
}

fn optional_key(k: &str) -> bool {
    matches!(k, "out" | "data.path")
}

fn flatten(prefix: &str, v: &Value, out: &mut Map<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, child) in m {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, child, out);
            }
        }
        Value::Null => {}
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

fn unflatten(flat: &Map<String, Value>) -> Result<Value> {
    let mut root = Map::new();
    for (key, v) in flat {
        let parts: Vec<&str> = key.split('.').collect();
        let mut node = &mut root;
        for p in &parts[..parts.len() - 1] {
            let entry = node.entry(p.to_string()).or_insert_with(|| Value::Object(Map::new()));
            node = entry
                .as_object_mut()
                .ok_or_else(|| Error::format("config", format!("key `{key}` collides with a scalar")))?;
        }
        node.insert(parts[parts.len() - 1].to_string(), v.clone());
    }
    Ok(Value::Object(root))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_roundtrip() {
        let cfg = RunConfig::with_seed(7);
        let back = RunConfig::from_flat(&cfg.to_flat()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.to_flat()["objective.rho1"], 1.0);
    }

    #[test]
    fn seed_is_required() {
        assert!(RunConfig::from_json_str(r#"{"objective.rho1": 2.0}"#).is_err());
        let cfg = RunConfig::from_json_str(r#"{"seed": 3, "objective.rho1": 2.0}"#).unwrap();
        assert_eq!(cfg.objective.rho1, 2.0);
        assert_eq!(cfg.train.epochs, 30);
    }

    #[test]
    fn overrides_and_validation() {
        let cfg = RunConfig::with_seed(1);
        let o = cfg
            .with_overrides(&["train.epochs=2", "model.aggregator=linear", "out=run"])
            .unwrap();
        assert_eq!(o.train.epochs, 2);
        assert_eq!(o.model.aggregator, AggregatorKind::Linear);
        assert_eq!(o.out.as_deref(), Some("run"));
        assert!(cfg.with_overrides(&["train.nope=1"]).is_err());
        assert!(cfg.with_overrides(&["objective.rho2=-1"]).is_err());
        assert!(cfg.with_overrides(&["model.lip_target=1.0"]).is_err());
        assert!(RunConfig::from_json_str(r#"{"seed": 1, "bogus": 1}"#).is_err());
    }
}
