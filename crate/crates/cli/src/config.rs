//! Experiment configuration: JSON schema, defaults, `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use staer_core::autodiff::AdamConfig;
use staer_core::backbone::{BackboneConfig, BackboneKind};
use staer_core::data::{DatasetKind, SyntheticConfig};
use staer_core::sdtw::SdtwConfig;
use staer_core::trainer::{DerWeights, Method, StaerWeights, TrainerConfig};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Overrides `STAER_DATA`.
    pub root: Option<PathBuf>,
    pub tasks: usize,
    /// Seed of a class-order permutation; natural order when absent.
    pub class_order_seed: Option<u64>,
    /// Keep only the first `n` training images before splitting into tasks.
    pub train_limit: Option<usize>,
    /// Keep only the first `n` test images.
    pub test_limit: Option<usize>,
    pub synthetic: SyntheticConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Mnist,
            root: None,
            tasks: 5,
            class_order_seed: None,
            train_limit: None,
            test_limit: None,
            synthetic: SyntheticConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub backbone: BackboneConfig,
    pub method: Method,
    /// Time steps of the static encoding.
    pub steps: usize,
    pub buffer_size: usize,
    /// Epochs per task; 50 for CIFAR-10 and 1 otherwise when unset.
    pub epochs: Option<usize>,
    /// 32 for CIFAR-10 and 10 otherwise when unset.
    pub batch_size: Option<usize>,
    /// Replayed samples per step; the batch size when unset.
    pub replay_batch_size: Option<usize>,
    pub eval_batch_size: usize,
    pub staer: StaerWeights,
    pub der: DerWeights,
    pub sdtw: SdtwConfig,
    pub sdtw_length_normalize: bool,
    pub optimizer: AdamConfig,
    pub reset_optimizer_per_task: bool,
    pub refresh_logits: bool,
    pub random_half: bool,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Write model and buffer checkpoints after each seed.
    pub save_checkpoints: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let t = TrainerConfig::default();
        Self {
            dataset: DatasetConfig::default(),
            backbone: BackboneConfig::preset(BackboneKind::Resnet19),
            method: Method::Staer,
            steps: t.steps,
            buffer_size: t.buffer_size,
            epochs: None,
            batch_size: None,
            replay_batch_size: None,
            eval_batch_size: t.eval_batch_size,
            staer: t.staer,
            der: t.der,
            sdtw: t.sdtw,
            sdtw_length_normalize: t.sdtw_length_normalize,
            optimizer: t.adam,
            reset_optimizer_per_task: false,
            refresh_logits: false,
            random_half: false,
            seeds: vec![0],
            output_dir: PathBuf::from("runs"),
            save_checkpoints: false,
        }
    }
}

impl ExperimentConfig {
    pub fn epochs(&self) -> usize {
        self.epochs.unwrap_or(match self.dataset.kind {
            DatasetKind::Cifar10 => 50,
            _ => 1,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size.unwrap_or(match self.dataset.kind {
            DatasetKind::Cifar10 => 32,
            _ => 10,
        })
    }

    pub fn trainer(&self) -> TrainerConfig {
        TrainerConfig {
            method: self.method,
            steps: self.steps,
            epochs: self.epochs(),
            batch_size: self.batch_size(),
            replay_batch_size: self.replay_batch_size,
            buffer_size: self.buffer_size,
            staer: self.staer,
            der: self.der,
            sdtw: self.sdtw,
            sdtw_length_normalize: self.sdtw_length_normalize,
            adam: self.optimizer,
            reset_optimizer_per_task: self.reset_optimizer_per_task,
            refresh_logits: self.refresh_logits,
            random_half: self.random_half,
            eval_batch_size: self.eval_batch_size,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.seeds.is_empty() {
            return Err(CliError::Config("seeds: at least one seed is required".into()));
        }
        if self.dataset.tasks == 0 {
            return Err(CliError::Config("dataset.tasks must be > 0".into()));
        }
        self.trainer().validate()?;
        self.backbone.validate()?;
        Ok(())
    }

    /// Hash of everything that affects results (the output directory does not).
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Value::Object(m) = &mut v {
            m.remove("output_dir");
        }
        short_hash(&v)
    }

    /// Directory holding this configuration's artifacts.
    pub fn run_dir(&self) -> PathBuf {
        let kind = serde_json::to_value(self.dataset.kind).expect("serializes");
        let kind = kind.as_str().unwrap_or("data");
        self.output_dir
            .join(format!("{}-{kind}-{}", self.method.name(), self.hash()))
    }
}

/// First 12 hex digits of the SHA-256 of a value's compact JSON.
pub fn short_hash(v: &Value) -> String {
    let bytes = serde_json::to_vec(v).expect("value serializes");
    Sha256::digest(&bytes)
        .iter()
        .take(6)
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Reject keys of `given` absent from `reference`, naming the full dotted path.
/// Only objects present on both sides are descended into.
pub fn check_keys(given: &Value, reference: &Value, prefix: &str) -> Result<(), CliError> {
    if let (Value::Object(g), Value::Object(r)) = (given, reference) {
        for (k, v) in g {
            let path = if prefix.is_empty() {
                k.clone()
            } else {
                format!("{prefix}.{k}")
            };
            match r.get(k) {
                None => return Err(CliError::Config(format!("unknown config key `{path}`"))),
                Some(rv) => check_keys(v, rv, &path)?,
            }
        }
    }
    Ok(())
}

/// Set `path` (dot separated) inside a JSON object, creating objects on the way.
pub fn set_path(root: &mut Value, path: &str, value: Value) -> Result<(), CliError> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(CliError::Config(format!("malformed key `{path}`")));
        }
        if !cur.is_object() {
            *cur = Value::Object(Default::default());
        }
        let map = cur.as_object_mut().expect("object");
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        cur = map.entry(part.to_string()).or_insert(Value::Null);
    }
    unreachable!("split yields at least one part")
}

/// Parse a `key=value` override; the value is JSON when it parses, else a string.
pub fn parse_override(s: &str) -> Result<(String, Value), CliError> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{s}` is not key=value")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

/// Build a config from an optional JSON file plus overrides applied in order.
pub fn load<T>(path: Option<&Path>, overrides: &[(String, Value)]) -> Result<T, CliError>
where
    T: Default + Serialize + for<'de> Deserialize<'de>,
{
    let reference = serde_json::to_value(T::default()).expect("default serializes");
    let mut v = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => Value::Object(Default::default()),
    };
    for (k, val) in overrides {
        set_path(&mut v, k, val.clone())?;
    }
    check_keys(&v, &reference, "")?;
    serde_json::from_value(v).map_err(|e| CliError::Config(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_dataset() {
        let mut c = ExperimentConfig::default();
        assert_eq!((c.epochs(), c.batch_size()), (1, 10));
        c.dataset.kind = DatasetKind::Cifar10;
        assert_eq!((c.epochs(), c.batch_size()), (50, 32));
        assert_eq!(c.optimizer.lr, 3e-3);
        assert_eq!((c.staer.beta, c.staer.alpha1, c.staer.alpha2), (1e-4, 0.5, 0.5));
    }

    #[test]
    fn overrides_and_unknown_keys() {
        let o = vec![
            parse_override("method=er").unwrap(),
            parse_override("staer.beta=0.001").unwrap(),
            parse_override("dataset.kind=synthetic").unwrap(),
        ];
        let c: ExperimentConfig = load(None, &o).unwrap();
        assert_eq!(c.method, Method::Er);
        assert_eq!(c.staer.beta, 1e-3);
        assert_eq!(c.dataset.kind, DatasetKind::Synthetic);
        let bad = vec![parse_override("staer.gamma=1").unwrap()];
        let err = load::<ExperimentConfig>(None, &bad).unwrap_err().to_string();
        assert!(err.contains("staer.gamma"), "{err}");
    }

    #[test]
    fn hash_ignores_output_dir() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig {
            output_dir: "elsewhere".into(),
            ..a.clone()
        };
        assert_eq!(a.hash(), b.hash());
        let c = ExperimentConfig { steps: 4, ..a.clone() };
        assert_ne!(a.hash(), c.hash());
    }
}
