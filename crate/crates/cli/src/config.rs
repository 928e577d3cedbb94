//! Run configuration: defaults, then a JSON file, then `--override` flags.

use std::path::Path;

use anyhow::{bail, Context, Result};
use aspdnet::data::SynthDatasetSpec;
use aspdnet::{GaussianSpec, ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// `[width, height]` test images are resized to before prediction.
    pub resize: Option<[usize; 2]>,
}

/// Everything a subcommand may consult. `seed` drives model initialisation,
/// augmentation, shuffling and synthesis; `train.seed` always mirrors it,
/// and `train.sigma` mirrors `gaussian`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub gaussian: GaussianSpec,
    pub synth: SynthDatasetSpec,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            train: TrainConfig::desk(),
            gaussian: GaussianSpec::default(),
            synth: SynthDatasetSpec::default(),
            eval: EvalConfig { resize: None },
        }
    }
}

fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
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

/// Sets `a.b.c` in `doc`. The value is parsed as JSON, falling back to a
/// plain string.
fn apply_override(doc: &mut Value, spec: &str) -> Result<()> {
    let Some((path, raw)) = spec.split_once('=') else {
        bail!("override {spec:?} is not of the form key=value");
    };
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = doc;
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        bail!("override key {path:?} has an empty component");
    }
    for k in &keys[..keys.len() - 1] {
        let Value::Object(map) = cur else {
            bail!("override key {path:?}: {k:?} is not inside an object");
        };
        cur = map.entry(k.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    let Value::Object(map) = cur else {
        bail!("override key {path:?} does not name an object field");
    };
    map.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

/// Precedence: `overrides` and `seed` > `file` > defaults.
pub fn resolve(file: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<RunConfig> {
    let mut doc = serde_json::to_value(RunConfig::default()).expect("defaults serialise");
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let v: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if !v.is_object() {
            bail!("{} must hold a JSON object", path.display());
        }
        merge(&mut doc, v);
    }
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    if let Some(s) = seed {
        doc["seed"] = Value::from(s);
    }
    let mut cfg: RunConfig = serde_json::from_value(doc).map_err(|e| aspdnet::Error::Config(e.to_string()))?;
    cfg.train.seed = cfg.seed;
    if cfg.train.sigma != GaussianSpec::default() && cfg.train.sigma != cfg.gaussian {
        bail!(aspdnet::Error::Config("set the density kernel under \"gaussian\", not \"train.sigma\"".into()));
    }
    cfg.train.sigma = cfg.gaussian;
    cfg.model.validate()?;
    cfg.train.validate()?;
    cfg.gaussian.validate()?;
    Ok(cfg)
}
