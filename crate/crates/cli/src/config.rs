//! Flat dotted-key configuration: built-in defaults, then an optional JSON
//! file, then `--key=value` overrides. A bare leaf name (`batch_size`) resolves
//! to its full key when exactly one key ends with it.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};
use spectralseg::data::SyntheticParams;
use spectralseg::losses::LossConfig;
use spectralseg::model::{ModelConfig, Variant};
use spectralseg::spectral::FrequencyFilter;
use spectralseg::train::{Optimizer, TrainConfig};

pub const DATA_ENV: &str = "SPECTRALSEG_DATA";

/// A rejected flag, key or value; maps to exit code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn defaults() -> BTreeMap<String, Value> {
    let data_dir = std::env::var(DATA_ENV).unwrap_or_else(|_| "data".into());
    let model = ModelConfig::default();
    let train = TrainConfig::default();
    let loss = LossConfig::default();
    let synth = SyntheticParams::default();
    [
        ("model.variant", json!(model.variant.to_string())),
        ("model.base_width", json!(model.base_width)),
        ("model.alpha", json!(model.alpha)),
        ("model.global_ratio", json!(model.global_ratio)),
        ("model.filter", json!("none")),
        ("model.filter_bound", json!(10.0)),
        ("model.input_size", json!(model.input_size.0)),
        ("train.batch_size", json!(train.batch_size)),
        ("train.learning_rate", json!(train.learning_rate)),
        ("train.weight_decay", json!(train.weight_decay)),
        ("train.max_epochs", json!(train.max_epochs)),
        ("train.optimizer", json!("adam")),
        ("train.seed", json!(train.seed)),
        ("loss.lambda_dice", json!(loss.lambda_dice)),
        ("loss.lambda_ce", json!(loss.lambda_ce)),
        ("loss.epsilon", json!(loss.epsilon)),
        ("data.dir", json!(data_dir)),
        ("data.raw_dir", json!("")),
        ("synth.n", json!(200)),
        ("synth.seed", json!(0)),
        ("synth.height", json!(synth.height)),
        ("synth.width", json!(synth.width)),
        ("output.dir", json!("runs")),
        ("checkpoint", json!("")),
        ("eval.split", json!("test")),
        ("ablate.alphas", json!("0,0.25,0.5,0.75,1")),
        ("ablate.filters", json!("none,keep,remove")),
        ("report.style", json!("table1")),
        ("report.inputs", json!("")),
        ("report.label", json!("this run")),
        ("report.literature", json!(true)),
        ("overlay.split", json!("test")),
        ("overlay.index", json!(0)),
        ("audit.base_width", json!(4)),
        ("audit.input_size", json!(32)),
        ("audit.variants", json!("ynet,unet,ynet_conv_branch")),
        ("audit.samples", json!(3)),
        ("audit.seed", json!(0)),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedConfig {
    values: BTreeMap<String, Value>,
}

impl Default for ResolvedConfig {
    fn default() -> Self {
        Self { values: defaults() }
    }
}

impl ResolvedConfig {
    /// Full key for `name`, accepting a unique leaf suffix.
    pub fn resolve_key(&self, name: &str) -> anyhow::Result<String> {
        if self.values.contains_key(name) {
            return Ok(name.to_string());
        }
        let matches: Vec<&String> = self
            .values
            .keys()
            .filter(|k| k.rsplit('.').next() == Some(name))
            .collect();
        match matches.as_slice() {
            [one] => Ok((*one).clone()),
            [] => Err(usage(format!("unknown config key `{name}`"))),
            many => Err(usage(format!(
                "ambiguous config key `{name}`: matches {}",
                many.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
            ))),
        }
    }

    fn set(&mut self, name: &str, value: Value) -> anyhow::Result<()> {
        let key = self.resolve_key(name)?;
        let current = &self.values[&key];
        let coerced = coerce(&key, current, value)?;
        self.values.insert(key, coerced);
        Ok(())
    }

    /// Applies a flat JSON object of dotted keys.
    pub fn apply_file(&mut self, path: &Path) -> anyhow::Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        let parsed: Value = serde_json::from_str(&text)
            .map_err(|e| usage(format!("config {} is not valid JSON: {e}", path.display())))?;
        let Value::Object(map) = parsed else {
            return Err(usage(format!("config {} must be a JSON object", path.display())));
        };
        for (k, v) in map {
            self.set(&k, v)?;
        }
        Ok(())
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> anyhow::Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| usage(format!("override `{assignment}` is not key=value")))?;
        self.set(k, Value::String(v.to_string()))
    }

    pub fn to_json(&self) -> Value {
        Value::Object(self.values.clone().into_iter().collect::<Map<_, _>>())
    }

    fn get(&self, key: &str) -> &Value {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("`{key}` has no default"))
    }

    pub fn str(&self, key: &str) -> String {
        match self.get(key) {
            Value::String(s) => s.clone(),
            other => other.to_string(),
        }
    }

    pub fn f64(&self, key: &str) -> f64 {
        self.get(key).as_f64().expect("numeric key")
    }

    pub fn usize(&self, key: &str) -> usize {
        self.get(key).as_u64().expect("integer key") as usize
    }

    pub fn u64(&self, key: &str) -> u64 {
        self.get(key).as_u64().expect("integer key")
    }

    pub fn bool(&self, key: &str) -> bool {
        self.get(key).as_bool().expect("boolean key")
    }

    pub fn path(&self, key: &str) -> PathBuf {
        PathBuf::from(self.str(key))
    }

    pub fn filter(&self) -> anyhow::Result<FrequencyFilter> {
        parse_filter(&self.str("model.filter"), self.f64("model.filter_bound"))
    }

    pub fn model(&self) -> anyhow::Result<ModelConfig> {
        let variant: Variant = self
            .str("model.variant")
            .parse()
            .map_err(|e: spectralseg::Error| usage(e.to_string()))?;
        let size = self.usize("model.input_size");
        let cfg = ModelConfig {
            variant,
            base_width: self.usize("model.base_width"),
            alpha: self.f64("model.alpha"),
            global_ratio: self.f64("model.global_ratio"),
            filter: self.filter()?,
            input_size: (size, size),
            ..ModelConfig::default()
        };
        cfg.validate().map_err(|e| usage(e.to_string()))?;
        Ok(cfg)
    }

    pub fn train(&self) -> anyhow::Result<TrainConfig> {
        if self.str("train.optimizer") != "adam" {
            return Err(usage(format!(
                "train.optimizer must be `adam`, got `{}`",
                self.str("train.optimizer")
            )));
        }
        let out = self.path("output.dir");
        let cfg = TrainConfig {
            batch_size: self.usize("train.batch_size"),
            learning_rate: self.f64("train.learning_rate"),
            weight_decay: self.f64("train.weight_decay"),
            max_epochs: self.usize("train.max_epochs"),
            optimizer: Optimizer::Adam,
            seed: self.u64("train.seed"),
            loss: LossConfig {
                lambda_dice: self.f64("loss.lambda_dice"),
                lambda_ce: self.f64("loss.lambda_ce"),
                epsilon: self.f64("loss.epsilon"),
            },
            checkpoint_dir: Some(out),
        };
        cfg.validate().map_err(|e| usage(e.to_string()))?;
        Ok(cfg)
    }

    pub fn synth_params(&self) -> SyntheticParams {
        SyntheticParams {
            height: self.usize("synth.height"),
            width: self.usize("synth.width"),
        }
    }

    pub fn alphas(&self) -> anyhow::Result<Vec<f64>> {
        split_list(&self.str("ablate.alphas"))
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| usage(format!("ablate.alphas: `{s}` is not a number")))
            })
            .collect()
    }

    pub fn filters(&self) -> anyhow::Result<Vec<FrequencyFilter>> {
        let bound = self.f64("model.filter_bound");
        split_list(&self.str("ablate.filters"))
            .map(|s| parse_filter(s, bound))
            .collect()
    }
}

pub fn split_list(s: &str) -> impl Iterator<Item = &str> {
    s.split(',').map(str::trim).filter(|x| !x.is_empty())
}

/// `none`, `keep`, `remove`, or `keep(<bound>)` / `remove(<bound>)`.
pub fn parse_filter(s: &str, default_bound: f64) -> anyhow::Result<FrequencyFilter> {
    let (mode, bound) = match s.split_once('(') {
        Some((m, rest)) => {
            let b = rest
                .strip_suffix(')')
                .and_then(|b| b.parse::<f64>().ok())
                .ok_or_else(|| usage(format!("malformed filter `{s}`")))?;
            (m, b)
        }
        None => (s, default_bound),
    };
    let filter = match mode {
        "none" => FrequencyFilter::none(),
        "keep" => FrequencyFilter::keep(bound),
        "remove" => FrequencyFilter::remove(bound),
        other => return Err(usage(format!("unknown filter mode `{other}`"))),
    };
    filter.validate().map_err(|e| usage(e.to_string()))?;
    Ok(filter)
}

fn coerce(key: &str, current: &Value, value: Value) -> anyhow::Result<Value> {
    let bad = |v: &Value| usage(format!("invalid value {v} for `{key}`"));
    match (current, &value) {
        (Value::String(_), Value::String(_)) => Ok(value),
        (Value::String(_), Value::Number(n)) => Ok(Value::String(n.to_string())),
        (Value::Bool(_), Value::Bool(_)) => Ok(value),
        (Value::Bool(_), Value::String(s)) => s
            .parse::<bool>()
            .map(Value::Bool)
            .map_err(|_| bad(&value)),
        (Value::Number(n), _) => {
            let parsed = match &value {
                Value::Number(v) => Some(v.clone()),
                Value::String(s) if n.is_u64() => s.parse::<u64>().ok().map(Into::into),
                Value::String(s) => s
                    .parse::<f64>()
                    .ok()
                    .and_then(serde_json::Number::from_f64),
                _ => None,
            };
            match parsed {
                Some(p) if n.is_u64() && !p.is_u64() => Err(bad(&value)),
                Some(p) => Ok(Value::Number(p)),
                None => Err(bad(&value)),
            }
        }
        _ => Err(bad(&value)),
    }
}
