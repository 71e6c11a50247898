//! Flat `key = value` experiment configuration.
//!
//! Keys from a file and from command-line flags are merged (flags win),
//! then resolved into an [`ExperimentConfig`]. Environment parameters use
//! an `env.` prefix, e.g. `env.beta = 0.2`.

use thiserror::Error;

use crate::env::EnvKind;
use crate::harness::{ExperimentConfig, Variant};
use crate::nets::ControlMode;
use crate::optim::{Hyper, OptimizerKind, Schedule};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, found `{text}`")]
    Syntax { line: usize, text: String },
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
    #[error("invalid value `{value}` for `{key}`: {reason}")]
    Value { key: String, value: String, reason: String },
}

/// Keys understood besides the `env.` family.
pub const KEYS: &[&str] = &[
    "env",
    "mode",
    "N",
    "hidden",
    "batch_size",
    "batches_per_epoch",
    "epochs",
    "optimizer",
    "variant",
    "p_percent",
    "schedule",
    "eval_mult",
    "seed_init",
    "seed_data",
    "seed_noise",
    "lambda",
    "beta1",
    "beta2",
    "rms_alpha",
    "adadelta_variant",
];

const DEFAULT_P_PERCENT: f64 = 30.0;

/// Ordered key/value pairs; later `set` calls replace earlier values.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawConfig {
    pairs: Vec<(String, String)>,
}

impl RawConfig {
    /// Parses `key = value` lines. `#` starts a comment; blank lines are skipped.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut raw = RawConfig::default();
        for (i, line) in text.lines().enumerate() {
            let body = line.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (k, v) = body
                .split_once('=')
                .ok_or_else(|| ConfigError::Syntax { line: i + 1, text: line.to_string() })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(ConfigError::Syntax { line: i + 1, text: line.to_string() });
            }
            raw.set(k, v.trim());
        }
        Ok(raw)
    }

    pub fn set(&mut self, key: &str, value: &str) {
        match self.pairs.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value.to_string(),
            None => self.pairs.push((key.to_string(), value.to_string())),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.pairs.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Overlays `other` on top of `self`.
    pub fn merge(&mut self, other: &RawConfig) {
        for (k, v) in &other.pairs {
            self.set(k, v);
        }
    }

    pub fn resolve(&self) -> Result<ExperimentConfig, ConfigError> {
        for (k, _) in &self.pairs {
            if !KEYS.contains(&k.as_str()) && !k.starts_with("env.") {
                return Err(ConfigError::UnknownKey(k.clone()));
            }
        }
        let env: EnvKind = self.parsed("env")?.unwrap_or(EnvKind::Fishing);
        let optimizer: OptimizerKind = self.parsed("optimizer")?.unwrap_or(OptimizerKind::Adam);
        let p: f64 = self.parsed("p_percent")?.unwrap_or(DEFAULT_P_PERCENT);
        let variant = match self.get("variant").unwrap_or("base") {
            "base" => Variant::Base,
            "langevin" => Variant::Langevin,
            "layer_langevin" => Variant::LayerLangevin(p),
            other => return Err(value_error("variant", other, "expected base, langevin or layer_langevin")),
        };
        let mut c = ExperimentConfig::new(env, optimizer, variant);
        let mut hyper: Hyper = c.hyper;

        for (k, v) in &self.pairs {
            let v = v.as_str();
            match k.as_str() {
                "env" | "optimizer" | "variant" | "p_percent" => {}
                "mode" => {
                    c.mode = match v {
                        "single" => ControlMode::SingleNetwork,
                        "per_timestep" => ControlMode::PerTimestep,
                        _ => return Err(value_error(k, v, "expected single or per_timestep")),
                    }
                }
                "N" => c.steps = parse(k, v)?,
                "hidden" => {
                    c.hidden = v
                        .split(',')
                        .map(|w| parse::<usize>(k, w.trim()))
                        .collect::<Result<_, _>>()?;
                }
                "batch_size" => c.batch_size = parse(k, v)?,
                "batches_per_epoch" => c.batches_per_epoch = parse(k, v)?,
                "epochs" => c.epochs = parse(k, v)?,
                "schedule" => c.schedule = v.parse::<Schedule>().map_err(|e| value_error(k, v, &e))?,
                "eval_mult" => c.eval_mult = parse(k, v)?,
                "seed_init" => c.seeds.init = parse(k, v)?,
                "seed_data" => c.seeds.data = parse(k, v)?,
                "seed_noise" => c.seeds.noise = parse(k, v)?,
                "lambda" => hyper.lambda = parse(k, v)?,
                "beta1" => hyper.beta1 = parse(k, v)?,
                "beta2" => hyper.beta2 = parse(k, v)?,
                "rms_alpha" => hyper.alpha = parse(k, v)?,
                "adadelta_variant" => hyper.adadelta_variant = v.parse().map_err(|e: String| value_error(k, v, &e))?,
                key => {
                    let sub = key.strip_prefix("env.").expect("checked above");
                    c.env.set(sub, v).map_err(|e| value_error(k, v, &e))?;
                }
            }
        }
        c.hyper = hyper;
        c.validate().map_err(|e| value_error("config", "", &e.to_string()))?;
        Ok(c)
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key).map(|v| parse(key, v)).transpose()
    }
}

fn value_error(key: &str, value: &str, reason: &str) -> ConfigError {
    ConfigError::Value { key: key.to_string(), value: value.to_string(), reason: reason.to_string() }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| value_error(key, value, &e.to_string()))
}

/// Fully resolved configuration as `key = value` lines, every default included.
pub fn render(c: &ExperimentConfig) -> String {
    let p = match c.variant {
        Variant::LayerLangevin(p) => p,
        _ => DEFAULT_P_PERCENT,
    };
    let hidden: Vec<String> = c.hidden.iter().map(|h| h.to_string()).collect();
    let mut lines = vec![
        ("env".to_string(), c.env.kind().to_string()),
        (
            "mode".into(),
            match c.mode {
                ControlMode::SingleNetwork => "single".into(),
                ControlMode::PerTimestep => "per_timestep".into(),
            },
        ),
        ("N".into(), c.steps.to_string()),
        ("hidden".into(), hidden.join(",")),
        ("batch_size".into(), c.batch_size.to_string()),
        ("batches_per_epoch".into(), c.batches_per_epoch.to_string()),
        ("epochs".into(), c.epochs.to_string()),
        ("optimizer".into(), c.optimizer.to_string()),
        ("variant".into(), c.variant.to_string()),
        ("p_percent".into(), p.to_string()),
        ("schedule".into(), c.schedule.to_string()),
        ("eval_mult".into(), c.eval_mult.to_string()),
        ("seed_init".into(), c.seeds.init.to_string()),
        ("seed_data".into(), c.seeds.data.to_string()),
        ("seed_noise".into(), c.seeds.noise.to_string()),
        ("lambda".into(), c.hyper.lambda.to_string()),
        ("beta1".into(), c.hyper.beta1.to_string()),
        ("beta2".into(), c.hyper.beta2.to_string()),
        ("rms_alpha".into(), c.hyper.alpha.to_string()),
        ("adadelta_variant".into(), c.hyper.adadelta_variant.to_string()),
    ];
    for (k, v) in c.env.entries() {
        lines.push((format!("env.{k}"), v));
    }
    lines.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

/// Splits a run token such as `adam`, `adam-langevin` or `rmsprop-ll30`.
pub fn parse_optimizer_token(token: &str) -> Result<(OptimizerKind, Variant), ConfigError> {
    let bad = |reason: &str| value_error("optimizers", token, reason);
    let (name, rest) = match token.split_once('-') {
        Some((n, r)) => (n, Some(r)),
        None => (token, None),
    };
    let kind: OptimizerKind = name.parse().map_err(|e: String| bad(&e))?;
    let variant = match rest {
        None => Variant::Base,
        Some("langevin") => Variant::Langevin,
        Some(r) => match r.strip_prefix("ll") {
            Some(p) => Variant::LayerLangevin(p.parse().map_err(|_| bad("expected a percentage after `ll`"))?),
            None => return Err(bad("expected `langevin` or `ll<p>` after the optimizer")),
        },
    };
    Ok((kind, variant))
}
