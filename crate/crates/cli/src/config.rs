//! Flat key=value configuration with section-prefixed keys.
//!
//! Keys look like `phantom.noise_sigma` or `train.base_lr`. Values come from
//! an optional config file, then command-line `--section.key=value`
//! overrides, then the `--seed` flag for the special top-level `seed` key.
//! Every key must be consumed by the command; leftovers are a hard error so
//! typos never silently fall back to defaults.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use t2d_core::derive_seed;
use t2d_core::model::{FusionMode, ModelConfig};
use t2d_core::phantom::{Family, PhantomConfig};
use t2d_core::train::TrainConfig;
use t2d_core::volume::Axis;

use crate::error::{validation, CliError, Result};

#[derive(Debug, Default)]
pub struct Config {
    values: BTreeMap<String, String>,
    /// Every key=value actually used this run, defaults included. Serialized
    /// as the resolved snapshot so a re-run needs no implicit defaults.
    resolved: BTreeMap<String, String>,
}

fn parse_line(line: &str, lineno: usize) -> Result<Option<(String, String)>> {
    let line = line.trim();
    if line.is_empty() || line.starts_with('#') {
        return Ok(None);
    }
    let (key, value) = line
        .split_once('=')
        .ok_or_else(|| validation(format!("config line {lineno}: expected key=value, got '{line}'")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(validation(format!("config line {lineno}: empty key")));
    }
    Ok(Some((key.to_string(), value.trim().to_string())))
}

impl Config {
    /// Layers file < overrides < --seed. Duplicate keys within the file are
    /// rejected; overrides may repeat keys from the file (they win).
    pub fn from_sources(
        file: Option<&Path>,
        overrides: &[(String, String)],
        seed_flag: Option<u64>,
    ) -> Result<Config> {
        let mut values = BTreeMap::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| {
                validation(format!("cannot read config file {}: {e}", path.display()))
            })?;
            for (i, line) in text.lines().enumerate() {
                if let Some((k, v)) = parse_line(line, i + 1)? {
                    if values.insert(k.clone(), v).is_some() {
                        return Err(validation(format!(
                            "config file {}: duplicate key '{k}'",
                            path.display()
                        )));
                    }
                }
            }
        }
        for (k, v) in overrides {
            values.insert(k.clone(), v.clone());
        }
        if let Some(seed) = seed_flag {
            values.insert("seed".to_string(), seed.to_string());
        }
        Ok(Config { values, resolved: BTreeMap::new() })
    }

    fn record(&mut self, key: &str, value: &str) {
        self.resolved.insert(key.to_string(), value.to_string());
    }

    /// Returns the raw value if present, marking the key as consumed.
    pub fn take(&mut self, key: &str) -> Option<String> {
        let v = self.values.remove(key);
        if let Some(ref v) = v {
            self.record(key, v);
        }
        v
    }

    pub fn require(&mut self, key: &str) -> Result<String> {
        self.take(key)
            .ok_or_else(|| validation(format!("missing required config key '{key}'")))
    }

    /// Parses the key, falling back to (and recording) the default.
    pub fn parse<T>(&mut self, key: &str, default: T) -> Result<T>
    where
        T: FromStr + ToString,
        T::Err: std::fmt::Display,
    {
        match self.take(key) {
            Some(v) => v.parse::<T>().map_err(|e| {
                validation(format!("config key '{key}': cannot parse '{v}': {e}"))
            }),
            None => {
                self.record(key, &default.to_string());
                Ok(default)
            }
        }
    }

    /// Parses via a named parser (axes, families, fusion modes).
    pub fn parse_with<T>(
        &mut self,
        key: &str,
        default: T,
        name: impl Fn(&T) -> String,
        parse: impl Fn(&str) -> t2d_core::Result<T>,
    ) -> Result<T> {
        match self.take(key) {
            Some(v) => parse(&v).map_err(CliError::from),
            None => {
                self.record(key, &name(&default));
                Ok(default)
            }
        }
    }

    pub fn seed(&mut self) -> Result<u64> {
        self.parse("seed", 0u64)
    }

    /// Errors out if any key was never consumed: unknown keys are fatal.
    pub fn finish(self) -> Result<BTreeMap<String, String>> {
        if let Some(key) = self.values.keys().next() {
            return Err(validation(format!("unknown config key '{key}'")));
        }
        Ok(self.resolved)
    }

    /// Serializes the consumed keys, one `key=value` per line, sorted.
    pub fn snapshot(resolved: &BTreeMap<String, String>) -> String {
        let mut out = String::new();
        for (k, v) in resolved {
            out.push_str(k);
            out.push('=');
            out.push_str(v);
            out.push('\n');
        }
        out
    }
}

/// Reads the `phantom.*` section. The geometry seed derives from the
/// top-level seed; it is not an independent key.
pub fn phantom_from(cfg: &mut Config, top_seed: u64) -> Result<PhantomConfig> {
    let dft = PhantomConfig::default();
    let p = PhantomConfig {
        h: cfg.parse("phantom.h", dft.h)?,
        w: cfg.parse("phantom.w", dft.w)?,
        d: cfg.parse("phantom.d", dft.d)?,
        family: cfg.parse_with(
            "phantom.family",
            dft.family,
            |f| f.name().to_string(),
            Family::parse,
        )?,
        radius_min: cfg.parse("phantom.radius_min", dft.radius_min)?,
        radius_max: cfg.parse("phantom.radius_max", dft.radius_max)?,
        branch_count: cfg.parse("phantom.branch_count", dft.branch_count)?,
        branch_depth: cfg.parse("phantom.branch_depth", dft.branch_depth)?,
        contrast: cfg.parse("phantom.contrast", dft.contrast)?,
        noise_sigma: cfg.parse("phantom.noise_sigma", dft.noise_sigma)?,
        distractor_density: cfg.parse("phantom.distractor_density", dft.distractor_density)?,
        seed: derive_seed(top_seed, "data"),
    };
    p.validate()?;
    Ok(p)
}

/// Reads the `model.*` section; the init seed derives from the top-level seed.
pub fn model_from(cfg: &mut Config, top_seed: u64) -> Result<ModelConfig> {
    let dft = ModelConfig::default();
    let m = ModelConfig {
        k: cfg.parse("model.k", dft.k)?,
        g: cfg.parse("model.g", dft.g)?,
        base_width: cfg.parse("model.base_width", dft.base_width)?,
        trunk_width: cfg.parse("model.trunk_width", dft.trunk_width)?,
        fusion_mode: cfg.parse_with(
            "model.fusion_mode",
            dft.fusion_mode,
            |m| m.name().to_string(),
            FusionMode::parse,
        )?,
        ssa_pool_size: cfg.parse("model.ssa_pool_size", dft.ssa_pool_size)?,
        input_size: cfg.parse("model.input_size", dft.input_size)?,
        seed: derive_seed(top_seed, "model"),
    };
    m.validate()?;
    Ok(m)
}

/// Reads the `train.*` section; the sampler seed derives from the top-level
/// seed.
pub fn train_from(cfg: &mut Config, top_seed: u64) -> Result<TrainConfig> {
    let dft = TrainConfig::default();
    let t = TrainConfig {
        iterations: cfg.parse("train.iterations", dft.iterations)?,
        batch_size: cfg.parse("train.batch_size", dft.batch_size)?,
        base_lr: cfg.parse("train.base_lr", dft.base_lr)?,
        momentum: cfg.parse("train.momentum", dft.momentum)?,
        weight_decay: cfg.parse("train.weight_decay", dft.weight_decay)?,
        seed: derive_seed(top_seed, "train"),
        axis: cfg.parse_with("train.axis", dft.axis, |a| a.name().to_string(), Axis::parse)?,
        eval_every: cfg.parse("train.eval_every", dft.eval_every)?,
    };
    t.validate()?;
    Ok(t)
}

/// Comma-separated list with a default, each item run through `parse`.
pub fn parse_list<T>(
    cfg: &mut Config,
    key: &str,
    default: &str,
    parse: impl Fn(&str) -> Result<T>,
) -> Result<Vec<T>> {
    let raw = cfg.take(key).unwrap_or_else(|| {
        cfg.record_default(key, default);
        default.to_string()
    });
    let mut out = Vec::new();
    for item in raw.split(',') {
        let item = item.trim();
        if item.is_empty() {
            continue;
        }
        out.push(parse(item)?);
    }
    if out.is_empty() {
        return Err(validation(format!("config key '{key}': empty list")));
    }
    Ok(out)
}

impl Config {
    fn record_default(&mut self, key: &str, value: &str) {
        self.record(key, value);
    }
}
