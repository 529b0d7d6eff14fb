//! `key=value` configuration files and flag overrides.
//!
//! Keys are the field names of `Hyper` and `TrainConfig`. A flag given on
//! the command line wins over the file, which wins over the defaults.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use clap::Args;
use triplecheck::{Hyper, TrainConfig};

pub const KEYS: &[&str] = &[
    "dim",
    "out_dim",
    "mu",
    "gamma",
    "lambda",
    "tau",
    "beta",
    "fan_out",
    "encoder",
    "attention",
    "batch_size",
    "lr",
    "kge_weight",
    "epochs",
    "negative_mode",
    "include_positive",
];

pub type ConfigMap = BTreeMap<String, String>;

/// Reads `key=value` lines; `#` starts a comment.
pub fn read_config(path: &Path) -> Result<ConfigMap> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    parse_config(&text).with_context(|| format!("in config {}", path.display()))
}

pub fn parse_config(text: &str) -> Result<ConfigMap> {
    let mut map = ConfigMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("line {}: expected key=value", n + 1))?;
        let (k, v) = (k.trim(), v.trim());
        if !KEYS.contains(&k) {
            bail!("line {}: unknown key {k:?}", n + 1);
        }
        if map.insert(k.to_string(), v.to_string()).is_some() {
            bail!("line {}: duplicate key {k:?}", n + 1);
        }
    }
    Ok(map)
}

/// Hyperparameter flags; each mirrors a config key.
#[derive(Args, Clone, Debug, Default)]
pub struct HyperFlags {
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub out_dim: Option<usize>,
    /// Attention gate threshold.
    #[arg(long)]
    pub mu: Option<f64>,
    /// Margin of the translation loss.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Weight of the energy in the confidence score.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Contrastive temperature.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Weight of the contrastive loss.
    #[arg(long)]
    pub beta: Option<f64>,
    /// bilstm, lstm or concat.
    #[arg(long)]
    pub encoder: Option<String>,
    /// additive or dot.
    #[arg(long)]
    pub attention: Option<String>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Weight of the translation loss.
    #[arg(long)]
    pub kge_weight: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// uniform or filtered.
    #[arg(long)]
    pub negative_mode: Option<String>,
    /// Keep the positive pair in the contrastive denominator.
    #[arg(long)]
    pub include_positive: Option<bool>,
}

impl HyperFlags {
    fn overrides(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        let mut put = |k: &'static str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k, v));
            }
        };
        put("dim", self.dim.map(|v| v.to_string()));
        put("out_dim", self.out_dim.map(|v| v.to_string()));
        put("mu", self.mu.map(|v| v.to_string()));
        put("gamma", self.gamma.map(|v| v.to_string()));
        put("lambda", self.lambda.map(|v| v.to_string()));
        put("tau", self.tau.map(|v| v.to_string()));
        put("beta", self.beta.map(|v| v.to_string()));
        put("encoder", self.encoder.clone());
        put("attention", self.attention.clone());
        put("batch_size", self.batch_size.map(|v| v.to_string()));
        put("lr", self.lr.map(|v| v.to_string()));
        put("kge_weight", self.kge_weight.map(|v| v.to_string()));
        put("epochs", self.epochs.map(|v| v.to_string()));
        put("negative_mode", self.negative_mode.clone());
        put("include_positive", self.include_positive.map(|v| v.to_string()));
        out
    }
}

/// Fully resolved model and training settings.
#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub hyper: Hyper,
    pub train: TrainConfig,
    /// Explicit `fan_out`, if any; views decide otherwise.
    pub fan_out: Option<usize>,
}

fn get<T: FromStr>(map: &ConfigMap, key: &str, default: T) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    match map.get(key) {
        None => Ok(default),
        Some(v) => v.parse().map_err(|e| anyhow!("bad value {v:?} for {key}: {e}")),
    }
}

pub fn resolve(config: &ConfigMap, flags: &HyperFlags) -> Result<Settings> {
    let mut map = config.clone();
    for (k, v) in flags.overrides() {
        map.insert(k.to_string(), v);
    }
    let h = Hyper::default();
    let t = TrainConfig::default();
    let gamma = get(&map, "gamma", t.gamma)?;
    let tau = get(&map, "tau", t.tau)?;
    let beta = get(&map, "beta", t.beta)?;
    let fan_out = map.get("fan_out").map(|v| v.parse::<usize>()).transpose()?;
    let hyper = Hyper {
        dim: get(&map, "dim", h.dim)?,
        out_dim: get(&map, "out_dim", h.out_dim)?,
        mu: get(&map, "mu", h.mu)?,
        gamma,
        lambda: get(&map, "lambda", h.lambda)?,
        tau,
        beta,
        fan_out: fan_out.unwrap_or(h.fan_out),
        encoder: get(&map, "encoder", h.encoder)?,
        attention: get(&map, "attention", h.attention)?,
    };
    let train = TrainConfig {
        batch_size: get(&map, "batch_size", t.batch_size)?,
        lr: get(&map, "lr", t.lr)?,
        gamma,
        tau,
        beta,
        kge_weight: get(&map, "kge_weight", t.kge_weight)?,
        epochs: get(&map, "epochs", t.epochs)?,
        seed: t.seed,
        negative_mode: get(&map, "negative_mode", t.negative_mode)?,
        include_positive: get(&map, "include_positive", t.include_positive)?,
    };
    hyper.validate()?;
    train.validate()?;
    Ok(Settings { hyper, train, fan_out })
}
