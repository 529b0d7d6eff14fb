//! Ablation variants, sweep grids and repeated runs.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::detect::{metrics_table, score_components, MetricsRow, ScoreComponents};
use crate::eagnn::{Hyper, LocalEncoder, ModelState};
use crate::error::{Error, Result};
use crate::kg::KnowledgeGraph;
use crate::objective::{train, TrainConfig, TrainLog};
use crate::views::TripleViewGraph;

/// A named model variant for ablation runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    Full,
    /// Concatenated embeddings instead of the recurrent local layer.
    Concat,
    /// Unidirectional recurrent local layer.
    Lstm,
    /// Translation loss only.
    Local,
    /// Contrastive loss only.
    Global,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Full, Variant::Concat, Variant::Lstm, Variant::Local, Variant::Global];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Concat => "var_concat",
            Variant::Lstm => "var_lstm",
            Variant::Local => "var_local",
            Variant::Global => "var_global",
        }
    }

    pub fn apply(self, hyper: &mut Hyper, cfg: &mut TrainConfig) {
        match self {
            Variant::Full => {}
            Variant::Concat => hyper.encoder = LocalEncoder::Concat,
            Variant::Lstm => hyper.encoder = LocalEncoder::Lstm,
            Variant::Local => cfg.beta = 0.0,
            Variant::Global => cfg.kge_weight = 0.0,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase();
        let key = key.strip_prefix("var_").unwrap_or(&key);
        match key {
            "full" => Ok(Variant::Full),
            "concat" => Ok(Variant::Concat),
            "lstm" => Ok(Variant::Lstm),
            "local" => Ok(Variant::Local),
            "global" => Ok(Variant::Global),
            _ => Err(Error::Domain(format!("unknown variant {s:?}"))),
        }
    }
}

/// Hyperparameter swept by the `sweep` command.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepParam {
    Mu,
    Lambda,
    Gamma,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Mu => "mu",
            SweepParam::Lambda => "lambda",
            SweepParam::Gamma => "gamma",
        }
    }

    pub fn default_grid(self) -> Vec<f64> {
        match self {
            SweepParam::Mu => vec![0.001, 0.002, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2],
            SweepParam::Lambda => vec![1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0, 1000.0],
            SweepParam::Gamma => (1..=10).map(|i| i as f64 / 10.0).collect(),
        }
    }

    /// Lambda only enters scoring, so its grid reuses one trained model.
    pub fn needs_training(self) -> bool {
        self != SweepParam::Lambda
    }

    pub fn apply(self, value: f64, hyper: &mut Hyper, cfg: &mut TrainConfig) {
        match self {
            SweepParam::Mu => hyper.mu = value,
            SweepParam::Lambda => hyper.lambda = value,
            SweepParam::Gamma => {
                hyper.gamma = value;
                cfg.gamma = value;
            }
        }
    }
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mu" => Ok(SweepParam::Mu),
            "lambda" => Ok(SweepParam::Lambda),
            "gamma" => Ok(SweepParam::Gamma),
            _ => Err(Error::Domain(format!("unknown sweep parameter {s:?}"))),
        }
    }
}

/// The `index`-th seed derived from `base` (splitmix64), so repeats get
/// well separated streams.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Model initialization and training seeds derived from one run seed.
pub fn split_seed(seed: u64) -> (u64, u64) {
    (derive_seed(seed, 0), derive_seed(seed, 1))
}

/// A trained model with its log and per-triple score components.
#[derive(Clone, Debug)]
pub struct Fit {
    pub model: ModelState,
    pub log: TrainLog,
    pub components: ScoreComponents,
    pub seconds: f64,
}

/// Initializes a model, trains it and scores every triple; both random
/// streams come from [`split_seed`] of `seed`, overriding `cfg.seed`.
pub fn fit(g: &KnowledgeGraph, vg: &TripleViewGraph, hyper: &Hyper, cfg: &TrainConfig, seed: u64) -> Result<Fit> {
    let start = Instant::now();
    let (model, log) = fit_model(g, vg, hyper, cfg, seed)?;
    let components = score_components(g, vg, &model)?;
    Ok(Fit { model, log, components, seconds: start.elapsed().as_secs_f64() })
}

/// Training half of [`fit`].
pub fn fit_model(
    g: &KnowledgeGraph,
    vg: &TripleViewGraph,
    hyper: &Hyper,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(ModelState, TrainLog)> {
    let (model_seed, train_seed) = split_seed(seed);
    let hyper = Hyper { fan_out: vg.fan_out(), ..hyper.clone() };
    let model = ModelState::new(g.num_entities(), g.num_relations(), hyper, model_seed)?;
    train(g, vg, model, &TrainConfig { seed: train_seed, ..cfg.clone() })
}

impl Fit {
    pub fn metrics(&self, g: &KnowledgeGraph, lambda: f64, grid: &[f64]) -> Result<Vec<MetricsRow>> {
        metrics_table(&self.components.rank(lambda)?, g.error_flags(), grid)
    }
}

/// Row-wise mean of several metrics tables over the same K grid.
pub fn mean_metrics(tables: &[Vec<MetricsRow>]) -> Result<Vec<MetricsRow>> {
    let first = tables.first().ok_or_else(|| Error::Domain("no metrics to average".into()))?;
    let n = tables.len() as f64;
    first
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut out = MetricsRow { k: row.k, precision: 0.0, recall: 0.0 };
            for t in tables {
                let r = t
                    .get(i)
                    .filter(|r| r.k == row.k)
                    .ok_or_else(|| Error::Consistency("metrics tables use different K grids".into()))?;
                out.precision += r.precision / n;
                out.recall += r.recall / n;
            }
            Ok(out)
        })
        .collect()
}

/// Median of a non-empty sample; the mean of the middle pair for even sizes.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() || values.iter().any(|v| v.is_nan()) {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { (v[m - 1] + v[m]) / 2.0 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variants_round_trip_and_apply() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert_eq!("Global".parse::<Variant>().unwrap(), Variant::Global);
        assert!("gcn".parse::<Variant>().is_err());

        let mut h = Hyper::default();
        let mut c = TrainConfig::default();
        Variant::Local.apply(&mut h, &mut c);
        assert_eq!((c.beta, c.kge_weight), (0.0, 1.0));
        let mut c = TrainConfig::default();
        Variant::Global.apply(&mut h, &mut c);
        assert_eq!((c.beta, c.kge_weight), (1.0, 0.0));
        Variant::Concat.apply(&mut h, &mut c);
        assert_eq!(h.encoder, LocalEncoder::Concat);
    }

    #[test]
    fn grids_cover_the_searched_ranges() {
        let mu = SweepParam::Mu.default_grid();
        assert_eq!((mu[0], *mu.last().unwrap()), (0.001, 0.2));
        let lambda = SweepParam::Lambda.default_grid();
        assert_eq!((lambda[0], *lambda.last().unwrap()), (1e-3, 1e3));
        let gamma = SweepParam::Gamma.default_grid();
        assert_eq!(gamma.len(), 10);
        assert!((gamma[9] - 1.0).abs() < 1e-15);
        assert!(!SweepParam::Lambda.needs_training());
    }

    #[test]
    fn derived_seeds_are_distinct_and_stable() {
        let seeds: Vec<u64> = (0..100).map(|i| derive_seed(7, i)).collect();
        let unique: std::collections::HashSet<_> = seeds.iter().collect();
        assert_eq!(unique.len(), 100);
        assert_eq!(derive_seed(7, 3), seeds[3]);
        assert_ne!(derive_seed(8, 3), seeds[3]);
    }

    #[test]
    fn averages_and_medians() {
        let a = vec![MetricsRow { k: 0.01, precision: 0.2, recall: 0.1 }];
        let b = vec![MetricsRow { k: 0.01, precision: 0.4, recall: 0.3 }];
        let m = mean_metrics(&[a.clone(), b]).unwrap();
        assert!((m[0].precision - 0.3).abs() < 1e-15 && (m[0].recall - 0.2).abs() < 1e-15);
        let c = vec![MetricsRow { k: 0.02, precision: 0.4, recall: 0.3 }];
        assert!(mean_metrics(&[a, c]).is_err());
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }
}
