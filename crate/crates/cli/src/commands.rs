use std::path::Path;

use anyhow::{ensure, Context, Result};
use log::info;
use serde::Serialize;
use triplecheck::experiment::{mean_metrics, median};
use triplecheck::{
    baseline_score, build_views as sample_views, corruption_report, fit, fit_model, generate, inject_errors,
    load_graph, load_labels, metrics_table, train_baseline, write_graph, write_labels, BaselineConfig,
    BaselineMethod, ConfidenceRanking, CorruptionMode, KnowledgeGraph, MetricsRow, ModelState, SweepParam,
    SynthConfig, TripleViewGraph, Variant,
};

use crate::manifest::Manifest;
use crate::settings::{resolve, ConfigMap, Settings};
use crate::{
    AblateArgs, BaselineArgs, EvalArgs, InjectArgs, ScoreArgs, StatsArgs, SweepArgs, SynthArgs, TrainArgs, ViewsArgs,
};

fn settings_manifest(m: &mut Manifest, s: &Settings) {
    m.config("hyper", &s.hyper).config("train", &s.train);
}

/// Loads views and checks they were built for `g`.
fn load_views(path: &Path, g: &KnowledgeGraph) -> Result<TripleViewGraph> {
    let (vg, hash, _) = TripleViewGraph::load(path)?;
    ensure!(
        hash == g.content_hash(),
        "views {} were built for a different graph",
        path.display()
    );
    vg.check_graph(g)?;
    Ok(vg)
}

fn check_ranking(r: &ConfidenceRanking) -> Result<()> {
    for e in r.entries() {
        ensure!(
            e.confidence.is_finite() && e.sim.is_finite() && e.energy.is_finite(),
            "non-finite score for triple {}",
            e.triple
        );
    }
    Ok(())
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn check_metrics(rows: &[MetricsRow]) -> Result<()> {
    ensure!(
        rows.iter().all(|r| r.precision.is_finite() && r.recall.is_finite()),
        "non-finite metrics"
    );
    Ok(())
}

fn labelled_graph(graph: &Path, labels: &Path) -> Result<KnowledgeGraph> {
    Ok(load_graph(graph, Some(labels))?)
}

/// Seeds `seed, seed + 1, ...` for repeated runs.
fn repeat_seeds(seed: u64, repeat: u64) -> Result<Vec<u64>> {
    ensure!(repeat >= 1, "--repeat must be at least 1");
    Ok((0..repeat).map(|r| seed.wrapping_add(r)).collect())
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        entities: a.entities,
        relations: a.relations,
        triples: a.triples,
        types: a.types,
        groups_per_type: a.groups,
        seed: a.seed,
    };
    let g = generate(&cfg)?;
    write_graph(&g, &a.out)?;
    info!("wrote {} triples to {}", g.len(), a.out.display());
    let mut m = Manifest::new("synth");
    m.config("synth", &cfg).seed("synth", a.seed).output(&a.out);
    m.write(&a.out)?;
    Ok(())
}

pub fn stats(a: &StatsArgs) -> Result<()> {
    let g = load_graph(&a.graph, None)?;
    println!("{}", serde_json::to_string_pretty(&g.stats()?)?);
    Ok(())
}

pub fn inject(a: &InjectArgs) -> Result<()> {
    let mode: CorruptionMode = a.mode.parse()?;
    let clean = load_graph(&a.graph, None)?;
    let (noisy, stats) = inject_errors(&clean, a.ratio, mode, a.seed)?;
    write_graph(&noisy, &a.out)?;
    write_labels(noisy.error_flags().expect("injection sets flags"), &a.labels)?;
    let report = corruption_report(&noisy)?;
    info!(
        "injected {} of {} triples ({} heads, {} tails replaced)",
        stats.injected,
        noisy.len(),
        stats.head_replaced,
        stats.tail_replaced
    );
    let mut m = Manifest::new("inject");
    m.config("ratio", a.ratio)
        .config("mode", mode)
        .config("stats", &stats)
        .config("per_relation", &report.per_relation)
        .seed("inject", a.seed)
        .input(&a.graph)?
        .output(&a.out)
        .output(&a.labels);
    m.write(&a.out)?;
    Ok(())
}

pub fn build_views(a: &ViewsArgs, config: &ConfigMap) -> Result<()> {
    let fan_out = match a.fan_out {
        Some(m) => Some(m),
        None => config.get("fan_out").map(|v| v.parse()).transpose().context("bad fan_out")?,
    };
    let g = load_graph(&a.graph, None)?;
    let vg = sample_views(&g, fan_out, a.seed)?;
    vg.save(&a.out, &g.content_hash(), a.seed)?;
    info!("views with fan-out {} over {} triples", vg.fan_out(), vg.len());
    let mut m = Manifest::new("build-views");
    m.config("fan_out", vg.fan_out())
        .seed("views", a.seed)
        .input(&a.graph)?
        .output(&a.out);
    m.write(&a.out)?;
    Ok(())
}

pub fn train(a: &TrainArgs, config: &ConfigMap) -> Result<()> {
    let s = resolve(config, &a.hyper)?;
    let g = load_graph(&a.graph, None)?;
    let vg = load_views(&a.views, &g)?;
    if let Some(m) = s.fan_out {
        ensure!(m == vg.fan_out(), "fan_out {m} disagrees with the views ({})", vg.fan_out());
    }
    let (model, log) = fit_model(&g, &vg, &s.hyper, &s.train, a.seed)?;
    model.save(&a.out)?;
    let mut m = Manifest::new("train");
    settings_manifest(&mut m, &s);
    m.seed("train", a.seed).input(&a.graph)?.input(&a.views)?.output(&a.out);
    if let Some(p) = &a.log {
        log.write_jsonl(p)?;
        m.output(p);
    }
    info!(
        "trained {} iterations, {:.3} s per iteration",
        log.records.len(),
        log.mean_iter_seconds()
    );
    m.write(&a.out)?;
    Ok(())
}

pub fn score(a: &ScoreArgs, config: &ConfigMap) -> Result<()> {
    let model = ModelState::load(&a.model)?;
    let lambda = match a.lambda {
        Some(l) => l,
        None => match config.get("lambda") {
            Some(v) => v.parse().context("bad lambda")?,
            None => model.hyper.lambda,
        },
    };
    let g = load_graph(&a.graph, None)?;
    ensure!(
        model.num_entities() == g.num_entities() && model.num_relations() == g.num_relations(),
        "checkpoint vocabulary does not match {}",
        a.graph.display()
    );
    let vg = load_views(&a.views, &g)?;
    let ranking = triplecheck::score_all(&g, &vg, &model, lambda)?;
    check_ranking(&ranking)?;
    ranking.write_report(&g, &a.out)?;
    let mut m = Manifest::new("score");
    m.config("lambda", lambda)
        .input(&a.graph)?
        .input(&a.views)?
        .input(&a.model)?
        .output(&a.out);
    m.write(&a.out)?;
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let ranking = ConfidenceRanking::read_report(&a.ranking, f64::NAN)?;
    let flags = load_labels(&a.labels)?;
    let rows = metrics_table(&ranking, Some(&flags), &a.k)?;
    check_metrics(&rows)?;
    write_csv(&a.out, &rows)?;
    for r in &rows {
        info!("K={} precision={:.4} recall={:.4}", r.k, r.precision, r.recall);
    }
    let mut m = Manifest::new("eval");
    m.config("k", &a.k).input(&a.ranking)?.input(&a.labels)?.output(&a.out);
    m.write(&a.out)?;
    Ok(())
}

#[derive(Serialize)]
struct SweepRow {
    param: &'static str,
    value: f64,
    k: f64,
    precision: f64,
    recall: f64,
}

pub fn sweep(a: &SweepArgs, config: &ConfigMap) -> Result<()> {
    let param: SweepParam = a.param.parse()?;
    let grid = if a.grid.is_empty() { param.default_grid() } else { a.grid.clone() };
    let base = resolve(config, &a.hyper)?;
    let g = labelled_graph(&a.graph, &a.labels)?;
    let vg = load_views(&a.views, &g)?;
    let seeds = repeat_seeds(a.seed, a.repeat)?;
    let mut per_value: Vec<Vec<Vec<MetricsRow>>> = vec![Vec::new(); grid.len()];
    if param.needs_training() {
        for (slot, &value) in per_value.iter_mut().zip(&grid) {
            let (mut hyper, mut cfg) = (base.hyper.clone(), base.train.clone());
            param.apply(value, &mut hyper, &mut cfg);
            hyper.validate()?;
            cfg.validate()?;
            for &seed in &seeds {
                let f = fit(&g, &vg, &hyper, &cfg, seed)?;
                info!("{}={value} seed {seed}: {:.1} s", param.name(), f.seconds);
                slot.push(f.metrics(&g, hyper.lambda, &a.k)?);
            }
        }
    } else {
        for &seed in &seeds {
            let f = fit(&g, &vg, &base.hyper, &base.train, seed)?;
            for (slot, &value) in per_value.iter_mut().zip(&grid) {
                slot.push(f.metrics(&g, value, &a.k)?);
            }
        }
    }
    let mut rows = Vec::new();
    for (tables, &value) in per_value.iter().zip(&grid) {
        let mean = mean_metrics(tables)?;
        check_metrics(&mean)?;
        rows.extend(mean.into_iter().map(|r| SweepRow {
            param: param.name(),
            value,
            k: r.k,
            precision: r.precision,
            recall: r.recall,
        }));
    }
    write_csv(&a.out, &rows)?;
    let mut m = Manifest::new("sweep");
    settings_manifest(&mut m, &base);
    m.config("param", param.name()).config("grid", &grid).config("k", &a.k).config("repeat", a.repeat);
    m.seed("train", a.seed)
        .input(&a.graph)?
        .input(&a.labels)?
        .input(&a.views)?
        .output(&a.out);
    m.write(&a.out)?;
    Ok(())
}

#[derive(Serialize)]
struct AblateRow {
    variant: &'static str,
    k: f64,
    precision_mean: f64,
    recall_mean: f64,
    precision_median: f64,
    recall_median: f64,
}

#[derive(Serialize)]
struct RunRow {
    variant: &'static str,
    seed: u64,
    k: f64,
    precision: f64,
    recall: f64,
}

pub fn ablate(a: &AblateArgs, config: &ConfigMap) -> Result<()> {
    let variants: Vec<Variant> = if a.variants.is_empty() {
        Variant::ALL.to_vec()
    } else {
        a.variants.iter().map(|v| v.parse()).collect::<triplecheck::Result<_>>()?
    };
    let base = resolve(config, &a.hyper)?;
    let g = labelled_graph(&a.graph, &a.labels)?;
    let vg = load_views(&a.views, &g)?;
    let seeds = repeat_seeds(a.seed, a.repeat)?;
    let mut table = Vec::new();
    let mut runs = Vec::new();
    for v in variants {
        let (mut hyper, mut cfg) = (base.hyper.clone(), base.train.clone());
        v.apply(&mut hyper, &mut cfg);
        let mut tables = Vec::new();
        for &seed in &seeds {
            let f = fit(&g, &vg, &hyper, &cfg, seed)?;
            let rows = f.metrics(&g, hyper.lambda, &a.k)?;
            check_metrics(&rows)?;
            info!(
                "{v} seed {seed}: {:.1} s, P@{} = {:.4}",
                f.seconds,
                rows.last().map(|r| r.k).unwrap_or(f64::NAN),
                rows.last().map(|r| r.precision).unwrap_or(f64::NAN)
            );
            runs.extend(rows.iter().map(|r| RunRow {
                variant: v.name(),
                seed,
                k: r.k,
                precision: r.precision,
                recall: r.recall,
            }));
            tables.push(rows);
        }
        let mean = mean_metrics(&tables)?;
        for (i, row) in mean.iter().enumerate() {
            let column = |f: fn(&MetricsRow) -> f64| median(&tables.iter().map(|t| f(&t[i])).collect::<Vec<_>>());
            table.push(AblateRow {
                variant: v.name(),
                k: row.k,
                precision_mean: row.precision,
                recall_mean: row.recall,
                precision_median: column(|r| r.precision).expect("finite metrics"),
                recall_median: column(|r| r.recall).expect("finite metrics"),
            });
        }
    }
    write_csv(&a.out, &table)?;
    let mut m = Manifest::new("ablate");
    settings_manifest(&mut m, &base);
    m.config("k", &a.k).config("repeat", a.repeat);
    m.seed("train", a.seed)
        .input(&a.graph)?
        .input(&a.labels)?
        .input(&a.views)?
        .output(&a.out);
    if let Some(p) = &a.runs {
        write_csv(p, &runs)?;
        m.output(p);
    }
    m.write(&a.out)?;
    Ok(())
}

pub fn baseline(a: &BaselineArgs, config: &ConfigMap) -> Result<()> {
    let method: BaselineMethod = a.method.parse()?;
    let s = resolve(config, &a.hyper)?;
    let cfg = BaselineConfig {
        dim: s.hyper.dim,
        batch_size: s.train.batch_size,
        lr: s.train.lr,
        gamma: s.train.gamma,
        epochs: s.train.epochs,
        seed: a.seed,
        negative_mode: s.train.negative_mode,
    };
    let g = load_graph(&a.graph, None)?;
    let (model, log) = train_baseline(&g, method, &cfg)?;
    let ranking = baseline_score(&g, &model)?;
    check_ranking(&ranking)?;
    ranking.write_report(&g, &a.out)?;
    info!("{method}: {} iterations", log.records.len());
    let mut m = Manifest::new("baseline");
    m.config("method", method.to_string()).config("baseline", &cfg);
    m.seed("baseline", a.seed).input(&a.graph)?.output(&a.out);
    m.write(&a.out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn repeat_seeds_count_up() {
        assert_eq!(repeat_seeds(4, 3).unwrap(), vec![4, 5, 6]);
        assert!(repeat_seeds(4, 0).is_err());
    }

    #[test]
    fn median_column_of_tables() {
        let t = |p| vec![MetricsRow { k: 0.05, precision: p, recall: p }];
        let tables = [t(0.1), t(0.5), t(0.3)];
        assert_eq!(median(&tables.iter().map(|x| x[0].precision).collect::<Vec<_>>()), Some(0.3));
        assert!(mean_metrics(&tables).is_ok());
    }
}
