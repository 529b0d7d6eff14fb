//! Confidence scoring, ranking and top-K evaluation.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diff::{sigmoid, Tape};
use crate::eagnn::ModelState;
use crate::error::{Error, Result};
use crate::kg::KnowledgeGraph;
use crate::objective::energy;
use crate::views::TripleViewGraph;

/// Anchors encoded per attention pass when scoring.
const SCORE_CHUNK: usize = 1024;

/// The K grid used in reports: 1% to 5% of the ranked list.
pub const DEFAULT_K_GRID: [f64; 5] = [0.01, 0.02, 0.03, 0.04, 0.05];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub triple: usize,
    pub confidence: f64,
    pub sim: f64,
    pub energy: f64,
}

/// Triples ordered from least to most confident.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceRanking {
    pub lambda: f64,
    entries: Vec<RankEntry>,
}

impl ConfidenceRanking {
    /// Ranks triple `i` by `sigmoid(sims[i] - lambda * energies[i])`.
    /// Ordering uses the logit, so entries whose confidence saturates in
    /// floating point still rank correctly; ties go to the lower index.
    pub fn from_components(sims: &[f64], energies: &[f64], lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::Domain(format!("lambda must be finite and >= 0, got {lambda}")));
        }
        if sims.len() != energies.len() {
            return Err(Error::Shape(format!("{} similarities vs {} energies", sims.len(), energies.len())));
        }
        let mut keyed: Vec<(f64, RankEntry)> = Vec::with_capacity(sims.len());
        for (i, (&sim, &e)) in sims.iter().zip(energies).enumerate() {
            let logit = sim - lambda * e;
            if !logit.is_finite() {
                return Err(Error::Numeric(format!("triple {i}: non-finite score")));
            }
            keyed.push((
                logit,
                RankEntry {
                    triple: i,
                    confidence: sigmoid(logit),
                    sim,
                    energy: e,
                },
            ));
        }
        keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.triple.cmp(&b.1.triple)));
        Ok(Self {
            lambda,
            entries: keyed.into_iter().map(|(_, e)| e).collect(),
        })
    }

    /// A ranking in the given order, e.g. a random permutation.
    pub fn from_order(order: &[usize]) -> Self {
        let entries = order
            .iter()
            .map(|&triple| RankEntry {
                triple,
                confidence: 0.5,
                sim: 0.0,
                energy: 0.0,
            })
            .collect();
        Self { lambda: 0.0, entries }
    }

    pub fn entries(&self) -> &[RankEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Same components re-ranked under another `lambda`.
    pub fn with_lambda(&self, lambda: f64) -> Result<Self> {
        let n = self.entries.len();
        let mut sims = vec![0.0; n];
        let mut energies = vec![0.0; n];
        for e in &self.entries {
            sims[e.triple] = e.sim;
            energies[e.triple] = e.energy;
        }
        Self::from_components(&sims, &energies, lambda)
    }

    /// Tab-separated report lines, least confident first.
    pub fn to_report(&self, g: &KnowledgeGraph) -> Result<String> {
        let mut out = String::new();
        for e in &self.entries {
            let t = g
                .triples()
                .get(e.triple)
                .ok_or_else(|| Error::Consistency(format!("ranking refers to triple {}", e.triple)))?;
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{:.17e}\t{:.17e}\t{:.17e}",
                e.triple,
                g.entity_names()[t.head],
                g.relation_names()[t.relation],
                g.entity_names()[t.tail],
                e.confidence,
                e.sim,
                e.energy
            )
            .expect("string write");
        }
        Ok(out)
    }

    pub fn write_report(&self, g: &KnowledgeGraph, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_report(g)?).map_err(|e| Error::io(path, e))
    }

    /// Reads a ranking report; the order of lines is kept as written.
    pub fn read_report(path: &Path, lambda: f64) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let perr = |msg: &str| Error::Parse {
                path: path.display().to_string(),
                line: n + 1,
                msg: msg.to_string(),
            };
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 7 {
                return Err(perr("expected 7 tab-separated fields"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| perr("bad number"));
            entries.push(RankEntry {
                triple: f[0].parse().map_err(|_| perr("bad triple index"))?,
                confidence: num(f[4])?,
                sim: num(f[5])?,
                energy: num(f[6])?,
            });
        }
        Ok(Self { lambda, entries })
    }
}

/// Cross-view similarity and energy of every triple, for rescoring under
/// several `lambda` values.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreComponents {
    pub sims: Vec<f64>,
    pub energies: Vec<f64>,
}

impl ScoreComponents {
    pub fn rank(&self, lambda: f64) -> Result<ConfidenceRanking> {
        ConfidenceRanking::from_components(&self.sims, &self.energies, lambda)
    }
}

pub fn score_components(g: &KnowledgeGraph, vg: &TripleViewGraph, model: &ModelState) -> Result<ScoreComponents> {
    vg.check_graph(g)?;
    if g.is_empty() {
        return Err(Error::Domain("nothing to score".into()));
    }
    let energies: Vec<f64> = g.triples().iter().map(|t| energy(t.head, t.relation, t.tail, model)).collect();
    let projected = model.project_all(g, SCORE_CHUNK)?;
    let mut sims = Vec::with_capacity(g.len());
    let all: Vec<usize> = (0..g.len()).collect();
    for anchors in all.chunks(SCORE_CHUNK) {
        let mut tape = Tape::new();
        let b = model.bind(&mut tape, false)?;
        let p = tape.constant(projected.clone())?;
        let one: Vec<usize> = anchors.iter().flat_map(|&i| vg.view_one(i).iter().copied()).collect();
        let two: Vec<usize> = anchors.iter().flat_map(|&i| vg.view_two(i).iter().copied()).collect();
        let (x, _) = model.aggregate(&mut tape, &b, p, anchors, &one)?;
        let (z, _) = model.aggregate(&mut tape, &b, p, anchors, &two)?;
        let s = tape.cosine_similarity(x, z)?;
        sims.extend_from_slice(tape.value(s).data());
    }
    Ok(ScoreComponents { sims, energies })
}

pub fn score_all(g: &KnowledgeGraph, vg: &TripleViewGraph, model: &ModelState, lambda: f64) -> Result<ConfidenceRanking> {
    if !(lambda >= 0.0) {
        return Err(Error::Domain(format!("lambda must be >= 0, got {lambda}")));
    }
    score_components(g, vg, model)?.rank(lambda)
}

/// Number of entries in the top `k` fraction of `n`.
pub fn top_count(n: usize, k: f64) -> Result<usize> {
    if !(k > 0.0 && k <= 1.0) {
        return Err(Error::Domain(format!("K must lie in (0, 1], got {k}")));
    }
    // absorb representation error such as 0.07 * 100 = 7.000000000000001
    let c = (k * n as f64 + 1e-9).floor() as usize;
    if c == 0 {
        return Err(Error::Domain(format!("K = {k} of {n} triples selects nothing")));
    }
    Ok(c.min(n))
}

/// Precision and recall of the errors found in the `k` least confident
/// fraction of the ranking.
pub fn precision_recall_at_k(ranking: &ConfidenceRanking, flags: Option<&[bool]>, k: f64) -> Result<(f64, f64)> {
    let flags = flags.ok_or_else(|| Error::State("no error labels".into()))?;
    if flags.len() != ranking.len() {
        return Err(Error::Consistency(format!(
            "{} labels for {} ranked triples",
            flags.len(),
            ranking.len()
        )));
    }
    let count = top_count(ranking.len(), k)?;
    let mut hits = 0usize;
    for e in &ranking.entries[..count] {
        let flag = flags
            .get(e.triple)
            .ok_or_else(|| Error::Consistency(format!("ranking refers to triple {}", e.triple)))?;
        hits += usize::from(*flag);
    }
    let total = flags.iter().filter(|&&f| f).count();
    let recall = if total == 0 { 0.0 } else { hits as f64 / total as f64 };
    Ok((hits as f64 / count as f64, recall))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub k: f64,
    pub precision: f64,
    pub recall: f64,
}

pub fn metrics_table(ranking: &ConfidenceRanking, flags: Option<&[bool]>, grid: &[f64]) -> Result<Vec<MetricsRow>> {
    grid.iter()
        .map(|&k| {
            let (precision, recall) = precision_recall_at_k(ranking, flags, k)?;
            Ok(MetricsRow { k, precision, recall })
        })
        .collect()
}
