//! Training losses, negative sampling and the joint training loop.

use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Adam, Tape, Tensor, Var};
use crate::eagnn::{Bound, ModelState};
use crate::error::{Error, Result};
use crate::kg::{KnowledgeGraph, Triple};
use crate::views::TripleViewGraph;

/// Draws per negative before a filtered sample accepts whatever it has.
pub const MAX_NEGATIVE_RETRIES: usize = 32;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NegativeMode {
    Uniform,
    /// Resample corruptions that are themselves in the graph.
    #[default]
    Filtered,
}

impl FromStr for NegativeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "filtered" => Ok(Self::Filtered),
            other => Err(Error::Domain(format!("unknown negative mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub gamma: f64,
    pub tau: f64,
    /// Weight of the contrastive loss; 0 trains the translation loss alone.
    pub beta: f64,
    /// Weight of the translation loss; 0 trains the contrastive loss alone.
    pub kge_weight: f64,
    pub epochs: usize,
    pub seed: u64,
    pub negative_mode: NegativeMode,
    /// Keep the positive pair in the contrastive denominator.
    pub include_positive: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            lr: 0.01,
            gamma: 0.5,
            tau: 0.5,
            beta: 1.0,
            kge_weight: 1.0,
            epochs: 50,
            seed: 0,
            negative_mode: NegativeMode::Filtered,
            include_positive: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Domain(m));
        if self.batch_size < 2 {
            return bad(format!("batch size must be at least 2, got {}", self.batch_size));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("margin must lie in [0, 1], got {}", self.gamma));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("temperature must be positive, got {}", self.tau));
        }
        if !(self.beta >= 0.0 && self.kge_weight >= 0.0) {
            return bad("loss weights must be >= 0".into());
        }
        if self.beta == 0.0 && self.kge_weight == 0.0 {
            return bad("both loss weights are zero".into());
        }
        Ok(())
    }
}

/// Translation energy `||e_h + e_r - e_t||` over the base embeddings.
pub fn energy(h: usize, r: usize, t: usize, model: &ModelState) -> f64 {
    let (eh, er, et) = (model.entity_embedding(h), model.relation_embedding(r), model.entity_embedding(t));
    eh.iter()
        .zip(er)
        .zip(et)
        .map(|((a, b), c)| (a + b - c).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Energies (`n × 1`) of `triples` recorded on `tape`.
pub fn energy_on(tape: &mut Tape, b: &Bound, triples: &[Triple]) -> Result<Var> {
    let heads: Vec<usize> = triples.iter().map(|t| t.head).collect();
    let rels: Vec<usize> = triples.iter().map(|t| t.relation).collect();
    let tails: Vec<usize> = triples.iter().map(|t| t.tail).collect();
    let eh = tape.gather(b.entity, &heads)?;
    let er = tape.gather(b.relation, &rels)?;
    let et = tape.gather(b.entity, &tails)?;
    let s = tape.add(eh, er)?;
    let diff = tape.sub(s, et)?;
    tape.l2_norm(diff)
}

/// Replaces the head or tail (fair coin) with a different entity. Returns
/// the corruption and whether the head was replaced.
pub fn corrupt_one<R: Rng>(t: Triple, g: &KnowledgeGraph, mode: NegativeMode, rng: &mut R) -> (Triple, bool) {
    let n = g.num_entities();
    let head = rng.gen_bool(0.5);
    let original = if head { t.head } else { t.tail };
    let mut cand = t;
    for _ in 0..MAX_NEGATIVE_RETRIES {
        // uniform over the other n - 1 entities
        let mut e = rng.gen_range(0..n - 1);
        if e >= original {
            e += 1;
        }
        cand = if head {
            Triple::new(e, t.relation, t.tail)
        } else {
            Triple::new(t.head, t.relation, e)
        };
        if mode == NegativeMode::Uniform || !g.contains(&cand) {
            break;
        }
    }
    (cand, head)
}

/// One corruption per positive.
pub fn sample_negatives<R: Rng>(batch: &[Triple], g: &KnowledgeGraph, mode: NegativeMode, rng: &mut R) -> Result<Vec<Triple>> {
    if g.num_entities() < 2 {
        return Err(Error::Domain("negative sampling needs two entities".into()));
    }
    Ok(batch.iter().map(|&t| corrupt_one(t, g, mode, rng).0).collect())
}

/// Summed hinge `max(0, gamma + E(pos) - E(neg))` on the tape.
pub fn kge_loss_on(tape: &mut Tape, b: &Bound, pos: &[Triple], neg: &[Triple], gamma: f64) -> Result<Var> {
    if pos.len() != neg.len() || pos.is_empty() {
        return Err(Error::Shape(format!("{} positives vs {} negatives", pos.len(), neg.len())));
    }
    let ep = energy_on(tape, b, pos)?;
    let en = energy_on(tape, b, neg)?;
    let d = tape.sub(ep, en)?;
    let d = tape.add_scalar(d, gamma)?;
    let h = tape.relu(d)?;
    tape.sum(h)
}

/// Hinge loss from precomputed energies.
pub fn kge_loss_from_energies(pos: &[f64], neg: &[f64], gamma: f64) -> Result<f64> {
    if pos.len() != neg.len() {
        return Err(Error::Shape(format!("{} positives vs {} negatives", pos.len(), neg.len())));
    }
    Ok(pos.iter().zip(neg).map(|(p, n)| (gamma + p - n).max(0.0)).sum())
}

pub fn kge_loss(pos: &[Triple], neg: &[Triple], model: &ModelState, gamma: f64) -> Result<f64> {
    let e = |ts: &[Triple]| ts.iter().map(|t| energy(t.head, t.relation, t.tail, model)).collect::<Vec<_>>();
    kge_loss_from_energies(&e(pos), &e(neg), gamma)
}

/// Cross-view contrastive loss on the tape: mean over anchors of
/// `logsumexp_j(s_ij) - s_ii` with `s = cos / tau`, the sum over `j`
/// skipping `j = i` unless `include_positive`.
pub fn contrastive_loss_on(tape: &mut Tape, x: Var, z: Var, tau: f64, include_positive: bool) -> Result<Var> {
    let n = tape.value(x).rows();
    if n < 2 {
        return Err(Error::Contract(format!("contrastive loss needs at least 2 rows, got {n}")));
    }
    let xn = tape.normalize_rows(x)?;
    let zn = tape.normalize_rows(z)?;
    let s = tape.matmul_nt(xn, zn)?;
    let s = tape.scale(s, 1.0 / tau)?;
    let lse = tape.logsumexp_rows(s, !include_positive)?;
    let pos = tape.diag(s)?;
    let l = tape.sub(lse, pos)?;
    tape.mean(l)
}

pub fn contrastive_loss(x: &Tensor, z: &Tensor, tau: f64, include_positive: bool) -> Result<f64> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone())?;
    let zv = tape.constant(z.clone())?;
    let l = contrastive_loss_on(&mut tape, xv, zv, tau, include_positive)?;
    tape.value(l).item()
}

/// Loss terms of one step.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub kge: Option<Var>,
    pub con: Option<Var>,
    pub total: Var,
}

/// Records the weighted joint loss for one batch of anchor indices.
#[allow(clippy::too_many_arguments)]
pub fn joint_loss_on(
    tape: &mut Tape,
    b: &Bound,
    model: &ModelState,
    g: &KnowledgeGraph,
    vg: &TripleViewGraph,
    batch: &[usize],
    negatives: &[Triple],
    cfg: &TrainConfig,
) -> Result<LossVars> {
    let mut terms = Vec::new();
    let kge = if cfg.kge_weight > 0.0 {
        let pos: Vec<Triple> = batch.iter().map(|&i| g.triples()[i]).collect();
        let l = kge_loss_on(tape, b, &pos, negatives, cfg.gamma).map_err(|e| component("kge", e))?;
        terms.push(tape.scale(l, cfg.kge_weight)?);
        Some(l)
    } else {
        None
    };
    let con = if cfg.beta > 0.0 {
        let views = model.encode_views_on(tape, b, g, vg, batch).map_err(|e| component("encoder", e))?;
        let l = contrastive_loss_on(tape, views.x, views.z, cfg.tau, cfg.include_positive)
            .map_err(|e| component("contrastive", e))?;
        terms.push(tape.scale(l, cfg.beta)?);
        Some(l)
    } else {
        None
    };
    let total = match terms.as_slice() {
        [a] => *a,
        [a, b] => tape.add(*a, *b)?,
        _ => return Err(Error::Domain("no active loss term".into())),
    };
    Ok(LossVars { kge, con, total })
}

fn component(name: &str, e: Error) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!("{name} loss: {m}")),
        other => other,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub epoch: usize,
    pub iteration: usize,
    pub kge_loss: f64,
    pub con_loss: f64,
    pub total: f64,
    pub iter_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<IterRecord>,
}

impl TrainLog {
    /// Mean total loss per epoch.
    pub fn epoch_means(&self) -> Vec<f64> {
        let mut sums: Vec<(f64, usize)> = Vec::new();
        for r in &self.records {
            if sums.len() <= r.epoch {
                sums.resize(r.epoch + 1, (0.0, 0));
            }
            sums[r.epoch].0 += r.total;
            sums[r.epoch].1 += 1;
        }
        sums.into_iter().map(|(s, n)| s / n.max(1) as f64).collect()
    }

    pub fn mean_iter_seconds(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().map(|r| r.iter_seconds).sum::<f64>() / self.records.len() as f64
    }

    /// Loss values only, for reproducibility checks.
    pub fn losses(&self) -> Vec<(f64, f64, f64)> {
        self.records.iter().map(|r| (r.kge_loss, r.con_loss, r.total)).collect()
    }

    /// One JSON object per line.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut out, r).map_err(|e| Error::Format(e.to_string()))?;
            out.push(b'\n');
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }
}

/// Trains `model` and hands it back with the iteration log.
pub fn train(
    g: &KnowledgeGraph,
    vg: &TripleViewGraph,
    model: ModelState,
    cfg: &TrainConfig,
) -> Result<(ModelState, TrainLog)> {
    let mut model = model;
    let log = train_in_place(g, vg, &mut model, cfg)?;
    Ok((model, log))
}

pub fn train_in_place(
    g: &KnowledgeGraph,
    vg: &TripleViewGraph,
    model: &mut ModelState,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    vg.check_graph(g)?;
    if g.len() < 2 {
        return Err(Error::Domain("training needs at least two triples".into()));
    }
    model.hyper.gamma = cfg.gamma;
    model.hyper.tau = cfg.tau;
    model.hyper.beta = cfg.beta;
    model.hyper.fan_out = vg.fan_out();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.lr, &model.params);
    let mut order: Vec<usize> = (0..g.len()).collect();
    let mut log = TrainLog::default();
    let mut iteration = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            // a trailing singleton has no contrastive negatives
            if batch.len() < 2 {
                continue;
            }
            let start = Instant::now();
            let pos: Vec<Triple> = batch.iter().map(|&i| g.triples()[i]).collect();
            let neg = sample_negatives(&pos, g, cfg.negative_mode, &mut rng)?;
            let mut tape = Tape::new();
            let b = model.bind(&mut tape, true)?;
            let at = |e: Error| match e {
                Error::Numeric(m) => Error::Numeric(format!("epoch {epoch} iteration {iteration}: {m}")),
                other => other,
            };
            let loss = joint_loss_on(&mut tape, &b, model, g, vg, batch, &neg, cfg).map_err(at)?;
            tape.backward(loss.total).map_err(at)?;
            model.params.accumulate_grads(&tape);
            adam.step(&mut model.params)?;
            let value = |v: Option<Var>| v.map(|v| tape.value(v).data()[0]).unwrap_or(0.0);
            let rec = IterRecord {
                epoch,
                iteration,
                kge_loss: value(loss.kge),
                con_loss: value(loss.con),
                total: tape.value(loss.total).data()[0],
                iter_seconds: start.elapsed().as_secs_f64(),
            };
            log::debug!("epoch {epoch} iter {iteration}: total {:.5}", rec.total);
            log.records.push(rec);
            iteration += 1;
        }
        if let Some(m) = log.epoch_means().get(epoch) {
            log::info!("epoch {epoch}: mean loss {m:.5}");
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eagnn::Hyper;
    use crate::views::build_views;

    fn model(ne: usize, nr: usize, dim: usize) -> ModelState {
        let hyper = Hyper {
            dim,
            out_dim: dim,
            fan_out: 2,
            ..Hyper::default()
        };
        ModelState::new(ne, nr, hyper, 1).unwrap()
    }

    fn set_row(m: &mut ModelState, name: &str, row: usize, v: &[f64]) {
        let t = m.param_by_name_mut(name).unwrap();
        let cols = t.cols();
        t.data_mut()[row * cols..(row + 1) * cols].copy_from_slice(v);
    }

    #[test]
    fn energy_examples() {
        let mut m = model(3, 1, 2);
        set_row(&mut m, "entity_emb", 0, &[1.0, 0.0]);
        set_row(&mut m, "relation_emb", 0, &[0.0, 1.0]);
        set_row(&mut m, "entity_emb", 1, &[0.0, 0.0]);
        set_row(&mut m, "entity_emb", 2, &[1.0, 1.0]);
        assert!((energy(0, 0, 1, &m) - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(energy(0, 0, 2, &m), 0.0);
    }

    #[test]
    fn energy_matches_tape() {
        let m = model(5, 2, 4);
        let ts = [Triple::new(0, 1, 4), Triple::new(3, 0, 2)];
        let mut tape = Tape::new();
        let b = m.bind(&mut tape, false).unwrap();
        let e = energy_on(&mut tape, &b, &ts).unwrap();
        for (k, t) in ts.iter().enumerate() {
            assert!((tape.value(e).data()[k] - energy(t.head, t.relation, t.tail, &m)).abs() < 1e-14);
        }
    }

    #[test]
    fn hinge_examples() {
        assert_eq!(kge_loss_from_energies(&[0.2], &[1.0], 0.5).unwrap(), 0.0);
        assert!((kge_loss_from_energies(&[0.8], &[0.9], 0.5).unwrap() - 0.4).abs() < 1e-15);
        assert!((kge_loss_from_energies(&[0.2, 0.8], &[1.0, 0.9], 0.5).unwrap() - 0.4).abs() < 1e-15);
    }

    #[test]
    fn contrastive_literal_cases() {
        let same = Tensor::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        assert_eq!(contrastive_loss(&same, &same, 0.5, false).unwrap(), 0.0);
        let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let z = Tensor::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        // anchor 0: -log(e^1 / e^-1) = -2; anchor 1: -log(e^-1 / e^1) = 2
        assert!(contrastive_loss(&x, &z, 1.0, false).unwrap().abs() < 1e-12);
        let one = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert!(matches!(contrastive_loss(&one, &one, 1.0, false), Err(Error::Contract(_))));
    }

    #[test]
    fn negatives_differ_in_one_slot() {
        let g = KnowledgeGraph::from_named([("a", "r", "b"), ("b", "r", "c"), ("c", "s", "d")]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            for &t in g.triples() {
                let (n, head) = corrupt_one(t, &g, NegativeMode::Filtered, &mut rng);
                assert_eq!(n.relation, t.relation);
                if head {
                    assert!(n.head != t.head && n.tail == t.tail);
                } else {
                    assert!(n.tail != t.tail && n.head == t.head);
                }
            }
        }
    }

    #[test]
    fn filtered_fallback_on_saturated_graph() {
        let g = KnowledgeGraph::from_named([("e1", "r", "e2"), ("e2", "r", "e2"), ("e1", "r", "e1")]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let negs = sample_negatives(&[g.triples()[0]], &g, NegativeMode::Filtered, &mut rng).unwrap();
        assert!(g.contains(&negs[0]));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { batch_size: 1, ..Default::default() },
            TrainConfig { tau: 0.0, ..Default::default() },
            TrainConfig { gamma: 1.5, ..Default::default() },
            TrainConfig { beta: 0.0, kge_weight: 0.0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn identical_views_give_unit_positive_similarity() {
        let g = KnowledgeGraph::from_named([("a", "r", "b"), ("c", "r", "d"), ("e", "s", "f")]);
        let vg = build_views(&g, Some(3), 0).unwrap();
        let same = TripleViewGraph::new(3, (0..3).map(|i| vg.view_one(i).to_vec()).collect(), (0..3).map(|i| vg.view_one(i).to_vec()).collect()).unwrap();
        let m = model(g.num_entities(), g.num_relations(), 4);
        let enc = m.encode_views(&g, &same, &[0, 1, 2]).unwrap();
        for i in 0..3 {
            let (x, z) = (enc.x.row(i), enc.z.row(i));
            let dot: f64 = x.iter().zip(z).map(|(a, b)| a * b).sum();
            let nx: f64 = x.iter().map(|a| a * a).sum::<f64>().sqrt();
            assert!((dot / (nx * nx) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn fixed_seed_reproduces_log() {
        let rows: Vec<(String, String, String)> =
            (0..60).map(|i| (format!("e{}", i % 13), format!("r{}", i % 3), format!("e{}", (i * 7 + 2) % 17))).collect();
        let g = KnowledgeGraph::from_named(rows.iter().map(|(a, b, c)| (a.as_str(), b.as_str(), c.as_str())));
        let vg = build_views(&g, Some(3), 1).unwrap();
        let cfg = TrainConfig { batch_size: 16, epochs: 2, seed: 9, ..Default::default() };
        let run = || train(&g, &vg, model(g.num_entities(), g.num_relations(), 4), &cfg).unwrap().1.losses();
        assert_eq!(run(), run());
    }
}
