//! Embedding-only error scorers: TransE, DistMult and ComplEx.
//!
//! Each is trained with a margin ranking loss against one corrupted triple
//! per positive, and ranks triples by its own plausibility score.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detect::ConfidenceRanking;
use crate::diff::{xavier_with, Adam, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::kg::{KnowledgeGraph, Triple};
use crate::objective::{sample_negatives, IterRecord, NegativeMode, TrainLog};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineMethod {
    TransE,
    DistMult,
    ComplEx,
}

impl fmt::Display for BaselineMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::TransE => "transe",
            Self::DistMult => "distmult",
            Self::ComplEx => "complex",
        })
    }
}

impl FromStr for BaselineMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "transe" => Ok(Self::TransE),
            "distmult" => Ok(Self::DistMult),
            "complex" => Ok(Self::ComplEx),
            other => Err(Error::Domain(format!("unknown baseline {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub dim: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub gamma: f64,
    pub epochs: usize,
    pub seed: u64,
    pub negative_mode: NegativeMode,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            dim: 100,
            batch_size: 256,
            lr: 0.01,
            gamma: 0.5,
            epochs: 50,
            seed: 0,
            negative_mode: NegativeMode::Filtered,
        }
    }
}

/// Trained embeddings of one baseline. ComplEx rows hold the real parts
/// followed by the imaginary parts.
#[derive(Clone, Debug)]
pub struct BaselineModel {
    pub method: BaselineMethod,
    pub params: ParamStore,
    entity: ParamId,
    relation: ParamId,
    steps: usize,
}

impl BaselineModel {
    pub fn new(method: BaselineMethod, num_entities: usize, num_relations: usize, dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 || num_entities == 0 || num_relations == 0 {
            return Err(Error::Domain("empty embedding table".into()));
        }
        let width = if method == BaselineMethod::ComplEx { 2 * dim } else { dim };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let entity = params.insert("entity_emb", xavier_with(&[num_entities, width], width, num_entities, &mut rng)?)?;
        let relation = params.insert("relation_emb", xavier_with(&[num_relations, width], width, num_relations, &mut rng)?)?;
        Ok(Self {
            method,
            params,
            entity,
            relation,
            steps: 0,
        })
    }

    pub fn is_trained(&self) -> bool {
        self.steps > 0
    }

    pub fn entity_mut(&mut self) -> &mut crate::diff::Tensor {
        self.params.value_mut(self.entity)
    }

    pub fn relation_mut(&mut self) -> &mut crate::diff::Tensor {
        self.params.value_mut(self.relation)
    }

    /// Marks hand-set embeddings as usable for scoring.
    pub fn mark_trained(&mut self) {
        self.steps = self.steps.max(1);
    }

    /// Plausibility (`n × 1`): `-E` for TransE, the trilinear product
    /// otherwise. Higher means more plausible.
    fn plausibility_on(&self, tape: &mut Tape, ent: Var, rel: Var, triples: &[Triple]) -> Result<Var> {
        let heads: Vec<usize> = triples.iter().map(|t| t.head).collect();
        let rels: Vec<usize> = triples.iter().map(|t| t.relation).collect();
        let tails: Vec<usize> = triples.iter().map(|t| t.tail).collect();
        let h = tape.gather(ent, &heads)?;
        let r = tape.gather(rel, &rels)?;
        let t = tape.gather(ent, &tails)?;
        match self.method {
            BaselineMethod::TransE => {
                let s = tape.add(h, r)?;
                let d = tape.sub(s, t)?;
                let e = tape.l2_norm(d)?;
                tape.scale(e, -1.0)
            }
            BaselineMethod::DistMult => {
                let hr = tape.mul(h, r)?;
                let hrt = tape.mul(hr, t)?;
                tape.row_sum(hrt)
            }
            BaselineMethod::ComplEx => {
                let dim = tape.value(h).cols() / 2;
                let mut parts = |v: Var| -> Result<(Var, Var)> { Ok((tape.slice_cols(v, 0, dim)?, tape.slice_cols(v, dim, dim)?)) };
                let (hr, hi) = parts(h)?;
                let (rr, ri) = parts(r)?;
                let (tr, ti) = parts(t)?;
                // Re(<h, r, conj(t)>)
                let mut terms = Vec::with_capacity(4);
                for (a, b, c, sign) in [(hr, rr, tr, 1.0), (hi, rr, ti, 1.0), (hr, ri, ti, 1.0), (hi, ri, tr, -1.0)] {
                    let ab = tape.mul(a, b)?;
                    let abc = tape.mul(ab, c)?;
                    terms.push(tape.scale(abc, sign)?);
                }
                let mut acc = terms[0];
                for &t in &terms[1..] {
                    acc = tape.add(acc, t)?;
                }
                tape.row_sum(acc)
            }
        }
    }

    pub fn plausibility(&self, triples: &[Triple]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let ent = tape.constant(self.params.value(self.entity).clone())?;
        let rel = tape.constant(self.params.value(self.relation).clone())?;
        let s = self.plausibility_on(&mut tape, ent, rel, triples)?;
        Ok(tape.value(s).data().to_vec())
    }
}

pub fn train_baseline(g: &KnowledgeGraph, method: BaselineMethod, cfg: &BaselineConfig) -> Result<(BaselineModel, TrainLog)> {
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) || !(cfg.gamma >= 0.0) {
        return Err(Error::Domain("invalid baseline configuration".into()));
    }
    if g.is_empty() {
        return Err(Error::Domain("nothing to train on".into()));
    }
    let mut model = BaselineModel::new(method, g.num_entities(), g.num_relations(), cfg.dim, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut adam = Adam::new(cfg.lr, &model.params);
    let mut order: Vec<usize> = (0..g.len()).collect();
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let start = std::time::Instant::now();
            let pos: Vec<Triple> = batch.iter().map(|&i| g.triples()[i]).collect();
            let neg = sample_negatives(&pos, g, cfg.negative_mode, &mut rng)?;
            let mut tape = Tape::new();
            let ent = tape.param(&model.params, model.entity)?;
            let rel = tape.param(&model.params, model.relation)?;
            let sp = model.plausibility_on(&mut tape, ent, rel, &pos)?;
            let sn = model.plausibility_on(&mut tape, ent, rel, &neg)?;
            let d = tape.sub(sn, sp)?;
            let d = tape.add_scalar(d, cfg.gamma)?;
            let h = tape.relu(d)?;
            let loss = tape.sum(h)?;
            tape.backward(loss)?;
            model.params.accumulate_grads(&tape);
            adam.step(&mut model.params)?;
            let total = tape.value(loss).data()[0];
            log.records.push(IterRecord {
                epoch,
                iteration: model.steps,
                kge_loss: total,
                con_loss: 0.0,
                total,
                iter_seconds: start.elapsed().as_secs_f64(),
            });
            model.steps += 1;
        }
    }
    Ok((model, log))
}

/// Ranks every triple of `g`, least plausible first. TransE entries carry
/// the energy (`C = sigmoid(-E)`); the others carry the score as `sim`
/// (`C = sigmoid(score)`).
pub fn baseline_score(g: &KnowledgeGraph, model: &BaselineModel) -> Result<ConfidenceRanking> {
    if !model.is_trained() {
        return Err(Error::State(format!("{} embeddings are untrained", model.method)));
    }
    let s = model.plausibility(g.triples())?;
    let zeros = vec![0.0; s.len()];
    match model.method {
        BaselineMethod::TransE => {
            let energies: Vec<f64> = s.iter().map(|v| -v).collect();
            ConfidenceRanking::from_components(&zeros, &energies, 1.0)
        }
        BaselineMethod::DistMult | BaselineMethod::ComplEx => ConfidenceRanking::from_components(&s, &zeros, 0.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(t: &mut crate::diff::Tensor, row: usize, v: &[f64]) {
        let c = t.cols();
        t.data_mut()[row * c..(row + 1) * c].copy_from_slice(v);
    }

    #[test]
    fn transe_zero_energy_ranks_last() {
        let g = KnowledgeGraph::from_named([("a", "r", "b"), ("b", "r", "c")]);
        let mut m = BaselineModel::new(BaselineMethod::TransE, 3, 1, 2, 0).unwrap();
        assert!(matches!(baseline_score(&g, &m), Err(Error::State(_))));
        set(m.entity_mut(), 0, &[0.0, 0.0]);
        set(m.relation_mut(), 0, &[1.0, 0.0]);
        set(m.entity_mut(), 1, &[1.0, 0.0]);
        set(m.entity_mut(), 2, &[5.0, 5.0]);
        m.mark_trained();
        let r = baseline_score(&g, &m).unwrap();
        assert_eq!(r.entries()[1].triple, 0);
        assert_eq!(r.entries()[1].energy, 0.0);
        assert_eq!(r.entries()[1].confidence, 0.5);
    }

    #[test]
    fn distmult_symmetric_in_head_and_tail() {
        let m = BaselineModel::new(BaselineMethod::DistMult, 4, 2, 5, 3).unwrap();
        let s = m.plausibility(&[Triple::new(1, 0, 3), Triple::new(3, 0, 1)]).unwrap();
        assert!((s[0] - s[1]).abs() < 1e-15);
    }

    #[test]
    fn complex_with_real_embeddings_is_distmult() {
        let mut c = BaselineModel::new(BaselineMethod::ComplEx, 3, 1, 2, 0).unwrap();
        let mut d = BaselineModel::new(BaselineMethod::DistMult, 3, 1, 2, 0).unwrap();
        let ents = [[0.3, -1.0], [0.7, 0.2], [-0.4, 0.9]];
        for (i, e) in ents.iter().enumerate() {
            set(c.entity_mut(), i, &[e[0], e[1], 0.0, 0.0]);
            set(d.entity_mut(), i, e);
        }
        set(c.relation_mut(), 0, &[1.5, -0.5, 0.0, 0.0]);
        set(d.relation_mut(), 0, &[1.5, -0.5]);
        let ts = [Triple::new(0, 0, 1), Triple::new(2, 0, 0)];
        let (a, b) = (c.plausibility(&ts).unwrap(), d.plausibility(&ts).unwrap());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn training_lowers_loss() {
        let rows: Vec<(String, String, String)> =
            (0..200).map(|i| (format!("e{}", i % 20), format!("r{}", i % 4), format!("e{}", (i % 20 + 1 + i % 4) % 20))).collect();
        let g = KnowledgeGraph::from_named(rows.iter().map(|(a, b, c)| (a.as_str(), b.as_str(), c.as_str())));
        for method in [BaselineMethod::TransE, BaselineMethod::DistMult, BaselineMethod::ComplEx] {
            let cfg = BaselineConfig { dim: 8, batch_size: 32, epochs: 20, ..Default::default() };
            let (m, log) = train_baseline(&g, method, &cfg).unwrap();
            let means = log.epoch_means();
            assert!(means.last().unwrap() < &means[0], "{method}: {means:?}");
            assert_eq!(baseline_score(&g, &m).unwrap().len(), g.len());
        }
    }
}
