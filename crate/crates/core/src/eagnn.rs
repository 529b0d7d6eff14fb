//! Error-aware triple encoder.
//!
//! Each triple `(h, r, t)` is read as the length-3 sequence
//! `(e_h, e_r, e_t)` by a bidirectional LSTM; the per-position outputs are
//! concatenated into a code `q` of size `3d`. Codes are projected by a
//! shared matrix and aggregated over each view's neighbor list with
//! softmax attention whose weights at or below `mu` are zeroed, followed by
//! a sigmoid.

use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{checkpoint, xavier_with, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::kg::{KnowledgeGraph, Triple};
use crate::views::TripleViewGraph;

/// Slope of the leaky ReLU inside the additive attention score.
pub const ATTENTION_SLOPE: f64 = 0.2;

/// Local (within-triple) encoder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LocalEncoder {
    #[default]
    BiLstm,
    /// Forward-only LSTM with hidden size `d`.
    Lstm,
    /// Plain `[e_h; e_r; e_t]`, no recurrent weights.
    Concat,
}

impl FromStr for LocalEncoder {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bilstm" | "bi-lstm" => Ok(Self::BiLstm),
            "lstm" => Ok(Self::Lstm),
            "concat" => Ok(Self::Concat),
            other => Err(Error::Domain(format!("unknown encoder {other:?}"))),
        }
    }
}

/// Attention score between a projected anchor and neighbor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionKind {
    /// `leaky_relu(a · [u; v])`.
    #[default]
    Additive,
    /// `u · v / sqrt(d_out)`.
    Dot,
}

impl FromStr for AttentionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "additive" => Ok(Self::Additive),
            "dot" => Ok(Self::Dot),
            other => Err(Error::Domain(format!("unknown attention {other:?}"))),
        }
    }
}

/// Model hyperparameters, stored with every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub dim: usize,
    pub out_dim: usize,
    /// Attention gate threshold.
    pub mu: f64,
    /// Margin of the translation loss.
    pub gamma: f64,
    /// Weight of the energy term in the confidence score.
    pub lambda: f64,
    /// Contrastive temperature.
    pub tau: f64,
    /// Weight of the contrastive loss.
    pub beta: f64,
    pub fan_out: usize,
    pub encoder: LocalEncoder,
    pub attention: AttentionKind,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            dim: 100,
            out_dim: 100,
            mu: 0.005,
            gamma: 0.5,
            lambda: 0.1,
            tau: 0.5,
            beta: 1.0,
            fan_out: 1,
            encoder: LocalEncoder::BiLstm,
            attention: AttentionKind::Additive,
        }
    }
}

impl Hyper {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Domain(m));
        if self.dim == 0 || self.out_dim == 0 || self.fan_out == 0 {
            return bad("dim, out_dim and fan_out must be positive".into());
        }
        if self.encoder == LocalEncoder::BiLstm && !self.dim.is_multiple_of(2) {
            return bad(format!("bi-LSTM needs an even dim, got {}", self.dim));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return bad(format!("mu must be a finite value >= 0, got {}", self.mu));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.lambda >= 0.0) || !(self.gamma >= 0.0) || !(self.beta >= 0.0) {
            return bad("lambda, gamma and beta must be >= 0".into());
        }
        Ok(())
    }

    /// Hidden size of one LSTM direction.
    pub fn hidden(&self) -> usize {
        match self.encoder {
            LocalEncoder::BiLstm => self.dim / 2,
            LocalEncoder::Lstm | LocalEncoder::Concat => self.dim,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct LstmIds {
    w_ih: ParamId,
    w_hh: ParamId,
    bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct ParamIds {
    entity: ParamId,
    relation: ParamId,
    forward: Option<LstmIds>,
    backward: Option<LstmIds>,
    proj: ParamId,
    attn: ParamId,
}

/// Embedding tables, encoder weights and hyperparameters.
#[derive(Clone, Debug)]
pub struct ModelState {
    pub hyper: Hyper,
    pub params: ParamStore,
    ids: ParamIds,
    num_entities: usize,
    num_relations: usize,
}

#[derive(Clone, Copy, Debug)]
struct BoundLstm {
    w_ih: Var,
    w_hh: Var,
    bias: Var,
}

/// Parameters recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct Bound {
    pub entity: Var,
    pub relation: Var,
    forward: Option<BoundLstm>,
    backward: Option<BoundLstm>,
    pub proj: Var,
    pub attn: Var,
}

/// Outputs of both views for a batch of anchors.
#[derive(Clone, Debug)]
pub struct ViewEncoding {
    pub x: Tensor,
    pub z: Tensor,
    pub weights_one: Tensor,
    pub weights_two: Tensor,
}

impl ModelState {
    /// Xavier-initialized model (LSTM biases start at zero).
    pub fn new(num_entities: usize, num_relations: usize, hyper: Hyper, seed: u64) -> Result<Self> {
        hyper.validate()?;
        if num_entities == 0 || num_relations == 0 {
            return Err(Error::Domain("empty vocabulary".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let (d, h, out) = (hyper.dim, hyper.hidden(), hyper.out_dim);
        let xavier = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
            xavier_with(&[rows, cols], cols, rows, rng)
        };
        let entity = params.insert("entity_emb", xavier(num_entities, d, &mut rng)?)?;
        let relation = params.insert("relation_emb", xavier(num_relations, d, &mut rng)?)?;
        let lstm = |name: &str, params: &mut ParamStore, rng: &mut ChaCha8Rng| -> Result<LstmIds> {
            Ok(LstmIds {
                w_ih: params.insert(format!("{name}.w_ih"), xavier(d, 4 * h, rng)?)?,
                w_hh: params.insert(format!("{name}.w_hh"), xavier(h, 4 * h, rng)?)?,
                bias: params.insert(format!("{name}.bias"), Tensor::zeros(&[1, 4 * h]))?,
            })
        };
        let (forward, backward) = match hyper.encoder {
            LocalEncoder::BiLstm => (
                Some(lstm("lstm_fwd", &mut params, &mut rng)?),
                Some(lstm("lstm_bwd", &mut params, &mut rng)?),
            ),
            LocalEncoder::Lstm => (Some(lstm("lstm_fwd", &mut params, &mut rng)?), None),
            LocalEncoder::Concat => (None, None),
        };
        // stored as (3d × d_out) so that projection is `q · W`
        let proj = params.insert("proj_w", xavier(3 * d, out, &mut rng)?)?;
        let attn = params.insert("attn_a", xavier(1, 2 * out, &mut rng)?)?;
        // keep the stream position independent of later additions
        let _: u64 = rng.gen();
        Ok(Self {
            hyper,
            params,
            ids: ParamIds {
                entity,
                relation,
                forward,
                backward,
                proj,
                attn,
            },
            num_entities,
            num_relations,
        })
    }

    pub fn num_entities(&self) -> usize {
        self.num_entities
    }

    pub fn num_relations(&self) -> usize {
        self.num_relations
    }

    pub fn entity_embedding(&self, e: usize) -> &[f64] {
        self.params.value(self.ids.entity).row(e)
    }

    pub fn relation_embedding(&self, r: usize) -> &[f64] {
        self.params.value(self.ids.relation).row(r)
    }

    pub fn param_by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let id = self.params.find(name)?;
        Some(self.params.value_mut(id))
    }

    /// Records all parameters on `tape`, as differentiable leaves when
    /// `trainable`, otherwise as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Bound> {
        let mut get = |id: ParamId| -> Result<Var> {
            if trainable {
                tape.param(&self.params, id)
            } else {
                tape.constant(self.params.value(id).clone())
            }
        };
        let entity = get(self.ids.entity)?;
        let relation = get(self.ids.relation)?;
        let mut lstm = |ids: Option<LstmIds>| -> Result<Option<BoundLstm>> {
            ids.map(|l| {
                Ok(BoundLstm {
                    w_ih: get(l.w_ih)?,
                    w_hh: get(l.w_hh)?,
                    bias: get(l.bias)?,
                })
            })
            .transpose()
        };
        let forward = lstm(self.ids.forward)?;
        let backward = lstm(self.ids.backward)?;
        let proj = get(self.ids.proj)?;
        let attn = get(self.ids.attn)?;
        Ok(Bound {
            entity,
            relation,
            forward,
            backward,
            proj,
            attn,
        })
    }

    fn check_ids(&self, triples: &[Triple]) -> Result<()> {
        for t in triples {
            if t.head >= self.num_entities || t.tail >= self.num_entities || t.relation >= self.num_relations {
                return Err(Error::Index(format!(
                    "triple {t:?} outside {} entities / {} relations",
                    self.num_entities, self.num_relations
                )));
            }
        }
        Ok(())
    }

    /// Local codes `q` (`n × 3d`) for `triples`.
    pub fn local_codes(&self, tape: &mut Tape, b: &Bound, triples: &[Triple]) -> Result<Var> {
        if triples.is_empty() {
            return Err(Error::Shape("no triples to encode".into()));
        }
        self.check_ids(triples)?;
        let (ents, ent_slot) = compact(triples.iter().flat_map(|t| [t.head, t.tail]), self.num_entities);
        let (rels, rel_slot) = compact(triples.iter().map(|t| t.relation), self.num_relations);
        let heads: Vec<usize> = triples.iter().map(|t| ent_slot[t.head]).collect();
        let tails: Vec<usize> = triples.iter().map(|t| ent_slot[t.tail]).collect();
        let relations: Vec<usize> = triples.iter().map(|t| rel_slot[t.relation]).collect();
        let xe = tape.gather(b.entity, &ents)?;
        let xr = tape.gather(b.relation, &rels)?;

        if self.hyper.encoder == LocalEncoder::Concat {
            let eh = tape.gather(xe, &heads)?;
            let er = tape.gather(xr, &relations)?;
            let et = tape.gather(xe, &tails)?;
            return tape.concat(&[eh, er, et]);
        }

        let hidden = self.hyper.hidden();
        let fwd = b.forward.ok_or_else(|| Error::State("missing forward LSTM".into()))?;
        let [f1, f2, f3] = run_lstm(tape, fwd, hidden, xe, xr, [&heads, &relations, &tails])?;
        match b.backward {
            Some(bwd) => {
                let [b3, b2, b1] = run_lstm(tape, bwd, hidden, xe, xr, [&tails, &relations, &heads])?;
                tape.concat(&[f1, b1, f2, b2, f3, b3])
            }
            None => tape.concat(&[f1, f2, f3]),
        }
    }

    /// Projected codes `q · W` (`n × d_out`).
    pub fn projected_codes(&self, tape: &mut Tape, b: &Bound, triples: &[Triple]) -> Result<Var> {
        let q = self.local_codes(tape, b, triples)?;
        tape.matmul(q, b.proj)
    }

    /// Gated attention of each anchor over its `m` neighbors.
    ///
    /// `proj` holds projected codes; `anchors` indexes its rows and
    /// `neighbors` holds `anchors.len() × m` row indices, anchor-major.
    /// Returns the representation (`B × d_out`) and the gated weights
    /// (`B × m`).
    pub fn aggregate(
        &self,
        tape: &mut Tape,
        b: &Bound,
        proj: Var,
        anchors: &[usize],
        neighbors: &[usize],
    ) -> Result<(Var, Var)> {
        let batch = anchors.len();
        if batch == 0 || neighbors.is_empty() || !neighbors.len().is_multiple_of(batch) {
            return Err(Error::Shape(format!(
                "{} neighbor rows for {batch} anchors",
                neighbors.len()
            )));
        }
        let m = neighbors.len() / batch;
        let out_dim = self.hyper.out_dim;
        let repeated: Vec<usize> = anchors.iter().flat_map(|&a| std::iter::repeat_n(a, m)).collect();
        let logits = match self.hyper.attention {
            AttentionKind::Additive => {
                let a = tape.reshape(b.attn, &[2, out_dim])?;
                let scores = tape.matmul_nt(proj, a)?;
                let src = tape.slice_cols(scores, 0, 1)?;
                let dst = tape.slice_cols(scores, 1, 1)?;
                let src = tape.gather(src, &repeated)?;
                let dst = tape.gather(dst, neighbors)?;
                let raw = tape.add(src, dst)?;
                tape.leaky_relu(raw, ATTENTION_SLOPE)?
            }
            AttentionKind::Dot => {
                let u = tape.gather(proj, &repeated)?;
                let v = tape.gather(proj, neighbors)?;
                let uv = tape.mul(u, v)?;
                let dot = tape.row_sum(uv)?;
                tape.scale(dot, 1.0 / (out_dim as f64).sqrt())?
            }
        };
        let logits = tape.reshape(logits, &[batch, m])?;
        let soft = tape.softmax(logits)?;
        let weights = tape.mask_below_threshold(soft, self.hyper.mu)?;
        let values = tape.gather(proj, neighbors)?;
        let summed = tape.weighted_row_sum(weights, values)?;
        let repr = tape.sigmoid(summed)?;
        Ok((repr, weights))
    }

    /// View I and View II representations (`x`, `z`) of the anchor triples
    /// in `batch`, recorded on `tape`.
    pub fn encode_views_on(
        &self,
        tape: &mut Tape,
        b: &Bound,
        g: &KnowledgeGraph,
        vg: &TripleViewGraph,
        batch: &[usize],
    ) -> Result<ViewVars> {
        vg.check_graph(g)?;
        if let Some(&i) = batch.iter().find(|&&i| i >= g.len()) {
            return Err(Error::Consistency(format!("anchor {i} of {} triples", g.len())));
        }
        let mut slot = vec![usize::MAX; g.len()];
        let mut members = Vec::new();
        let mut row_of = |i: usize, members: &mut Vec<usize>| {
            if slot[i] == usize::MAX {
                slot[i] = members.len();
                members.push(i);
            }
            slot[i]
        };
        let anchors: Vec<usize> = batch.iter().map(|&i| row_of(i, &mut members)).collect();
        let mut one = Vec::with_capacity(batch.len() * vg.fan_out());
        let mut two = Vec::with_capacity(batch.len() * vg.fan_out());
        for &i in batch {
            one.extend(vg.view_one(i).iter().map(|&j| row_of(j, &mut members)));
            two.extend(vg.view_two(i).iter().map(|&j| row_of(j, &mut members)));
        }
        let triples: Vec<Triple> = members.iter().map(|&i| g.triples()[i]).collect();
        let proj = self.projected_codes(tape, b, &triples)?;
        let (x, w1) = self.aggregate(tape, b, proj, &anchors, &one)?;
        let (z, w2) = self.aggregate(tape, b, proj, &anchors, &two)?;
        Ok(ViewVars {
            x,
            z,
            weights_one: w1,
            weights_two: w2,
        })
    }

    /// Inference-only local codes for `triples`.
    pub fn encode_local(&self, triples: &[Triple]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false)?;
        let q = self.local_codes(&mut tape, &b, triples)?;
        Ok(tape.value(q).clone())
    }

    /// Attention of one anchor code over `m` neighbor codes (each of size
    /// `3d`); returns the representation and the gated weights.
    pub fn attend(&self, anchor: &[f64], neighbors: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
        if neighbors.is_empty() {
            return Err(Error::Shape("attention needs at least one neighbor".into()));
        }
        let mut rows = vec![anchor.to_vec()];
        rows.extend(neighbors.iter().cloned());
        let codes = Tensor::from_rows(&rows)?;
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false)?;
        let q = tape.constant(codes)?;
        let proj = tape.matmul(q, b.proj)?;
        let nb: Vec<usize> = (1..=neighbors.len()).collect();
        let (repr, w) = self.aggregate(&mut tape, &b, proj, &[0], &nb)?;
        Ok((tape.value(repr).data().to_vec(), tape.value(w).data().to_vec()))
    }

    /// Inference-only view encodings for `batch`.
    pub fn encode_views(&self, g: &KnowledgeGraph, vg: &TripleViewGraph, batch: &[usize]) -> Result<ViewEncoding> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false)?;
        let v = self.encode_views_on(&mut tape, &b, g, vg, batch)?;
        Ok(ViewEncoding {
            x: tape.value(v.x).clone(),
            z: tape.value(v.z).clone(),
            weights_one: tape.value(v.weights_one).clone(),
            weights_two: tape.value(v.weights_two).clone(),
        })
    }

    /// Projected codes of every triple in `g`, computed in chunks.
    pub fn project_all(&self, g: &KnowledgeGraph, chunk: usize) -> Result<Tensor> {
        let mut data = Vec::with_capacity(g.len() * self.hyper.out_dim);
        for part in g.triples().chunks(chunk.max(1)) {
            let mut tape = Tape::new();
            let b = self.bind(&mut tape, false)?;
            let p = self.projected_codes(&mut tape, &b, part)?;
            data.extend_from_slice(tape.value(p).data());
        }
        Tensor::matrix(g.len(), self.hyper.out_dim, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "hyper": self.hyper,
            "num_entities": self.num_entities,
            "num_relations": self.num_relations,
        });
        let tensors: Vec<(&str, &Tensor)> = self.params.iter().map(|p| (p.name.as_str(), &p.value)).collect();
        checkpoint::save_tensors(path, &meta, &tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, tensors) = checkpoint::load_tensors(path)?;
        let field = |k: &str| meta.get(k).cloned().ok_or_else(|| Error::Format(format!("checkpoint lacks {k}")));
        let hyper: Hyper = serde_json::from_value(field("hyper")?).map_err(|e| Error::Format(e.to_string()))?;
        let count = |k: &str| -> Result<usize> {
            field(k)?.as_u64().map(|v| v as usize).ok_or_else(|| Error::Format(format!("bad {k}")))
        };
        let mut model = Self::new(count("num_entities")?, count("num_relations")?, hyper, 0)?;
        if tensors.len() != model.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, model needs {}",
                tensors.len(),
                model.params.len()
            )));
        }
        for (name, t) in tensors {
            let slot = model
                .param_by_name_mut(&name)
                .ok_or_else(|| Error::Format(format!("unexpected tensor {name}")))?;
            if slot.shape() != t.shape() {
                return Err(Error::Format(format!("tensor {name} has shape {:?}", t.shape())));
            }
            *slot = t;
        }
        Ok(model)
    }
}

/// Tape handles produced by [`ModelState::encode_views_on`].
#[derive(Clone, Copy, Debug)]
pub struct ViewVars {
    pub x: Var,
    pub z: Var,
    pub weights_one: Var,
    pub weights_two: Var,
}

/// Distinct ids in first-seen order plus an id → position table.
fn compact(ids: impl Iterator<Item = usize>, universe: usize) -> (Vec<usize>, Vec<usize>) {
    let mut slot = vec![usize::MAX; universe];
    let mut order = Vec::new();
    for id in ids {
        if slot[id] == usize::MAX {
            slot[id] = order.len();
            order.push(id);
        }
    }
    (order, slot)
}

/// Runs one LSTM direction over a three-step sequence. `steps[k]` indexes
/// rows of the entity table for steps 0 and 2 and of the relation table for
/// step 1. Gate layout is `[input, forget, cell, output]`.
///
/// The state after step 0 depends only on the first entity and the state
/// after step 1 only on the (entity, relation) prefix, so those steps run
/// once per distinct prefix and are gathered out per triple.
fn run_lstm(
    tape: &mut Tape,
    w: BoundLstm,
    hidden: usize,
    entities: Var,
    relations: Var,
    steps: [&[usize]; 3],
) -> Result<[Var; 3]> {
    let in_e = tape.matmul(entities, w.w_ih)?;
    let in_e = tape.add_row(in_e, w.bias)?;
    let in_r = tape.matmul(relations, w.w_ih)?;
    let in_r = tape.add_row(in_r, w.bias)?;

    let (h0, c0) = lstm_cell(tape, in_e, None, hidden)?;

    let width = tape.value(relations).rows();
    let keys = steps[0].iter().zip(steps[1]).map(|(&e, &r)| e * width + r);
    let prefixes = compact_sparse(keys);
    let pair_first: Vec<usize> = prefixes.keys.iter().map(|k| k / width).collect();
    let pair_rel: Vec<usize> = prefixes.keys.iter().map(|k| k % width).collect();
    let x = tape.gather(in_r, &pair_rel)?;
    let h = tape.gather(h0, &pair_first)?;
    let c = tape.gather(c0, &pair_first)?;
    let rec = tape.matmul(h, w.w_hh)?;
    let gates = tape.add(x, rec)?;
    let (h1, c1) = lstm_cell(tape, gates, Some(c), hidden)?;

    let x = tape.gather(in_e, steps[2])?;
    let h = tape.gather(h1, &prefixes.slot)?;
    let c = tape.gather(c1, &prefixes.slot)?;
    let rec = tape.matmul(h, w.w_hh)?;
    let gates = tape.add(x, rec)?;
    let (h2, _) = lstm_cell(tape, gates, Some(c), hidden)?;

    Ok([tape.gather(h0, steps[0])?, h, h2])
}

struct Compacted {
    /// Distinct keys in first-seen order.
    keys: Vec<usize>,
    /// Position in `keys` of each input key.
    slot: Vec<usize>,
}

fn compact_sparse(keys: impl Iterator<Item = usize>) -> Compacted {
    let mut seen = std::collections::HashMap::new();
    let mut out = Compacted {
        keys: Vec::new(),
        slot: Vec::new(),
    };
    for k in keys {
        let next = out.keys.len();
        let s = *seen.entry(k).or_insert(next);
        if s == next {
            out.keys.push(k);
        }
        out.slot.push(s);
    }
    out
}

fn lstm_cell(tape: &mut Tape, gates: Var, c_prev: Option<Var>, hidden: usize) -> Result<(Var, Var)> {
    let hc = tape.lstm_cell(gates, c_prev)?;
    Ok((tape.slice_cols(hc, 0, hidden)?, tape.slice_cols(hc, hidden, hidden)?))
}
