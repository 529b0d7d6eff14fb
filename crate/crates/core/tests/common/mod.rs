#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use triplecheck::diff::{Tape, Tensor, Var};
use triplecheck::{KnowledgeGraph, Triple};

/// Central-difference step used by every gradient check.
pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
/// Central differences at `FD_STEP` on an O(1) loss carry about 1e-10 of
/// round-off, so smaller gradient entries are compared absolutely at
/// `FD_FLOOR * FD_TOL`.
pub const FD_FLOOR: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|)`, with the denominator floored at `floor` so
/// that entries where both sides vanish compare absolutely.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Central differences of `f` at `x`.
pub fn numeric_grad(x: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|k| {
            let mut plus = x.clone();
            plus.data_mut()[k] += FD_STEP;
            let mut minus = x.clone();
            minus.data_mut()[k] -= FD_STEP;
            (f(&plus) - f(&minus)) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Checks the tape gradient of a scalar function of several inputs against
/// central differences. `build` records the function on a tape given the
/// input vars and returns the scalar output.
pub fn check_gradients(inputs: &[Tensor], build: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone()).unwrap()).collect();
    let out = build(&mut tape, &vars);
    tape.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (k, x) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[k]).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; x.len()]);
        let f = |perturbed: &Tensor| {
            let mut t = Tape::new();
            let vs: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, v)| t.constant(if j == k { perturbed.clone() } else { v.clone() }).unwrap())
                .collect();
            let o = build(&mut t, &vs);
            t.value(o).item().unwrap()
        };
        let numeric = numeric_grad(x, &f);
        for (a, n) in analytic.iter().zip(&numeric) {
            worst = worst.max(rel_err(*a, *n, 1e-6));
        }
    }
    worst
}

pub fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Random graph over `entities` entities and `relations` relations with up
/// to `triples` distinct triples.
pub fn random_graph(seed: u64, entities: usize, relations: usize, triples: usize) -> KnowledgeGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<(String, String, String)> = (0..triples)
        .map(|_| {
            (
                format!("e{}", rng.gen_range(0..entities)),
                format!("r{}", rng.gen_range(0..relations)),
                format!("e{}", rng.gen_range(0..entities)),
            )
        })
        .collect();
    KnowledgeGraph::from_named(rows.iter().map(|(a, b, c)| (a.as_str(), b.as_str(), c.as_str())))
}

fn touches(t: &Triple, e: usize) -> bool {
    t.head == e || t.tail == e
}

/// All-pairs scan: triples other than `i` that contain `i`'s head entity.
pub fn brute_view_one(g: &KnowledgeGraph, i: usize) -> BTreeSet<usize> {
    let e = g.triples()[i].head;
    (0..g.len()).filter(|&j| j != i && touches(&g.triples()[j], e)).collect()
}

/// All-pairs scan: triples other than `i` that contain `i`'s tail entity.
pub fn brute_view_two(g: &KnowledgeGraph, i: usize) -> BTreeSet<usize> {
    let e = g.triples()[i].tail;
    (0..g.len()).filter(|&j| j != i && touches(&g.triples()[j], e)).collect()
}

/// Literal re-implementation of the cross-view loss: for each anchor,
/// `-log(exp(s_ii) / sum_{j != i} exp(s_ij))`, averaged.
pub fn contrastive_oracle(x: &[Vec<f64>], z: &[Vec<f64>], tau: f64) -> f64 {
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
        let na: f64 = a.iter().map(|p| p * p).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|p| p * p).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let n = x.len();
    let mut total = 0.0;
    for i in 0..n {
        let num = (cos(&x[i], &z[i]) / tau).exp();
        let den: f64 = (0..n).filter(|&j| j != i).map(|j| (cos(&x[i], &z[j]) / tau).exp()).sum();
        total += -(num / den).ln();
    }
    total / n as f64
}

use triplecheck::objective::{joint_loss_on, TrainConfig};
use triplecheck::{ModelState, TripleViewGraph};

fn joint_value(model: &ModelState, g: &KnowledgeGraph, vg: &TripleViewGraph, batch: &[usize], neg: &[Triple], cfg: &TrainConfig) -> f64 {
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, false).unwrap();
    let l = joint_loss_on(&mut tape, &b, model, g, vg, batch, neg, cfg).unwrap();
    tape.value(l.total).item().unwrap()
}

/// Worst relative error between the analytic gradient of the joint loss
/// and central differences, over every entry of every parameter, plus the
/// number of entries checked.
pub fn joint_loss_gradcheck(model: &ModelState, g: &KnowledgeGraph, vg: &TripleViewGraph, neg: &[Triple], cfg: &TrainConfig) -> (f64, usize) {
    let batch: Vec<usize> = (0..g.len()).collect();
    let mut trained = model.clone();
    let mut tape = Tape::new();
    let b = trained.bind(&mut tape, true).unwrap();
    let l = joint_loss_on(&mut tape, &b, &trained, g, vg, &batch, neg, cfg).unwrap();
    tape.backward(l.total).unwrap();
    trained.params.accumulate_grads(&tape);

    let names: Vec<String> = model.params.iter().map(|p| p.name.clone()).collect();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for name in names {
        let id = trained.params.find(&name).unwrap();
        let len = trained.params.value(id).len();
        let analytic = trained.params.grad(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; len]);
        for (k, a) in analytic.iter().enumerate() {
            let eval = |delta: f64| {
                let mut m = model.clone();
                m.param_by_name_mut(&name).unwrap().data_mut()[k] += delta;
                joint_value(&m, g, vg, &batch, neg, cfg)
            };
            let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(*a, numeric, FD_FLOOR));
            checked += 1;
        }
    }
    (worst, checked)
}

/// Ten-triple fixture with shared entities so both views are non-trivial.
pub fn fixture_graph() -> KnowledgeGraph {
    KnowledgeGraph::from_named([
        ("a", "r1", "b"),
        ("a", "r2", "c"),
        ("b", "r1", "c"),
        ("c", "r3", "d"),
        ("d", "r1", "a"),
        ("e", "r2", "b"),
        ("e", "r3", "f"),
        ("f", "r1", "a"),
        ("b", "r2", "f"),
        ("d", "r3", "e"),
    ])
}
