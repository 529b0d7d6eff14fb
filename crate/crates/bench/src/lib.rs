//! Fixtures shared by the benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use triplecheck::objective::sample_negatives;
use triplecheck::{
    build_views, generate, inject_errors, CorruptionMode, Hyper, KnowledgeGraph, ModelState, NegativeMode,
    SynthConfig, Triple, TripleViewGraph,
};

/// The desk-scale graph: 10,000 triples with 5% uniform errors.
pub fn desk_graph() -> KnowledgeGraph {
    let clean = generate(&SynthConfig::default()).expect("default config is valid");
    inject_errors(&clean, 0.05, CorruptionMode::Uniform, 1).expect("injection").0
}

pub fn desk_views(g: &KnowledgeGraph) -> TripleViewGraph {
    build_views(g, None, 2).expect("non-empty graph")
}

/// An untrained model with default hyperparameters.
pub fn desk_model(g: &KnowledgeGraph, vg: &TripleViewGraph) -> ModelState {
    let hyper = Hyper { fan_out: vg.fan_out(), ..Hyper::default() };
    ModelState::new(g.num_entities(), g.num_relations(), hyper, 3).expect("valid hyperparameters")
}

/// The first `size` triple indices and one negative per triple.
pub fn batch(g: &KnowledgeGraph, size: usize) -> (Vec<usize>, Vec<Triple>) {
    let idx: Vec<usize> = (0..size.min(g.len())).collect();
    let pos: Vec<Triple> = idx.iter().map(|&i| g.triples()[i]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let neg = sample_negatives(&pos, g, NegativeMode::Filtered, &mut rng).expect("negatives");
    (idx, neg)
}
