//! Synthetic error injection for evaluation.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{KnowledgeGraph, Triple};

/// How the replacement entity of a corrupted triple is drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorruptionMode {
    /// Any entity of the graph.
    Uniform,
    /// An entity already observed in the replaced position for the same
    /// relation, giving plausible-looking but mismatched triples.
    #[default]
    SamePosition,
}

impl fmt::Display for CorruptionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CorruptionMode::Uniform => "uniform",
            CorruptionMode::SamePosition => "same-position",
        })
    }
}

impl FromStr for CorruptionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "same-position" => Ok(Self::SamePosition),
            other => Err(Error::Domain(format!("unknown corruption mode {other:?}"))),
        }
    }
}

/// Attempts per injected triple before giving up.
const MAX_ATTEMPTS: usize = 1000;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct InjectionStats {
    pub mode: CorruptionMode,
    pub injected: usize,
    pub head_replaced: usize,
    pub tail_replaced: usize,
}

/// Number of triples to inject so that they make up `ratio` of the result.
pub fn noise_count(clean: usize, ratio: f64) -> usize {
    (ratio * clean as f64 / (1.0 - ratio)).round() as usize
}

/// Appends corrupted copies of randomly chosen clean triples until they make
/// up `ratio` of the returned graph (within one triple), flagging them.
pub fn inject_errors(
    g: &KnowledgeGraph,
    ratio: f64,
    mode: CorruptionMode,
    seed: u64,
) -> Result<(KnowledgeGraph, InjectionStats)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Domain(format!("ratio {ratio} outside (0, 1)")));
    }
    if g.error_flags().is_some() {
        return Err(Error::State("graph already carries error flags".into()));
    }
    let n_noise = noise_count(g.len(), ratio);
    if n_noise == 0 {
        return Err(Error::Domain(format!(
            "ratio {ratio} of {} triples injects nothing",
            g.len()
        )));
    }
    if g.num_entities() < 2 {
        return Err(Error::Injection("need at least two entities".into()));
    }

    // per relation: entities seen as head, as tail (sorted for determinism)
    let (heads_of, tails_of) = position_pools(g);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut taken: HashSet<Triple> = g.triples().iter().copied().collect();
    let mut injected = Vec::with_capacity(n_noise);
    let mut stats = InjectionStats {
        mode,
        injected: 0,
        head_replaced: 0,
        tail_replaced: 0,
    };
    for k in 0..n_noise {
        let mut done = false;
        for _ in 0..MAX_ATTEMPTS {
            let base = *g.triples().choose(&mut rng).expect("non-empty");
            let replace_head = rng.gen_bool(0.5);
            let entity = match mode {
                CorruptionMode::Uniform => rng.gen_range(0..g.num_entities()),
                CorruptionMode::SamePosition => {
                    let pool = if replace_head {
                        &heads_of[base.relation]
                    } else {
                        &tails_of[base.relation]
                    };
                    *pool.choose(&mut rng).expect("relation has a triple")
                }
            };
            let cand = if replace_head {
                Triple::new(entity, base.relation, base.tail)
            } else {
                Triple::new(base.head, base.relation, entity)
            };
            if taken.insert(cand) {
                injected.push(cand);
                if replace_head {
                    stats.head_replaced += 1;
                } else {
                    stats.tail_replaced += 1;
                }
                done = true;
                break;
            }
        }
        if !done {
            return Err(Error::Injection(format!(
                "no fresh corruption after {MAX_ATTEMPTS} attempts ({k} of {n_noise} injected)"
            )));
        }
    }
    stats.injected = injected.len();

    let mut triples = g.triples().to_vec();
    let mut flags = vec![false; triples.len()];
    triples.extend(injected);
    flags.resize(triples.len(), true);
    let out = KnowledgeGraph::new(
        g.entity_names().to_vec(),
        g.relation_names().to_vec(),
        triples,
        Some(flags),
    )?;
    Ok((out, stats))
}

pub(crate) fn position_pools(g: &KnowledgeGraph) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
    let mut heads = vec![Vec::new(); g.num_relations()];
    let mut tails = vec![Vec::new(); g.num_relations()];
    for t in g.triples() {
        heads[t.relation].push(t.head);
        tails[t.relation].push(t.tail);
    }
    for v in heads.iter_mut().chain(tails.iter_mut()) {
        v.sort_unstable();
        v.dedup();
    }
    (heads, tails)
}

/// Injected-triple counts overall and per relation name.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CorruptionReport {
    pub total: usize,
    pub per_relation: BTreeMap<String, usize>,
}

pub fn corruption_report(g: &KnowledgeGraph) -> Result<CorruptionReport> {
    let flags = g
        .error_flags()
        .ok_or_else(|| Error::State("graph has no error flags".into()))?;
    let mut report = CorruptionReport::default();
    for (t, _) in g.triples().iter().zip(flags).filter(|(_, &f)| f) {
        report.total += 1;
        *report
            .per_relation
            .entry(g.relation_names()[t.relation].clone())
            .or_default() += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain(n: usize, relations: usize) -> KnowledgeGraph {
        let rows: Vec<(String, String, String)> = (0..n)
            .map(|i| {
                (
                    format!("e{}", i % 97),
                    format!("r{}", i % relations),
                    format!("e{}", (i * 31 + 5) % 89 + 100),
                )
            })
            .collect();
        KnowledgeGraph::from_named(rows.iter().map(|(a, b, c)| (a.as_str(), b.as_str(), c.as_str())))
    }

    #[test]
    fn ratio_arithmetic() {
        assert_eq!(noise_count(9_500, 0.05), 500);
        assert_eq!(noise_count(9_000, 0.10), 1_000);
    }

    #[test]
    fn injects_requested_fraction() {
        let g = chain(2_000, 10);
        assert_eq!(g.len(), 2_000);
        for mode in [CorruptionMode::Uniform, CorruptionMode::SamePosition] {
            let (noisy, stats) = inject_errors(&g, 0.05, mode, 11).unwrap();
            let flags = noisy.error_flags().unwrap();
            let n = flags.iter().filter(|&&f| f).count();
            assert_eq!(n, stats.injected);
            assert_eq!(stats.head_replaced + stats.tail_replaced, n);
            assert!((n as f64 - 0.05 * noisy.len() as f64).abs() <= 1.0);
            // clean triples keep their positions and are unflagged
            assert_eq!(&noisy.triples()[..g.len()], g.triples());
            assert!(flags[..g.len()].iter().all(|f| !f));
            let report = corruption_report(&noisy).unwrap();
            assert_eq!(report.total, n);
            assert_eq!(report.per_relation.values().sum::<usize>(), n);
        }
    }

    #[test]
    fn same_position_draws_from_observed_entities() {
        let g = KnowledgeGraph::from_named([
            ("a", "r1", "b"),
            ("x", "r1", "c"),
            ("a", "r2", "d"),
            ("y", "r2", "e"),
        ]);
        let id = |n: &str| g.entity_names().iter().position(|e| e == n).unwrap();
        let (heads, tails) = ([id("a"), id("x")], [id("b"), id("c")]);
        for seed in 0..20 {
            let (noisy, _) = inject_errors(&g, 0.3, CorruptionMode::SamePosition, seed).unwrap();
            let flags = noisy.error_flags().unwrap();
            for (t, _) in noisy.triples().iter().zip(flags).filter(|(_, &f)| f) {
                if t.relation == 0 {
                    assert!(heads.contains(&t.head) && tails.contains(&t.tail), "{t:?}");
                }
            }
        }
    }

    #[test]
    fn uniform_emits_only_single_slot_replacements() {
        // enumerate every head or tail replacement over the vocabulary
        let g = KnowledgeGraph::from_named([("e1", "r1", "e2"), ("e2", "r1", "e3"), ("e3", "r2", "e1")]);
        let mut possible = HashSet::new();
        for t in g.triples() {
            for e in 0..g.num_entities() {
                possible.insert(Triple::new(e, t.relation, t.tail));
                possible.insert(Triple::new(t.head, t.relation, e));
            }
        }
        for t in g.triples() {
            possible.remove(t);
        }
        for seed in 0..50 {
            let (noisy, _) = inject_errors(&g, 0.25, CorruptionMode::Uniform, seed).unwrap();
            for (t, _) in noisy.triples().iter().zip(noisy.error_flags().unwrap()).filter(|(_, &f)| f) {
                assert!(possible.contains(t), "{t:?}");
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let g = chain(500, 4);
        let a = inject_errors(&g, 0.1, CorruptionMode::Uniform, 3).unwrap().0;
        let b = inject_errors(&g, 0.1, CorruptionMode::Uniform, 3).unwrap().0;
        assert_eq!(a.triples(), b.triples());
    }

    #[test]
    fn errors() {
        let g = chain(100, 4);
        assert!(matches!(inject_errors(&g, 0.0, CorruptionMode::Uniform, 0), Err(Error::Domain(_))));
        assert!(matches!(inject_errors(&g, 1.0, CorruptionMode::Uniform, 0), Err(Error::Domain(_))));
        // two entities, one relation, every corruption already present
        let full = KnowledgeGraph::from_named([
            ("a", "r", "a"),
            ("a", "r", "b"),
            ("b", "r", "a"),
            ("b", "r", "b"),
        ]);
        assert!(matches!(
            inject_errors(&full, 0.2, CorruptionMode::Uniform, 0),
            Err(Error::Injection(_))
        ));
        assert!(matches!(corruption_report(&g), Err(Error::State(_))));
    }

    #[test]
    fn empty_report_when_nothing_flagged() {
        let g = chain(10, 2);
        let n = g.len();
        let g = g.with_error_flags(vec![false; n]).unwrap();
        let r = corruption_report(&g).unwrap();
        assert_eq!(r.total, 0);
        assert!(r.per_relation.is_empty());
    }

    #[test]
    fn report_counts_relation() {
        let g = KnowledgeGraph::from_named([
            ("a", "r1", "b"),
            ("a", "r1", "c"),
            ("a", "r1", "d"),
            ("a", "r2", "e"),
        ]);
        let g = g.with_error_flags(vec![true, true, true, false]).unwrap();
        let r = corruption_report(&g).unwrap();
        assert_eq!(r.per_relation.get("r1"), Some(&3));
        assert_eq!(r.per_relation.get("r2"), None);
    }
}
