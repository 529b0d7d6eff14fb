//! Triple-level views of a knowledge graph.
//!
//! Both views have one node per triple. View I links a triple to every other
//! triple containing its head entity; View II links it to every triple
//! containing its tail entity. The position of the shared entity in the
//! neighbor triple does not matter.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kg::KnowledgeGraph;

/// For every entity, the sorted indices of triples that mention it.
#[derive(Clone, Debug)]
pub struct EntityIndex {
    occurrences: Vec<Vec<usize>>,
}

impl EntityIndex {
    pub fn build(g: &KnowledgeGraph) -> Self {
        let mut occurrences = vec![Vec::new(); g.num_entities()];
        for (i, t) in g.triples().iter().enumerate() {
            occurrences[t.head].push(i);
            if t.tail != t.head {
                occurrences[t.tail].push(i);
            }
        }
        Self { occurrences }
    }

    pub fn occurrences(&self, entity: usize) -> &[usize] {
        &self.occurrences[entity]
    }

    /// View I candidates of triple `i`: other triples containing its head.
    pub fn head_candidates(&self, g: &KnowledgeGraph, i: usize) -> Vec<usize> {
        without(self.occurrences(g.triples()[i].head), i)
    }

    /// View II candidates of triple `i`: other triples containing its tail.
    pub fn tail_candidates(&self, g: &KnowledgeGraph, i: usize) -> Vec<usize> {
        without(self.occurrences(g.triples()[i].tail), i)
    }

    /// `|head_candidates ∪ tail_candidates|` for triple `i`.
    pub fn union_size(&self, g: &KnowledgeGraph, i: usize) -> usize {
        let t = g.triples()[i];
        let a = self.occurrences(t.head);
        if t.head == t.tail {
            return a.len() - 1;
        }
        let b = self.occurrences(t.tail);
        // both lists contain i
        a.len() + b.len() - sorted_intersection_len(a, b) - 1
    }
}

fn without(list: &[usize], i: usize) -> Vec<usize> {
    list.iter().copied().filter(|&j| j != i).collect()
}

fn sorted_intersection_len(a: &[usize], b: &[usize]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// Fixed fan-out neighbor lists for both views. Entry 0 of every list is the
/// triple itself.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TripleViewGraph {
    fan_out: usize,
    view_one: Vec<Vec<usize>>,
    view_two: Vec<Vec<usize>>,
}

impl TripleViewGraph {
    pub fn new(fan_out: usize, view_one: Vec<Vec<usize>>, view_two: Vec<Vec<usize>>) -> Result<Self> {
        if fan_out == 0 {
            return Err(Error::Domain("fan-out must be positive".into()));
        }
        if view_one.len() != view_two.len() {
            return Err(Error::Consistency("views cover different triple counts".into()));
        }
        let n = view_one.len();
        for list in view_one.iter().chain(&view_two) {
            if list.len() != fan_out {
                return Err(Error::Consistency(format!(
                    "neighbor list of length {} with fan-out {fan_out}",
                    list.len()
                )));
            }
            if let Some(j) = list.iter().find(|&&j| j >= n) {
                return Err(Error::Consistency(format!("neighbor {j} of {n} triples")));
            }
        }
        Ok(Self {
            fan_out,
            view_one,
            view_two,
        })
    }

    pub fn fan_out(&self) -> usize {
        self.fan_out
    }

    pub fn len(&self) -> usize {
        self.view_one.len()
    }

    pub fn is_empty(&self) -> bool {
        self.view_one.is_empty()
    }

    pub fn view_one(&self, i: usize) -> &[usize] {
        &self.view_one[i]
    }

    pub fn view_two(&self, i: usize) -> &[usize] {
        &self.view_two[i]
    }

    pub fn check_graph(&self, g: &KnowledgeGraph) -> Result<()> {
        if self.len() != g.len() {
            return Err(Error::Consistency(format!(
                "views over {} triples, graph has {}",
                self.len(),
                g.len()
            )));
        }
        Ok(())
    }

    /// Writes the text cache: a header line, then one line per triple
    /// `index <TAB> view-one ids <TAB> view-two ids` with comma-separated ids.
    pub fn save(&self, path: &Path, graph_hash: &str, seed: u64) -> Result<()> {
        let mut out = format!(
            "# triplecheck-views v1 triples={} fan_out={} seed={} graph={}\n",
            self.len(),
            self.fan_out,
            seed,
            graph_hash
        );
        let join = |l: &[usize]| l.iter().map(|j| j.to_string()).collect::<Vec<_>>().join(",");
        for i in 0..self.len() {
            let _ = writeln!(out, "{i}\t{}\t{}", join(&self.view_one[i]), join(&self.view_two[i]));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Reads a cache written by [`TripleViewGraph::save`]; returns the views
    /// with the graph hash and seed recorded in the header.
    pub fn load(path: &Path) -> Result<(Self, String, u64)> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let src = path.display().to_string();
        let perr = |line: usize, msg: String| Error::Parse {
            path: src.clone(),
            line,
            msg,
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| perr(1, "empty view file".into()))?;
        let mut fields = header
            .strip_prefix("# triplecheck-views v1 ")
            .ok_or_else(|| perr(1, "missing view header".into()))?
            .split(' ')
            .filter_map(|kv| kv.split_once('='));
        let mut get = |key: &str| -> Result<String> {
            fields
                .find(|(k, _)| *k == key)
                .map(|(_, v)| v.to_string())
                .ok_or_else(|| perr(1, format!("header lacks {key}")))
        };
        let num = |s: String| s.parse::<usize>().map_err(|e| perr(1, e.to_string()));
        let triples = num(get("triples")?)?;
        let fan_out = num(get("fan_out")?)?;
        let seed = num(get("seed")?)? as u64;
        let hash = get("graph")?;
        let mut one = Vec::with_capacity(triples);
        let mut two = Vec::with_capacity(triples);
        for (k, line) in lines.enumerate() {
            let lineno = k + 2;
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 3 || parts[0].parse::<usize>().ok() != Some(k) {
                return Err(perr(lineno, "expected `index<TAB>ids<TAB>ids`".into()));
            }
            let ids = |s: &str| -> Result<Vec<usize>> {
                s.split(',')
                    .map(|x| x.parse::<usize>().map_err(|e| perr(lineno, e.to_string())))
                    .collect()
            };
            one.push(ids(parts[1])?);
            two.push(ids(parts[2])?);
        }
        if one.len() != triples {
            return Err(Error::Format(format!(
                "header promises {triples} triples, file has {}",
                one.len()
            )));
        }
        Ok((Self::new(fan_out, one, two)?, hash, seed))
    }
}

/// Average size of a triple's combined neighborhood, rounded, at least 1.
pub fn neighbor_budget(g: &KnowledgeGraph) -> Result<usize> {
    neighbor_budget_with(g, &EntityIndex::build(g))
}

pub fn neighbor_budget_with(g: &KnowledgeGraph, index: &EntityIndex) -> Result<usize> {
    if g.is_empty() {
        return Err(Error::Domain("neighbor budget of an empty graph".into()));
    }
    let total: usize = (0..g.len()).map(|i| index.union_size(g, i)).sum();
    let mean = total as f64 / g.len() as f64;
    Ok((mean.round() as usize).max(1))
}

/// Samples both views with `fan_out` entries per triple (defaulting to
/// [`neighbor_budget`]).
pub fn build_views(g: &KnowledgeGraph, fan_out: Option<usize>, seed: u64) -> Result<TripleViewGraph> {
    if g.is_empty() {
        return Err(Error::Domain("cannot build views of an empty graph".into()));
    }
    let index = EntityIndex::build(g);
    let m = match fan_out {
        Some(0) => return Err(Error::Domain("fan-out must be positive".into())),
        Some(m) => m,
        None => neighbor_budget_with(g, &index)?,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut one = Vec::with_capacity(g.len());
    let mut two = Vec::with_capacity(g.len());
    for (i, t) in g.triples().iter().enumerate() {
        one.push(sample_list(i, index.occurrences(t.head), m, &mut rng));
        two.push(sample_list(i, index.occurrences(t.tail), m, &mut rng));
    }
    TripleViewGraph::new(m, one, two)
}

/// `[i, ...]` followed by `m - 1` picks from `occurrences \ {i}`: without
/// replacement when the pool is large enough, otherwise the whole pool in
/// random order padded by uniform resampling. An empty pool pads with `i`.
fn sample_list(i: usize, occurrences: &[usize], m: usize, rng: &mut impl Rng) -> Vec<usize> {
    let pool = without(occurrences, i);
    let want = m - 1;
    let mut out = Vec::with_capacity(m);
    out.push(i);
    if pool.is_empty() {
        out.resize(m, i);
    } else if pool.len() >= want {
        out.extend(index::sample(rng, pool.len(), want).into_iter().map(|k| pool[k]));
    } else {
        let mut all = pool.clone();
        all.shuffle(rng);
        out.extend(all);
        while out.len() < m {
            out.push(pool[rng.gen_range(0..pool.len())]);
        }
    }
    out
}
