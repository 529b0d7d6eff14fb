//! Triple storage, vocabularies and tab-separated file I/O.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// An integer-coded `(head, relation, tail)` assertion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub head: usize,
    pub relation: usize,
    pub tail: usize,
}

impl Triple {
    pub fn new(head: usize, relation: usize, tail: usize) -> Self {
        Self {
            head,
            relation,
            tail,
        }
    }
}

/// A de-duplicated set of triples over dense entity and relation ids.
#[derive(Clone, Debug)]
pub struct KnowledgeGraph {
    entity_names: Vec<String>,
    relation_names: Vec<String>,
    triples: Vec<Triple>,
    error_flags: Option<Vec<bool>>,
    triple_set: HashSet<Triple>,
    duplicates_dropped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StatsReport {
    pub entities: usize,
    pub relations: usize,
    pub triples: usize,
    pub mean_in_degree: f64,
}

impl KnowledgeGraph {
    /// Builds a graph from id-coded triples; rejects duplicates, dangling ids
    /// and misaligned flags.
    pub fn new(
        entity_names: Vec<String>,
        relation_names: Vec<String>,
        triples: Vec<Triple>,
        error_flags: Option<Vec<bool>>,
    ) -> Result<Self> {
        let (ne, nr) = (entity_names.len(), relation_names.len());
        let mut triple_set = HashSet::with_capacity(triples.len());
        for t in &triples {
            if t.head >= ne || t.tail >= ne || t.relation >= nr {
                return Err(Error::Index(format!(
                    "triple {t:?} outside {ne} entities / {nr} relations"
                )));
            }
            if !triple_set.insert(*t) {
                return Err(Error::Format(format!("duplicate triple {t:?}")));
            }
        }
        if let Some(flags) = &error_flags {
            if flags.len() != triples.len() {
                return Err(Error::Format(format!(
                    "{} error flags for {} triples",
                    flags.len(),
                    triples.len()
                )));
            }
        }
        Ok(Self {
            entity_names,
            relation_names,
            triples,
            error_flags,
            triple_set,
            duplicates_dropped: 0,
        })
    }

    /// Builds a graph from named triples, assigning ids by first appearance
    /// and collapsing repeated triples.
    pub fn from_named<'a, I>(rows: I) -> Self
    where
        I: IntoIterator<Item = (&'a str, &'a str, &'a str)>,
    {
        let mut b = Builder::default();
        for (h, r, t) in rows {
            b.push(h, r, t);
        }
        b.finish()
    }

    pub fn entity_names(&self) -> &[String] {
        &self.entity_names
    }

    pub fn relation_names(&self) -> &[String] {
        &self.relation_names
    }

    pub fn num_entities(&self) -> usize {
        self.entity_names.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relation_names.len()
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn error_flags(&self) -> Option<&[bool]> {
        self.error_flags.as_deref()
    }

    pub fn contains(&self, t: &Triple) -> bool {
        self.triple_set.contains(t)
    }

    /// Number of repeated triple lines collapsed while loading.
    pub fn duplicates_dropped(&self) -> usize {
        self.duplicates_dropped
    }

    pub fn with_error_flags(mut self, flags: Vec<bool>) -> Result<Self> {
        if flags.len() != self.triples.len() {
            return Err(Error::Format(format!(
                "{} labels for {} triples",
                flags.len(),
                self.triples.len()
            )));
        }
        self.error_flags = Some(flags);
        Ok(self)
    }

    pub fn without_error_flags(mut self) -> Self {
        self.error_flags = None;
        self
    }

    /// Hex SHA-256 over the id-coded triple list and vocabularies.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for name in self.entity_names.iter().chain(&self.relation_names) {
            h.update(name.as_bytes());
            h.update([0u8]);
        }
        for t in &self.triples {
            for id in [t.head, t.relation, t.tail] {
                h.update((id as u64).to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    pub fn stats(&self) -> Result<StatsReport> {
        graph_stats(self)
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Default)]
struct Builder {
    entities: HashMap<String, usize>,
    entity_names: Vec<String>,
    relations: HashMap<String, usize>,
    relation_names: Vec<String>,
    triples: Vec<Triple>,
    seen: HashSet<Triple>,
    duplicates: usize,
}

impl Builder {
    fn intern(map: &mut HashMap<String, usize>, names: &mut Vec<String>, s: &str) -> usize {
        if let Some(&id) = map.get(s) {
            return id;
        }
        names.push(s.to_string());
        map.insert(s.to_string(), names.len() - 1);
        names.len() - 1
    }

    fn push(&mut self, h: &str, r: &str, t: &str) {
        let head = Self::intern(&mut self.entities, &mut self.entity_names, h);
        let relation = Self::intern(&mut self.relations, &mut self.relation_names, r);
        let tail = Self::intern(&mut self.entities, &mut self.entity_names, t);
        let triple = Triple::new(head, relation, tail);
        if self.seen.insert(triple) {
            self.triples.push(triple);
        } else {
            self.duplicates += 1;
        }
    }

    fn finish(self) -> KnowledgeGraph {
        KnowledgeGraph {
            entity_names: self.entity_names,
            relation_names: self.relation_names,
            triples: self.triples,
            error_flags: None,
            triple_set: self.seen,
            duplicates_dropped: self.duplicates,
        }
    }
}

/// Parses a tab-separated triple file, optionally with a 0/1 label file
/// aligned to the de-duplicated triple order.
pub fn load_graph(path: &Path, labels_path: Option<&Path>) -> Result<KnowledgeGraph> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let g = parse_graph(&text, &path.display().to_string())?;
    if g.duplicates_dropped > 0 {
        log::warn!(
            "{}: collapsed {} duplicate triples",
            path.display(),
            g.duplicates_dropped
        );
    }
    match labels_path {
        Some(lp) => {
            let flags = load_labels(lp)?;
            g.with_error_flags(flags)
        }
        None => Ok(g),
    }
}

pub fn parse_graph(text: &str, source: &str) -> Result<KnowledgeGraph> {
    let mut b = Builder::default();
    for (i, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                path: source.to_string(),
                line: i + 1,
                msg: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        b.push(fields[0], fields[1], fields[2]);
    }
    Ok(b.finish())
}

pub fn load_labels(path: &Path) -> Result<Vec<bool>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| match l.trim() {
            "0" => Ok(false),
            "1" => Ok(true),
            other => Err(Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: format!("expected 0 or 1, found {other:?}"),
            }),
        })
        .collect()
}

pub fn write_graph(g: &KnowledgeGraph, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for t in &g.triples {
        writeln!(
            w,
            "{}\t{}\t{}",
            g.entity_names[t.head], g.relation_names[t.relation], g.entity_names[t.tail]
        )
        .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_labels(flags: &[bool], path: &Path) -> Result<()> {
    let mut out = String::with_capacity(flags.len() * 2);
    for &f in flags {
        out.push(if f { '1' } else { '0' });
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Entity, relation and triple counts plus the mean in-degree
/// (tail occurrences averaged over all entities).
pub fn graph_stats(g: &KnowledgeGraph) -> Result<StatsReport> {
    if g.is_empty() || g.num_entities() == 0 {
        return Err(Error::Domain("statistics of an empty graph".into()));
    }
    let mut in_degree = vec![0usize; g.num_entities()];
    for t in g.triples() {
        in_degree[t.tail] += 1;
    }
    let mean_in_degree = in_degree.iter().sum::<usize>() as f64 / g.num_entities() as f64;
    Ok(StatsReport {
        entities: g.num_entities(),
        relations: g.num_relations(),
        triples: g.len(),
        mean_in_degree,
    })
}
