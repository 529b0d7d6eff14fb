//! Typed synthetic knowledge graphs for desk-scale experiments.
//!
//! Entities are split into types, and each type into groups. Every relation
//! connects one head type to one tail type and maps each head group to a
//! tail group; a triple's tail is drawn from the group its head maps to. A
//! corrupted triple therefore usually breaks the relation's type or group
//! pattern while remaining locally well-formed.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{KnowledgeGraph, Triple};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub entities: usize,
    pub relations: usize,
    pub triples: usize,
    pub types: usize,
    pub groups_per_type: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    /// 1,000 entities and 20 relations; 9,500 clean triples become 10,000
    /// after injecting 5% errors.
    fn default() -> Self {
        Self {
            entities: 1_000,
            relations: 20,
            triples: 9_500,
            types: 10,
            groups_per_type: 5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    fn capacity(&self) -> usize {
        let per_type = self.entities / self.types;
        let per_group = per_type / self.groups_per_type;
        self.relations * per_type * per_group
    }

    pub fn validate(&self) -> Result<()> {
        if self.types == 0 || self.groups_per_type == 0 || self.relations == 0 {
            return Err(Error::Domain("types, groups and relations must be positive".into()));
        }
        if !self.entities.is_multiple_of(self.types * self.groups_per_type) {
            return Err(Error::Domain(format!(
                "{} entities do not split into {} types of {} groups",
                self.entities, self.types, self.groups_per_type
            )));
        }
        // keep sampling away from saturation
        if self.triples == 0 || self.triples * 2 > self.capacity() {
            return Err(Error::Domain(format!(
                "{} triples need at most half of the {} possible",
                self.triples,
                self.capacity()
            )));
        }
        Ok(())
    }
}

/// Generates a clean graph with entity names `e<i>` and relation names
/// `r<j>`.
pub fn generate(cfg: &SynthConfig) -> Result<KnowledgeGraph> {
    cfg.validate()?;
    let per_type = cfg.entities / cfg.types;
    let per_group = per_type / cfg.groups_per_type;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // relation -> (head type, tail type, group offset)
    let schema: Vec<(usize, usize, usize)> = (0..cfg.relations)
        .map(|_| {
            (
                rng.gen_range(0..cfg.types),
                rng.gen_range(0..cfg.types),
                rng.gen_range(0..cfg.groups_per_type),
            )
        })
        .collect();
    let mut seen = HashSet::with_capacity(cfg.triples);
    let mut triples = Vec::with_capacity(cfg.triples);
    while triples.len() < cfg.triples {
        let r = rng.gen_range(0..cfg.relations);
        let (ht, tt, offset) = schema[r];
        let local = rng.gen_range(0..per_type);
        let head = ht * per_type + local;
        let group = (local / per_group + offset) % cfg.groups_per_type;
        let tail = tt * per_type + group * per_group + rng.gen_range(0..per_group);
        let t = Triple::new(head, r, tail);
        if seen.insert(t) {
            triples.push(t);
        }
    }
    let entity_names = (0..cfg.entities).map(|i| format!("e{i}")).collect();
    let relation_names = (0..cfg.relations).map(|j| format!("r{j}")).collect();
    KnowledgeGraph::new(entity_names, relation_names, triples, None)
}
