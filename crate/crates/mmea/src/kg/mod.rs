//! MMKG data model: entities, relation triples, attribute assignments, and
//! per-modality feature tables, plus the on-disk loader and the synthetic
//! pair generator.

mod features;
mod load;
mod synth;

pub use features::{bow_vocab, build_bow_features, impute_missing_visual, BowFeatures};
pub use load::{load_mmkg, load_pair, write_mmkg, write_pair};
pub use synth::{generate_synthetic_pair, split_alignments, GeneratorConfig, GeneratorReport};

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{MmeaError, Result};

/// One information channel of an entity. Canonical order is
/// graph, relation, attribute, visual, surface.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "g")]
    Graph,
    #[serde(rename = "r")]
    Relation,
    #[serde(rename = "a")]
    Attribute,
    #[serde(rename = "v")]
    Visual,
    #[serde(rename = "s")]
    Surface,
}

impl Modality {
    pub const ALL: [Modality; 5] = [
        Modality::Graph,
        Modality::Relation,
        Modality::Attribute,
        Modality::Visual,
        Modality::Surface,
    ];

    pub fn tag(&self) -> &'static str {
        match self {
            Modality::Graph => "g",
            Modality::Relation => "r",
            Modality::Attribute => "a",
            Modality::Visual => "v",
            Modality::Surface => "s",
        }
    }

    pub fn parse(s: &str) -> Result<Modality> {
        match s {
            "g" | "graph" => Ok(Modality::Graph),
            "r" | "relation" => Ok(Modality::Relation),
            "a" | "attribute" => Ok(Modality::Attribute),
            "v" | "visual" => Ok(Modality::Visual),
            "s" | "surface" => Ok(Modality::Surface),
            other => Err(MmeaError::Invalid(format!("unknown modality '{other}'"))),
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

/// An entity as declared in `entities.tsv`.
#[derive(Clone, Debug, PartialEq)]
pub struct Entity {
    pub id: i64,
    pub name: String,
}

/// Per-entity dense feature vectors with an availability mask
/// (mask true ⇒ vector present; absent rows are all-zero placeholders).
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityFeatureTable {
    pub modality: Modality,
    pub dim: usize,
    pub vectors: Vec<Vec<f64>>,
    pub available: Vec<bool>,
}

impl ModalityFeatureTable {
    pub fn empty(modality: Modality, dim: usize, entities: usize) -> ModalityFeatureTable {
        ModalityFeatureTable {
            modality,
            dim,
            vectors: vec![vec![0.0; dim]; entities],
            available: vec![false; entities],
        }
    }

    pub fn set(&mut self, entity: usize, vector: Vec<f64>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(MmeaError::Invalid(format!(
                "modality {}: vector of length {} where dim is {}",
                self.modality,
                vector.len(),
                self.dim
            )));
        }
        self.vectors[entity] = vector;
        self.available[entity] = true;
        Ok(())
    }

    pub fn available_count(&self) -> usize {
        self.available.iter().filter(|&&a| a).count()
    }

    pub fn all_available(&self) -> bool {
        self.available.iter().all(|&a| a)
    }
}

/// One multi-modal knowledge graph. Triples and assignments use dense entity
/// indices (positions in `entities`); relation and attribute labels are
/// interned in `relations` / `attributes`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mmkg {
    pub entities: Vec<Entity>,
    pub relations: Vec<String>,
    pub attributes: Vec<String>,
    /// (head, relation, tail) — parallel edges allowed, exact duplicates not.
    pub rel_triples: Vec<(usize, usize, usize)>,
    /// (entity, attribute) — repeats express multiplicity.
    pub attr_assignments: Vec<(usize, usize)>,
    pub visual: Option<ModalityFeatureTable>,
    pub surface: Option<ModalityFeatureTable>,
}

impl Mmkg {
    pub fn entity_count(&self) -> usize {
        self.entities.len()
    }

    /// Dense index of a raw entity id.
    pub fn entity_index(&self) -> HashMap<i64, usize> {
        self.entities
            .iter()
            .enumerate()
            .map(|(i, e)| (e.id, i))
            .collect()
    }

    pub fn feature_table(&self, m: Modality) -> Option<&ModalityFeatureTable> {
        match m {
            Modality::Visual => self.visual.as_ref(),
            Modality::Surface => self.surface.as_ref(),
            _ => None,
        }
    }

    /// Undirected degree (head or tail incidences, self-loops counted once).
    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0usize; self.entities.len()];
        for &(h, _, t) in &self.rel_triples {
            deg[h] += 1;
            if t != h {
                deg[t] += 1;
            }
        }
        deg
    }
}

/// Cross-KG alignment pairs split into seed (train) and test sets.
/// Invariants: disjoint, and no entity repeats on a side across the union.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentSplit {
    pub train: Vec<(usize, usize)>,
    pub test: Vec<(usize, usize)>,
    pub ratio: f64,
}

impl AlignmentSplit {
    pub fn validate(&self) -> Result<()> {
        let mut left = std::collections::HashSet::new();
        let mut right = std::collections::HashSet::new();
        for &(a, b) in self.train.iter().chain(&self.test) {
            if !left.insert(a) {
                return Err(MmeaError::Invalid(format!(
                    "entity {a} appears twice on the left side of the alignment set"
                )));
            }
            if !right.insert(b) {
                return Err(MmeaError::Invalid(format!(
                    "entity {b} appears twice on the right side of the alignment set"
                )));
            }
        }
        Ok(())
    }
}
