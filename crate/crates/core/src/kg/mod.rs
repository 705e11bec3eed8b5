//! Knowledge graph, document corpus and the indices built over them.

mod embedding;
mod index;
pub mod io;
mod laplacian;
mod resolve;

pub use embedding::{tokenize, EmbeddingProvider};
pub use index::EntityDocIndex;
pub use laplacian::normalized_laplacian;
pub use resolve::{resolve_entities, EQUIVALENCE_RELATION};

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Entity {
    pub id: usize,
    pub name: String,
    pub domain: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Relation {
    pub id: usize,
    pub name: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
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

/// Directed multi-relational graph with one domain label per entity.
///
/// Entity and relation ids are dense: the record at position `i` has id `i`.
/// Triples are indexed by head (outgoing) and by tail (incoming).
#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeGraph {
    entities: Vec<Entity>,
    relations: Vec<Relation>,
    triples: Vec<Triple>,
    domain_names: Vec<String>,
    outgoing: Vec<Vec<usize>>,
    incoming: Vec<Vec<usize>>,
}

impl KnowledgeGraph {
    pub fn new(entities: Vec<Entity>, relations: Vec<Relation>, triples: Vec<Triple>) -> Result<Self> {
        for (i, e) in entities.iter().enumerate() {
            if e.id != i {
                return Err(Error::Validation(format!(
                    "entity ids must be dense and in order: position {i} has id {}",
                    e.id
                )));
            }
        }
        for (i, r) in relations.iter().enumerate() {
            if r.id != i {
                return Err(Error::Validation(format!(
                    "relation ids must be dense and in order: position {i} has id {}",
                    r.id
                )));
            }
        }
        let mut seen = HashSet::with_capacity(triples.len());
        for (k, t) in triples.iter().enumerate() {
            Self::check_triple(t, entities.len(), relations.len())
                .map_err(|m| Error::Validation(format!("triple {}: {m}", k + 1)))?;
            if !seen.insert(*t) {
                return Err(Error::Validation(format!(
                    "triple {}: duplicate ({}, {}, {})",
                    k + 1,
                    t.head,
                    t.relation,
                    t.tail
                )));
            }
        }
        let mut outgoing = vec![Vec::new(); entities.len()];
        let mut incoming = vec![Vec::new(); entities.len()];
        for (k, t) in triples.iter().enumerate() {
            outgoing[t.head].push(k);
            incoming[t.tail].push(k);
        }
        Ok(Self {
            entities,
            relations,
            triples,
            domain_names: Vec::new(),
            outgoing,
            incoming,
        })
    }

    pub(crate) fn check_triple(t: &Triple, n_entities: usize, n_relations: usize) -> Result<(), String> {
        if t.head >= n_entities {
            return Err(format!("unknown head entity {}", t.head));
        }
        if t.tail >= n_entities {
            return Err(format!("unknown tail entity {}", t.tail));
        }
        if t.relation >= n_relations {
            return Err(format!("unknown relation {}", t.relation));
        }
        Ok(())
    }

    pub fn with_domain_names(mut self, names: Vec<String>) -> Self {
        self.domain_names = names;
        self
    }

    pub fn entities(&self) -> &[Entity] {
        &self.entities
    }

    pub fn relations(&self) -> &[Relation] {
        &self.relations
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn domain_names(&self) -> &[String] {
        &self.domain_names
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn num_triples(&self) -> usize {
        self.triples.len()
    }

    /// Number of distinct domain labels (`max label + 1`).
    pub fn num_domains(&self) -> usize {
        self.entities
            .iter()
            .map(|e| e.domain + 1)
            .max()
            .unwrap_or(0)
            .max(self.domain_names.len())
    }

    pub fn domain_of(&self, entity: usize) -> usize {
        self.entities[entity].domain
    }

    /// Display name of a domain label.
    pub fn domain_name(&self, domain: usize) -> String {
        self.domain_names
            .get(domain)
            .cloned()
            .unwrap_or_else(|| format!("domain_{domain}"))
    }

    /// Indices into [`triples`](Self::triples) with `entity` as head.
    pub fn outgoing(&self, entity: usize) -> &[usize] {
        &self.outgoing[entity]
    }

    /// Indices into [`triples`](Self::triples) with `entity` as tail.
    pub fn incoming(&self, entity: usize) -> &[usize] {
        &self.incoming[entity]
    }

    pub fn out_degree(&self, entity: usize) -> usize {
        self.outgoing[entity].len()
    }

    pub fn in_degree(&self, entity: usize) -> usize {
        self.incoming[entity].len()
    }

    pub fn contains(&self, t: &Triple) -> bool {
        self.outgoing[t.head].iter().any(|&k| self.triples[k] == *t)
    }

    pub fn relation_id(&self, name: &str) -> Option<usize> {
        self.relations.iter().position(|r| r.name == name)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Chunk {
    pub doc_id: String,
    pub title: String,
    pub content: String,
    pub entities: Vec<usize>,
}

/// Document chunks, each linked to the entities it mentions.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    chunks: Vec<Chunk>,
}

impl Corpus {
    pub fn new(chunks: Vec<Chunk>) -> Result<Self> {
        let mut ids = HashSet::with_capacity(chunks.len());
        for (i, c) in chunks.iter().enumerate() {
            if !ids.insert(c.doc_id.as_str()) {
                return Err(Error::Validation(format!("chunk {}: duplicate doc_id {:?}", i + 1, c.doc_id)));
            }
        }
        Ok(Self { chunks })
    }

    pub fn chunks(&self) -> &[Chunk] {
        &self.chunks
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn validate_against(&self, kg: &KnowledgeGraph) -> Result<()> {
        for (i, c) in self.chunks.iter().enumerate() {
            if let Some(&e) = c.entities.iter().find(|&&e| e >= kg.num_entities()) {
                return Err(Error::Validation(format!(
                    "chunk {} ({:?}) references unknown entity {e}",
                    i + 1,
                    c.doc_id
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
pub(crate) fn toy_graph(names: &[&str], relations: &[&str], triples: &[(usize, usize, usize)]) -> KnowledgeGraph {
    let entities = names
        .iter()
        .enumerate()
        .map(|(i, n)| Entity {
            id: i,
            name: n.to_string(),
            domain: 0,
        })
        .collect();
    let relations = relations
        .iter()
        .enumerate()
        .map(|(i, n)| Relation {
            id: i,
            name: n.to_string(),
        })
        .collect();
    let triples = triples.iter().map(|&(h, r, t)| Triple::new(h, r, t)).collect();
    KnowledgeGraph::new(entities, relations, triples).unwrap()
}
