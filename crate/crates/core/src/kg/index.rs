use std::path::Path;

use serde::{Deserialize, Serialize};

use super::io::{read_jsonl, write_jsonl};
use super::{Corpus, KnowledgeGraph};
use crate::error::{Error, Result};

/// Binary entity × chunk incidence, stored both ways.
///
/// `rows[e]` lists the chunk indices mentioning entity `e`; `cols[c]` lists
/// the entities of chunk `c`. Both are sorted and duplicate-free.
#[derive(Clone, Debug, PartialEq)]
pub struct EntityDocIndex {
    rows: Vec<Vec<usize>>,
    cols: Vec<Vec<usize>>,
    doc_ids: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexRecord {
    doc_id: String,
    entities: Vec<usize>,
}

impl EntityDocIndex {
    pub fn build(kg: &KnowledgeGraph, corpus: &Corpus) -> Result<Self> {
        corpus.validate_against(kg)?;
        let mut rows = vec![Vec::new(); kg.num_entities()];
        let mut cols = Vec::with_capacity(corpus.len());
        for (c, chunk) in corpus.chunks().iter().enumerate() {
            let mut ents = chunk.entities.clone();
            ents.sort_unstable();
            ents.dedup();
            for &e in &ents {
                rows[e].push(c);
            }
            cols.push(ents);
        }
        let doc_ids = corpus.chunks().iter().map(|c| c.doc_id.clone()).collect();
        Ok(Self { rows, cols, doc_ids })
    }

    pub fn num_entities(&self) -> usize {
        self.rows.len()
    }

    pub fn num_docs(&self) -> usize {
        self.cols.len()
    }

    /// Chunks mentioning `entity`.
    pub fn row(&self, entity: usize) -> &[usize] {
        &self.rows[entity]
    }

    /// Entities mentioned by chunk `chunk`.
    pub fn col(&self, chunk: usize) -> &[usize] {
        &self.cols[chunk]
    }

    pub fn doc_id(&self, chunk: usize) -> &str {
        &self.doc_ids[chunk]
    }

    pub fn contains(&self, entity: usize, chunk: usize) -> bool {
        self.rows[entity].binary_search(&chunk).is_ok()
    }

    /// `Σ_c M[e, c]`.
    pub fn doc_count(&self, entity: usize) -> usize {
        self.rows[entity].len()
    }

    /// `Mᵀ w`, computed over the sparse rows.
    pub fn transpose_mul(&self, w: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.num_docs()];
        for (e, chunks) in self.rows.iter().enumerate() {
            let we = w[e];
            if we == 0.0 {
                continue;
            }
            for &c in chunks {
                out[c] += we;
            }
        }
        out
    }

    /// One line per chunk: `{"doc_id", "entities"}`.
    pub fn write(&self, path: &Path) -> Result<()> {
        let records: Vec<IndexRecord> = self
            .doc_ids
            .iter()
            .zip(&self.cols)
            .map(|(d, e)| IndexRecord {
                doc_id: d.clone(),
                entities: e.clone(),
            })
            .collect();
        write_jsonl(path, &records)
    }

    pub fn read(path: &Path, num_entities: usize) -> Result<Self> {
        let records: Vec<IndexRecord> = read_jsonl(path)?;
        let mut rows = vec![Vec::new(); num_entities];
        let mut cols = Vec::with_capacity(records.len());
        let mut doc_ids = Vec::with_capacity(records.len());
        for (c, r) in records.into_iter().enumerate() {
            if let Some(&e) = r.entities.iter().find(|&&e| e >= num_entities) {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: c + 1,
                    message: format!("unknown entity {e}"),
                });
            }
            for &e in &r.entities {
                rows[e].push(c);
            }
            cols.push(r.entities);
            doc_ids.push(r.doc_id);
        }
        Ok(Self { rows, cols, doc_ids })
    }
}
