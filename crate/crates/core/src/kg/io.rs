//! Line-oriented file formats for graphs, corpora and embedding tables.
//!
//! Every loader reports 1-based line numbers and rejects trailing garbage.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{Chunk, Corpus, Entity, KnowledgeGraph, Relation, Triple};
use crate::error::{Error, Result};

pub const TRIPLES_FILE: &str = "triples.tsv";
pub const ENTITIES_FILE: &str = "entities.jsonl";
pub const RELATIONS_FILE: &str = "relations.jsonl";
pub const DOMAINS_FILE: &str = "domains.jsonl";
pub const CORPUS_FILE: &str = "corpus.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainRecord {
    pub id: usize,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingRecord {
    pub key: String,
    pub vector: Vec<f64>,
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Parses one JSON object per line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            return Err(parse_err(path, i + 1, "empty line"));
        }
        let rec = serde_json::from_str(line).map_err(|e| parse_err(path, i + 1, e.to_string()))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    write_text(path, &text)
}

/// Reads `head<TAB>relation<TAB>tail` lines.
pub fn read_triples(path: &Path) -> Result<Vec<(usize, Triple)>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(parse_err(path, i + 1, format!("expected 3 tab-separated fields, found {}", fields.len())));
        }
        let mut ids = [0usize; 3];
        for (slot, f) in ids.iter_mut().zip(&fields) {
            *slot = f
                .parse()
                .map_err(|_| parse_err(path, i + 1, format!("invalid id {f:?}")))?;
        }
        out.push((i + 1, Triple::new(ids[0], ids[1], ids[2])));
    }
    Ok(out)
}

pub fn write_triples(path: &Path, triples: &[Triple]) -> Result<()> {
    let mut text = String::with_capacity(triples.len() * 12);
    for t in triples {
        writeln!(text, "{}\t{}\t{}", t.head, t.relation, t.tail).expect("string write");
    }
    write_text(path, &text)
}

/// Loads and validates a graph. Dangling ids and duplicate triples are
/// reported against the offending line of the triples file.
pub fn load_kg(triples_path: &Path, entities_path: &Path, relations_path: &Path) -> Result<KnowledgeGraph> {
    let entities: Vec<Entity> = read_jsonl(entities_path)?;
    for (i, e) in entities.iter().enumerate() {
        if e.id != i {
            return Err(parse_err(entities_path, i + 1, format!("expected id {i}, found {}", e.id)));
        }
    }
    let relations: Vec<Relation> = read_jsonl(relations_path)?;
    for (i, r) in relations.iter().enumerate() {
        if r.id != i {
            return Err(parse_err(relations_path, i + 1, format!("expected id {i}, found {}", r.id)));
        }
    }
    let numbered = read_triples(triples_path)?;
    let mut seen = std::collections::HashSet::with_capacity(numbered.len());
    for (line, t) in &numbered {
        KnowledgeGraph::check_triple(t, entities.len(), relations.len()).map_err(|m| parse_err(triples_path, *line, m))?;
        if !seen.insert(*t) {
            return Err(parse_err(triples_path, *line, "duplicate triple"));
        }
    }
    KnowledgeGraph::new(entities, relations, numbered.into_iter().map(|(_, t)| t).collect())
}

/// Loads a graph from a directory using the standard file names. Domain
/// names are optional.
pub fn load_kg_dir(dir: &Path) -> Result<KnowledgeGraph> {
    let kg = load_kg(&dir.join(TRIPLES_FILE), &dir.join(ENTITIES_FILE), &dir.join(RELATIONS_FILE))?;
    let domains_path = dir.join(DOMAINS_FILE);
    if domains_path.exists() {
        let records: Vec<DomainRecord> = read_jsonl(&domains_path)?;
        let mut names = Vec::with_capacity(records.len());
        for (i, d) in records.into_iter().enumerate() {
            if d.id != i {
                return Err(parse_err(&domains_path, i + 1, format!("expected id {i}, found {}", d.id)));
            }
            names.push(d.name);
        }
        return Ok(kg.with_domain_names(names));
    }
    Ok(kg)
}

pub fn write_kg_dir(dir: &Path, kg: &KnowledgeGraph) -> Result<()> {
    write_triples(&dir.join(TRIPLES_FILE), kg.triples())?;
    write_jsonl(&dir.join(ENTITIES_FILE), kg.entities())?;
    write_jsonl(&dir.join(RELATIONS_FILE), kg.relations())?;
    if !kg.domain_names().is_empty() {
        let records: Vec<DomainRecord> = kg
            .domain_names()
            .iter()
            .enumerate()
            .map(|(id, name)| DomainRecord { id, name: name.clone() })
            .collect();
        write_jsonl(&dir.join(DOMAINS_FILE), &records)?;
    }
    Ok(())
}

pub fn load_corpus(path: &Path, kg: &KnowledgeGraph) -> Result<Corpus> {
    let chunks: Vec<Chunk> = read_jsonl(path)?;
    let mut ids = std::collections::HashSet::with_capacity(chunks.len());
    for (i, c) in chunks.iter().enumerate() {
        if !ids.insert(c.doc_id.clone()) {
            return Err(parse_err(path, i + 1, format!("duplicate doc_id {:?}", c.doc_id)));
        }
        if let Some(e) = c.entities.iter().find(|&&e| e >= kg.num_entities()) {
            return Err(parse_err(path, i + 1, format!("unknown entity {e}")));
        }
    }
    Corpus::new(chunks)
}

pub fn write_corpus(path: &Path, corpus: &Corpus) -> Result<()> {
    write_jsonl(path, corpus.chunks())
}

pub fn load_embeddings(path: &Path) -> Result<Vec<EmbeddingRecord>> {
    read_jsonl(path)
}
