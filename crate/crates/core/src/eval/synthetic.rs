use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::io::{read_jsonl, write_jsonl};
use crate::kg::{Chunk, Corpus, Entity, KnowledgeGraph, Relation, Triple};
use crate::numerics::SeededRng;

pub const QUERIES_FILE: &str = "queries.jsonl";

const DOMAIN_NAMES: &[&str] = &["geo", "bio", "film", "tech", "med", "law", "sport", "music"];
const RELATION_NAMES: &[&str] = &[
    "located_in",
    "part_of",
    "born_in",
    "works_for",
    "directed_by",
    "member_of",
    "written_by",
    "capital_of",
    "treats",
    "causes",
    "plays_for",
    "founded_by",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_domains: usize,
    pub entities_per_domain: usize,
    pub relations: usize,
    pub intra_domain_triples: usize,
    pub cross_domain_triples: usize,
    pub planted_queries: usize,
    pub min_hops: usize,
    pub max_hops: usize,
    pub chunks_per_entity: usize,
    /// Set from the run seed, never read from config files.
    #[serde(skip_deserializing)]
    pub seed: u64,
}

impl Default for SyntheticSpec {
    /// The 3-domain benchmark: 600 entities, 2000 triples, 100 queries.
    fn default() -> Self {
        Self {
            num_domains: 3,
            entities_per_domain: 200,
            relations: 8,
            intra_domain_triples: 1600,
            cross_domain_triples: 400,
            planted_queries: 100,
            min_hops: 1,
            max_hops: 3,
            chunks_per_entity: 1,
            seed: 1024,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_domains", self.num_domains),
            ("entities_per_domain", self.entities_per_domain),
            ("relations", self.relations),
            ("planted_queries", self.planted_queries),
            ("min_hops", self.min_hops),
            ("max_hops", self.max_hops),
            ("chunks_per_entity", self.chunks_per_entity),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("synthetic {name} must be >= 1")));
        }
        if self.intra_domain_triples + self.cross_domain_triples == 0 {
            return Err(Error::Config("synthetic graph needs at least one triple".into()));
        }
        if self.min_hops > self.max_hops || self.max_hops > 3 {
            return Err(Error::Config(format!(
                "hops must satisfy 1 <= min_hops <= max_hops <= 3, got {}..={}",
                self.min_hops, self.max_hops
            )));
        }
        Ok(())
    }

    fn hops_for(&self, i: usize) -> usize {
        self.min_hops + i % (self.max_hops - self.min_hops + 1)
    }
}

/// A planted multi-hop query with its gold labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabeledQuery {
    pub id: String,
    pub text: String,
    pub mentioned: Vec<usize>,
    /// Gold entities: every node of the planted path.
    pub positives: Vec<usize>,
    pub path_nodes: Vec<usize>,
    pub path_relations: Vec<usize>,
    pub gold_docs: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub kg: KnowledgeGraph,
    pub corpus: Corpus,
    pub queries: Vec<LabeledQuery>,
}

fn domain_name(d: usize) -> String {
    DOMAIN_NAMES.get(d).map(|s| s.to_string()).unwrap_or_else(|| format!("dom{d}"))
}

fn relation_name(r: usize) -> String {
    match RELATION_NAMES.get(r) {
        Some(s) => s.to_string(),
        None => format!("related_{r}"),
    }
}

fn random_triples(spec: &SyntheticSpec, rng: &mut SeededRng, cross: bool, count: usize, seen: &mut HashSet<Triple>, out: &mut Vec<Triple>) -> Result<()> {
    let n = spec.entities_per_domain;
    if count == 0 {
        return Ok(());
    }
    if cross && spec.num_domains < 2 {
        return Err(Error::Generation("cross-domain triples need at least 2 domains".into()));
    }
    if !cross && n < 2 {
        return Err(Error::Generation("intra-domain triples need at least 2 entities per domain".into()));
    }
    let mut added = 0;
    let mut attempts = 0usize;
    while added < count {
        attempts += 1;
        if attempts > 50 * count + 1000 {
            return Err(Error::Generation(format!("could not place {count} distinct triples")));
        }
        let dh = rng.below(spec.num_domains);
        let dt = if cross {
            (dh + 1 + rng.below(spec.num_domains - 1)) % spec.num_domains
        } else {
            dh
        };
        let h = dh * n + rng.below(n);
        let t = dt * n + rng.below(n);
        let r = rng.below(spec.relations);
        if h == t {
            continue;
        }
        let tr = Triple::new(h, r, t);
        if seen.insert(tr) {
            out.push(tr);
            added += 1;
        }
    }
    Ok(())
}

/// Random directed simple path with `hops` edges, or `None` after a bounded
/// number of restarts.
fn plant_path(kg: &KnowledgeGraph, hops: usize, rng: &mut SeededRng) -> Option<(Vec<usize>, Vec<usize>)> {
    for _ in 0..1000 {
        let mut nodes = vec![rng.below(kg.num_entities())];
        let mut rels = Vec::new();
        while rels.len() < hops {
            let cur = *nodes.last().unwrap();
            let options: Vec<Triple> = kg
                .outgoing(cur)
                .iter()
                .map(|&k| kg.triples()[k])
                .filter(|t| !nodes.contains(&t.tail))
                .collect();
            let Some(t) = options.choose(rng) else { break };
            nodes.push(t.tail);
            rels.push(t.relation);
        }
        if rels.len() == hops {
            return Some((nodes, rels));
        }
    }
    None
}

/// Builds a multi-domain graph, a linked corpus and planted path queries.
/// Pure function of `spec`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = SeededRng::substream(spec.seed, "synth");
    let n = spec.entities_per_domain;

    let entities: Vec<Entity> = (0..spec.num_domains * n)
        .map(|id| Entity {
            id,
            name: format!("{}{}", domain_name(id / n), id % n),
            domain: id / n,
        })
        .collect();
    let relations: Vec<Relation> = (0..spec.relations)
        .map(|id| Relation {
            id,
            name: relation_name(id),
        })
        .collect();

    let mut seen = HashSet::new();
    let mut triples = Vec::with_capacity(spec.intra_domain_triples + spec.cross_domain_triples);
    random_triples(spec, &mut rng, false, spec.intra_domain_triples, &mut seen, &mut triples)?;
    random_triples(spec, &mut rng, true, spec.cross_domain_triples, &mut seen, &mut triples)?;
    let kg = KnowledgeGraph::new(entities, relations, triples)?
        .with_domain_names((0..spec.num_domains).map(domain_name).collect());

    let mut chunks = Vec::new();
    for e in kg.entities() {
        for k in 0..spec.chunks_per_entity {
            chunks.push(Chunk {
                doc_id: format!("bg_{}_{k}", e.id),
                title: e.name.clone(),
                content: format!("{} is a {} entity.", e.name, kg.domain_name(e.domain)),
                entities: vec![e.id],
            });
        }
    }

    let mut queries = Vec::with_capacity(spec.planted_queries);
    for i in 0..spec.planted_queries {
        let hops = spec.hops_for(i);
        let (nodes, rels) = plant_path(&kg, hops, &mut rng)
            .ok_or_else(|| Error::Generation(format!("no simple path with {hops} hops could be sampled")))?;
        let name = |e: usize| kg.entities()[e].name.clone();
        let mut text = name(nodes[0]);
        for &r in &rels {
            text.push(' ');
            text.push_str(&kg.relations()[r].name);
        }
        let mut statement = name(nodes[0]);
        for (j, &r) in rels.iter().enumerate() {
            statement.push_str(&format!(" {} {}", kg.relations()[r].name.replace('_', " "), name(nodes[j + 1])));
        }
        let gold = format!("q{i}_gold");
        chunks.push(Chunk {
            doc_id: gold.clone(),
            title: format!("{} report", name(nodes[0])),
            content: format!("{statement}."),
            entities: nodes.clone(),
        });
        let pool: Vec<usize> = (0..kg.num_entities()).filter(|e| !nodes.contains(e)).collect();
        let mut distract = vec![nodes[0]];
        distract.extend(pool.choose_multiple(&mut rng, 2).copied());
        let others: Vec<String> = distract[1..].iter().map(|&e| name(e)).collect();
        let content = if others.is_empty() {
            format!("{} is mentioned here without further detail.", name(nodes[0]))
        } else {
            format!("{} appears alongside {}.", name(nodes[0]), others.join(" and "))
        };
        chunks.push(Chunk {
            doc_id: format!("q{i}_distractor"),
            title: format!("{} notes", name(nodes[0])),
            content,
            entities: distract,
        });
        let mut positives = nodes.clone();
        positives.sort_unstable();
        queries.push(LabeledQuery {
            id: format!("q{i}"),
            text,
            mentioned: vec![nodes[0]],
            positives,
            path_nodes: nodes,
            path_relations: rels,
            gold_docs: vec![gold],
        });
    }
    let corpus = Corpus::new(chunks)?;
    Ok(SyntheticDataset { kg, corpus, queries })
}

/// Checks every planted path against the graph and the gold documents
/// against the corpus. Returns one message per violation.
pub fn validate_dataset(ds: &SyntheticDataset) -> Vec<String> {
    let mut problems = Vec::new();
    for q in &ds.queries {
        if q.path_nodes.len() != q.path_relations.len() + 1 {
            problems.push(format!("{}: path has {} nodes and {} relations", q.id, q.path_nodes.len(), q.path_relations.len()));
            continue;
        }
        let distinct: HashSet<_> = q.path_nodes.iter().collect();
        if distinct.len() != q.path_nodes.len() {
            problems.push(format!("{}: path repeats a node", q.id));
        }
        for (j, &r) in q.path_relations.iter().enumerate() {
            let t = Triple::new(q.path_nodes[j], r, q.path_nodes[j + 1]);
            if q.path_nodes.iter().any(|&e| e >= ds.kg.num_entities()) || !ds.kg.contains(&t) {
                problems.push(format!("{}: hop {} ({}, {}, {}) not in graph", q.id, j + 1, t.head, t.relation, t.tail));
            }
        }
        for d in &q.gold_docs {
            match ds.corpus.chunks().iter().find(|c| &c.doc_id == d) {
                None => problems.push(format!("{}: gold doc {d} missing", q.id)),
                Some(c) => {
                    let mut ents = c.entities.clone();
                    ents.sort_unstable();
                    if ents != q.positives {
                        problems.push(format!("{}: gold doc {d} does not mention exactly the path entities", q.id));
                    }
                }
            }
        }
    }
    problems
}

pub fn write_queries(path: &Path, queries: &[LabeledQuery]) -> Result<()> {
    write_jsonl(path, queries)
}

pub fn read_queries(path: &Path) -> Result<Vec<LabeledQuery>> {
    read_jsonl(path)
}
