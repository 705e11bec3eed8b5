use super::{EmbeddingProvider, KnowledgeGraph, Relation, Triple};
use crate::error::{Error, Result};
use crate::numerics::cosine_sim;

/// Name of the relation added between resolved entities.
pub const EQUIVALENCE_RELATION: &str = "≡";

/// Adds `(i, ≡, j)` and `(j, ≡, i)` for every unordered pair whose name
/// embeddings have cosine similarity strictly above `tau`.
///
/// The equivalence relation is appended as a new relation id (or reused if
/// the graph already has one). Existing triples are kept as they are.
pub fn resolve_entities(kg: &KnowledgeGraph, provider: &EmbeddingProvider, tau: f64) -> Result<KnowledgeGraph> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::Parameter(format!("similarity threshold must lie in (0, 1], got {tau}")));
    }
    let embeddings = kg
        .entities()
        .iter()
        .map(|e| provider.embed(&e.name))
        .collect::<Result<Vec<_>>>()?;

    let mut relations = kg.relations().to_vec();
    let eq = match kg.relation_id(EQUIVALENCE_RELATION) {
        Some(id) => id,
        None => {
            relations.push(Relation {
                id: relations.len(),
                name: EQUIVALENCE_RELATION.to_string(),
            });
            relations.len() - 1
        }
    };

    let mut triples = kg.triples().to_vec();
    let n = embeddings.len();
    for i in 0..n {
        for j in i + 1..n {
            if cosine_sim(&embeddings[i], &embeddings[j]) > tau {
                for t in [Triple::new(i, eq, j), Triple::new(j, eq, i)] {
                    if !kg.contains(&t) {
                        triples.push(t);
                    }
                }
            }
        }
    }
    let out = KnowledgeGraph::new(kg.entities().to_vec(), relations, triples)?;
    Ok(out.with_domain_names(kg.domain_names().to_vec()))
}
