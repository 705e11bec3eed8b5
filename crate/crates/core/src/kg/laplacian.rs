use std::collections::BTreeSet;

use super::KnowledgeGraph;
use crate::numerics::SparseMatrix;

/// `I − D^{-1/2} A D^{-1/2}` over the undirected simple graph underlying
/// the triples. Relation types, direction and self-loops are ignored;
/// isolated nodes keep `L_ii = 1`.
pub fn normalized_laplacian(kg: &KnowledgeGraph) -> SparseMatrix {
    let n = kg.num_entities();
    let mut pairs = BTreeSet::new();
    for t in kg.triples() {
        if t.head != t.tail {
            pairs.insert((t.head.min(t.tail), t.head.max(t.tail)));
        }
    }
    let mut degree = vec![0usize; n];
    for &(a, b) in &pairs {
        degree[a] += 1;
        degree[b] += 1;
    }
    let inv_sqrt: Vec<f64> = degree
        .iter()
        .map(|&d| if d == 0 { 0.0 } else { 1.0 / (d as f64).sqrt() })
        .collect();
    let mut entries = Vec::with_capacity(n + 2 * pairs.len());
    for i in 0..n {
        entries.push((i, i, 1.0));
    }
    for &(a, b) in &pairs {
        let w = -inv_sqrt[a] * inv_sqrt[b];
        entries.push((a, b, w));
        entries.push((b, a, w));
    }
    SparseMatrix::from_triplets(n, n, entries)
}
