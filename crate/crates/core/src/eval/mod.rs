//! Synthetic benchmarks, retrieval metrics and reference oracles.

pub mod oracles;
pub mod synthetic;

pub use oracles::{brute_force_paths, markov_table, mi_inequality_oracle, MiReport, PathKey};
pub use synthetic::{generate_synthetic, read_queries, validate_dataset, write_queries, LabeledQuery, SyntheticDataset, SyntheticSpec};

use std::collections::{BTreeMap, HashSet};
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::numerics::SeededRng;

/// Cutoffs reported in every [`MetricsReport`].
pub const DEFAULT_KS: [usize; 2] = [2, 5];

/// `|top-k ∩ gold| / |gold|`. An empty gold set scores 1.
pub fn recall_at_k<T: Eq + Hash>(ranked: &[T], gold: &[T], k: usize) -> f64 {
    let gold: HashSet<&T> = gold.iter().collect();
    if gold.is_empty() {
        return 1.0;
    }
    let hits: HashSet<&T> = ranked.iter().take(k).filter(|x| gold.contains(x)).collect();
    hits.len() as f64 / gold.len() as f64
}

/// 1-based rank of the first gold item, if any.
pub fn first_gold_rank<T: Eq + Hash>(ranked: &[T], gold: &[T]) -> Option<usize> {
    let gold: HashSet<&T> = gold.iter().collect();
    ranked.iter().position(|x| gold.contains(x)).map(|i| i + 1)
}

/// Mean over queries of `1 / rank` of the first gold item (0 if absent).
pub fn mrr<T: Eq + Hash>(ranked: &[Vec<T>], gold: &[Vec<T>]) -> f64 {
    if ranked.is_empty() {
        return 0.0;
    }
    let total: f64 = ranked
        .iter()
        .zip(gold)
        .map(|(r, g)| first_gold_rank(r, g).map_or(0.0, |k| 1.0 / k as f64))
        .sum();
    total / ranked.len() as f64
}

/// Ranked entities and documents for one query, with its gold labels.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryRanking {
    pub id: String,
    pub entities: Vec<usize>,
    pub docs: Vec<String>,
    pub gold_entities: Vec<usize>,
    pub gold_docs: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub id: String,
    pub recall_e: BTreeMap<String, f64>,
    pub recall_d: BTreeMap<String, f64>,
    pub reciprocal_rank: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub recall_e: BTreeMap<String, f64>,
    pub recall_d: BTreeMap<String, f64>,
    /// Entity-level mean reciprocal rank.
    pub mrr: f64,
    pub num_queries: usize,
    pub empty_query_set: bool,
    pub queries: Vec<QueryMetrics>,
}

impl MetricsReport {
    pub fn from_rankings(rankings: &[QueryRanking], ks: &[usize]) -> Self {
        let mut queries = Vec::with_capacity(rankings.len());
        for r in rankings {
            let rr = first_gold_rank(&r.entities, &r.gold_entities).map_or(0.0, |k| 1.0 / k as f64);
            queries.push(QueryMetrics {
                id: r.id.clone(),
                recall_e: ks.iter().map(|&k| (k.to_string(), recall_at_k(&r.entities, &r.gold_entities, k))).collect(),
                recall_d: ks.iter().map(|&k| (k.to_string(), recall_at_k(&r.docs, &r.gold_docs, k))).collect(),
                reciprocal_rank: rr,
            });
        }
        let n = queries.len().max(1) as f64;
        let mean = |f: &dyn Fn(&QueryMetrics) -> f64| queries.iter().map(f).sum::<f64>() / n;
        let recall_e = ks
            .iter()
            .map(|&k| (k.to_string(), mean(&|q| q.recall_e[&k.to_string()])))
            .collect();
        let recall_d = ks
            .iter()
            .map(|&k| (k.to_string(), mean(&|q| q.recall_d[&k.to_string()])))
            .collect();
        let mrr = mean(&|q| q.reciprocal_rank);
        Self {
            recall_e,
            recall_d,
            mrr,
            num_queries: queries.len(),
            empty_query_set: queries.is_empty(),
            queries,
        }
    }

    pub fn recall_e_at(&self, k: usize) -> f64 {
        self.recall_e.get(&k.to_string()).copied().unwrap_or(0.0)
    }

    pub fn recall_d_at(&self, k: usize) -> f64 {
        self.recall_d.get(&k.to_string()).copied().unwrap_or(0.0)
    }
}

/// Order of `scores`, highest first, ties by index.
pub fn rank_by_score(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Metrics of a scorer that assigns seeded uniform random scores to every
/// entity and document.
pub fn random_baseline(num_entities: usize, doc_ids: &[String], queries: &[LabeledQuery], seed: u64, ks: &[usize]) -> MetricsReport {
    let mut rng = SeededRng::substream(seed, "eval/random_baseline");
    let rankings: Vec<QueryRanking> = queries
        .iter()
        .map(|q| {
            let es: Vec<f64> = (0..num_entities).map(|_| rng.uniform()).collect();
            let ds: Vec<f64> = (0..doc_ids.len()).map(|_| rng.uniform()).collect();
            QueryRanking {
                id: q.id.clone(),
                entities: rank_by_score(&es),
                docs: rank_by_score(&ds).into_iter().map(|i| doc_ids[i].clone()).collect(),
                gold_entities: q.positives.clone(),
                gold_docs: q.gold_docs.clone(),
            }
        })
        .collect();
    MetricsReport::from_rankings(&rankings, ks)
}
