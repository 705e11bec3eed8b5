//! Query-time pipeline: gates, reasoning paths, document ranking and the
//! path-aware prompt.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gfm::{GfmModel, GraphView, QueryContext};
use crate::kg::{tokenize, Corpus, EmbeddingProvider, EntityDocIndex, KnowledgeGraph};
use crate::selector::{induce_subgraph, GateMode, Sampling, SelectorModel, SubgraphSelection};
use crate::numerics::SeededRng;

pub const PROMPT_HEADER: &str = "As an advanced reading comprehension assistant, your task is to analyze text passages and corresponding questions meticulously. Your responses start after ...";

/// Start entities used when the query mentions nothing inside `V_q`.
pub const FALLBACK_STARTS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    /// Documents kept.
    pub top_k: usize,
    /// DFS hop budget.
    pub max_hops: usize,
    /// Depth penalty per hop index.
    pub lambda: f64,
    pub epsilon: f64,
    /// Cap on enumerated paths; `None` enumerates everything.
    pub max_paths: Option<usize>,
    /// Paths rendered into the prompt.
    pub max_keep: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            top_k: 5,
            max_hops: 3,
            lambda: 0.1,
            epsilon: 0.5,
            max_paths: Some(256),
            max_keep: 5,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 || self.max_hops == 0 || self.max_keep == 0 || self.max_paths == Some(0) {
            return Err(Error::Config("top_k, max_hops, max_keep and max_paths must be >= 1".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::Config(format!("epsilon must lie in (0, 1), got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// `e_0 –r_1– e_1 … e_k`; `forward[j]` is false when hop `j` walks its
/// triple from tail to head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReasoningPath {
    pub nodes: Vec<usize>,
    pub relations: Vec<usize>,
    pub forward: Vec<bool>,
    pub score: f64,
}

impl ReasoningPath {
    pub fn hops(&self) -> usize {
        self.relations.len()
    }

    pub fn key(&self) -> (Vec<usize>, Vec<usize>, Vec<bool>) {
        (self.nodes.clone(), self.relations.clone(), self.forward.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedDoc {
    pub doc_id: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub query: String,
    pub docs: Vec<RankedDoc>,
    pub paths: Vec<ReasoningPath>,
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Entities whose whole name (as tokens) occurs contiguously in the query.
pub fn detect_mentions(kg: &KnowledgeGraph, query: &str) -> Vec<usize> {
    let q = tokenize(query);
    kg.entities()
        .iter()
        .filter(|e| {
            let name = tokenize(&e.name);
            !name.is_empty() && q.windows(name.len()).any(|w| w == name.as_slice())
        })
        .map(|e| e.id)
        .collect()
}

/// Mentioned entities inside `V_q`, else the `FALLBACK_STARTS` highest-gated
/// entities (ties by id).
pub fn start_entities(selection: &SubgraphSelection, mentioned: &[usize]) -> Vec<usize> {
    let mut start: Vec<usize> = mentioned.iter().copied().filter(|&e| selection.contains(e)).collect();
    start.sort_unstable();
    start.dedup();
    if start.is_empty() {
        start = crate::eval::rank_by_score(&selection.s).into_iter().take(FALLBACK_STARTS).collect();
        start.sort_unstable();
    }
    start
}

/// Simple paths of 1..=`max_hops` hops from `start` through the selected
/// triples, walked in either direction. Children are expanded in ascending
/// `(relation, neighbor)` order; enumeration stops after `max_paths`.
pub fn extract_paths(kg: &KnowledgeGraph, selection: &SubgraphSelection, start: &[usize], max_hops: usize, max_paths: Option<usize>) -> Vec<ReasoningPath> {
    let mut adj: HashMap<usize, Vec<(usize, usize, bool)>> = HashMap::new();
    for &i in &selection.edges {
        let t = kg.triples()[i];
        adj.entry(t.head).or_default().push((t.relation, t.tail, true));
        adj.entry(t.tail).or_default().push((t.relation, t.head, false));
    }
    for v in adj.values_mut() {
        v.sort_unstable();
        v.dedup();
    }

    struct Walk<'a> {
        adj: &'a HashMap<usize, Vec<(usize, usize, bool)>>,
        max_hops: usize,
        cap: usize,
        seen: BTreeSet<(Vec<usize>, Vec<usize>, Vec<bool>)>,
        out: Vec<ReasoningPath>,
    }

    impl Walk<'_> {
        fn go(&mut self, nodes: &mut Vec<usize>, rels: &mut Vec<usize>, fwd: &mut Vec<bool>) {
            if self.out.len() >= self.cap {
                return;
            }
            if !rels.is_empty() && self.seen.insert((nodes.clone(), rels.clone(), fwd.clone())) {
                self.out.push(ReasoningPath {
                    nodes: nodes.clone(),
                    relations: rels.clone(),
                    forward: fwd.clone(),
                    score: 0.0,
                });
            }
            if rels.len() == self.max_hops {
                return;
            }
            let cur = *nodes.last().unwrap();
            let Some(children) = self.adj.get(&cur) else { return };
            for &(r, nb, f) in children {
                if nodes.contains(&nb) {
                    continue;
                }
                nodes.push(nb);
                rels.push(r);
                fwd.push(f);
                self.go(nodes, rels, fwd);
                nodes.pop();
                rels.pop();
                fwd.pop();
                if self.out.len() >= self.cap {
                    return;
                }
            }
        }
    }

    let mut walk = Walk {
        adj: &adj,
        max_hops,
        cap: max_paths.unwrap_or(usize::MAX),
        seen: BTreeSet::new(),
        out: Vec::new(),
    };
    let mut starts = start.to_vec();
    starts.sort_unstable();
    starts.dedup();
    for s in starts {
        if !selection.contains(s) {
            continue;
        }
        walk.go(&mut vec![s], &mut Vec::new(), &mut Vec::new());
    }
    walk.out
}

/// `Σ_i S(e_i) − λ·Σ_{j=1..k} j`.
pub fn score_path(path: &ReasoningPath, s: &[f64], lambda: f64) -> f64 {
    let nodes: f64 = path.nodes.iter().map(|&e| s[e]).sum();
    let penalty: f64 = (1..=path.hops()).map(|j| lambda * j as f64).sum();
    nodes - penalty
}

/// `w_e = S_e · (1 / #docs(e)) · #paths(e)` over `V_q`, falling back to
/// `S_e` on `V_q` when every weight is zero.
pub fn entity_weights(selection: &SubgraphSelection, index: &EntityDocIndex, paths: &[ReasoningPath]) -> Vec<f64> {
    let n = selection.s.len();
    let mut counts = vec![0usize; n];
    for p in paths {
        let unique: BTreeSet<usize> = p.nodes.iter().copied().collect();
        for e in unique {
            counts[e] += 1;
        }
    }
    let mut w = vec![0.0; n];
    for &e in &selection.nodes {
        let docs = if e < index.num_entities() { index.doc_count(e) } else { 0 };
        if docs > 0 && counts[e] > 0 {
            w[e] = selection.s[e] * (1.0 / docs as f64) * counts[e] as f64;
        }
    }
    if w.iter().all(|&x| x == 0.0) {
        for &e in &selection.nodes {
            w[e] = selection.s[e];
        }
    }
    w
}

/// `R = Mᵀw`, positive entries only, descending with ascending doc_id ties,
/// at most `k`.
pub fn rank_documents(weights: &[f64], index: &EntityDocIndex, k: usize) -> Vec<RankedDoc> {
    let r = index.transpose_mul(weights);
    let mut docs: Vec<RankedDoc> = r
        .iter()
        .enumerate()
        .filter(|(_, &x)| x > 0.0)
        .map(|(c, &x)| RankedDoc {
            doc_id: index.doc_id(c).to_string(),
            score: x,
        })
        .collect();
    docs.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.doc_id.cmp(&b.doc_id)));
    docs.truncate(k);
    docs
}

fn path_order(a: &ReasoningPath, b: &ReasoningPath) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.hops().cmp(&b.hops()))
        .then_with(|| a.nodes.cmp(&b.nodes))
        .then_with(|| a.relations.cmp(&b.relations))
        .then_with(|| a.forward.cmp(&b.forward))
}

/// Highest score first; ties by fewer hops, then node ids.
pub fn select_paths(mut paths: Vec<ReasoningPath>, max_keep: usize) -> Vec<ReasoningPath> {
    paths.sort_by(path_order);
    paths.truncate(max_keep);
    paths
}

/// A document as rendered into the prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptDocument {
    pub title: String,
    pub content: String,
}

/// A path with every id resolved to display text.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptPath {
    pub score: f64,
    /// `(name, type)` per node.
    pub entities: Vec<(String, String)>,
    /// `(relation name, forward)` per hop.
    pub relations: Vec<(String, bool)>,
}

/// Renders the fixed prompt template.
pub fn build_prompt(docs: &[PromptDocument], paths: &[PromptPath], query: &str) -> String {
    let mut s = String::new();
    s.push_str(PROMPT_HEADER);
    s.push('\n');
    for d in docs {
        writeln!(s, "Document: {}", d.title).unwrap();
        writeln!(s, "{}", d.content).unwrap();
    }
    for (i, p) in paths.iter().enumerate() {
        writeln!(s, "Reasoning Path {} (score: {:.4}):", i + 1, p.score).unwrap();
        for (j, (name, ty)) in p.entities.iter().enumerate() {
            if j > 0 {
                let (rel, forward) = &p.relations[j - 1];
                if *forward {
                    writeln!(s, "        --- (relation: {rel}) --->").unwrap();
                } else {
                    writeln!(s, "        <--- (relation: {rel}) ---").unwrap();
                }
            }
            writeln!(s, "    Entity {name} (type: {ty}):").unwrap();
        }
    }
    writeln!(s, "Question: {query}").unwrap();
    s
}

/// Resolves a reasoning path against the graph.
pub fn prompt_path(kg: &KnowledgeGraph, path: &ReasoningPath) -> PromptPath {
    PromptPath {
        score: path.score,
        entities: path
            .nodes
            .iter()
            .map(|&e| {
                let ent = &kg.entities()[e];
                (ent.name.clone(), kg.domain_name(ent.domain))
            })
            .collect(),
        relations: path
            .relations
            .iter()
            .zip(&path.forward)
            .map(|(&r, &f)| (kg.relations()[r].name.clone(), f))
            .collect(),
    }
}

/// Everything needed to answer queries, loaded once.
pub struct Retriever<'a> {
    pub kg: &'a KnowledgeGraph,
    pub corpus: &'a Corpus,
    pub view: &'a GraphView,
    pub provider: &'a EmbeddingProvider,
    pub gfm: &'a GfmModel,
    pub selector: &'a SelectorModel,
    pub index: &'a EntityDocIndex,
    pub tau_gumbel: f64,
    pub gate: GateMode,
    chunk_of: HashMap<String, usize>,
}

/// Intermediate products of one retrieval, for evaluation.
#[derive(Clone, Debug)]
pub struct Retrieval {
    pub bundle: PromptBundle,
    pub mentioned: Vec<usize>,
    /// Backbone relevance `P_q` per entity.
    pub relevance: Vec<f64>,
    pub selection: SubgraphSelection,
}

impl<'a> Retriever<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        kg: &'a KnowledgeGraph,
        corpus: &'a Corpus,
        view: &'a GraphView,
        provider: &'a EmbeddingProvider,
        gfm: &'a GfmModel,
        selector: &'a SelectorModel,
        index: &'a EntityDocIndex,
        tau_gumbel: f64,
        gate: GateMode,
    ) -> Result<Self> {
        if index.num_docs() != corpus.len() || index.num_entities() != kg.num_entities() {
            return Err(Error::Validation(format!(
                "index covers {} entities x {} docs, data has {} x {}",
                index.num_entities(),
                index.num_docs(),
                kg.num_entities(),
                corpus.len()
            )));
        }
        if gfm.config().hidden != selector.hidden() || gfm.config().text_dim != selector.text_dim() {
            return Err(Error::Validation("selector dimensions do not match the retriever".into()));
        }
        if !(tau_gumbel > 0.0) {
            return Err(Error::Config(format!("tau_gumbel must be positive, got {tau_gumbel}")));
        }
        let chunk_of = corpus.chunks().iter().enumerate().map(|(i, c)| (c.doc_id.clone(), i)).collect();
        Ok(Self {
            kg,
            corpus,
            view,
            provider,
            gfm,
            selector,
            index,
            tau_gumbel,
            gate,
            chunk_of,
        })
    }

    /// Prompt text for already ranked documents and selected paths.
    pub fn render(&self, docs: &[RankedDoc], paths: &[ReasoningPath], query: &str) -> Result<String> {
        let docs = docs
            .iter()
            .map(|d| {
                let &c = self
                    .chunk_of
                    .get(&d.doc_id)
                    .ok_or_else(|| Error::Validation(format!("unknown doc_id {:?}", d.doc_id)))?;
                let chunk = &self.corpus.chunks()[c];
                Ok(PromptDocument {
                    title: chunk.title.clone(),
                    content: chunk.content.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let paths: Vec<PromptPath> = paths.iter().map(|p| prompt_path(self.kg, p)).collect();
        Ok(build_prompt(&docs, &paths, query))
    }

    pub fn retrieve(&self, query: &str, config: &InferenceConfig) -> Result<PromptBundle> {
        Ok(self.retrieve_detailed(query, config)?.bundle)
    }

    pub fn retrieve_detailed(&self, query: &str, config: &InferenceConfig) -> Result<Retrieval> {
        config.validate()?;
        let mentioned = detect_mentions(self.kg, query);
        if self.kg.num_entities() == 0 {
            let prompt = build_prompt(&[], &[], query);
            return Ok(Retrieval {
                bundle: PromptBundle {
                    query: query.to_string(),
                    docs: Vec::new(),
                    paths: Vec::new(),
                    prompt,
                    warnings: vec!["empty graph".into()],
                },
                mentioned,
                relevance: Vec::new(),
                selection: induce_subgraph(self.kg, &[], config.epsilon)?,
            });
        }
        let ctx = QueryContext::new(self.provider.embed(query)?, mentioned.clone());
        let (z_star, relevance) = self.gfm.forward(self.view, &ctx)?;
        let mut unused = SeededRng::new(0);
        let s = self
            .selector
            .gate_probabilities(&z_star, &ctx.q, self.tau_gumbel, self.gate, Sampling::Deterministic, &mut unused)?;
        let selection = induce_subgraph(self.kg, &s, config.epsilon)?;

        let start = start_entities(&selection, &ctx.mentioned);
        let mut paths = extract_paths(self.kg, &selection, &start, config.max_hops, config.max_paths);
        for p in &mut paths {
            p.score = score_path(p, &selection.s, config.lambda);
        }
        let weights = entity_weights(&selection, self.index, &paths);
        let docs = rank_documents(&weights, self.index, config.top_k);
        let kept = select_paths(paths, config.max_keep);
        let prompt = self.render(&docs, &kept, query)?;
        let mut warnings = Vec::new();
        if selection.nodes.is_empty() {
            warnings.push("no entity passed the gate threshold".into());
        }
        Ok(Retrieval {
            bundle: PromptBundle {
                query: query.to_string(),
                docs,
                paths: kept,
                prompt,
                warnings,
            },
            mentioned: ctx.mentioned,
            relevance,
            selection,
        })
    }
}
