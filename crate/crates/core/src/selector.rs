//! Query-conditioned subgraph selection on top of a frozen retriever.
//!
//! Entity states from the frozen backbone are concatenated with a projected
//! query prompt, gated through a relaxed Bernoulli (Gumbel-Sigmoid), and the
//! gated subgraph is trained to stay informative about the query (InfoNCE)
//! while staying small and connected.

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointHeader};
use crate::error::{Error, Result};
use crate::eval::LabeledQuery;
use crate::gfm::{GfmModel, QueryContext};
use crate::kg::{normalized_laplacian, KnowledgeGraph};
use crate::numerics::{sample_gumbel, sigmoid, Optimizer, OptimizerKind, ParamSet, SeededRng, SparseMatrix, Tape, Tensor, Var};
use crate::pretrain::{retrieval_loss, RankLoss, TrainLog, TrainingData};

pub const CHECKPOINT_TAG: &str = "selector";

// Parameter slots, in push order.
const PROMPT_W1: usize = 0;
const PROMPT_B1: usize = 1;
const PROMPT_W2: usize = 2;
const PROMPT_B2: usize = 3;
const W1: usize = 4;
const W2: usize = 5;
const GATE_W1: usize = 6;
const GATE_B1: usize = 7;
const GATE_W2: usize = 8;
const GATE_B2: usize = 9;
const HEAD_W: usize = 10;
const HEAD_B: usize = 11;
const POOL: usize = 12;

/// Gate parameterization.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// `sigmoid((logit + g − g′) / τ)`.
    #[default]
    Standard,
    /// `sigmoid(sigmoid(logit + g − g′) / τ)`: the doubly squashed form.
    Literal,
}

/// How `G_q` aggregates the selected rows.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    /// `Σ_{V_q} S_e Ẑ_e`.
    #[default]
    Sum,
    /// The same sum divided by `Σ_{V_q} S_e` (zero when `V_q` is empty).
    Mean,
}

/// Denominator of the contrastive loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NceMode {
    /// Matched pairs `(G_q′, q′)` of the batch, anchor included.
    #[default]
    Matched,
    /// Anchor subgraph against every query of the batch, `(G_q, q′)`.
    CrossPairs,
}

/// Which scores carry the retrieval losses during fine-tuning.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalHead {
    /// The gate logits themselves, so labels shape `V_q` directly.
    #[default]
    Gate,
    /// A separate linear head on `Ẑ`; gates see only the label-free terms.
    Separate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sampling {
    Stochastic,
    Deterministic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub tau_gumbel: f64,
    pub tau_nce: f64,
    pub epsilon: f64,
    pub alpha1: f64,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub rank_loss: RankLoss,
    pub batch_size: usize,
    pub epochs: usize,
    pub gate: GateMode,
    pub pool: PoolMode,
    pub nce: NceMode,
    pub retrieval_head: RetrievalHead,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            beta1: 0.01,
            beta2: 0.1,
            tau_gumbel: 0.5,
            tau_nce: 0.07,
            epsilon: 0.5,
            alpha1: 0.3,
            lr: 5e-4,
            optimizer: OptimizerKind::Sgd,
            rank_loss: RankLoss::Ratio,
            batch_size: 8,
            epochs: 20,
            gate: GateMode::Standard,
            pool: PoolMode::Sum,
            nce: NceMode::Matched,
            retrieval_head: RetrievalHead::Gate,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.beta1 >= 0.0 && self.beta2 >= 0.0) {
            return bad(format!("beta1 and beta2 must be non-negative, got {} and {}", self.beta1, self.beta2));
        }
        if !(self.tau_gumbel > 0.0 && self.tau_nce > 0.0) {
            return bad("tau_gumbel and tau_nce must be positive".into());
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad(format!("epsilon must lie in (0, 1), got {}", self.epsilon));
        }
        if !(0.0..=1.0).contains(&self.alpha1) {
            return bad(format!("alpha1 must lie in [0, 1], got {}", self.alpha1));
        }
        if !(self.lr >= 0.0) {
            return bad(format!("lr must be non-negative, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        Ok(())
    }
}

/// Gate probabilities and the subgraph they induce.
#[derive(Clone, Debug, PartialEq)]
pub struct SubgraphSelection {
    pub s: Vec<f64>,
    pub epsilon: f64,
    /// `V_q`, ascending.
    pub nodes: Vec<usize>,
    /// Indices into `kg.triples()` with both endpoints in `V_q`, ascending.
    pub edges: Vec<usize>,
    /// Relations used by `edges`, ascending.
    pub relations: Vec<usize>,
}

impl SubgraphSelection {
    pub fn contains(&self, e: usize) -> bool {
        self.nodes.binary_search(&e).is_ok()
    }
}

/// `V_q = {e : S_e > ε}` and the triples and relations it induces.
pub fn induce_subgraph(kg: &KnowledgeGraph, s: &[f64], epsilon: f64) -> Result<SubgraphSelection> {
    if s.len() != kg.num_entities() {
        return Err(Error::Shape(format!("{} gate values for {} entities", s.len(), kg.num_entities())));
    }
    let inside: Vec<bool> = s.iter().map(|&x| x > epsilon).collect();
    let nodes: Vec<usize> = (0..s.len()).filter(|&e| inside[e]).collect();
    let edges: Vec<usize> = kg
        .triples()
        .iter()
        .enumerate()
        .filter(|(_, t)| inside[t.head] && inside[t.tail])
        .map(|(i, _)| i)
        .collect();
    let mut relations: Vec<usize> = edges.iter().map(|&i| kg.triples()[i].relation).collect();
    relations.sort_unstable();
    relations.dedup();
    Ok(SubgraphSelection {
        s: s.to_vec(),
        epsilon,
        nodes,
        edges,
        relations,
    })
}

/// A fine-tuning example: query, frozen final states and labels.
#[derive(Clone, Debug)]
pub struct FinetuneExample {
    pub q: Vec<f64>,
    pub z_star: Tensor,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

impl FinetuneExample {
    /// Runs the frozen backbone once; every entity outside the gold set is
    /// a negative.
    pub fn from_labeled(data: TrainingData<'_>, gfm: &GfmModel, query: &LabeledQuery) -> Result<Self> {
        let ctx = QueryContext::new(data.provider.embed(&query.text)?, query.mentioned.clone());
        let (z_star, _) = gfm.forward(data.view, &ctx)?;
        let mut positives = query.positives.clone();
        positives.sort_unstable();
        positives.dedup();
        let negatives = (0..data.kg.num_entities()).filter(|e| positives.binary_search(e).is_err()).collect();
        Ok(Self {
            q: ctx.q,
            z_star,
            positives,
            negatives,
        })
    }
}

/// Tape handles for one query's selection.
#[derive(Clone, Copy, Debug)]
pub struct GateVars {
    pub zhat: Var,
    pub logits: Var,
    /// Argument of the outer sigmoid, `[|V|, 1]`.
    pub pre: Var,
    pub s: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectorModel {
    hidden: usize,
    text_dim: usize,
    prompt_dim: usize,
    params: ParamSet,
}

fn glorot(rng: &mut SeededRng, rows: usize, cols: usize) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.uniform_range(-a, a)).collect();
    Tensor::matrix(rows, cols, data).expect("glorot shape")
}

impl SelectorModel {
    /// Glorot-uniform weights, zero biases. `hidden` and `text_dim` must
    /// match the backbone.
    pub fn new(hidden: usize, text_dim: usize, prompt_dim: usize, seed: u64) -> Result<Self> {
        if hidden == 0 || text_dim == 0 || prompt_dim == 0 {
            return Err(Error::Config(format!(
                "selector dimensions must be positive (hidden {hidden}, text_dim {text_dim}, prompt_dim {prompt_dim})"
            )));
        }
        let mut rng = SeededRng::substream(seed, "selector/init");
        let (h, t, p, c) = (hidden, text_dim, prompt_dim, 3 * hidden);
        let mut params = ParamSet::new();
        params.push("prompt_w1", glorot(&mut rng, t, p));
        params.push("prompt_b1", Tensor::zeros(1, p));
        params.push("prompt_w2", glorot(&mut rng, p, p));
        params.push("prompt_b2", Tensor::zeros(1, p));
        params.push("w1", glorot(&mut rng, p, h));
        params.push("w2", glorot(&mut rng, t, h));
        params.push("gate_w1", glorot(&mut rng, c, h));
        params.push("gate_b1", Tensor::zeros(1, h));
        params.push("gate_w2", glorot(&mut rng, h, 1));
        params.push("gate_b2", Tensor::zeros(1, 1));
        params.push("head_w", glorot(&mut rng, c, 1));
        params.push("head_b", Tensor::zeros(1, 1));
        params.push("pool_projection", glorot(&mut rng, c, t));
        Ok(Self {
            hidden,
            text_dim,
            prompt_dim,
            params,
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn text_dim(&self) -> usize {
        self.text_dim
    }

    pub fn prompt_dim(&self) -> usize {
        self.prompt_dim
    }

    pub fn concat_dim(&self) -> usize {
        3 * self.hidden
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn checksum(&self) -> u64 {
        self.params.checksum()
    }

    fn check_shapes(&self, z_star: &Tensor, q: &[f64]) -> Result<()> {
        if z_star.cols() != self.hidden {
            return Err(Error::Shape(format!("entity states have {} columns, selector expects {}", z_star.cols(), self.hidden)));
        }
        if q.len() != self.text_dim {
            return Err(Error::Shape(format!("query has dimension {}, selector expects {}", q.len(), self.text_dim)));
        }
        Ok(())
    }

    /// `Ẑ = [Z* ‖ W1·prompt_mlp(q) ‖ W2·q]`, the last two blocks broadcast.
    pub fn tape_embedding(&self, tape: &mut Tape, vars: &[Var], z_star: Var, q: &[f64]) -> Var {
        let n = tape.value(z_star).rows();
        let qv = tape.leaf(Tensor::row(q.to_vec()));
        let hid = tape.matmul(qv, vars[PROMPT_W1]);
        let hid = tape.add_row(hid, vars[PROMPT_B1]);
        let hid = tape.relu(hid);
        let prompt = tape.matmul(hid, vars[PROMPT_W2]);
        let prompt = tape.add_row(prompt, vars[PROMPT_B2]);
        let a = tape.matmul(prompt, vars[W1]);
        let b = tape.matmul(qv, vars[W2]);
        let a = tape.broadcast_row(a, n);
        let b = tape.broadcast_row(b, n);
        tape.concat_cols(&[z_star, a, b])
    }

    /// Row-wise gate MLP, `[|V|, 1]`.
    pub fn tape_gate_logits(&self, tape: &mut Tape, vars: &[Var], zhat: Var) -> Var {
        let hid = tape.matmul(zhat, vars[GATE_W1]);
        let hid = tape.add_row(hid, vars[GATE_B1]);
        let hid = tape.relu(hid);
        let logit = tape.matmul(hid, vars[GATE_W2]);
        tape.add_row(logit, vars[GATE_B2])
    }

    /// Linear retrieval head on `Ẑ`, `[|V|, 1]`.
    pub fn tape_head_logits(&self, tape: &mut Tape, vars: &[Var], zhat: Var) -> Var {
        let logit = tape.matmul(zhat, vars[HEAD_W]);
        tape.add_row(logit, vars[HEAD_B])
    }

    /// Embedding, gate logits and relaxed gates. `noise` holds `g − g′` per
    /// entity; `None` is the deterministic (inference) gate.
    #[allow(clippy::too_many_arguments)]
    pub fn tape_gates(&self, tape: &mut Tape, vars: &[Var], z_star: Var, q: &[f64], noise: Option<&Tensor>, tau: f64, mode: GateMode) -> GateVars {
        let zhat = self.tape_embedding(tape, vars, z_star, q);
        let logits = self.tape_gate_logits(tape, vars, zhat);
        let pre = gate_pre(tape, logits, noise, tau, mode);
        let s = tape.sigmoid(pre);
        GateVars { zhat, logits, pre, s }
    }

    /// Numeric `Ẑ` for one query.
    pub fn query_conditioned_embedding(&self, z_star: &Tensor, q: &[f64]) -> Result<Tensor> {
        self.check_shapes(z_star, q)?;
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape);
        let z = tape.leaf(z_star.clone());
        let out = self.tape_embedding(&mut tape, &vars, z, q);
        Ok(tape.value(out).clone())
    }

    /// Gate probabilities `S` for one query. Stochastic mode draws
    /// `2·|V|` Gumbel variates from `rng`.
    pub fn gate_probabilities(&self, z_star: &Tensor, q: &[f64], tau: f64, mode: GateMode, sampling: Sampling, rng: &mut SeededRng) -> Result<Vec<f64>> {
        self.check_shapes(z_star, q)?;
        if !(tau > 0.0) {
            return Err(Error::Parameter(format!("tau_gumbel must be positive, got {tau}")));
        }
        let noise = match sampling {
            Sampling::Stochastic => Some(gumbel_noise(z_star.rows(), rng)),
            Sampling::Deterministic => None,
        };
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape);
        let z = tape.leaf(z_star.clone());
        let g = self.tape_gates(&mut tape, &vars, z, q, noise.as_ref(), tau, mode);
        Ok(tape.value(g.s).data().to_vec())
    }

    /// Deterministic gates and the subgraph they induce.
    pub fn select(&self, kg: &KnowledgeGraph, z_star: &Tensor, q: &[f64], config: &FinetuneConfig) -> Result<SubgraphSelection> {
        let mut unused = SeededRng::new(0);
        let s = self.gate_probabilities(z_star, q, config.tau_gumbel, config.gate, Sampling::Deterministic, &mut unused)?;
        induce_subgraph(kg, &s, config.epsilon)
    }

    /// Composite fine-tuning loss over a batch on `tape`:
    /// mean over queries of `α1·L_BCE + (1−α1)·L_rank + β1·L_size + β2·L_con`,
    /// plus `L_NCE` over the batch. `noise[i]` is `None` for noise-free gates.
    pub fn tape_batch_loss(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        batch: &[&FinetuneExample],
        noise: &[Option<Tensor>],
        laplacian: &Arc<SparseMatrix>,
        config: &FinetuneConfig,
    ) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::Validation("empty fine-tuning batch".into()));
        }
        let mut per_query = Vec::with_capacity(batch.len());
        let mut pooled = Vec::with_capacity(batch.len());
        let mut queries = Vec::with_capacity(batch.len());
        for (ex, nz) in batch.iter().zip(noise) {
            self.check_shapes(&ex.z_star, &ex.q)?;
            if laplacian.n_rows() != ex.z_star.rows() {
                return Err(Error::Shape(format!("Laplacian is {}x{}, graph has {} entities", laplacian.n_rows(), laplacian.n_cols(), ex.z_star.rows())));
            }
            let z = tape.leaf(ex.z_star.clone());
            let g = self.tape_gates(tape, vars, z, &ex.q, nz.as_ref(), config.tau_gumbel, config.gate);
            let retrieval = match config.retrieval_head {
                RetrievalHead::Gate => retrieval_loss(tape, g.pre, g.s, &ex.positives, &ex.negatives, config.alpha1, config.rank_loss)?,
                RetrievalHead::Separate => {
                    let logits = self.tape_head_logits(tape, vars, g.zhat);
                    let scores = tape.sigmoid(logits);
                    retrieval_loss(tape, logits, scores, &ex.positives, &ex.negatives, config.alpha1, config.rank_loss)?
                }
            };
            let size = tape_size(tape, g.s);
            let con = tape_con(tape, g.s, laplacian);
            let size = tape.scale(size, config.beta1);
            let con = tape.scale(con, config.beta2);
            let t = tape.add(retrieval, size);
            per_query.push(tape.add(t, con));

            let members: Vec<usize> = tape.value(g.s).data().iter().enumerate().filter(|(_, &x)| x > config.epsilon).map(|(e, _)| e).collect();
            let gq = tape_pool(tape, g.zhat, g.s, &members, config.pool);
            pooled.push(tape.matmul(gq, vars[POOL]));
            queries.push(tape.leaf(Tensor::row(ex.q.clone())));
        }
        let stacked = tape.concat_cols(&per_query);
        let mean = tape.mean(stacked);
        let nce = tape_nce(tape, &pooled, &queries, config.tau_nce, config.nce)?;
        Ok(tape.add(mean, nce))
    }

    pub fn header(&self) -> CheckpointHeader {
        // The container's `layers` slot carries the prompt dimension.
        CheckpointHeader {
            tag: CHECKPOINT_TAG.to_string(),
            hidden: self.hidden,
            layers: self.prompt_dim,
            text_dim: self.text_dim,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.header(), &self.params)
    }

    pub fn load(path: &Path, hidden: usize, text_dim: usize, prompt_dim: usize) -> Result<Self> {
        let mut model = Self::new(hidden, text_dim, prompt_dim, 0)?;
        let header = model.header();
        checkpoint::load_into(path, &header, &mut model.params)?;
        Ok(model)
    }
}

/// `g − g′` for `n` entities.
pub fn gumbel_noise(n: usize, rng: &mut SeededRng) -> Tensor {
    Tensor::column((0..n).map(|_| sample_gumbel(rng) - sample_gumbel(rng)).collect())
}

fn gate_pre(tape: &mut Tape, logits: Var, noise: Option<&Tensor>, tau: f64, mode: GateMode) -> Var {
    let x = match noise {
        Some(nz) => {
            let nv = tape.leaf(nz.clone());
            tape.add(logits, nv)
        }
        None => logits,
    };
    match mode {
        GateMode::Standard => tape.scale(x, 1.0 / tau),
        GateMode::Literal => {
            let inner = tape.sigmoid(x);
            tape.scale(inner, 1.0 / tau)
        }
    }
}

/// Relaxed gate for a single logit and noise value.
pub fn gate_value(logit: f64, noise: f64, tau: f64, mode: GateMode) -> f64 {
    match mode {
        GateMode::Standard => sigmoid((logit + noise) / tau),
        GateMode::Literal => sigmoid(sigmoid(logit + noise) / tau),
    }
}

/// `G_q` over `members` as a `[1, concat]` row.
pub fn tape_pool(tape: &mut Tape, zhat: Var, s: Var, members: &[usize], pool: PoolMode) -> Var {
    let cols = tape.value(zhat).cols();
    if members.is_empty() {
        return tape.leaf(Tensor::zeros(1, cols));
    }
    let idx = Arc::new(members.to_vec());
    let w = tape.gather_rows(s, idx.clone());
    let rows = tape.gather_rows(zhat, idx);
    let wt = tape.transpose(w);
    let sum = tape.matmul(wt, rows);
    match pool {
        PoolMode::Sum => sum,
        PoolMode::Mean => {
            let total = tape.sum(w);
            let one = tape.constant(1.0);
            let inv = tape.div(one, total);
            tape.matmul(inv, sum)
        }
    }
}

pub fn pooled_repr(zhat: &Tensor, s: &[f64], members: &[usize], pool: PoolMode) -> Result<Vec<f64>> {
    if s.len() != zhat.rows() {
        return Err(Error::Shape(format!("{} gates for {} rows", s.len(), zhat.rows())));
    }
    if let Some(&e) = members.iter().find(|&&e| e >= s.len()) {
        return Err(Error::Shape(format!("member {e} out of range")));
    }
    let mut tape = Tape::new();
    let z = tape.leaf(zhat.clone());
    let sv = tape.leaf(Tensor::column(s.to_vec()));
    let out = tape_pool(&mut tape, z, sv, members, pool);
    Ok(tape.value(out).data().to_vec())
}

/// `Σ_e S_e`.
pub fn tape_size(tape: &mut Tape, s: Var) -> Var {
    tape.sum(s)
}

/// `sᵀ L s`.
pub fn tape_con(tape: &mut Tape, s: Var, laplacian: &Arc<SparseMatrix>) -> Var {
    let ls = tape.sparse_mul(laplacian.clone(), s);
    let prod = tape.mul(s, ls);
    tape.sum(prod)
}

pub fn loss_size(s: &[f64]) -> f64 {
    s.iter().sum()
}

pub fn loss_con(s: &[f64], laplacian: &SparseMatrix) -> Result<f64> {
    if laplacian.n_rows() != s.len() || laplacian.n_cols() != s.len() {
        return Err(Error::Shape(format!("Laplacian is {}x{}, vector has {} entries", laplacian.n_rows(), laplacian.n_cols(), s.len())));
    }
    Ok(laplacian.quadratic_form(s))
}

/// InfoNCE over a batch of projected subgraph rows and query rows, both
/// `[1, d]`, averaged over anchors.
pub fn tape_nce(tape: &mut Tape, pooled: &[Var], queries: &[Var], tau: f64, mode: NceMode) -> Result<Var> {
    if pooled.is_empty() || pooled.len() != queries.len() {
        return Err(Error::Validation(format!("NCE needs a non-empty matched batch (got {} and {})", pooled.len(), queries.len())));
    }
    if !(tau > 0.0) {
        return Err(Error::Parameter(format!("tau_nce must be positive, got {tau}")));
    }
    let b = pooled.len();
    match mode {
        NceMode::Matched => {
            let sims: Vec<Var> = pooled.iter().zip(queries).map(|(&g, &q)| tape.cosine_rows(g, q)).collect();
            let row = tape.concat_cols(&sims);
            let row = tape.scale(row, 1.0 / tau);
            let ls = tape.log_softmax(row);
            let m = tape.mean(ls);
            Ok(tape.neg(m))
        }
        NceMode::CrossPairs => {
            let mut terms = Vec::with_capacity(b);
            for (i, &g) in pooled.iter().enumerate() {
                let sims: Vec<Var> = queries.iter().map(|&q| tape.cosine_rows(g, q)).collect();
                let row = tape.concat_cols(&sims);
                let row = tape.scale(row, 1.0 / tau);
                let ls = tape.log_softmax(row);
                let col = tape.transpose(ls);
                terms.push(tape.gather_rows(col, Arc::new(vec![i])));
            }
            let row = tape.concat_cols(&terms);
            let m = tape.mean(row);
            Ok(tape.neg(m))
        }
    }
}

pub fn loss_nce(pooled: &[Vec<f64>], queries: &[Vec<f64>], tau: f64, mode: NceMode) -> Result<f64> {
    let mut tape = Tape::new();
    let g: Vec<Var> = pooled.iter().map(|r| tape.leaf(Tensor::row(r.clone()))).collect();
    let q: Vec<Var> = queries.iter().map(|r| tape.leaf(Tensor::row(r.clone()))).collect();
    let out = tape_nce(&mut tape, &g, &q, tau, mode)?;
    Ok(tape.value(out).item())
}

/// One update of the selector on `batch`; the backbone is never touched.
pub fn finetune_step(
    selector: &mut SelectorModel,
    batch: &[&FinetuneExample],
    laplacian: &Arc<SparseMatrix>,
    config: &FinetuneConfig,
    opt: &mut Optimizer,
    gumbel: &mut SeededRng,
) -> Result<f64> {
    let noise: Vec<Option<Tensor>> = batch.iter().map(|ex| Some(gumbel_noise(ex.z_star.rows(), gumbel))).collect();
    let mut tape = Tape::new();
    let vars = selector.params.bind(&mut tape);
    let loss = selector.tape_batch_loss(&mut tape, &vars, batch, &noise, laplacian, config)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("fine-tune loss {value}")));
    }
    let grads = tape.backward(loss);
    selector.params.accumulate(&grads, &vars);
    if !selector.params.grads_finite() {
        selector.params.zero_grad();
        return Err(Error::NonFinite("fine-tune gradient".into()));
    }
    opt.step(&mut selector.params);
    Ok(value)
}

/// Precomputes frozen states for every query.
pub fn prepare_examples(data: TrainingData<'_>, gfm: &GfmModel, queries: &[LabeledQuery]) -> Result<Vec<FinetuneExample>> {
    queries.iter().map(|q| FinetuneExample::from_labeled(data, gfm, q)).collect()
}

/// `epochs` passes over shuffled batches of `examples`. Log entries use
/// phase 3.
pub fn finetune_model(kg: &KnowledgeGraph, selector: &mut SelectorModel, examples: &[FinetuneExample], config: &FinetuneConfig, seed: u64) -> Result<TrainLog> {
    config.validate()?;
    if examples.is_empty() {
        return Err(Error::Validation("fine-tuning needs at least one query".into()));
    }
    let laplacian = Arc::new(normalized_laplacian(kg));
    let mut opt = Optimizer::new(config.optimizer, config.lr);
    let mut shuffle = SeededRng::substream(seed, "selector/shuffle");
    let mut gumbel = SeededRng::substream(seed, "selector/gumbel");
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut step = 0;
    for _ in 0..config.epochs {
        order.shuffle(&mut shuffle);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&FinetuneExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let loss = finetune_step(selector, &batch, &laplacian, config, &mut opt, &mut gumbel)?;
            log.push(3, step, loss);
            step += 1;
        }
    }
    Ok(log)
}

/// Fresh selector fine-tuned against the frozen `gfm`.
pub fn finetune(data: TrainingData<'_>, gfm: &GfmModel, queries: &[LabeledQuery], prompt_dim: usize, config: &FinetuneConfig, seed: u64) -> Result<(SelectorModel, TrainLog)> {
    let gc = gfm.config();
    let mut selector = SelectorModel::new(gc.hidden, gc.text_dim, prompt_dim, seed)?;
    let examples = prepare_examples(data, gfm, queries)?;
    let log = finetune_model(data.kg, &mut selector, &examples, config, seed)?;
    Ok((selector, log))
}

/// Mean deterministic `Σ_e S_e` over `examples`.
pub fn mean_gate_mass(selector: &SelectorModel, examples: &[FinetuneExample], config: &FinetuneConfig) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let mut unused = SeededRng::new(0);
    let mut total = 0.0;
    for ex in examples {
        let s = selector.gate_probabilities(&ex.z_star, &ex.q, config.tau_gumbel, config.gate, Sampling::Deterministic, &mut unused)?;
        total += loss_size(&s);
    }
    Ok(total / examples.len() as f64)
}
