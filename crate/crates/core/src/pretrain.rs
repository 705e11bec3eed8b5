//! Two-phase pre-training of the retriever.
//!
//! Phase I is masked-triple completion (BCE + ranking loss). Phase II pulls
//! final entity states towards per-domain prototypes and contrasts the
//! query's score distribution against a shuffled prototype assignment.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::sync::Arc;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gfm::{GfmConfig, GfmModel, GraphView, QueryContext};
use crate::kg::{EmbeddingProvider, KnowledgeGraph};
use crate::numerics::{cosine_sim, Optimizer, OptimizerKind, SeededRng, Tape, Tensor, Var, KL_SMOOTHING};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskedSide {
    Head,
    Tail,
}

/// A masked triple `(known, r, ?)` or `(?, r, known)` with its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoQuery {
    pub side: MaskedSide,
    pub known: usize,
    pub relation: usize,
    pub answer: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

impl PseudoQuery {
    pub fn text(&self, kg: &KnowledgeGraph) -> String {
        format!("{} {}", kg.entities()[self.known].name, kg.relations()[self.relation].name)
    }

    pub fn context(&self, kg: &KnowledgeGraph, provider: &EmbeddingProvider) -> Result<QueryContext> {
        Ok(QueryContext::new(provider.embed(&self.text(kg))?, vec![self.known]))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankLoss {
    /// `−mean_{V⁺} P(e) / Σ_{V⁻} P(e′)`.
    #[default]
    Ratio,
    /// `−mean_{V⁺} log softmax` of the positive logit against all negatives.
    LogRatio,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub tau_proto: f64,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub rank_loss: RankLoss,
    pub batch_size: usize,
    pub phase1_steps: usize,
    pub phase2_epochs: usize,
    pub negatives_per_query: usize,
    pub proto_sample_per_domain: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha1: 0.3,
            alpha2: 0.1,
            alpha3: 0.1,
            tau_proto: 0.1,
            lr: 5e-4,
            optimizer: OptimizerKind::Sgd,
            rank_loss: RankLoss::Ratio,
            batch_size: 4,
            phase1_steps: 2000,
            phase2_epochs: 20,
            negatives_per_query: 128,
            proto_sample_per_domain: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.alpha1) {
            return bad(format!("alpha1 must lie in [0, 1], got {}", self.alpha1));
        }
        if self.alpha2 < 0.0 || self.alpha3 < 0.0 {
            return bad("alpha2 and alpha3 must be non-negative".into());
        }
        if !(self.tau_proto > 0.0) {
            return bad(format!("tau_proto must be positive, got {}", self.tau_proto));
        }
        if !(self.lr >= 0.0) {
            return bad(format!("lr must be non-negative, got {}", self.lr));
        }
        if self.batch_size == 0 || self.negatives_per_query == 0 || self.proto_sample_per_domain == 0 {
            return bad("batch_size, negatives_per_query and proto_sample_per_domain must be >= 1".into());
        }
        Ok(())
    }
}

/// Graph, its tensor view and the embedding source used to build queries.
#[derive(Clone, Copy)]
pub struct TrainingData<'a> {
    pub kg: &'a KnowledgeGraph,
    pub view: &'a GraphView,
    pub provider: &'a EmbeddingProvider,
}

fn completions(kg: &KnowledgeGraph, side: MaskedSide, known: usize, relation: usize) -> Vec<usize> {
    let set: BTreeSet<usize> = match side {
        MaskedSide::Tail => kg
            .outgoing(known)
            .iter()
            .map(|&k| kg.triples()[k])
            .filter(|t| t.relation == relation)
            .map(|t| t.tail)
            .collect(),
        MaskedSide::Head => kg
            .incoming(known)
            .iter()
            .map(|&k| kg.triples()[k])
            .filter(|t| t.relation == relation)
            .map(|t| t.head)
            .collect(),
    };
    set.into_iter().collect()
}

fn build_query(kg: &KnowledgeGraph, triple: usize, side: MaskedSide, rng: &mut SeededRng, k: usize) -> PseudoQuery {
    let t = kg.triples()[triple];
    let (known, answer) = match side {
        MaskedSide::Tail => (t.head, t.tail),
        MaskedSide::Head => (t.tail, t.head),
    };
    let positives = completions(kg, side, known, t.relation);
    let pool: Vec<usize> = (0..kg.num_entities())
        .filter(|e| positives.binary_search(e).is_err())
        .collect();
    let take = k.min(pool.len());
    let mut negatives: Vec<usize> = index::sample(rng, pool.len(), take).into_iter().map(|i| pool[i]).collect();
    negatives.sort_unstable();
    PseudoQuery {
        side,
        known,
        relation: t.relation,
        answer,
        positives,
        negatives,
    }
}

fn draw_side(rng: &mut SeededRng) -> MaskedSide {
    if rng.below(2) == 0 {
        MaskedSide::Head
    } else {
        MaskedSide::Tail
    }
}

/// Uniform triple, uniform side. Positives are every completion of the
/// known pair; negatives are drawn without replacement from the rest.
pub fn sample_masked_triple(kg: &KnowledgeGraph, rng: &mut SeededRng, negatives_per_query: usize) -> Result<PseudoQuery> {
    if kg.num_triples() == 0 {
        return Err(Error::Validation("cannot sample a masked triple from an empty graph".into()));
    }
    let k = rng.below(kg.num_triples());
    let side = draw_side(rng);
    Ok(build_query(kg, k, side, rng, negatives_per_query))
}

/// Like [`sample_masked_triple`] but the answer entity lies in `domain`.
fn sample_in_domain(kg: &KnowledgeGraph, by_answer: &[Vec<(usize, MaskedSide)>], domain: usize, rng: &mut SeededRng, k: usize) -> Result<PseudoQuery> {
    let pool = &by_answer[domain];
    if pool.is_empty() {
        return Err(Error::Validation(format!("no triple has an endpoint in domain {domain}")));
    }
    let (triple, side) = pool[rng.below(pool.len())];
    Ok(build_query(kg, triple, side, rng, k))
}

fn triples_by_answer_domain(kg: &KnowledgeGraph) -> Vec<Vec<(usize, MaskedSide)>> {
    let mut out = vec![Vec::new(); kg.num_domains()];
    for (k, t) in kg.triples().iter().enumerate() {
        out[kg.domain_of(t.tail)].push((k, MaskedSide::Tail));
        out[kg.domain_of(t.head)].push((k, MaskedSide::Head));
    }
    out
}

fn check_labels(n: usize, pos: &[usize], neg: &[usize]) -> Result<()> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Validation(format!(
            "retrieval losses need non-empty positives and negatives (got {} and {})",
            pos.len(),
            neg.len()
        )));
    }
    if let Some(&e) = pos.iter().chain(neg).find(|&&e| e >= n) {
        return Err(Error::Validation(format!("label entity {e} out of range ({n} entities)")));
    }
    Ok(())
}

/// `−mean_{V⁺} log P − mean_{V⁻} log(1 − P)` for probabilities `p`, `[n, 1]`.
pub fn tape_bce(tape: &mut Tape, p: Var, pos: &[usize], neg: &[usize]) -> Result<Var> {
    check_labels(tape.value(p).rows(), pos, neg)?;
    let gp = tape.gather_rows(p, Arc::new(pos.to_vec()));
    let lp = tape.log(gp);
    let a = tape.mean(lp);
    let gn = tape.gather_rows(p, Arc::new(neg.to_vec()));
    let gn = tape.neg(gn);
    let one_minus = tape.add_scalar(gn, 1.0);
    let ln = tape.log(one_minus);
    let b = tape.mean(ln);
    let s = tape.add(a, b);
    Ok(tape.neg(s))
}

/// Same loss as [`tape_bce`] evaluated from logits, stable under saturation.
pub fn tape_bce_logits(tape: &mut Tape, logits: Var, pos: &[usize], neg: &[usize]) -> Result<Var> {
    check_labels(tape.value(logits).rows(), pos, neg)?;
    let gp = tape.gather_rows(logits, Arc::new(pos.to_vec()));
    let lp = tape.log_sigmoid(gp);
    let a = tape.mean(lp);
    let gn = tape.gather_rows(logits, Arc::new(neg.to_vec()));
    let gn = tape.neg(gn);
    let ln = tape.log_sigmoid(gn);
    let b = tape.mean(ln);
    let s = tape.add(a, b);
    Ok(tape.neg(s))
}

/// Literal ratio form: `−(1/|V⁺|) Σ_{V⁺} P(e) / Σ_{V⁻} P(e′)`.
pub fn tape_rank(tape: &mut Tape, p: Var, pos: &[usize], neg: &[usize]) -> Result<Var> {
    check_labels(tape.value(p).rows(), pos, neg)?;
    let gp = tape.gather_rows(p, Arc::new(pos.to_vec()));
    let sp = tape.sum(gp);
    let gn = tape.gather_rows(p, Arc::new(neg.to_vec()));
    let sn = tape.sum(gn);
    let r = tape.div(sp, sn);
    Ok(tape.scale(r, -1.0 / pos.len() as f64))
}

/// `−mean_{V⁺} [s_e − log(exp(s_e) + Σ_{V⁻} exp(s_e′))]` over logits `s`.
pub fn tape_rank_log(tape: &mut Tape, logits: Var, pos: &[usize], neg: &[usize]) -> Result<Var> {
    check_labels(tape.value(logits).rows(), pos, neg)?;
    let gp = tape.gather_rows(logits, Arc::new(pos.to_vec()));
    let gn = tape.gather_rows(logits, Arc::new(neg.to_vec()));
    // Shift by the largest logit for stability; the loss is shift-invariant.
    let shift = tape
        .value(gp)
        .data()
        .iter()
        .chain(tape.value(gn).data())
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let gp_s = tape.add_scalar(gp, -shift);
    let gn_s = tape.add_scalar(gn, -shift);
    let en = tape.exp(gn_s);
    let sn = tape.sum(en);
    let ep = tape.exp(gp_s);
    let denom = tape.add_row(ep, sn);
    let log_denom = tape.log(denom);
    let diff = tape.sub(gp_s, log_denom);
    let m = tape.mean(diff);
    Ok(tape.neg(m))
}

fn eval_scalar(p: &[f64], f: impl FnOnce(&mut Tape, Var) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let v = tape.leaf(Tensor::column(p.to_vec()));
    let out = f(&mut tape, v)?;
    Ok(tape.value(out).item())
}

pub fn loss_bce(p: &[f64], pos: &[usize], neg: &[usize]) -> Result<f64> {
    eval_scalar(p, |t, v| tape_bce(t, v, pos, neg))
}

pub fn loss_rank(p: &[f64], pos: &[usize], neg: &[usize]) -> Result<f64> {
    eval_scalar(p, |t, v| tape_rank(t, v, pos, neg))
}

/// Per-domain mean entity states, one row per domain.
#[derive(Clone, Debug, PartialEq)]
pub struct Prototypes {
    pub centers: Tensor,
}

impl Prototypes {
    /// Averages `states[i]` (a row each) by `domains[i]`. Every domain in
    /// `0..num_domains` must receive at least one row.
    pub fn from_states(states: &Tensor, domains: &[usize], num_domains: usize) -> Result<Self> {
        if states.rows() != domains.len() {
            return Err(Error::Shape(format!("{} states but {} domain labels", states.rows(), domains.len())));
        }
        let h = states.cols();
        let mut sums = Tensor::zeros(num_domains, h);
        let mut counts = vec![0usize; num_domains];
        for (i, &d) in domains.iter().enumerate() {
            if d >= num_domains {
                return Err(Error::Validation(format!("unknown domain {d}")));
            }
            counts[d] += 1;
            for (j, x) in states.row_slice(i).iter().enumerate() {
                sums.set(d, j, sums.get(d, j) + x);
            }
        }
        let empty: Vec<usize> = (0..num_domains).filter(|&d| counts[d] == 0).collect();
        if !empty.is_empty() {
            return Err(Error::Validation(format!("no sampled pairs for domains {empty:?}")));
        }
        for (d, &c) in counts.iter().enumerate() {
            for j in 0..h {
                sums.set(d, j, sums.get(d, j) / c as f64);
            }
        }
        Ok(Self { centers: sums })
    }

    pub fn num_domains(&self) -> usize {
        self.centers.rows()
    }
}

/// A sampled `(query, entity)` pair for prototype construction.
#[derive(Clone, Debug, PartialEq)]
pub struct ProtoPair {
    pub context: QueryContext,
    pub entity: usize,
    pub domain: usize,
}

/// Prototypes from final-layer states, each pair under its own query.
pub fn compute_prototypes(model: &GfmModel, view: &GraphView, pairs: &[ProtoPair], num_domains: usize) -> Result<Prototypes> {
    let h = model.config().hidden;
    let mut data = Vec::with_capacity(pairs.len() * h);
    for p in pairs {
        let (z, _) = model.forward(view, &p.context)?;
        data.extend_from_slice(z.row_slice(p.entity));
    }
    let states = Tensor::matrix(pairs.len(), h, data)?;
    let domains: Vec<usize> = pairs.iter().map(|p| p.domain).collect();
    Prototypes::from_states(&states, &domains, num_domains)
}

/// `[m, D]` matrix of `cos(Z_i, c_d) / τ`.
fn proto_logits(tape: &mut Tape, states: Var, protos: &Prototypes, tau: f64) -> Var {
    let m = tape.value(states).rows();
    let mut cols = Vec::with_capacity(protos.num_domains());
    for d in 0..protos.num_domains() {
        let c = tape.leaf(Tensor::row(protos.centers.row_slice(d).to_vec()));
        let cb = tape.broadcast_row(c, m);
        cols.push(tape.cosine_rows(states, cb));
    }
    let all = tape.concat_cols(&cols);
    tape.scale(all, 1.0 / tau)
}

/// `−Σ_i log softmax_d(cos(Z_i, c_d)/τ)[d_i]`. Prototypes are constants.
pub fn tape_proto(tape: &mut Tape, states: Var, domains: &[usize], protos: &Prototypes, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Parameter(format!("prototype temperature must be positive, got {tau}")));
    }
    if tape.value(states).rows() != domains.len() {
        return Err(Error::Shape("one domain label per state row required".into()));
    }
    if let Some(&d) = domains.iter().find(|&&d| d >= protos.num_domains()) {
        return Err(Error::Validation(format!("unknown domain {d}")));
    }
    let logits = proto_logits(tape, states, protos, tau);
    let mut terms = Vec::with_capacity(domains.len());
    for (i, &d) in domains.iter().enumerate() {
        let row = tape.gather_rows(logits, Arc::new(vec![i]));
        let ls = tape.log_softmax(row);
        let col = tape.transpose(ls);
        terms.push(tape.gather_rows(col, Arc::new(vec![d])));
    }
    let stacked = tape.concat_cols(&terms);
    let s = tape.sum(stacked);
    Ok(tape.neg(s))
}

pub fn loss_proto(states: &Tensor, domains: &[usize], protos: &Prototypes, tau: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let z = tape.leaf(states.clone());
    let out = tape_proto(&mut tape, z, domains, protos, tau)?;
    Ok(tape.value(out).item())
}

/// Uniform permutation of `0..n`, redrawn until it is not the identity.
pub fn sample_shuffle(n: usize, rng: &mut SeededRng) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(Error::Validation(format!("prototype shuffling needs at least 2 domains, got {n}")));
    }
    let identity: Vec<usize> = (0..n).collect();
    loop {
        let mut p = identity.clone();
        p.shuffle(rng);
        if p != identity {
            return Ok(p);
        }
    }
}

/// `log` of the ε-smoothed softmax over entities of `cos(Z_e, c_{a(e)})`.
fn smoothed_log_dist(tape: &mut Tape, states: Var, centers: &Tensor, assign: Vec<usize>) -> Var {
    let n = assign.len() as f64;
    let c = tape.leaf(centers.clone());
    let g = tape.gather_rows(c, Arc::new(assign));
    let cos = tape.cosine_rows(states, g);
    let ls = tape.log_softmax(cos);
    let p = tape.exp(ls);
    let p = tape.add_scalar(p, KL_SMOOTHING);
    let p = tape.scale(p, 1.0 / (1.0 + n * KL_SMOOTHING));
    tape.log(p)
}

/// `KL(P̂ ‖ P_proto) − KL(P̂ ‖ P_rand)` where `P̂` is `p` L1-normalized,
/// `P_proto(e) ∝ exp(cos(Z_e, c_{d(e)}))` and `P_rand` uses `c_{σ(d(e))}`.
///
/// The `Σ P̂ log P̂` terms cancel, so the result is computed as
/// `Σ P̂ (log P_rand − log P_proto)`, which stays finite when `P̂` has zeros.
pub fn tape_igc(tape: &mut Tape, p: Var, states: Var, domains: &[usize], protos: &Prototypes, sigma: &[usize]) -> Result<Var> {
    let nd = protos.num_domains();
    if nd < 2 {
        return Err(Error::Validation(format!("information-contrast loss needs at least 2 domains, got {nd}")));
    }
    if sigma.len() != nd {
        return Err(Error::Shape(format!("shuffle has {} entries for {nd} domains", sigma.len())));
    }
    let n = tape.value(p).rows();
    if tape.value(states).rows() != n || domains.len() != n {
        return Err(Error::Shape("scores, states and domains must cover the same entities".into()));
    }
    if let Some(&d) = domains.iter().find(|&&d| d >= nd) {
        return Err(Error::Validation(format!("unknown domain {d}")));
    }
    let total = tape.sum(p);
    let total = tape.broadcast_row(total, n);
    let p_hat = tape.div(p, total);
    let log_proto = smoothed_log_dist(tape, states, &protos.centers, domains.to_vec());
    let log_rand = smoothed_log_dist(tape, states, &protos.centers, domains.iter().map(|&d| sigma[d]).collect());
    let diff = tape.sub(log_rand, log_proto);
    let w = tape.mul(p_hat, diff);
    Ok(tape.sum(w))
}

pub fn loss_igc(p: &[f64], states: &Tensor, domains: &[usize], protos: &Prototypes, sigma: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let pv = tape.leaf(Tensor::column(p.to_vec()));
    let z = tape.leaf(states.clone());
    let out = tape_igc(&mut tape, pv, z, domains, protos, sigma)?;
    Ok(tape.value(out).item())
}

/// `α1·L_BCE + (1 − α1)·L_rank` for one forward pass.
pub fn retrieval_loss(tape: &mut Tape, logits: Var, scores: Var, pos: &[usize], neg: &[usize], alpha1: f64, rank: RankLoss) -> Result<Var> {
    let bce = tape_bce_logits(tape, logits, pos, neg)?;
    let rk = match rank {
        RankLoss::Ratio => tape_rank(tape, scores, pos, neg)?,
        RankLoss::LogRatio => tape_rank_log(tape, logits, pos, neg)?,
    };
    let a = tape.scale(bce, alpha1);
    let b = tape.scale(rk, 1.0 - alpha1);
    Ok(tape.add(a, b))
}

fn ensure_finite(loss: f64, phase: u8, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("phase {phase} loss at step {step} is {loss}")))
    }
}

/// One Phase I update on `batch`; returns the mean batch loss.
pub fn phase1_step(data: TrainingData<'_>, model: &mut GfmModel, batch: &[PseudoQuery], config: &TrainConfig, opt: &mut Optimizer) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Validation("empty batch".into()));
    }
    let mut tape = Tape::new();
    let vars = model.params().bind(&mut tape);
    let mut losses = Vec::with_capacity(batch.len());
    for q in batch {
        let ctx = q.context(data.kg, data.provider)?;
        let out = model.tape_forward(&mut tape, &vars, data.view, &ctx)?;
        losses.push(retrieval_loss(&mut tape, out.logits, out.scores, &q.positives, &q.negatives, config.alpha1, config.rank_loss)?);
    }
    let stacked = tape.concat_cols(&losses);
    let loss = tape.mean(stacked);
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("phase 1 loss {value}")));
    }
    let grads = tape.backward(loss);
    model.params_mut().accumulate(&grads, &vars);
    if !model.params().grads_finite() {
        model.params_mut().zero_grad();
        return Err(Error::NonFinite("phase 1 gradient".into()));
    }
    opt.step(model.params_mut());
    Ok(value)
}

/// One Phase II update: `α2·L_proto + α3·mean L_IGC` with prototypes
/// recomputed from the current parameters on `pairs`.
pub fn phase2_step(data: TrainingData<'_>, model: &mut GfmModel, pairs: &[ProtoPair], sigma: &[usize], config: &TrainConfig, opt: &mut Optimizer) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Validation("phase 2 needs sampled pairs".into()));
    }
    let nd = data.kg.num_domains();
    let entity_domains: Vec<usize> = (0..data.kg.num_entities()).map(|e| data.kg.domain_of(e)).collect();
    let mut tape = Tape::new();
    let vars = model.params().bind(&mut tape);
    let mut outs = Vec::with_capacity(pairs.len());
    for p in pairs {
        outs.push(model.tape_forward(&mut tape, &vars, data.view, &p.context)?);
    }
    let picked: Vec<Var> = pairs
        .iter()
        .zip(&outs)
        .map(|(p, o)| tape.gather_rows(o.states, Arc::new(vec![p.entity])))
        .collect();
    let h = model.config().hidden;
    let mut rows = Vec::with_capacity(pairs.len() * h);
    for &v in &picked {
        rows.extend_from_slice(tape.value(v).data());
    }
    let pair_domains: Vec<usize> = pairs.iter().map(|p| p.domain).collect();
    let protos = Prototypes::from_states(&Tensor::matrix(pairs.len(), h, rows)?, &pair_domains, nd)?;

    // Stack picked rows: transpose each [1,h] to [h,1], concat to [h,m], transpose back.
    let cols: Vec<Var> = picked.iter().map(|&v| tape.transpose(v)).collect();
    let stacked = tape.concat_cols(&cols);
    let states = tape.transpose(stacked);
    let proto = tape_proto(&mut tape, states, &pair_domains, &protos, config.tau_proto)?;

    let mut igc_terms = Vec::with_capacity(outs.len());
    for o in &outs {
        igc_terms.push(tape_igc(&mut tape, o.scores, o.states, &entity_domains, &protos, sigma)?);
    }
    let igc_all = tape.concat_cols(&igc_terms);
    let igc = tape.mean(igc_all);
    let a = tape.scale(proto, config.alpha2);
    let b = tape.scale(igc, config.alpha3);
    let loss = tape.add(a, b);
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("phase 2 loss {value}")));
    }
    let grads = tape.backward(loss);
    model.params_mut().accumulate(&grads, &vars);
    if !model.params().grads_finite() {
        model.params_mut().zero_grad();
        return Err(Error::NonFinite("phase 2 gradient".into()));
    }
    opt.step(model.params_mut());
    Ok(value)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub phase: u8,
    pub step: usize,
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub phase1_final_loss: Option<f64>,
    pub phase2_final_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finetune_final_loss: Option<f64>,
    pub steps: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
}

impl TrainLog {
    pub fn push(&mut self, phase: u8, step: usize, loss: f64) {
        self.entries.push(LogEntry { phase, step, loss });
    }

    pub fn summary(&self) -> TrainSummary {
        let last = |ph: u8| self.entries.iter().rev().find(|e| e.phase == ph).map(|e| e.loss);
        TrainSummary {
            phase1_final_loss: last(1),
            phase2_final_loss: last(2),
            finetune_final_loss: last(3),
            steps: self.entries.len(),
        }
    }

    /// `phase<TAB>step<TAB>loss` lines followed by the JSON summary.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            writeln!(s, "{}\t{}\t{:e}", e.phase, e.step, e.loss).expect("string write");
        }
        s.push_str(&serde_json::to_string(&self.summary()).expect("summary serializes"));
        s.push('\n');
        s
    }

    pub fn losses(&self, phase: u8) -> Vec<f64> {
        self.entries.iter().filter(|e| e.phase == phase).map(|e| e.loss).collect()
    }
}

/// Samples `proto_sample_per_domain` pairs for every domain.
pub fn sample_proto_pairs(data: TrainingData<'_>, per_domain: usize, negatives: usize, rng: &mut SeededRng) -> Result<Vec<ProtoPair>> {
    let by_answer = triples_by_answer_domain(data.kg);
    let mut pairs = Vec::with_capacity(by_answer.len() * per_domain);
    for d in 0..by_answer.len() {
        for _ in 0..per_domain {
            let q = sample_in_domain(data.kg, &by_answer, d, rng, negatives)?;
            pairs.push(ProtoPair {
                context: q.context(data.kg, data.provider)?,
                entity: q.answer,
                domain: d,
            });
        }
    }
    Ok(pairs)
}

/// Continues training `model` through both phases.
pub fn train_model(data: TrainingData<'_>, model: &mut GfmModel, config: &TrainConfig, seed: u64, mut on_step: impl FnMut(&LogEntry)) -> Result<TrainLog> {
    config.validate()?;
    let mut log = TrainLog::default();
    let mut opt = Optimizer::new(config.optimizer, config.lr);
    let mut neg_rng = SeededRng::substream(seed, "pretrain/negatives");
    for step in 0..config.phase1_steps {
        let batch = (0..config.batch_size)
            .map(|_| sample_masked_triple(data.kg, &mut neg_rng, config.negatives_per_query))
            .collect::<Result<Vec<_>>>()?;
        let loss = phase1_step(data, model, &batch, config, &mut opt)?;
        ensure_finite(loss, 1, step)?;
        log.push(1, step, loss);
        on_step(log.entries.last().unwrap());
    }
    if config.phase2_epochs > 0 && (config.alpha2 > 0.0 || config.alpha3 > 0.0) {
        let mut pair_rng = SeededRng::substream(seed, "pretrain/prototypes");
        let mut shuffle_rng = SeededRng::substream(seed, "pretrain/shuffle");
        let mut opt2 = Optimizer::new(config.optimizer, config.lr);
        for epoch in 0..config.phase2_epochs {
            let pairs = sample_proto_pairs(data, config.proto_sample_per_domain, config.negatives_per_query, &mut pair_rng)?;
            let sigma = sample_shuffle(data.kg.num_domains(), &mut shuffle_rng)?;
            let loss = phase2_step(data, model, &pairs, &sigma, config, &mut opt2)?;
            ensure_finite(loss, 2, epoch)?;
            log.push(2, epoch, loss);
            on_step(log.entries.last().unwrap());
        }
    }
    Ok(log)
}

/// Fresh initialization followed by [`train_model`].
pub fn train(data: TrainingData<'_>, model_config: GfmConfig, config: &TrainConfig, seed: u64) -> Result<(GfmModel, TrainLog)> {
    let mut model = GfmModel::new(model_config, seed)?;
    let log = train_model(data, &mut model, config, seed, |_| {})?;
    Ok((model, log))
}

/// Mean pairwise cosine between pair states that share a domain.
pub fn within_domain_alignment(model: &GfmModel, view: &GraphView, pairs: &[ProtoPair]) -> Result<f64> {
    let mut states = Vec::with_capacity(pairs.len());
    for p in pairs {
        states.push(model.forward(view, &p.context)?.0.row_slice(p.entity).to_vec());
    }
    let (mut total, mut count) = (0.0, 0usize);
    for i in 0..pairs.len() {
        for j in i + 1..pairs.len() {
            if pairs[i].domain == pairs[j].domain {
                total += cosine_sim(&states[i], &states[j]);
                count += 1;
            }
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}
