//! Query-conditioned message passing over the knowledge graph.
//!
//! Entity states start from the projected query on mentioned entities and
//! zero elsewhere; each layer sends `g(Z_r) ⊙ Z_u` along every edge
//! `(u, r, v)`, sums at `v`, and updates with a linear map plus ReLU.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointHeader};
use crate::error::{Error, Result};
use crate::kg::{EmbeddingProvider, KnowledgeGraph};
use crate::numerics::{ParamSet, SeededRng, Tape, Tensor, Var};

pub const CHECKPOINT_TAG: &str = "gfm";

const PER_LAYER: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GfmConfig {
    pub hidden: usize,
    pub layers: usize,
    pub text_dim: usize,
}

impl Default for GfmConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            layers: 3,
            text_dim: 16,
        }
    }
}

impl GfmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.layers == 0 || self.text_dim == 0 {
            return Err(Error::Config(format!(
                "model dimensions must be positive (hidden {}, layers {}, text_dim {})",
                self.hidden, self.layers, self.text_dim
            )));
        }
        Ok(())
    }
}

/// The query: its text embedding and the entities it mentions.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryContext {
    pub q: Vec<f64>,
    pub mentioned: Vec<usize>,
}

impl QueryContext {
    pub fn new(q: Vec<f64>, mut mentioned: Vec<usize>) -> Self {
        mentioned.sort_unstable();
        mentioned.dedup();
        Self { q, mentioned }
    }
}

/// Edge lists and relation text embeddings in the layout the forward pass
/// consumes. Built once per graph.
#[derive(Clone, Debug)]
pub struct GraphView {
    num_entities: usize,
    src: Arc<Vec<usize>>,
    dst: Arc<Vec<usize>>,
    rel: Arc<Vec<usize>>,
    relation_text: Tensor,
}

impl GraphView {
    pub fn new(kg: &KnowledgeGraph, provider: &EmbeddingProvider) -> Result<Self> {
        let dim = provider.dim();
        let mut data = Vec::with_capacity(kg.num_relations() * dim);
        for r in kg.relations() {
            data.extend(provider.embed(&r.name)?);
        }
        let relation_text = Tensor::matrix(kg.num_relations(), dim, data)?;
        Ok(Self::from_parts(kg, relation_text))
    }

    /// Uses caller-supplied relation features (one row per relation).
    pub fn from_parts(kg: &KnowledgeGraph, relation_text: Tensor) -> Self {
        let t = kg.triples();
        Self {
            num_entities: kg.num_entities(),
            src: Arc::new(t.iter().map(|t| t.head).collect()),
            dst: Arc::new(t.iter().map(|t| t.tail).collect()),
            rel: Arc::new(t.iter().map(|t| t.relation).collect()),
            relation_text,
        }
    }

    pub fn num_entities(&self) -> usize {
        self.num_entities
    }

    pub fn text_dim(&self) -> usize {
        self.relation_text.cols()
    }
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// Final entity states, `[|V|, hidden]`.
    pub states: Var,
    /// Score-head outputs before the sigmoid, `[|V|, 1]`.
    pub logits: Var,
    /// Relevance probabilities, `[|V|, 1]`.
    pub scores: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GfmModel {
    config: GfmConfig,
    params: ParamSet,
}

fn glorot(rng: &mut SeededRng, rows: usize, cols: usize) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.uniform_range(-a, a)).collect();
    Tensor::matrix(rows, cols, data).expect("glorot shape")
}

impl GfmModel {
    /// Glorot-uniform weights, zero biases.
    pub fn new(config: GfmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::substream(seed, "gfm/init");
        let h = config.hidden;
        let mut params = ParamSet::new();
        params.push("input_projection", glorot(&mut rng, config.text_dim, h));
        for l in 0..config.layers {
            params.push(format!("layer{l}.relation_w1"), glorot(&mut rng, h, h));
            params.push(format!("layer{l}.relation_b1"), Tensor::zeros(1, h));
            params.push(format!("layer{l}.relation_w2"), glorot(&mut rng, h, h));
            params.push(format!("layer{l}.relation_b2"), Tensor::zeros(1, h));
            params.push(format!("layer{l}.w_self"), glorot(&mut rng, h, h));
            params.push(format!("layer{l}.w_agg"), glorot(&mut rng, h, h));
            params.push(format!("layer{l}.bias"), Tensor::zeros(1, h));
        }
        params.push("score_w1", glorot(&mut rng, h, h));
        params.push("score_b1", Tensor::zeros(1, h));
        params.push("score_w2", glorot(&mut rng, h, 1));
        params.push("score_b2", Tensor::zeros(1, 1));
        Ok(Self { config, params })
    }

    /// Same shapes as [`new`](Self::new) with every entry zero.
    pub fn zeros(config: GfmConfig) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        let zeros = m.params.values().iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect();
        m.params.set_values(zeros)?;
        Ok(m)
    }

    pub fn config(&self) -> &GfmConfig {
        &self.config
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

    fn layer_base(l: usize) -> usize {
        1 + PER_LAYER * l
    }

    fn score_base(&self) -> usize {
        1 + PER_LAYER * self.config.layers
    }

    fn check_inputs(&self, view: &GraphView, ctx: &QueryContext) -> Result<()> {
        if view.text_dim() != self.config.text_dim || ctx.q.len() != self.config.text_dim {
            return Err(Error::Shape(format!(
                "model text_dim {} but relation features have {} and query has {}",
                self.config.text_dim,
                view.text_dim(),
                ctx.q.len()
            )));
        }
        if let Some(&e) = ctx.mentioned.iter().find(|&&e| e >= view.num_entities) {
            return Err(Error::Validation(format!("mentioned entity {e} is not in the graph")));
        }
        Ok(())
    }

    /// Initial entity and relation states on `tape`.
    pub fn tape_init(&self, tape: &mut Tape, vars: &[Var], view: &GraphView, ctx: &QueryContext) -> (Var, Var) {
        let h = self.config.hidden;
        let w_in = vars[0];
        let z0 = if ctx.mentioned.is_empty() {
            tape.leaf(Tensor::zeros(view.num_entities, h))
        } else {
            let q = tape.leaf(Tensor::row(ctx.q.clone()));
            let qp = tape.matmul(q, w_in);
            let rows = tape.broadcast_row(qp, ctx.mentioned.len());
            tape.scatter_add_rows(rows, Arc::new(ctx.mentioned.clone()), view.num_entities)
        };
        let rt = tape.leaf(view.relation_text.clone());
        let zr0 = tape.matmul(rt, w_in);
        (z0, zr0)
    }

    /// One round of message passing on `tape`.
    pub fn tape_layer(&self, tape: &mut Tape, vars: &[Var], view: &GraphView, l: usize, z: Var, zr: Var) -> (Var, Var) {
        let p = &vars[Self::layer_base(l)..Self::layer_base(l) + PER_LAYER];
        let (w1, b1, w2, b2, w_self, w_agg, bias) = (p[0], p[1], p[2], p[3], p[4], p[5], p[6]);

        let hid = tape.matmul(zr, w1);
        let hid = tape.add_row(hid, b1);
        let hid = tape.relu(hid);
        let g = tape.matmul(hid, w2);
        let g = tape.add_row(g, b2);

        let self_term = tape.matmul(z, w_self);
        let pre = if view.src.is_empty() {
            self_term
        } else {
            let zu = tape.gather_rows(z, view.src.clone());
            let gr = tape.gather_rows(g, view.rel.clone());
            let msg = tape.mul(gr, zu);
            let agg = tape.scatter_add_rows(msg, view.dst.clone(), view.num_entities);
            let agg_term = tape.matmul(agg, w_agg);
            tape.add(self_term, agg_term)
        };
        let pre = tape.add_row(pre, bias);
        (tape.relu(pre), g)
    }

    /// Score head applied row-wise; returns `(MLP(Z), sigmoid(MLP(Z)))`.
    pub fn tape_scores(&self, tape: &mut Tape, vars: &[Var], z: Var) -> (Var, Var) {
        let s = self.score_base();
        let hid = tape.matmul(z, vars[s]);
        let hid = tape.add_row(hid, vars[s + 1]);
        let hid = tape.relu(hid);
        let logit = tape.matmul(hid, vars[s + 2]);
        let logit = tape.add_row(logit, vars[s + 3]);
        (logit, tape.sigmoid(logit))
    }

    /// Full forward pass; `vars` come from binding [`params`](Self::params).
    pub fn tape_forward(&self, tape: &mut Tape, vars: &[Var], view: &GraphView, ctx: &QueryContext) -> Result<ForwardVars> {
        self.check_inputs(view, ctx)?;
        let (mut z, mut zr) = self.tape_init(tape, vars, view, ctx);
        for l in 0..self.config.layers {
            (z, zr) = self.tape_layer(tape, vars, view, l, z, zr);
        }
        let (logits, scores) = self.tape_scores(tape, vars, z);
        Ok(ForwardVars {
            states: z,
            logits,
            scores,
        })
    }

    pub fn init_states(&self, view: &GraphView, ctx: &QueryContext) -> Result<(Tensor, Tensor)> {
        self.check_inputs(view, ctx)?;
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape);
        let (z, zr) = self.tape_init(&mut tape, &vars, view, ctx);
        Ok((tape.value(z).clone(), tape.value(zr).clone()))
    }

    pub fn layer_forward(&self, view: &GraphView, l: usize, z: &Tensor, zr: &Tensor) -> Result<(Tensor, Tensor)> {
        if l >= self.config.layers {
            return Err(Error::Parameter(format!("layer {l} out of range ({} layers)", self.config.layers)));
        }
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape);
        let z = tape.leaf(z.clone());
        let zr = tape.leaf(zr.clone());
        let (z, zr) = self.tape_layer(&mut tape, &vars, view, l, z, zr);
        Ok((tape.value(z).clone(), tape.value(zr).clone()))
    }

    /// Final entity states and relevance scores for one query.
    pub fn forward(&self, view: &GraphView, ctx: &QueryContext) -> Result<(Tensor, Vec<f64>)> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape);
        let out = self.tape_forward(&mut tape, &vars, view, ctx)?;
        let scores = tape.value(out.scores).data().to_vec();
        Ok((tape.value(out.states).clone(), scores))
    }

    /// `P_q(e)` for every entity.
    pub fn relevance_scores(&self, view: &GraphView, ctx: &QueryContext) -> Result<Vec<f64>> {
        Ok(self.forward(view, ctx)?.1)
    }

    pub fn header(&self) -> CheckpointHeader {
        CheckpointHeader {
            tag: CHECKPOINT_TAG.to_string(),
            hidden: self.config.hidden,
            layers: self.config.layers,
            text_dim: self.config.text_dim,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.header(), &self.params)
    }

    /// Loads weights, rejecting any header or tensor-shape mismatch with
    /// `config`.
    pub fn load(path: &Path, config: GfmConfig) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        let header = model.header();
        checkpoint::load_into(path, &header, &mut model.params)?;
        Ok(model)
    }
}
