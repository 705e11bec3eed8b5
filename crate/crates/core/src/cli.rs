//! Subcommand implementations. Each returns a short human-readable summary
//! and writes its artifacts under the configured output directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{self, generate_synthetic, random_baseline, rank_by_score, read_queries, validate_dataset, write_queries, MetricsReport, QueryRanking, DEFAULT_KS};
use crate::gfm::{GfmModel, GraphView};
use crate::inference::Retriever;
use crate::kg::io::{load_corpus, load_kg_dir, read_text, write_corpus, write_kg_dir, write_text, CORPUS_FILE};
use crate::kg::{resolve_entities, Corpus, EmbeddingProvider, EntityDocIndex, KnowledgeGraph};
use crate::pretrain::{train_model, TrainingData};
use crate::selector::{finetune, SelectorModel};

pub const GFM_CHECKPOINT: &str = "gfm.ckpt";
pub const SELECTOR_CHECKPOINT: &str = "selector.ckpt";

impl Error {
    /// Process exit status for this error: 2 config/validation, 3 numeric
    /// failure, 4 missing artifact.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite(_) | Error::NonDeterministic { .. } => 3,
            Error::MissingArtifact(_) => 4,
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 4,
            _ => 2,
        }
    }
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact(path.to_path_buf()))
    }
}

fn write_json_pretty<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

/// Graph, corpus, index and text encoder as produced by `index`.
pub struct Indexed {
    pub kg: KnowledgeGraph,
    pub corpus: Corpus,
    pub index: EntityDocIndex,
    pub provider: EmbeddingProvider,
}

fn load_indexed(config: &RunConfig) -> Result<Indexed> {
    let layout = config.layout();
    let dir = layout.index_dir();
    require(&dir)?;
    let kg = load_kg_dir(&dir)?;
    let corpus = load_corpus(&config.corpus_source(), &kg)?;
    let index = EntityDocIndex::read(&layout.index_file(), kg.num_entities())?;
    if index.num_docs() != corpus.len() {
        return Err(Error::Validation(format!(
            "index has {} documents but the corpus has {}; rerun `index`",
            index.num_docs(),
            corpus.len()
        )));
    }
    Ok(Indexed {
        kg,
        corpus,
        index,
        provider: config.provider()?,
    })
}

fn load_gfm(config: &RunConfig) -> Result<GfmModel> {
    GfmModel::load(&config.checkpoint_dir().join(GFM_CHECKPOINT), config.model.gfm())
}

fn load_selector(config: &RunConfig) -> Result<SelectorModel> {
    let m = &config.model;
    SelectorModel::load(&config.checkpoint_dir().join(SELECTOR_CHECKPOINT), m.hidden, m.text_dim, m.prompt_dim)
}

/// Generates the synthetic benchmark into `<out>/data`.
pub fn cmd_synth(config: &RunConfig) -> Result<String> {
    let ds = generate_synthetic(&config.synth_spec())?;
    let violations = validate_dataset(&ds);
    if !violations.is_empty() {
        return Err(Error::Validation(format!("generated dataset is inconsistent: {}", violations.join("; "))));
    }
    let dir = config.layout().data_dir();
    write_kg_dir(&dir, &ds.kg)?;
    write_corpus(&dir.join(CORPUS_FILE), &ds.corpus)?;
    write_queries(&dir.join(eval::synthetic::QUERIES_FILE), &ds.queries)?;
    Ok(format!(
        "wrote {}: {} entities, {} relations, {} triples, {} chunks, {} queries, 0 violations",
        dir.display(),
        ds.kg.num_entities(),
        ds.kg.num_relations(),
        ds.kg.num_triples(),
        ds.corpus.len(),
        ds.queries.len()
    ))
}

/// Resolves entities and builds the entity-document incidence.
pub fn cmd_index(config: &RunConfig) -> Result<String> {
    let src = config.kg_source();
    require(&src)?;
    let kg = load_kg_dir(&src)?;
    let corpus = load_corpus(&config.corpus_source(), &kg)?;
    let provider = config.provider()?;
    let resolved = if config.index.resolve {
        resolve_entities(&kg, &provider, config.index.threshold)?
    } else {
        kg.clone()
    };
    let index = EntityDocIndex::build(&resolved, &corpus)?;
    let layout = config.layout();
    write_kg_dir(&layout.index_dir(), &resolved)?;
    index.write(&layout.index_file())?;
    Ok(format!(
        "wrote {}: {} triples ({} from resolution), {} documents",
        layout.index_dir().display(),
        resolved.num_triples(),
        resolved.num_triples() - kg.num_triples(),
        index.num_docs()
    ))
}

pub fn cmd_pretrain(config: &RunConfig) -> Result<String> {
    let data = load_indexed(config)?;
    let view = GraphView::new(&data.kg, &data.provider)?;
    let td = TrainingData {
        kg: &data.kg,
        view: &view,
        provider: &data.provider,
    };
    let mut model = GfmModel::new(config.model.gfm(), config.seed)?;
    let log = train_model(td, &mut model, &config.pretrain, config.seed, |_| {})?;
    let ckpt = config.checkpoint_dir().join(GFM_CHECKPOINT);
    model.save(&ckpt)?;
    write_text(&config.layout().logs_dir().join("pretrain.log"), &log.render())?;
    Ok(format!("wrote {}: {}", ckpt.display(), serde_json::to_string(&log.summary())?))
}

pub fn cmd_finetune(config: &RunConfig) -> Result<String> {
    let gfm = load_gfm(config)?;
    let data = load_indexed(config)?;
    let queries = read_queries(&config.queries_source())?;
    let view = GraphView::new(&data.kg, &data.provider)?;
    let td = TrainingData {
        kg: &data.kg,
        view: &view,
        provider: &data.provider,
    };
    let before = gfm.checksum();
    let (selector, log) = finetune(td, &gfm, &queries, config.model.prompt_dim, &config.finetune, config.seed)?;
    debug_assert_eq!(before, gfm.checksum());
    let ckpt = config.checkpoint_dir().join(SELECTOR_CHECKPOINT);
    selector.save(&ckpt)?;
    write_text(&config.layout().logs_dir().join("finetune.log"), &log.render())?;
    Ok(format!("wrote {}: {}", ckpt.display(), serde_json::to_string(&log.summary())?))
}

/// Where `retrieve` takes its queries from.
#[derive(Clone, Debug, PartialEq)]
pub enum QueryInput {
    Single(String),
    /// JSONL: each line a string, or an object with a `text` or `query` field.
    File(PathBuf),
}

fn read_query_lines(path: &Path) -> Result<Vec<String>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let parse = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let v: Value = serde_json::from_str(line).map_err(|e| parse(e.to_string()))?;
        let q = match &v {
            Value::String(s) => s.clone(),
            Value::Object(m) => match m.get("text").or_else(|| m.get("query")) {
                Some(Value::String(s)) => s.clone(),
                _ => return Err(parse("expected a string field `text` or `query`".into())),
            },
            _ => return Err(parse("expected a string or an object".into())),
        };
        out.push(q);
    }
    Ok(out)
}

/// Loaded models and data for query-time commands.
struct Serving {
    data: Indexed,
    view: GraphView,
    gfm: GfmModel,
    selector: SelectorModel,
}

impl Serving {
    fn load(config: &RunConfig) -> Result<Self> {
        require(&config.checkpoint_dir().join(GFM_CHECKPOINT))?;
        require(&config.checkpoint_dir().join(SELECTOR_CHECKPOINT))?;
        let gfm = load_gfm(config)?;
        let selector = load_selector(config)?;
        let data = load_indexed(config)?;
        let view = GraphView::new(&data.kg, &data.provider)?;
        Ok(Self { data, view, gfm, selector })
    }

    fn retriever(&self, config: &RunConfig) -> Result<Retriever<'_>> {
        Retriever::new(
            &self.data.kg,
            &self.data.corpus,
            &self.view,
            &self.data.provider,
            &self.gfm,
            &self.selector,
            &self.data.index,
            config.finetune.tau_gumbel,
            config.finetune.gate,
        )
    }
}

/// Single query: writes `retrieve/bundle.json` and returns the prompt.
/// Query file: writes one bundle per line to `retrieve/bundles.jsonl`.
pub fn cmd_retrieve(config: &RunConfig, input: &QueryInput) -> Result<String> {
    let serving = Serving::load(config)?;
    let retriever = serving.retriever(config)?;
    let dir = config.layout().retrieve_dir();
    match input {
        QueryInput::Single(q) => {
            let bundle = retriever.retrieve(q, &config.inference)?;
            write_json_pretty(&dir.join("bundle.json"), &bundle)?;
            Ok(bundle.prompt)
        }
        QueryInput::File(path) => {
            let queries = read_query_lines(path)?;
            let mut text = String::new();
            for q in &queries {
                let bundle = retriever.retrieve(q, &config.inference)?;
                text.push_str(&serde_json::to_string(&bundle)?);
                text.push('\n');
            }
            let out = dir.join("bundles.jsonl");
            write_text(&out, &text)?;
            Ok(format!("wrote {} bundles to {}", queries.len(), out.display()))
        }
    }
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    model: &'a MetricsReport,
    random_baseline: &'a MetricsReport,
}

/// Model metrics next to the seeded random baseline, in
/// `eval/metrics.json`. Entities are ranked by backbone relevance,
/// documents by the full pipeline.
pub fn cmd_eval(config: &RunConfig) -> Result<String> {
    let serving = Serving::load(config)?;
    let retriever = serving.retriever(config)?;
    let queries = read_queries(&config.queries_source())?;
    let mut rankings = Vec::with_capacity(queries.len());
    for q in &queries {
        let r = retriever.retrieve_detailed(&q.text, &config.inference)?;
        rankings.push(QueryRanking {
            id: q.id.clone(),
            entities: rank_by_score(&r.relevance),
            docs: r.bundle.docs.iter().map(|d| d.doc_id.clone()).collect(),
            gold_entities: q.positives.clone(),
            gold_docs: q.gold_docs.clone(),
        });
    }
    let model = MetricsReport::from_rankings(&rankings, &DEFAULT_KS);
    let doc_ids: Vec<String> = serving.data.corpus.chunks().iter().map(|c| c.doc_id.clone()).collect();
    let baseline = random_baseline(serving.data.kg.num_entities(), &doc_ids, &queries, config.seed, &DEFAULT_KS);
    let path = config.layout().metrics_file();
    write_json_pretty(
        &path,
        &EvalOutput {
            model: &model,
            random_baseline: &baseline,
        },
    )?;
    let mut s = String::new();
    write!(s, "wrote {}: {} queries", path.display(), model.num_queries).unwrap();
    if model.empty_query_set {
        s.push_str(" (empty query set)");
    }
    for (name, r) in [("model", &model), ("random", &baseline)] {
        write!(s, "\n{name}: R@2_E {:.4} R@5_E {:.4} R@2_D {:.4} R@5_D {:.4} MRR {:.4}", r.recall_e_at(2), r.recall_e_at(5), r.recall_d_at(2), r.recall_d_at(5), r.mrr).unwrap();
    }
    Ok(s)
}
