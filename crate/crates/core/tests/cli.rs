use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::atomic::{AtomicUsize, Ordering};

use serde_json::{json, Value};

use gfm_retriever::eval::{read_queries, synthetic::QUERIES_FILE, validate_dataset, SyntheticDataset};
use gfm_retriever::gfm::{GfmConfig, GfmModel};
use gfm_retriever::kg::io::{load_corpus, load_kg_dir, CORPUS_FILE};
use gfm_retriever::kg::EntityDocIndex;
use gfm_retriever::selector::SelectorModel;

fn tiny_config(dir: &Path, extra: Value) -> PathBuf {
    static COUNTER: AtomicUsize = AtomicUsize::new(0);
    let mut c = json!({
        "seed": 3,
        "model": { "hidden": 4, "layers": 2, "text_dim": 8, "prompt_dim": 4 },
        "synth": {
            "num_domains": 2,
            "entities_per_domain": 12,
            "relations": 3,
            "intra_domain_triples": 30,
            "cross_domain_triples": 6,
            "planted_queries": 4
        },
        "pretrain": { "phase1_steps": 5, "phase2_epochs": 1, "negatives_per_query": 6, "proto_sample_per_domain": 2 },
        "finetune": { "epochs": 2, "batch_size": 2 },
        "index": { "resolve": false }
    });
    merge(&mut c, extra);
    let path = dir.join(format!("config{}.json", COUNTER.fetch_add(1, Ordering::Relaxed)));
    std::fs::write(&path, serde_json::to_string_pretty(&c).unwrap()).unwrap();
    path
}

fn merge(base: &mut Value, extra: Value) {
    match (base, extra) {
        (Value::Object(b), Value::Object(e)) => {
            for (k, v) in e {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, e) => *b = e,
    }
}

fn gfmr(config: &Path, out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gfmr"))
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .unwrap()
}

fn ok(o: Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn load_dataset(dir: &Path) -> SyntheticDataset {
    let kg = load_kg_dir(dir).unwrap();
    let corpus = load_corpus(&dir.join(CORPUS_FILE), &kg).unwrap();
    let queries = read_queries(&dir.join(QUERIES_FILE)).unwrap();
    SyntheticDataset { kg, corpus, queries }
}

#[test]
fn synth_writes_reloadable_identical_files() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), json!({}));
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let summary = ok(gfmr(&cfg, &a, &["synth"]));
    assert!(summary.contains("0 violations"), "{summary}");
    ok(gfmr(&cfg, &b, &["synth"]));
    let ds = load_dataset(&a.join("data"));
    assert_eq!(ds.kg.num_entities(), 24);
    assert_eq!(ds.queries.len(), 4);
    assert!(validate_dataset(&ds).is_empty());
    for f in std::fs::read_dir(a.join("data")).unwrap() {
        let name = f.unwrap().file_name();
        assert_eq!(std::fs::read(a.join("data").join(&name)).unwrap(), std::fs::read(b.join("data").join(&name)).unwrap(), "{name:?}");
    }

    // A different seed gives a different graph.
    let c = tmp.path().join("c");
    let o = Command::new(env!("CARGO_BIN_EXE_gfmr"))
        .args(["--config", cfg.to_str().unwrap(), "--out", c.to_str().unwrap(), "--seed", "4", "synth"])
        .output()
        .unwrap();
    ok(o);
    assert_ne!(std::fs::read(a.join("data/triples.tsv")).unwrap(), std::fs::read(c.join("data/triples.tsv")).unwrap());
}

#[test]
fn index_matches_corpus_listing() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), json!({ "index": { "resolve": true } }));
    let out = tmp.path().join("out");
    ok(gfmr(&cfg, &out, &["synth"]));
    ok(gfmr(&cfg, &out, &["index"]));
    let first = std::fs::read(out.join("index/entity_docs.jsonl")).unwrap();
    ok(gfmr(&cfg, &out, &["index"]));
    assert_eq!(first, std::fs::read(out.join("index/entity_docs.jsonl")).unwrap());

    let ds = load_dataset(&out.join("data"));
    let resolved = load_kg_dir(&out.join("index")).unwrap();
    assert!(resolved.num_triples() >= ds.kg.num_triples());
    assert_eq!(&resolved.triples()[..ds.kg.num_triples()], ds.kg.triples());
    let index = EntityDocIndex::read(&out.join("index/entity_docs.jsonl"), resolved.num_entities()).unwrap();
    for (c, chunk) in ds.corpus.chunks().iter().enumerate() {
        for e in 0..resolved.num_entities() {
            assert_eq!(index.contains(e, c), chunk.entities.contains(&e));
        }
    }
}

#[test]
fn full_pipeline_and_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), json!({}));
    let out = tmp.path().join("out");

    // Nothing exists yet.
    for cmd in [&["pretrain"][..], &["finetune"], &["eval"], &["retrieve", "--query", "x"]] {
        assert_eq!(code(&gfmr(&cfg, &out, cmd)), 4, "{cmd:?}");
    }
    ok(gfmr(&cfg, &out, &["synth"]));
    assert_eq!(code(&gfmr(&cfg, &out, &["pretrain"])), 4);
    ok(gfmr(&cfg, &out, &["index"]));
    assert_eq!(code(&gfmr(&cfg, &out, &["finetune"])), 4);
    ok(gfmr(&cfg, &out, &["pretrain"]));
    assert_eq!(code(&gfmr(&cfg, &out, &["retrieve", "--query", "x"])), 4);
    ok(gfmr(&cfg, &out, &["finetune"]));
    assert!(out.join("logs/pretrain.log").exists() && out.join("logs/finetune.log").exists());

    // Degenerate query: nothing mentioned, bundle still well formed.
    let prompt = ok(gfmr(&cfg, &out, &["retrieve", "--query", "???"]));
    assert!(prompt.contains("Question: ???"));
    let bundle: Value = serde_json::from_slice(&std::fs::read(out.join("retrieve/bundle.json")).unwrap()).unwrap();
    assert_eq!(bundle["query"], "???");

    let queries = out.join("data").join(QUERIES_FILE);
    let msg = ok(gfmr(&cfg, &out, &["retrieve", "--queries", queries.to_str().unwrap()]));
    assert!(msg.contains("4 bundles"), "{msg}");
    let lines = std::fs::read_to_string(out.join("retrieve/bundles.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 4);

    ok(gfmr(&cfg, &out, &["eval"]));
    let metrics: Value = serde_json::from_slice(&std::fs::read(out.join("eval/metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["model"]["num_queries"], 4);
    assert!(metrics["random_baseline"]["mrr"].is_number());

    // Usage and config errors.
    assert_eq!(code(&gfmr(&cfg, &out, &["retrieve"])), 2);
    assert_eq!(code(&gfmr(&cfg, &out, &["retrieve", "--query", "a", "--queries", "b"])), 2);
    let bad = tiny_config(tmp.path(), json!({ "finetune": { "beta_1": 1.0 } }));
    assert_eq!(code(&gfmr(&bad, &out, &["eval"])), 2);
    assert_eq!(code(&gfmr(&tmp.path().join("absent.json"), &out, &["synth"])), 2);
    let garbage = tmp.path().join("garbage.jsonl");
    std::fs::write(&garbage, "{\"text\": \"ok\"}\n[1, 2]\n").unwrap();
    let o = gfmr(&cfg, &out, &["retrieve", "--queries", garbage.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains(":2:"));
}

#[test]
fn eval_flags_empty_query_set() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("none.jsonl");
    std::fs::write(&empty, "").unwrap();
    let cfg = tiny_config(tmp.path(), json!({}));
    let out = tmp.path().join("out");
    for c in ["synth", "index", "pretrain", "finetune"] {
        ok(gfmr(&cfg, &out, &[c]));
    }
    let cfg = tiny_config(tmp.path(), json!({ "paths": { "queries": empty } }));
    let msg = ok(gfmr(&cfg, &out, &["eval"]));
    assert!(msg.contains("empty query set"), "{msg}");
    let metrics: Value = serde_json::from_slice(&std::fs::read(out.join("eval/metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["model"]["empty_query_set"], true);
    assert_eq!(metrics["model"]["num_queries"], 0);
}

#[test]
fn zero_step_training_keeps_initial_weights() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(
        tmp.path(),
        json!({ "pretrain": { "phase1_steps": 0, "phase2_epochs": 0 }, "finetune": { "epochs": 0 } }),
    );
    let out = tmp.path().join("out");
    for c in ["synth", "index", "pretrain", "finetune"] {
        ok(gfmr(&cfg, &out, &[c]));
    }
    let gcfg = GfmConfig {
        hidden: 4,
        layers: 2,
        text_dim: 8,
    };
    let gfm = GfmModel::load(&out.join("checkpoints/gfm.ckpt"), gcfg).unwrap();
    assert_eq!(gfm.checksum(), GfmModel::new(gcfg, 3).unwrap().checksum());
    let sel = SelectorModel::load(&out.join("checkpoints/selector.ckpt"), 4, 8, 4).unwrap();
    assert_eq!(sel.checksum(), SelectorModel::new(4, 8, 4, 3).unwrap().checksum());
}

#[test]
fn diverging_training_exits_with_numeric_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), json!({ "pretrain": { "lr": 1e300, "phase1_steps": 20 } }));
    let out = tmp.path().join("out");
    ok(gfmr(&cfg, &out, &["synth"]));
    ok(gfmr(&cfg, &out, &["index"]));
    let o = gfmr(&cfg, &out, &["pretrain"]);
    assert_eq!(code(&o), 3, "stderr: {}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("non-finite"));
}
