//! Fixed-seed training regressions on the 3-domain synthetic benchmark.

use gfm_retriever::eval::{generate_synthetic, SyntheticDataset, SyntheticSpec};
use gfm_retriever::gfm::{GfmConfig, GfmModel, GraphView};
use gfm_retriever::kg::io::{load_corpus, load_kg_dir, write_corpus, write_kg_dir, CORPUS_FILE};
use gfm_retriever::kg::EmbeddingProvider;
use gfm_retriever::numerics::{Optimizer, OptimizerKind, SeededRng};
use gfm_retriever::pretrain::{phase2_step, sample_proto_pairs, sample_shuffle, train, within_domain_alignment, RankLoss, TrainConfig, TrainingData};
use gfm_retriever::selector::{finetune_model, mean_gate_mass, prepare_examples, FinetuneConfig, SelectorModel};

struct Setup {
    ds: SyntheticDataset,
    provider: EmbeddingProvider,
    view: GraphView,
}

fn setup() -> Setup {
    let ds = generate_synthetic(&SyntheticSpec::default()).unwrap();
    let provider = EmbeddingProvider::token_hash(16, 1024).unwrap();
    let view = GraphView::new(&ds.kg, &provider).unwrap();
    Setup { ds, provider, view }
}

impl Setup {
    fn data(&self) -> TrainingData<'_> {
        TrainingData {
            kg: &self.ds.kg,
            view: &self.view,
            provider: &self.provider,
        }
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[test]
fn phase_one_loss_decreases() {
    let s = setup();
    let config = TrainConfig {
        phase1_steps: 200,
        phase2_epochs: 0,
        ..TrainConfig::default()
    };
    let (_, log) = train(s.data(), GfmConfig::default(), &config, 1024).unwrap();
    let losses = log.losses(1);
    assert_eq!(losses.len(), 200);
    let (first, last) = (mean(&losses[..20]), mean(&losses[180..]));
    assert!(last < first, "first {first} last {last}");
}

#[test]
fn phase_two_raises_within_domain_alignment() {
    let s = setup();
    let data = s.data();
    let config = TrainConfig {
        lr: 5e-3,
        optimizer: OptimizerKind::Adam,
        ..TrainConfig::default()
    };
    let mut model = GfmModel::new(GfmConfig::default(), 1024).unwrap();
    let mut rng = SeededRng::new(7);
    let probe = sample_proto_pairs(data, 8, 16, &mut rng).unwrap();
    let before = within_domain_alignment(&model, &s.view, &probe).unwrap();
    let mut opt = Optimizer::new(config.optimizer, config.lr);
    for _ in 0..50 {
        let pairs = sample_proto_pairs(data, config.proto_sample_per_domain, config.negatives_per_query, &mut rng).unwrap();
        let sigma = sample_shuffle(s.ds.kg.num_domains(), &mut rng).unwrap();
        phase2_step(data, &mut model, &pairs, &sigma, &config, &mut opt).unwrap();
    }
    let after = within_domain_alignment(&model, &s.view, &probe).unwrap();
    assert!(after > before, "before {before} after {after}");
}

#[test]
fn size_penalty_shrinks_selection_monotonically() {
    let s = setup();
    let config = TrainConfig {
        phase1_steps: 200,
        phase2_epochs: 0,
        ..TrainConfig::default()
    };
    let (gfm, _) = train(s.data(), GfmConfig::default(), &config, 1024).unwrap();
    let examples = prepare_examples(s.data(), &gfm, &s.ds.queries[..40]).unwrap();
    let masses: Vec<f64> = [0.01, 0.1, 1.0]
        .iter()
        .map(|&beta1| {
            let fc = FinetuneConfig {
                beta1,
                optimizer: OptimizerKind::Adam,
                lr: 5e-3,
                rank_loss: RankLoss::LogRatio,
                epochs: 10,
                ..FinetuneConfig::default()
            };
            let mut sel = SelectorModel::new(32, 16, 64, 5).unwrap();
            finetune_model(&s.ds.kg, &mut sel, &examples, &fc, 5).unwrap();
            mean_gate_mass(&sel, &examples, &fc).unwrap()
        })
        .collect();
    assert!(masses[0] > masses[1] && masses[1] > masses[2], "{masses:?}");
}

#[test]
fn benchmark_round_trips_through_files() {
    let s = setup();
    let tmp = tempfile::tempdir().unwrap();
    write_kg_dir(tmp.path(), &s.ds.kg).unwrap();
    write_corpus(&tmp.path().join(CORPUS_FILE), &s.ds.corpus).unwrap();
    let kg = load_kg_dir(tmp.path()).unwrap();
    assert_eq!(kg, s.ds.kg);
    assert_eq!(load_corpus(&tmp.path().join(CORPUS_FILE), &kg).unwrap(), s.ds.corpus);
}
