use std::collections::BTreeSet;

use gclmo::config::PipelineConfig;
use gclmo::datagen::{relevance_oracle, Catalog, ExposedItem, ItemMeta, QueryMeta, SearchRecord};
use gclmo::graph::{build_objective_edges, NeighborGraph};
use gclmo::loss::Objective;
use gclmo::model::score;
use gclmo::pipeline::{fit, instances_for, Prepared};
use gclmo::rng::rng_for;
use gclmo::train::{batch_gradient, batch_view, build_instances, checkpoint, restore, train, TrainConfig, TrainingInstance};
use gclmo::{Error, Gradients, ItemId, Model};
use rand::Rng as _;

/// Items 0-5 in category 0, items 6-7 in category 1. Query 0 points along
/// the first axis, query 1 along the second; items 0, 1, 3, 4 are relevant
/// to query 0 and item 7 to query 1.
fn fixture_catalog() -> Catalog {
    let along = |x: bool| if x { vec![1.0, 0.0] } else { vec![0.0, 1.0] };
    let items = (0..8u32)
        .map(|id| ItemMeta {
            item_id: id,
            category_id: u32::from(id >= 6),
            popularity: 1.0 / 8.0,
            latent_vector: along(matches!(id, 0 | 1 | 3 | 4 | 6)),
        })
        .collect();
    let queries = vec![
        QueryMeta {
            query_id: 0,
            category_id: 0,
            latent_vector: along(true),
        },
        QueryMeta {
            query_id: 1,
            category_id: 1,
            latent_vector: along(false),
        },
    ];
    Catalog::new(items, 2, queries, 2, 0.5).unwrap()
}

fn record(query: u32, category: u32, trigger: ItemId, page: &[(ItemId, bool, bool)]) -> SearchRecord {
    SearchRecord {
        user_id: 0,
        query_id: query,
        category_id: category,
        trigger_items: vec![trigger],
        exposed: page
            .iter()
            .map(|&(item_id, clicked, purchased)| ExposedItem {
                item_id,
                clicked,
                purchased,
            })
            .collect(),
        timestamp_day: 0,
    }
}

fn fixture_logs() -> Vec<SearchRecord> {
    vec![
        record(0, 0, 0, &[(1, true, true), (2, true, false), (3, false, false)]),
        record(0, 0, 4, &[(0, true, false), (1, false, false), (2, false, false)]),
        record(1, 1, 6, &[(7, true, false)]),
    ]
}

fn fixture_instances() -> Vec<TrainingInstance> {
    let catalog = fixture_catalog();
    let logs = fixture_logs();
    let set = build_instances(
        &logs,
        &build_objective_edges(&logs),
        &catalog,
        |i, q| relevance_oracle(i, q, &catalog),
        2,
        2,
        11,
    )
    .unwrap();
    assert_eq!(set.shrunk, 1);
    set.instances
}

fn set_of(items: &[ItemId]) -> BTreeSet<ItemId> {
    items.iter().copied().collect()
}

#[test]
fn instances_match_hand_enumeration() {
    let inst = fixture_instances();
    assert_eq!(inst.len(), 3);
    let relevant_to_q0 = |i: ItemId| matches!(i, 0 | 1 | 3 | 4);

    // Trigger 0: under-impressions are forced to {4, 5}, negatives to {6, 7}.
    let a = &inst[0];
    assert_eq!(a.trigger, 0);
    assert_eq!(a.impressions.iter().map(|e| e.item_id).collect::<Vec<_>>(), [1, 2, 3]);
    assert_eq!(set_of(&a.under_impressions), set_of(&[4, 5]));
    assert_eq!(set_of(&a.random_negatives), set_of(&[6, 7]));
    let f = |v: &[bool]| v.to_vec();
    assert_eq!(f(a.labels.get(Objective::Exposure)), [true, true, true, false, false, false, false]);
    assert_eq!(f(a.labels.get(Objective::Click)), [true, true, false, false, false, false, false]);
    assert_eq!(f(a.labels.get(Objective::Purchase)), [true, false, false, false, false, false, false]);
    let expected: Vec<bool> = a.candidates().iter().map(|&c| relevant_to_q0(c)).collect();
    assert_eq!(f(a.labels.get(Objective::Relevance)), expected);
    assert_eq!(expected.iter().filter(|&&r| r).count(), 3);

    // Trigger 4 is itself relevant; under-impressions {3, 5}.
    let b = &inst[1];
    assert_eq!(b.trigger, 4);
    assert_eq!(set_of(&b.under_impressions), set_of(&[3, 5]));
    assert_eq!(set_of(&b.random_negatives), set_of(&[6, 7]));
    assert_eq!(f(b.labels.get(Objective::Click)), [true, false, false, false, false, false, false]);
    assert_eq!(f(b.labels.get(Objective::Purchase)), [false; 7]);
    let expected: Vec<bool> = b.candidates().iter().map(|&c| relevant_to_q0(c)).collect();
    assert_eq!(f(b.labels.get(Objective::Relevance)), expected);

    // Trigger 6 is not relevant to query 1, so no relevance positives even
    // though item 7 is; its category has no spare items for K.
    let c = &inst[2];
    assert_eq!(c.trigger, 6);
    assert!(c.under_impressions.is_empty());
    assert_eq!(c.random_negatives.len(), 2);
    assert!(c.random_negatives.iter().all(|&n| n < 6));
    assert_ne!(c.random_negatives[0], c.random_negatives[1]);
    assert_eq!(f(c.labels.get(Objective::Relevance)), [false; 3]);
    assert_eq!(f(c.labels.get(Objective::Click)), [true, false, false]);
}

fn empty_graph(catalog: &Catalog) -> NeighborGraph {
    let mut g = NeighborGraph::with_nodes(catalog.n_items());
    g.register_catalog(catalog).unwrap();
    g
}

fn fixture_config() -> TrainConfig {
    TrainConfig {
        dim: 8,
        batch_size: 1,
        init_scale: 0.3,
        ..TrainConfig::default()
    }
}

#[test]
fn single_instance_loss_settles() {
    let catalog = fixture_catalog();
    let graph = empty_graph(&catalog);
    let instances = &fixture_instances()[..1];
    for contrastive in [false, true] {
        let config = TrainConfig {
            learning_rate: 0.1,
            epochs: 200,
            contrastive,
            p_edge: 0.0,
            ..fixture_config()
        };
        let mut model = Model::init(8, 2, config.dim, config.tau, config.init_scale, 3).unwrap();
        let history = train(&mut model, &graph, &catalog.category_map(), instances, &config, |_| Ok(())).unwrap();
        let losses: Vec<f64> = history.iter().map(|m| m.total_loss).collect();
        assert!(losses[199] < losses[0], "contrastive={contrastive}: {} -> {}", losses[0], losses[199]);
        for w in losses[180..].windows(2) {
            assert!(w[1] <= w[0], "contrastive={contrastive}: loss rose from {} to {}", w[0], w[1]);
        }
    }
}

fn small_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    for (k, v) in [
        ("datagen.items", "400"),
        ("datagen.categories", "4"),
        ("datagen.queries", "40"),
        ("datagen.users", "60"),
        ("datagen.days", "5"),
        ("train.epochs", "2"),
        ("train.dim", "8"),
        ("train.batch_size", "16"),
        ("index.topk", "20"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg.validate().unwrap();
    cfg
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let mut cfg = small_config();
    cfg.set("train.lr", "0").unwrap();
    let prep = Prepared::new(&cfg).unwrap();
    let t = &cfg.train;
    let initial = Model::init(prep.catalog.n_items(), cfg.catalog.n_categories as usize, t.dim, t.tau, t.init_scale, t.seed).unwrap();
    let (trained, history) = fit(&cfg, &prep.catalog, &prep.train_logs, &prep.graph, |_| Ok(())).unwrap();
    assert_eq!(history.len(), 2);
    assert_eq!(trained, initial);
}

#[test]
fn augmentation_settings_are_inert_without_contrast() {
    let mut cfg = small_config();
    cfg.set("train.contrastive", "false").unwrap();
    let prep = Prepared::new(&cfg).unwrap();
    let a = prep.run(&cfg).unwrap();
    let mut other = cfg.clone();
    other.set("train.p_drop", "0.7").unwrap();
    other.set("train.p_edge", "0.5").unwrap();
    let b = prep.run(&other).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.metrics, b.metrics);
}

#[test]
fn batch_gradient_is_the_sum_of_instance_gradients() {
    let cfg = small_config();
    let prep = Prepared::new(&cfg).unwrap();
    let set = instances_for(&cfg, &prep.catalog, &prep.train_logs).unwrap();
    let model = Model::init(prep.catalog.n_items(), 4, 8, 0.07, 0.2, 5).unwrap();
    let cats = prep.catalog.category_map();
    let batch: Vec<usize> = (0..12).map(|i| i * 7 % set.instances.len()).collect();
    for contrastive in [false, true] {
        let config = TrainConfig {
            contrastive,
            ..cfg.train.clone()
        };
        let view = batch_view(&prep.graph, &config, 0, 0).unwrap();
        let view = contrastive.then_some(&view);
        let (whole, _) = batch_gradient(&model, &prep.graph, view, &cats, &set.instances, &batch, &config, 0).unwrap();
        let mut summed = Gradients::zeros(8);
        for &i in &batch {
            let (g, _) = batch_gradient(&model, &prep.graph, view, &cats, &set.instances, &[i], &config, 0).unwrap();
            summed.accumulate(&g);
        }
        assert!(whole.max_abs_diff(&summed) <= 1e-12, "contrastive={contrastive}");
        assert!(whole.max_abs_diff(&Gradients::zeros(8)) > 0.0);
    }
}

#[test]
fn training_is_deterministic_across_thread_counts() {
    let cfg = small_config();
    let prep = Prepared::new(&cfg).unwrap();
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| fit(&cfg, &prep.catalog, &prep.train_logs, &prep.graph, |_| Ok(())).unwrap().0)
    };
    let a = run(1);
    let b = run(4);
    assert_eq!(a.to_checkpoint_string(), b.to_checkpoint_string());
}

#[test]
fn divergence_aborts_with_a_diagnostic() {
    let mut cfg = small_config();
    cfg.set("train.lr", "1e300").unwrap();
    let prep = Prepared::new(&cfg).unwrap();
    match fit(&cfg, &prep.catalog, &prep.train_logs, &prep.graph, |_| Ok(())) {
        Err(Error::Numeric(msg)) => assert!(msg.contains("non-finite"), "{msg}"),
        other => panic!("expected a numeric failure, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn checkpoint_restores_identical_scores() {
    let cfg = small_config();
    let prep = Prepared::new(&cfg).unwrap();
    let (model, _) = fit(&cfg, &prep.catalog, &prep.train_logs, &prep.graph, |_| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    checkpoint(&model, &path).unwrap();
    let back: Model = restore(&path).unwrap();
    let cats = prep.catalog.category_map();
    let mut rng = rng_for(9, &[]);
    for _ in 0..100 {
        let (a, b) = (rng.random_range(0..400u32), rng.random_range(0..400u32));
        let va = model.base_embedding(a, &cats).unwrap().values;
        let vb = model.base_embedding(b, &cats).unwrap().values;
        let ra = back.base_embedding(a, &cats).unwrap().values;
        let rb = back.base_embedding(b, &cats).unwrap().values;
        assert_eq!(score(&va, &vb), score(&ra, &rb));
        let na = model.aggregate(a, &[b], &cats).unwrap().values;
        let nb = back.aggregate(a, &[b], &cats).unwrap().values;
        assert_eq!(na, nb);
    }
}
