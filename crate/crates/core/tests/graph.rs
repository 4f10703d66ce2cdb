use gclmo::config::PipelineConfig;
use gclmo::graph::{build_neighbor_graph, build_objective_edges, sample_neighbors, GraphView, NeighborGraph};
use gclmo::pipeline::generate_data;
use gclmo::rng::rng_for;
use statrs::distribution::{ChiSquared, ContinuousCDF};

#[test]
fn two_neighbor_frequencies_pass_chi_square() {
    let mut g = NeighborGraph::with_nodes(3);
    for i in 0..3 {
        g.set_category(i, 0).unwrap();
    }
    g.add_edge(0, 1, 1).unwrap();
    g.add_edge(0, 2, 3).unwrap();
    let view = GraphView::identity(&g);
    let n = 100_000;
    let draws = sample_neighbors(&view, 0, n, &mut rng_for(40, &[])).unwrap();
    let ones = draws.iter().filter(|&&d| d == 1).count() as f64;
    let observed = [ones, n as f64 - ones];
    let expected = [0.25 * n as f64, 0.75 * n as f64];
    let stat: f64 = observed.iter().zip(&expected).map(|(o, e)| (o - e).powi(2) / e).sum();
    assert!(stat < ChiSquared::new(1.0).unwrap().inverse_cdf(0.99), "chi2 {stat}");
}

fn small_logs() -> Vec<gclmo::datagen::SearchRecord> {
    let mut cfg = PipelineConfig::default();
    for (k, v) in [("datagen.items", "1000"), ("datagen.users", "200")] {
        cfg.set(k, v).unwrap();
    }
    generate_data(&cfg).unwrap().1
}

#[test]
fn one_objective_edge_per_trigger() {
    let logs = small_logs();
    let edges = build_objective_edges(&logs);
    let triggers: usize = logs.iter().map(|r| r.trigger_items.len()).sum();
    assert_eq!(edges.len(), triggers);
    assert!(triggers > 0);
}

#[test]
fn augmented_views_keep_invariants() {
    let logs = small_logs();
    let g = build_neighbor_graph(&logs, 7).unwrap();
    g.check_invariants().unwrap();
    let before: Vec<_> = g.edges().collect();
    for seed in 0..5 {
        let mut rng = rng_for(41, &[seed]);
        let view = GraphView::identity(&g)
            .with_node_drop(0.3, &mut rng)
            .unwrap()
            .with_edge_perturb(0.3, &mut rng)
            .unwrap();
        assert!(view.added_count() > 0 && view.removed_count() > 0);
        for id in (0..g.n_nodes() as u32).filter(|&id| g.contains(id)) {
            let live = view.live_neighbors(id).unwrap();
            if view.is_dropped(id) {
                assert!(live.is_empty());
                assert!(sample_neighbors(&view, id, 3, &mut rng).unwrap().is_empty());
            }
            for (n, w) in live {
                assert!(w > 0);
                assert!(!view.is_dropped(n));
                assert_eq!(g.category(n).unwrap(), g.category(id).unwrap());
                assert!(view.live_neighbors(n).unwrap().contains(&(id, w)));
            }
        }
    }
    assert_eq!(g.edges().collect::<Vec<_>>(), before);
}
