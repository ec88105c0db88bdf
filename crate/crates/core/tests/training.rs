mod common;

use common::{random_model, seeded, tiny_config};
use nbfrec::dataset::Dataset;
use nbfrec::diff::{AdamConfig, Tape, Tensor};
use nbfrec::exec::Execution;
use nbfrec::graph::{EdgeRecord, InteractionGraph};
use nbfrec::model::{Backbone, ProjectionHead};
use nbfrec::synth::{generate, SynthSpec};
use nbfrec::training::*;
use proptest::prelude::*;
use rand::Rng;
use std::collections::BTreeSet;

/// Graph with exactly `m` distinct random edges.
fn graph_with_edges(nu: usize, ni: usize, m: usize, d: usize, seed: u64) -> InteractionGraph {
    let mut rng = seeded(seed);
    let mut seen = BTreeSet::new();
    let mut edges = Vec::new();
    while edges.len() < m {
        let (u, i) = (rng.random_range(0..nu as u32), rng.random_range(0..ni as u32));
        if seen.insert((u, i)) {
            edges.push(EdgeRecord::new(u, i, (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()));
        }
    }
    InteractionGraph::new(nu, ni, d, edges).unwrap()
}

fn train_only(name: &str, g: InteractionGraph) -> Dataset {
    Dataset::with_ratios(name, g, (1.0, 0.0, 0.0), 0).unwrap()
}

fn quick(batch_size: usize, epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size,
        n_negatives: 2,
        epochs,
        patience: None,
        execution: Execution::Sequential,
        adam: AdamConfig { lr: 0.01, ..AdamConfig::default() },
        ..TrainConfig::default()
    }
}

/// Three layers: masked positives and strict negatives sit at least three hops from the query.
fn session<'d>(data: &[&'d Dataset], config: TrainConfig, seed: u64) -> Session<'d> {
    let model = tiny_config(6, 3);
    let backbone = Backbone::init(model.clone(), seed).unwrap();
    let heads = data
        .iter()
        .map(|&d| (d, ProjectionHead::for_graph(&model, d.train_graph(), seed + 1)))
        .collect();
    Session::new(backbone, heads, config).unwrap()
}

#[test]
fn zero_scores_give_two_ln2_per_positive() {
    let g = graph_with_edges(3, 5, 6, 1, 0);
    let (mut backbone, head) = random_model(&tiny_config(4, 2), &g, 0);
    let last = backbone.config.score_hidden.len();
    backbone.params.get_mut(&format!("score.{last}.weight")).unwrap().fill(0.0);
    backbone.params.get_mut(&format!("score.{last}.bias")).unwrap().fill(0.0);
    let e = g.edge(0);
    let negs = sample_strict_negatives(&g, (e.user, e.item), 2, CorruptionPolicy::TailOnly, &mut seeded(1)).unwrap();
    let queries = build_queries(&g, &[(e.user, e.item)], &[negs]);
    let loss = batch_loss(&backbone, &head, &g.mask(&[0]).unwrap(), &queries).unwrap();
    assert!((loss - 2.0 * 2f64.ln()).abs() < 1e-12, "{loss}");
}

#[test]
fn separated_logits_drive_the_loss_to_zero_and_extremes_stay_finite() {
    let mut tape = Tape::new();
    let z = tape.input(Tensor::vector(vec![60.0, -60.0, -60.0]));
    let l = tape.logistic_loss(z, &[1.0, 0.0, 0.0], &[1.0, 0.5, 0.5]).unwrap();
    assert!(tape.value(l).item() < 1e-20);

    let mut tape = Tape::new();
    let z = tape.input(Tensor::vector(vec![-1e6, 1e6]));
    let l = tape.logistic_loss(z, &[1.0, 0.0], &[1.0, 1.0]).unwrap();
    let v = tape.value(l).item();
    assert!(v.is_finite());
    assert!((v - 2.0 * -(1e-12f64).ln()).abs() < 1e-9);
}

#[test]
fn tail_corruption_is_forced_to_the_only_non_neighbor() {
    let edges = (0..9).filter(|&i| i != 4).map(|i| EdgeRecord::new(0, i, vec![])).collect();
    let g = InteractionGraph::new(2, 9, 0, edges).unwrap();
    let negs = sample_strict_negatives(&g, (0, 2), 50, CorruptionPolicy::TailOnly, &mut seeded(0)).unwrap();
    assert!(negs.iter().all(|n| (n.user, n.item, n.corrupted) == (0, 4, Corruption::Tail)));
}

#[test]
fn tail_draws_are_uniform_over_valid_items() {
    let g = InteractionGraph::new(1, 11, 0, vec![EdgeRecord::new(0, 0, vec![])]).unwrap();
    let negs = sample_strict_negatives(&g, (0, 0), 10_000, CorruptionPolicy::Either, &mut seeded(7)).unwrap();
    let mut counts = [0usize; 11];
    for n in &negs {
        counts[n.item as usize] += 1;
    }
    assert_eq!(counts[0], 0);
    for c in &counts[1..] {
        assert!((900..=1100).contains(c), "{counts:?}");
    }
}

#[test]
fn dense_side_exhausts_the_rejection_budget() {
    let edges = (0..4).map(|i| EdgeRecord::new(0, i, vec![])).collect();
    let g = InteractionGraph::new(1, 4, 0, edges).unwrap();
    let err = sample_strict_negatives(&g, (0, 1), 3, CorruptionPolicy::Either, &mut seeded(0)).unwrap_err();
    assert!(matches!(err, nbfrec::Error::NegativeSampling { attempts: 301 }), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn negatives_are_strict_and_corrupt_one_side(seed in any::<u64>(), n in 1usize..6) {
        let g = graph_with_edges(6, 8, 20, 0, seed);
        let e = g.edge((seed % 20) as usize).clone();
        let negs = sample_strict_negatives(&g, (e.user, e.item), n, CorruptionPolicy::Either, &mut seeded(seed)).unwrap();
        prop_assert_eq!(negs.len(), n);
        for neg in negs {
            prop_assert!(!g.contains(neg.user, neg.item));
            match neg.corrupted {
                Corruption::Head => prop_assert_eq!(neg.item, e.item),
                Corruption::Tail => prop_assert_eq!(neg.user, e.user),
            }
        }
    }
}

#[test]
fn query_weights_sum_to_one_per_positive_side() {
    let g = graph_with_edges(4, 6, 10, 0, 3);
    let positives: Vec<(u32, u32)> = g.edges()[..3].iter().map(|e| (e.user, e.item)).collect();
    let negatives: Vec<Vec<Negative>> = positives
        .iter()
        .map(|&p| sample_strict_negatives(&g, p, 4, CorruptionPolicy::Either, &mut seeded(p.0 as u64)).unwrap())
        .collect();
    let queries = build_queries(&g, &positives, &negatives);
    let (mut pos, mut neg) = (0.0, 0.0);
    for q in &queries {
        for (t, w) in q.targets.iter().zip(&q.weights) {
            if *t == 1.0 { pos += w } else { neg += w }
        }
    }
    assert!((pos - 1.0).abs() < 1e-12 && (neg - 1.0).abs() < 1e-12);
    let users: Vec<usize> = queries.iter().map(|q| q.user).collect();
    assert!(users.windows(2).all(|w| w[0] < w[1]));
}

#[derive(Default)]
struct Tracer {
    batches: usize,
    batch_arcs_seen: usize,
    covered: BTreeSet<usize>,
    isolation: Vec<(String, Vec<(String, f64)>)>,
}

impl TrainObserver for Tracer {
    fn wants_batches(&self) -> bool {
        true
    }

    fn on_batch(&mut self, t: &BatchTrace<'_>) {
        self.batches += 1;
        let batch: BTreeSet<u32> = t.batch_edges.iter().map(|&e| e as u32).collect();
        let arcs = t.graph.adjacency().arcs();
        self.batch_arcs_seen += t.csr.rows().iter().filter(|&&r| batch.contains(&arcs[r as usize].edge)).count();
        assert_eq!(t.csr.num_entries() + 2 * batch.len(), t.graph.num_arcs());
        self.covered.extend(t.batch_edges);
        self.isolation.push((t.dataset.to_string(), t.head_grad_norms.clone()));
    }
}

#[test]
fn batches_never_see_their_own_edges() {
    let data = train_only("g", graph_with_edges(30, 40, 200, 2, 5));
    let mut s = session(&[&data], quick(32, 1), 5);
    let mut tracer = Tracer::default();
    s.train_epoch(&mut tracer).unwrap();
    assert_eq!(tracer.batches, 7);
    assert_eq!(tracer.batch_arcs_seen, 0);
    assert_eq!(tracer.covered.len(), 200);
}

#[test]
fn heads_only_receive_their_own_gradients() {
    let a = train_only("a", graph_with_edges(20, 20, 100, 1, 1));
    let b = train_only("b", graph_with_edges(40, 40, 300, 3, 2));
    let mut s = session(&[&a, &b], quick(50, 1), 3);
    assert_eq!(s.cycles_per_epoch(), 6);
    let mut tracer = Tracer::default();
    let stats = s.train_epoch(&mut tracer).unwrap();
    assert_eq!(stats.batches, 12);
    let order: Vec<&str> = tracer.isolation.iter().map(|(d, _)| d.as_str()).collect();
    assert_eq!(order, ["a", "b"].repeat(6));
    for (dataset, norms) in &tracer.isolation {
        for (head, norm) in norms {
            if head == dataset {
                assert!(*norm > 0.0);
            } else {
                assert_eq!(*norm, 0.0, "head {head} during batch of {dataset}");
            }
        }
    }
}

#[test]
fn duplicate_dataset_names_are_rejected() {
    let a = train_only("same", graph_with_edges(5, 5, 10, 0, 1));
    let b = train_only("same", graph_with_edges(5, 5, 10, 0, 2));
    let model = tiny_config(4, 1);
    let heads = vec![
        (&a, ProjectionHead::for_graph(&model, a.train_graph(), 0)),
        (&b, ProjectionHead::for_graph(&model, b.train_graph(), 0)),
    ];
    let err = Session::new(Backbone::init(model, 0).unwrap(), heads, quick(4, 1)).err().unwrap();
    assert!(err.to_string().contains("duplicate"), "{err}");
}

#[test]
fn equal_seeds_give_identical_parameters() {
    let data = train_only("g", graph_with_edges(15, 15, 60, 2, 9));
    let run = |execution| {
        let mut s = session(&[&data], TrainConfig { execution, ..quick(16, 2) }, 4);
        for _ in 0..2 {
            s.train_epoch(&mut ()).unwrap();
        }
        let (backbone, heads) = s.into_parts();
        (backbone.params, heads["g"].params.clone())
    };
    let first = run(Execution::Sequential);
    assert_eq!(first, run(Execution::Sequential));
    assert_eq!(first, run(Execution::Parallel));
}

#[test]
fn every_parameter_receives_gradient() {
    let data = train_only("g", graph_with_edges(20, 20, 120, 2, 11));
    let mut s = session(&[&data], quick(40, 1), 11);
    s.train_epoch(&mut ()).unwrap();
    for (name, g) in s.backbone.params.iter_grads() {
        assert!(g.norm() > 0.0, "backbone {name}");
    }
    let (_, heads) = s.into_parts();
    // the head steps after its batch; its gradients are left in place
    for (name, g) in heads["g"].params.iter_grads() {
        assert!(g.norm() > 0.0, "head {name}");
    }
}

#[test]
fn random_heads_leave_the_trained_head_untouched() {
    let data = train_only("g", graph_with_edges(10, 10, 40, 2, 4));
    let config = TrainConfig { random_head_rate: 1.0, ..quick(8, 1) };
    let mut s = session(&[&data], config, 2);
    let before = s.head("g").unwrap().params.clone();
    let backbone_before = s.backbone.params.clone();
    s.train_epoch(&mut ()).unwrap();
    let after = &s.head("g").unwrap().params;
    assert!(before.iter().zip(after.iter()).all(|(a, b)| a == b));
    assert!(backbone_before.iter().zip(s.backbone.params.iter()).any(|(a, b)| a != b));
}

#[test]
fn epoch_loss_decreases_early_on_small_synthetic_graphs() {
    let spec = SynthSpec {
        num_users: 60,
        num_items: 60,
        num_clusters: 3,
        p_intra: 0.15,
        p_inter: 0.005,
        feature_dim: 3,
        ..SynthSpec::default()
    };
    let mut decreasing = 0;
    let mut curves = Vec::new();
    for seed in 0..3 {
        let g = generate(&spec.with_seed(seed)).unwrap().graph;
        let data = train_only("s", g);
        let mut s = session(&[&data], TrainConfig { seed, ..quick(32, 5) }, seed);
        let losses: Vec<f64> = (0..5).map(|_| s.train_epoch(&mut ()).unwrap().mean_loss).collect();
        if losses.windows(2).all(|w| w[1] < w[0]) {
            decreasing += 1;
        }
        curves.push(losses);
    }
    assert!(decreasing >= 2, "{curves:?}");
}

#[test]
fn fit_with_zero_epochs_keeps_the_start() {
    let g = graph_with_edges(12, 12, 60, 1, 6);
    let data = Dataset::with_ratios("g", g, (0.8, 0.1, 0.1), 1).unwrap();
    let mut s = session(&[&data], quick(16, 0), 1);
    let before = s.backbone.params.clone();
    let report = s.fit(&mut ()).unwrap();
    assert!(report.history.is_empty());
    assert_eq!(report.best_epoch, 0);
    assert!(report.best_valid.is_some());
    assert_eq!(s.backbone.params, before);
}

#[test]
fn early_stopping_respects_patience() {
    let g = graph_with_edges(12, 12, 60, 1, 8);
    let data = Dataset::with_ratios("g", g, (0.8, 0.1, 0.1), 2).unwrap();
    let config = TrainConfig { patience: Some(1), adam: AdamConfig { lr: 1e-9, ..AdamConfig::default() }, ..quick(16, 10) };
    let mut s = session(&[&data], config, 2);
    let report = s.fit(&mut ()).unwrap();
    // a vanishing step size cannot improve validation, so the first stale epoch stops training
    assert_eq!(report.history.len(), 1);
    assert_eq!(report.best_epoch, 0);
}

#[test]
fn invalid_configs_are_rejected() {
    for bad in [
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
        TrainConfig { n_negatives: 0, ..TrainConfig::default() },
        TrainConfig { random_head_rate: 1.5, ..TrainConfig::default() },
    ] {
        assert!(bad.validate().is_err());
    }
}
