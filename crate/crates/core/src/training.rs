//! Training: strict negative sampling, the weighted logistic loss, and the
//! batch loop with batch-edge removal.
//!
//! One [`Session`] trains a shared backbone together with one projection
//! head per dataset. Batches are drawn round-robin, one per dataset per
//! cycle; every head steps on its own batch and the backbone steps once per
//! cycle on the summed gradient. With a single dataset a cycle is a batch.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::diff::{Adam, AdamConfig, GatherCsr, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions, Metric};
use crate::exec::{default_wave, derive_seed, map_fold, Execution};
use crate::graph::{GraphView, InteractionGraph};
use crate::model::{ArcStage, Backbone, ProjectionHead, Propagator};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Positive edges per batch.
    pub batch_size: usize,
    /// Negatives per positive.
    pub n_negatives: usize,
    pub adam: AdamConfig,
    pub epochs: usize,
    pub seed: u64,
    /// Stop after this many epochs without a validation improvement.
    pub patience: Option<usize>,
    /// Cutoff of the validation Hits@K used for model selection.
    pub valid_k: usize,
    pub execution: Execution,
    /// Probability that a batch runs through a freshly drawn, frozen head
    /// instead of its dataset's trained head.
    pub random_head_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 256,
            n_negatives: 8,
            adam: AdamConfig::default(),
            epochs: 20,
            seed: 0,
            patience: Some(5),
            valid_k: 10,
            execution: Execution::default(),
            random_head_rate: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.n_negatives == 0 {
            return Err(Error::InvalidArgument(
                "batch_size and n_negatives must be >= 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.random_head_rate) {
            return Err(Error::InvalidArgument("random_head_rate must be in [0, 1]".into()));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::InvalidArgument("lr must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Corruption {
    Head,
    Tail,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CorruptionPolicy {
    /// Fair coin per draw.
    #[default]
    Either,
    HeadOnly,
    TailOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Negative {
    pub user: u32,
    pub item: u32,
    pub corrupted: Corruption,
}

/// Draws `n` corruptions of `positive` that are absent from `train`.
///
/// Each draw replaces the user or the item (coin flip per attempt) with a
/// uniform node of that side and is rejected while the pair is a training
/// edge. Fails after `100 * n` rejections.
pub fn sample_strict_negatives<R: Rng>(
    train: &InteractionGraph,
    positive: (u32, u32),
    n: usize,
    policy: CorruptionPolicy,
    rng: &mut R,
) -> Result<Vec<Negative>> {
    let budget = 100 * n.max(1);
    let mut rejections = 0usize;
    let mut out = Vec::with_capacity(n);
    let (nu, ni) = (train.num_users() as u32, train.num_items() as u32);
    while out.len() < n {
        let side = match policy {
            CorruptionPolicy::Either => {
                if rng.random_bool(0.5) {
                    Corruption::Head
                } else {
                    Corruption::Tail
                }
            }
            CorruptionPolicy::HeadOnly => Corruption::Head,
            CorruptionPolicy::TailOnly => Corruption::Tail,
        };
        let (user, item) = match side {
            Corruption::Head => (rng.random_range(0..nu), positive.1),
            Corruption::Tail => (positive.0, rng.random_range(0..ni)),
        };
        if train.contains(user, item) {
            rejections += 1;
            if rejections > budget {
                return Err(Error::NegativeSampling { attempts: rejections });
            }
            continue;
        }
        out.push(Negative {
            user,
            item,
            corrupted: side,
        });
    }
    Ok(out)
}

/// All candidates scored from one query user, with their labels and loss weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Query {
    pub user: usize,
    pub items: Vec<usize>,
    pub targets: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Groups positives and negatives by query user.
///
/// Positive weights are `1/P` and negative weights `1/(P n)`, so the summed
/// query losses equal the batch-mean of `-ln p(pos) - (1/n) sum ln(1 - p(neg))`.
pub fn build_queries(
    graph: &InteractionGraph,
    positives: &[(u32, u32)],
    negatives: &[Vec<Negative>],
) -> Vec<Query> {
    let p = positives.len() as f64;
    let mut by_user: BTreeMap<u32, Query> = BTreeMap::new();
    let mut push = |user: u32, item: u32, target: f64, weight: f64| {
        let q = by_user.entry(user).or_insert_with(|| Query {
            user: user as usize,
            items: Vec::new(),
            targets: Vec::new(),
            weights: Vec::new(),
        });
        q.items.push(graph.item_node(item));
        q.targets.push(target);
        q.weights.push(weight);
    };
    for (k, &(u, i)) in positives.iter().enumerate() {
        push(u, i, 1.0, 1.0 / p);
        let negs = &negatives[k];
        let per = 1.0 / (p * negs.len().max(1) as f64);
        for neg in negs {
            push(neg.user, neg.item, 0.0, per);
        }
    }
    by_user.into_values().collect()
}

/// Loss value of a batch, forward only.
pub fn batch_loss(
    backbone: &Backbone,
    head: &ProjectionHead,
    view: &GraphView<'_>,
    queries: &[Query],
) -> Result<f64> {
    let prop = Propagator::new(backbone, head, view)?;
    let mut total = 0.0;
    for q in queries {
        let pass = prop.pass(q.user, &q.items)?;
        total += pass.backward(&q.targets, &q.weights)?.loss;
    }
    Ok(total)
}

/// Adds the gradients of a batch loss into the backbone and head stores and returns the loss.
///
/// `inspect` sees the gather structure the forward pass iterates, before
/// any query runs.
pub fn accumulate_gradients(
    backbone: &mut Backbone,
    head: &mut ProjectionHead,
    view: &GraphView<'_>,
    queries: &[Query],
    execution: Execution,
    inspect: Option<&mut dyn FnMut(&GatherCsr)>,
) -> Result<f64> {
    let stage = ArcStage::forward(backbone, head, view.graph())?;
    let num_layers = backbone.num_layers();
    let (loss, param_grads, weight_grads) = {
        let prop = Propagator::from_stage(backbone, &stage, view);
        if let Some(f) = inspect {
            f(prop.csr());
        }
        let init: Result<(f64, BTreeMap<String, Tensor>, Vec<Option<Tensor>>)> =
            Ok((0.0, BTreeMap::new(), vec![None; num_layers]));
        map_fold(
            execution,
            queries,
            default_wave(),
            |q| prop.pass(q.user, &q.items)?.backward(&q.targets, &q.weights),
            init,
            |acc, r| {
                let (mut loss, mut params, mut weights) = acc?;
                let g = r?;
                loss += g.loss;
                for (name, t) in g.params {
                    match params.get_mut(&name) {
                        Some(e) => e.add_assign(&t),
                        None => {
                            params.insert(name, t);
                        }
                    }
                }
                for (slot, t) in weights.iter_mut().zip(g.weights) {
                    match slot {
                        Some(e) => e.add_assign(&t),
                        None => *slot = Some(t),
                    }
                }
                Ok((loss, params, weights))
            },
        )?
    };
    for (name, g) in &param_grads {
        backbone.params.accumulate(name, g);
    }
    let seeds: Vec<Tensor> = stage
        .weights()
        .iter()
        .zip(weight_grads)
        .map(|(w, g)| g.unwrap_or_else(|| Tensor::zeros(w.shape())))
        .collect();
    let grads = stage.backward(seeds)?;
    grads.accumulate_into(&mut backbone.params);
    grads.accumulate_into(&mut head.params);
    Ok(loss)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub batches: usize,
    pub seconds: f64,
    /// Mean validation Hits@K across datasets, when validation ran.
    pub valid: Option<f64>,
}

/// What the forward pass of one batch saw.
pub struct BatchTrace<'a> {
    pub epoch: usize,
    pub cycle: usize,
    pub dataset: &'a str,
    pub graph: &'a InteractionGraph,
    /// Edge ids (in the training graph) of the batch positives.
    pub batch_edges: &'a [usize],
    /// Gather structure the batch's message passing iterated.
    pub csr: &'a GatherCsr,
    pub loss: f64,
    /// Gradient norm of every head right after this batch's backward.
    pub head_grad_norms: Vec<(String, f64)>,
}

pub trait TrainObserver {
    /// Whether [`TrainObserver::on_batch`] should be called. Tracing copies the gather structure.
    fn wants_batches(&self) -> bool {
        false
    }
    fn on_batch(&mut self, _trace: &BatchTrace<'_>) {}
    fn on_epoch(&mut self, _stats: &EpochStats) {}
}

impl TrainObserver for () {}

struct Task<'d> {
    dataset: &'d Dataset,
    head: ProjectionHead,
    opt: Adam,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl Task<'_> {
    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        if self.cursor == 0 {
            self.order = (0..self.dataset.train_graph().num_edges()).collect();
            self.order.shuffle(&mut self.rng);
        }
        let end = (self.cursor + size).min(self.order.len());
        let batch = self.order[self.cursor..end].to_vec();
        self.cursor = if end >= self.order.len() { 0 } else { end };
        batch
    }

    fn batches_per_epoch(&self, size: usize) -> usize {
        self.dataset.train_graph().num_edges().div_ceil(size)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_valid: Option<f64>,
}

/// Joint training of one backbone and one head per dataset.
pub struct Session<'d> {
    pub backbone: Backbone,
    backbone_opt: Adam,
    tasks: Vec<Task<'d>>,
    config: TrainConfig,
    epoch: usize,
}

impl<'d> Session<'d> {
    /// `heads` pairs each dataset with its projection head.
    pub fn new(backbone: Backbone, tasks: Vec<(&'d Dataset, ProjectionHead)>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if tasks.is_empty() {
            return Err(Error::InvalidArgument("training needs at least one dataset".into()));
        }
        let mut names = std::collections::HashSet::new();
        for (d, head) in &tasks {
            if !names.insert(d.name.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate dataset name '{}'", d.name)));
            }
            if d.train_graph().num_edges() == 0 {
                return Err(Error::EmptySplit("train"));
            }
            if !backbone.config.structural_only && head.arc_dim() != d.graph.arc_dim() {
                return Err(Error::Shape(format!(
                    "head for '{}' expects arc width {}, graph has {}",
                    d.name,
                    head.arc_dim(),
                    d.graph.arc_dim()
                )));
            }
        }
        let tasks = tasks
            .into_iter()
            .map(|(dataset, head)| Task {
                dataset,
                head,
                opt: Adam::new(config.adam),
                order: Vec::new(),
                cursor: 0,
                rng: ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &format!("train/{}", dataset.name))),
            })
            .collect();
        Ok(Session {
            backbone_opt: Adam::new(config.adam),
            backbone,
            tasks,
            config,
            epoch: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn head(&self, dataset: &str) -> Option<&ProjectionHead> {
        self.tasks
            .iter()
            .find(|t| t.dataset.name == dataset)
            .map(|t| &t.head)
    }

    pub fn heads(&self) -> BTreeMap<String, ProjectionHead> {
        self.tasks
            .iter()
            .map(|t| (t.dataset.name.clone(), t.head.clone()))
            .collect()
    }

    pub fn into_parts(self) -> (Backbone, BTreeMap<String, ProjectionHead>) {
        let heads = self
            .tasks
            .into_iter()
            .map(|t| (t.dataset.name.clone(), t.head))
            .collect();
        (self.backbone, heads)
    }

    /// Cycles per epoch: batches per epoch of the largest dataset.
    pub fn cycles_per_epoch(&self) -> usize {
        self.tasks
            .iter()
            .map(|t| t.batches_per_epoch(self.config.batch_size))
            .max()
            .unwrap_or(0)
    }

    pub fn train_epoch(&mut self, observer: &mut dyn TrainObserver) -> Result<EpochStats> {
        let start = Instant::now();
        let cycles = self.cycles_per_epoch();
        let mut total = 0.0;
        let mut batches = 0usize;
        for cycle in 0..cycles {
            self.backbone.params.zero_grad();
            let mut cycle_loss = 0.0;
            for k in 0..self.tasks.len() {
                let loss = self.run_batch(k, cycle, observer)?;
                cycle_loss += loss;
                total += loss;
                batches += 1;
            }
            if !cycle_loss.is_finite() || !self.backbone.params.grad_norm().is_finite() {
                return Err(Error::NonFinite {
                    batch: batches,
                    diagnostics: self.diagnostics(),
                });
            }
            self.backbone_opt.step(&mut self.backbone.params);
        }
        let stats = EpochStats {
            epoch: self.epoch,
            mean_loss: if batches > 0 { total / batches as f64 } else { 0.0 },
            batches,
            seconds: start.elapsed().as_secs_f64(),
            valid: None,
        };
        self.epoch += 1;
        Ok(stats)
    }

    fn run_batch(&mut self, k: usize, cycle: usize, observer: &mut dyn TrainObserver) -> Result<f64> {
        let batch_size = self.config.batch_size;
        let n = self.config.n_negatives;
        let execution = self.config.execution;
        let epoch = self.epoch;
        for t in &mut self.tasks {
            t.head.params.zero_grad();
        }
        let task = &mut self.tasks[k];
        let graph = task.dataset.train_graph();
        let batch = task.next_batch(batch_size);
        let positives: Vec<(u32, u32)> = batch
            .iter()
            .map(|&id| {
                let e = graph.edge(id);
                (e.user, e.item)
            })
            .collect();
        let mut negatives = Vec::with_capacity(positives.len());
        for &pos in &positives {
            negatives.push(sample_strict_negatives(graph, pos, n, CorruptionPolicy::Either, &mut task.rng)?);
        }
        let queries = build_queries(graph, &positives, &negatives);
        let view = graph.mask(&batch)?;

        let rate = self.config.random_head_rate;
        let random_head = rate > 0.0 && task.rng.random_bool(rate);
        let mut drawn = random_head.then(|| {
            let config = self.backbone.config.clone();
            ProjectionHead::init(&config, task.head.standardizer.clone(), task.rng.random())
        });
        let mut seen: Option<GatherCsr> = None;
        let mut keep = |csr: &GatherCsr| seen = Some(csr.clone());
        let wants_trace = observer.wants_batches();
        let inspect: Option<&mut dyn FnMut(&GatherCsr)> = if wants_trace { Some(&mut keep) } else { None };
        let head = drawn.as_mut().unwrap_or(&mut task.head);
        let loss = accumulate_gradients(&mut self.backbone, head, &view, &queries, execution, inspect)?;
        if !loss.is_finite() || !task.head.params.grad_norm().is_finite() {
            let diagnostics = self.diagnostics();
            return Err(Error::NonFinite {
                batch: cycle,
                diagnostics,
            });
        }
        let task = &mut self.tasks[k];
        if !random_head {
            task.opt.step(&mut task.head.params);
        }

        if let Some(csr) = seen {
            let head_grad_norms = self
                .tasks
                .iter()
                .map(|t| (t.dataset.name.clone(), t.head.params.grad_norm()))
                .collect();
            let task = &self.tasks[k];
            observer.on_batch(&BatchTrace {
                epoch,
                cycle,
                dataset: &task.dataset.name,
                graph: task.dataset.train_graph(),
                batch_edges: &batch,
                csr: &csr,
                loss,
                head_grad_norms,
            });
        }
        Ok(loss)
    }

    fn diagnostics(&self) -> String {
        let mut parts = vec![format!("backbone |w| = {:.4e}", self.backbone.params.param_norm())];
        for t in &self.tasks {
            parts.push(format!("head '{}' |w| = {:.4e}", t.dataset.name, t.head.params.param_norm()));
        }
        parts.join(", ")
    }

    /// Mean validation Hits@K across datasets with a non-empty valid split.
    pub fn validate(&self) -> Result<Option<f64>> {
        let options = EvalOptions {
            metrics: vec![Metric::Hits(self.config.valid_k)],
            seed: self.config.seed,
            execution: self.config.execution,
            ..EvalOptions::default()
        };
        let mut scores = Vec::new();
        for t in &self.tasks {
            let queries = t.dataset.valid_queries();
            if queries.is_empty() {
                continue;
            }
            let report = evaluate(
                &self.backbone,
                &t.head,
                t.dataset.train_graph(),
                &queries,
                &t.dataset.known_items(false),
                &options,
            )?;
            scores.push(report.hits(self.config.valid_k));
        }
        if scores.is_empty() {
            return Ok(None);
        }
        Ok(Some(scores.iter().sum::<f64>() / scores.len() as f64))
    }

    /// Trains for the configured epochs, keeping the parameters with the best validation score.
    ///
    /// The untrained parameters are a candidate too, so zero epochs returns
    /// the starting point. Without validation data the last epoch is kept.
    pub fn fit(&mut self, observer: &mut dyn TrainObserver) -> Result<FitReport> {
        let mut history = Vec::new();
        let mut best_valid = self.validate()?;
        let mut best_epoch = 0usize;
        let mut best = self.snapshot();
        let mut stale = 0usize;
        for epoch in 1..=self.config.epochs {
            let mut stats = self.train_epoch(observer)?;
            stats.valid = self.validate()?;
            observer.on_epoch(&stats);
            let improved = match (stats.valid, best_valid) {
                (Some(v), Some(b)) => v > b,
                _ => true,
            };
            history.push(stats.clone());
            if improved {
                best_valid = stats.valid;
                best_epoch = epoch;
                best = self.snapshot();
                stale = 0;
            } else {
                stale += 1;
                if self.config.patience.is_some_and(|p| stale >= p) {
                    break;
                }
            }
        }
        self.restore(best);
        Ok(FitReport {
            history,
            best_epoch,
            best_valid,
        })
    }

    fn snapshot(&self) -> (ParamStore, Vec<ParamStore>) {
        (
            self.backbone.params.clone(),
            self.tasks.iter().map(|t| t.head.params.clone()).collect(),
        )
    }

    fn restore(&mut self, (backbone, heads): (ParamStore, Vec<ParamStore>)) {
        self.backbone.params = backbone;
        for (t, h) in self.tasks.iter_mut().zip(heads) {
            t.head.params = h;
        }
    }
}
