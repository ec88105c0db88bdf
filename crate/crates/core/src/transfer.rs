//! End-to-end training, zero-shot transfer, fine-tuning, multi-graph
//! pretraining and the cross-dataset transfer matrix.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, TrainingMeta};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions, Metric, RankingReport};
use crate::exec::derive_seed;
use crate::model::{Backbone, ModelConfig, ProjectionHead};
use crate::training::{FitReport, Session, TrainConfig, TrainObserver};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferMode {
    EndToEnd,
    ZeroShot,
    FineTune,
}

/// Seed of the fresh head built for `dataset`.
pub fn head_seed(seed: u64, dataset: &str) -> u64 {
    derive_seed(seed, &format!("head/{dataset}"))
}

/// A fresh head for the dataset, standardized on its training arcs.
pub fn fresh_head(config: &ModelConfig, dataset: &Dataset, seed: u64) -> ProjectionHead {
    ProjectionHead::for_graph(config, dataset.train_graph(), head_seed(seed, &dataset.name))
}

/// Test-split report of a model on a dataset.
pub fn test_report(
    backbone: &Backbone,
    head: &ProjectionHead,
    dataset: &Dataset,
    eval: &EvalOptions,
) -> Result<RankingReport> {
    let queries = dataset.test_queries();
    if queries.is_empty() {
        return Err(Error::EmptySplit("test"));
    }
    evaluate(
        backbone,
        head,
        dataset.train_graph(),
        &queries,
        &dataset.known_items(true),
        eval,
    )
}

#[derive(Clone, Debug)]
pub struct Trained {
    pub checkpoint: Checkpoint,
    pub fit: FitReport,
    /// Test reports keyed by dataset name.
    pub reports: BTreeMap<String, RankingReport>,
}

/// Trains one backbone with one head per dataset, round-robin over datasets.
pub fn multi_graph_pretrain(
    datasets: &[&Dataset],
    model: &ModelConfig,
    train: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<(Checkpoint, FitReport)> {
    let backbone = Backbone::init(model.clone(), derive_seed(train.seed, "backbone"))?;
    let tasks = datasets
        .iter()
        .map(|&d| (d, fresh_head(model, d, train.seed)))
        .collect();
    let mut session = Session::new(backbone, tasks, train.clone())?;
    let fit = session.fit(observer)?;
    let (backbone, heads) = session.into_parts();
    let meta = TrainingMeta {
        epochs: fit.history.len(),
        seeds: vec![train.seed],
        sources: datasets.iter().map(|d| d.name.clone()).collect(),
        extra: BTreeMap::from([("best_epoch".to_string(), fit.best_epoch.to_string())]),
    };
    Ok((Checkpoint::new(&backbone, heads, meta), fit))
}

/// Trains on the dataset and reports on its test split.
pub fn end_to_end(dataset: &Dataset, model: &ModelConfig, train: &TrainConfig, eval: &EvalOptions) -> Result<Trained> {
    let (checkpoint, fit) = multi_graph_pretrain(&[dataset], model, train, &mut ())?;
    let report = test_report(
        &checkpoint.backbone(),
        checkpoint.head(&dataset.name).expect("head for trained dataset"),
        dataset,
        eval,
    )?;
    Ok(Trained {
        checkpoint,
        fit,
        reports: BTreeMap::from([(dataset.name.clone(), report)]),
    })
}

/// Evaluates a pretrained backbone on `target` through a fresh, untrained head.
pub fn zero_shot(backbone: &Backbone, target: &Dataset, seed: u64, eval: &EvalOptions) -> Result<RankingReport> {
    let head = fresh_head(&backbone.config, target, seed);
    test_report(backbone, &head, target, eval)
}

/// Trains the whole pretrained model with a fresh target head, then reports on the target test split.
///
/// The head is seeded exactly as in [`zero_shot`], so zero epochs reproduces it.
pub fn fine_tune(backbone: &Backbone, target: &Dataset, train: &TrainConfig, eval: &EvalOptions) -> Result<Trained> {
    let head = fresh_head(&backbone.config, target, train.seed);
    let mut session = Session::new(backbone.clone(), vec![(target, head)], train.clone())?;
    let fit = session.fit(&mut ())?;
    let (backbone, heads) = session.into_parts();
    let report = test_report(&backbone, &heads[&target.name], target, eval)?;
    let meta = TrainingMeta {
        epochs: fit.history.len(),
        seeds: vec![train.seed],
        sources: vec![target.name.clone()],
        extra: BTreeMap::from([("mode".to_string(), "fine_tune".to_string())]),
    };
    Ok(Trained {
        checkpoint: Checkpoint::new(&backbone, heads, meta),
        fit,
        reports: BTreeMap::from([(target.name.clone(), report)]),
    })
}

/// Reports indexed `[target][source]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub names: Vec<String>,
    pub metric: String,
    pub reports: Vec<Vec<RankingReport>>,
}

impl TransferMatrix {
    pub fn raw(&self) -> Vec<Vec<f64>> {
        self.reports
            .iter()
            .map(|row| row.iter().map(|r| r.metric.get(&self.metric).copied().unwrap_or(0.0)).collect())
            .collect()
    }

    /// Every row divided by its maximum.
    pub fn normalized(&self) -> Vec<Vec<f64>> {
        self.raw()
            .into_iter()
            .map(|row| {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                row.iter().map(|v| if max > 0.0 { v / max } else { 0.0 }).collect()
            })
            .collect()
    }

    /// Header of source names, one row per target, cells `raw;normalized`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("target");
        for n in &self.names {
            let _ = write!(out, ",{n}");
        }
        out.push('\n');
        for ((name, raw), norm) in self.names.iter().zip(self.raw()).zip(self.normalized()) {
            out.push_str(name);
            for (r, n) in raw.iter().zip(norm) {
                let _ = write!(out, ",{r:.6};{n:.6}");
            }
            out.push('\n');
        }
        out
    }
}

/// Pretrains one backbone per source and zero-shot evaluates it on every target,
/// its own dataset included.
pub fn transfer_matrix(
    datasets: &[&Dataset],
    model: &ModelConfig,
    train: &TrainConfig,
    eval: &EvalOptions,
) -> Result<TransferMatrix> {
    if datasets.len() < 2 {
        return Err(Error::InvalidArgument("transfer matrix needs at least 2 datasets".into()));
    }
    let metric = eval
        .metrics
        .first()
        .copied()
        .unwrap_or(Metric::Hits(10))
        .to_string();
    let n = datasets.len();
    let mut reports: Vec<Vec<Option<RankingReport>>> = vec![vec![None; n]; n];
    for (s, source) in datasets.iter().enumerate() {
        let (checkpoint, _) = multi_graph_pretrain(&[source], model, train, &mut ())?;
        let backbone = checkpoint.backbone();
        for (t, target) in datasets.iter().enumerate() {
            reports[t][s] = Some(zero_shot(&backbone, target, train.seed, eval)?);
        }
    }
    Ok(TransferMatrix {
        names: datasets.iter().map(|d| d.name.clone()).collect(),
        metric,
        reports: reports
            .into_iter()
            .map(|row| row.into_iter().map(Option::unwrap).collect())
            .collect(),
    })
}

/// Mean over seeds with a 95% normal-approximation half-width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub mean: f64,
    /// Absent for a single seed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ci95: Option<f64>,
    pub median: f64,
    pub values: Vec<f64>,
}

impl SeedSummary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        let mean = if n == 0 { f64::NAN } else { values.iter().sum::<f64>() / n as f64 };
        let ci95 = (n > 1).then(|| {
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
            1.96 * var.sqrt() / (n as f64).sqrt()
        });
        SeedSummary {
            mean,
            ci95,
            median: median(values),
            values: values.to_vec(),
        }
    }
}

impl std::fmt::Display for SeedSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.ci95 {
            Some(ci) => write!(f, "{:.4} ± {:.4}", self.mean, ci),
            None => write!(f, "{:.4}", self.mean),
        }
    }
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

/// Per-metric summaries across seeded reports.
pub fn summarize(reports: &[RankingReport]) -> BTreeMap<String, SeedSummary> {
    let mut by_metric: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in reports {
        for (k, v) in &r.metric {
            by_metric.entry(k.clone()).or_default().push(*v);
        }
    }
    by_metric.into_iter().map(|(k, v)| (k, SeedSummary::of(&v))).collect()
}
