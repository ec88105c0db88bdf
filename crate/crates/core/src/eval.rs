//! Filtered ranking evaluation.
//!
//! Every held-out `(user, item)` pair is one query. All items are scored
//! from the user, the user's other known positives are removed from the
//! candidate list, and the held-out item's rank is the expected rank under
//! random tie-breaking.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{derive_seed, map_ordered, Execution};
use crate::graph::InteractionGraph;
use crate::model::{Backbone, ProjectionHead, Propagator};

/// Known positive items per user, excluded from ranking.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KnownItems {
    by_user: HashMap<u32, HashSet<u32>>,
}

impl KnownItems {
    pub fn new() -> Self {
        KnownItems::default()
    }

    pub fn insert(&mut self, user: u32, item: u32) {
        self.by_user.entry(user).or_default().insert(item);
    }

    pub fn items(&self, user: u32) -> Option<&HashSet<u32>> {
        self.by_user.get(&user)
    }

    pub fn contains(&self, user: u32, item: u32) -> bool {
        self.by_user.get(&user).is_some_and(|s| s.contains(&item))
    }
}

/// `1 + #{strictly higher} + #{tied} / 2` over unfiltered items other than the true one.
pub fn filtered_rank(scores: &[f64], true_item: usize, filter: &HashSet<u32>) -> Result<f64> {
    if true_item >= scores.len() {
        return Err(Error::InvalidArgument(format!(
            "true item {true_item} outside {} scores",
            scores.len()
        )));
    }
    if filter.contains(&(true_item as u32)) {
        return Err(Error::TrueItemFiltered(true_item));
    }
    let target = scores[true_item];
    let mut higher = 0usize;
    let mut tied = 0usize;
    for (j, &s) in scores.iter().enumerate() {
        if j == true_item || filter.contains(&(j as u32)) {
            continue;
        }
        if s > target {
            higher += 1;
        } else if s == target {
            tied += 1;
        }
    }
    Ok(1.0 + higher as f64 + tied as f64 / 2.0)
}

pub fn hits_at_k(ranks: &[f64], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().filter(|&&r| r <= k as f64).count() as f64 / ranks.len() as f64
}

/// Single-relevant-item NDCG, so the ideal DCG is 1.
pub fn ndcg_at_k(ranks: &[f64], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks
        .iter()
        .map(|&r| if r <= k as f64 { 1.0 / (r + 1.0).log2() } else { 0.0 })
        .sum::<f64>()
        / ranks.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    Hits(usize),
    Ndcg(usize),
}

impl Metric {
    pub fn compute(self, ranks: &[f64]) -> f64 {
        match self {
            Metric::Hits(k) => hits_at_k(ranks, k),
            Metric::Ndcg(k) => ndcg_at_k(ranks, k),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::Hits(k) => write!(f, "hits@{k}"),
            Metric::Ndcg(k) => write!(f, "ndcg@{k}"),
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        let (name, k) = lower
            .split_once('@')
            .ok_or_else(|| Error::InvalidArgument(format!("metric '{s}' must look like hits@10")))?;
        let k: usize = k
            .parse()
            .ok()
            .filter(|k| *k >= 1)
            .ok_or_else(|| Error::InvalidArgument(format!("bad cutoff in metric '{s}'")))?;
        match name {
            "hits" => Ok(Metric::Hits(k)),
            "ndcg" => Ok(Metric::Ndcg(k)),
            _ => Err(Error::InvalidArgument(format!("unknown metric '{s}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CandidatePolicy {
    /// Rank against every unfiltered item.
    #[default]
    Full,
    /// Rank against this many uniformly drawn unfiltered items.
    Sampled(usize),
}

impl FromStr for CandidatePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "full" {
            return Ok(CandidatePolicy::Full);
        }
        if let Some(n) = s.strip_prefix("sampled:") {
            let n = n
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad candidate count in '{s}'")))?;
            return Ok(CandidatePolicy::Sampled(n));
        }
        Err(Error::InvalidArgument(format!(
            "candidate policy '{s}' must be 'full' or 'sampled:N'"
        )))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRank {
    pub user: u32,
    pub item: u32,
    pub rank: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub metric: BTreeMap<String, f64>,
    pub queries: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_query: Option<Vec<QueryRank>>,
}

impl RankingReport {
    pub fn from_ranks(records: Vec<QueryRank>, metrics: &[Metric]) -> Self {
        let ranks: Vec<f64> = records.iter().map(|r| r.rank).collect();
        let metric = metrics
            .iter()
            .map(|m| (m.to_string(), m.compute(&ranks)))
            .collect();
        RankingReport {
            metric,
            queries: records.len(),
            per_query: Some(records),
        }
    }

    pub fn get(&self, metric: Metric) -> Option<f64> {
        self.metric.get(&metric.to_string()).copied()
    }

    pub fn hits(&self, k: usize) -> f64 {
        self.get(Metric::Hits(k)).unwrap_or_else(|| {
            let ranks: Vec<f64> = self.ranks();
            hits_at_k(&ranks, k)
        })
    }

    pub fn ranks(&self) -> Vec<f64> {
        self.per_query
            .as_ref()
            .map(|p| p.iter().map(|r| r.rank).collect())
            .unwrap_or_default()
    }

    /// JSON document; per-query records only when `with_queries`.
    pub fn to_json(&self, with_queries: bool) -> Result<String> {
        let mut out = self.clone();
        if !with_queries {
            out.per_query = None;
        }
        Ok(serde_json::to_string_pretty(&out)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub metrics: Vec<Metric>,
    pub candidates: CandidatePolicy,
    pub seed: u64,
    pub execution: Execution,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            metrics: vec![Metric::Hits(10), Metric::Ndcg(20)],
            candidates: CandidatePolicy::Full,
            seed: 0,
            execution: Execution::default(),
        }
    }
}

/// Ranks every `(user, item)` query given a per-user scoring function over all items.
///
/// Queries sharing a user share one call of `score_user`.
pub fn rank_queries<F>(
    num_items: usize,
    queries: &[(u32, u32)],
    known: &KnownItems,
    options: &EvalOptions,
    score_user: F,
) -> Result<RankingReport>
where
    F: Fn(u32) -> Result<Vec<f64>> + Sync + Send,
{
    if queries.is_empty() {
        return Err(Error::InvalidArgument("no queries to evaluate".into()));
    }
    let mut users: Vec<u32> = Vec::new();
    let mut seen = HashSet::new();
    for &(u, _) in queries {
        if seen.insert(u) {
            users.push(u);
        }
    }
    let scored = map_ordered(options.execution, &users, |&u| score_user(u));
    let mut by_user = HashMap::with_capacity(users.len());
    for (u, s) in users.into_iter().zip(scored) {
        let s = s?;
        if s.len() != num_items {
            return Err(Error::Shape(format!("{} scores for {num_items} items", s.len())));
        }
        by_user.insert(u, s);
    }
    let empty = HashSet::new();
    let mut records = Vec::with_capacity(queries.len());
    for (q, &(u, i)) in queries.iter().enumerate() {
        let scores = &by_user[&u];
        let mut filter = known.items(u).cloned().unwrap_or_else(|| empty.clone());
        filter.remove(&i);
        let rank = match options.candidates {
            CandidatePolicy::Full => filtered_rank(scores, i as usize, &filter)?,
            CandidatePolicy::Sampled(n) => {
                let pool: Vec<usize> = (0..num_items)
                    .filter(|&j| j != i as usize && !filter.contains(&(j as u32)))
                    .collect();
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(options.seed, &format!("candidates/{q}")));
                let picked = sample(&mut rng, pool.len(), n.min(pool.len()));
                let mut sub = Vec::with_capacity(picked.len() + 1);
                sub.push(scores[i as usize]);
                sub.extend(picked.iter().map(|k| scores[pool[k]]));
                filtered_rank(&sub, 0, &empty)?
            }
        };
        records.push(QueryRank { user: u, item: i, rank });
    }
    Ok(RankingReport::from_ranks(records, &options.metrics))
}

/// Evaluates a model on `queries`, message passing over `graph`.
pub fn evaluate(
    backbone: &Backbone,
    head: &ProjectionHead,
    graph: &InteractionGraph,
    queries: &[(u32, u32)],
    known: &KnownItems,
    options: &EvalOptions,
) -> Result<RankingReport> {
    let view = graph.view();
    let propagator = Propagator::new(backbone, head, &view)?;
    let items: Vec<usize> = (0..graph.num_items()).map(|i| graph.item_node(i as u32)).collect();
    rank_queries(graph.num_items(), queries, known, options, |u| {
        propagator.score(u as usize, &items)
    })
}
