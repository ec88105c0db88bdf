use crate::error::{Error, Result};
use crate::eval::KnownItems;
use crate::graph::{split_edges, DatasetSplit, InteractionGraph};

/// A named interaction graph with its split and the training graph derived from it.
///
/// The training graph holds only the train edges and is the convolution
/// graph for training, validation and testing.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub graph: InteractionGraph,
    pub split: DatasetSplit,
    train_graph: InteractionGraph,
}

impl Dataset {
    pub fn new(name: impl Into<String>, graph: InteractionGraph, split: DatasetSplit) -> Result<Self> {
        let n = graph.num_edges();
        let mut seen = vec![false; n];
        for &id in split.train.iter().chain(&split.valid).chain(&split.test) {
            if id >= n {
                return Err(Error::UnknownEdge { id, count: n });
            }
            if std::mem::replace(&mut seen[id], true) {
                return Err(Error::InvalidArgument(format!("edge {id} is in more than one split")));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::InvalidArgument("split does not cover every edge".into()));
        }
        let train_graph = graph.subgraph(&split.train)?;
        Ok(Dataset {
            name: name.into(),
            graph,
            split,
            train_graph,
        })
    }

    pub fn with_ratios(
        name: impl Into<String>,
        graph: InteractionGraph,
        ratios: (f64, f64, f64),
        seed: u64,
    ) -> Result<Self> {
        let split = split_edges(&graph, ratios, seed)?;
        Dataset::new(name, graph, split)
    }

    pub fn train_graph(&self) -> &InteractionGraph {
        &self.train_graph
    }

    fn pairs(&self, ids: &[usize]) -> Vec<(u32, u32)> {
        ids.iter()
            .map(|&id| {
                let e = self.graph.edge(id);
                (e.user, e.item)
            })
            .collect()
    }

    pub fn valid_queries(&self) -> Vec<(u32, u32)> {
        self.pairs(&self.split.valid)
    }

    pub fn test_queries(&self) -> Vec<(u32, u32)> {
        self.pairs(&self.split.test)
    }

    /// Train positives, plus valid positives when `include_valid`.
    pub fn known_items(&self, include_valid: bool) -> KnownItems {
        let mut known = KnownItems::new();
        let valid: &[usize] = if include_valid { &self.split.valid } else { &[] };
        for &id in self.split.train.iter().chain(valid) {
            let e = self.graph.edge(id);
            known.insert(e.user, e.item);
        }
        known
    }
}
