//! Bipartite interaction graphs.
//!
//! Node ids are laid out as `[users | items]`: user `u` is node `u`, item `i`
//! is node `num_users + i`. Every interaction is stored once as an
//! [`EdgeRecord`] and twice in the adjacency, once per direction. The
//! adjacency is an in-arc CSR: the arcs of node `v` are exactly the arcs
//! whose target is `v`, in edge-list order.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diff::GatherCsr;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    UserToItem,
    ItemToUser,
}

impl Direction {
    /// Value appended to the raw features of an arc.
    pub fn flag(self) -> f64 {
        match self {
            Direction::UserToItem => 1.0,
            Direction::ItemToUser => -1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdgeRecord {
    pub user: u32,
    pub item: u32,
    pub features: Vec<f64>,
}

impl EdgeRecord {
    pub fn new(user: u32, item: u32, features: Vec<f64>) -> Self {
        EdgeRecord {
            user,
            item,
            features,
        }
    }
}

/// A directed arc stored in the bucket of its target node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InArc {
    pub source: u32,
    pub target: u32,
    pub edge: u32,
    pub direction: Direction,
}

/// In-arc CSR over both directions of every interaction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adjacency {
    offsets: Vec<usize>,
    arcs: Vec<InArc>,
    /// Arc positions of each edge: `[user->item, item->user]`.
    edge_arcs: Vec<[u32; 2]>,
}

impl Adjacency {
    pub fn num_arcs(&self) -> usize {
        self.arcs.len()
    }

    pub fn in_arcs(&self, node: usize) -> &[InArc] {
        &self.arcs[self.offsets[node]..self.offsets[node + 1]]
    }

    pub fn arc_range(&self, node: usize) -> std::ops::Range<usize> {
        self.offsets[node]..self.offsets[node + 1]
    }

    pub fn arcs(&self) -> &[InArc] {
        &self.arcs
    }

    pub fn edge_arcs(&self, edge: usize) -> [u32; 2] {
        self.edge_arcs[edge]
    }
}

/// Builds the two-direction in-arc CSR for an edge list.
///
/// Edge `e` contributes `user -> item` (flag `+1`) to the item's bucket and
/// `item -> user` (flag `-1`) to the user's bucket. Buckets keep edge-list
/// order, which fixes the per-node summation order downstream.
pub fn with_inverse_arcs(num_users: usize, num_items: usize, edges: &[EdgeRecord]) -> Adjacency {
    let num_nodes = num_users + num_items;
    let mut counts = vec![0usize; num_nodes + 1];
    for e in edges {
        counts[num_users + e.item as usize + 1] += 1;
        counts[e.user as usize + 1] += 1;
    }
    for v in 0..num_nodes {
        counts[v + 1] += counts[v];
    }
    let offsets = counts;
    let mut cursor = offsets.clone();
    let placeholder = InArc {
        source: 0,
        target: 0,
        edge: 0,
        direction: Direction::UserToItem,
    };
    let mut arcs = vec![placeholder; 2 * edges.len()];
    let mut edge_arcs = Vec::with_capacity(edges.len());
    for (id, e) in edges.iter().enumerate() {
        let user = e.user as usize;
        let item = num_users + e.item as usize;

        let fwd = cursor[item];
        cursor[item] += 1;
        arcs[fwd] = InArc {
            source: user as u32,
            target: item as u32,
            edge: id as u32,
            direction: Direction::UserToItem,
        };

        let bwd = cursor[user];
        cursor[user] += 1;
        arcs[bwd] = InArc {
            source: item as u32,
            target: user as u32,
            edge: id as u32,
            direction: Direction::ItemToUser,
        };
        edge_arcs.push([fwd as u32, bwd as u32]);
    }
    Adjacency {
        offsets,
        arcs,
        edge_arcs,
    }
}

#[derive(Clone, Debug)]
pub struct InteractionGraph {
    num_users: usize,
    num_items: usize,
    d_raw: usize,
    edges: Vec<EdgeRecord>,
    adjacency: Adjacency,
    lookup: HashMap<(u32, u32), u32>,
}

impl PartialEq for InteractionGraph {
    fn eq(&self, other: &Self) -> bool {
        self.num_users == other.num_users
            && self.num_items == other.num_items
            && self.d_raw == other.d_raw
            && self.edges == other.edges
    }
}

impl InteractionGraph {
    pub fn new(
        num_users: usize,
        num_items: usize,
        d_raw: usize,
        edges: Vec<EdgeRecord>,
    ) -> Result<Self> {
        if num_users + num_items > u32::MAX as usize {
            return Err(Error::InvalidArgument("too many nodes".into()));
        }
        let mut lookup = HashMap::with_capacity(edges.len());
        for (id, e) in edges.iter().enumerate() {
            if e.user as usize >= num_users {
                return Err(Error::InvalidArgument(format!(
                    "edge {id}: user {} >= num_users {num_users}",
                    e.user
                )));
            }
            if e.item as usize >= num_items {
                return Err(Error::InvalidArgument(format!(
                    "edge {id}: item {} >= num_items {num_items}",
                    e.item
                )));
            }
            if e.features.len() != d_raw {
                return Err(Error::Shape(format!(
                    "edge {id}: {} features, expected {d_raw}",
                    e.features.len()
                )));
            }
            if lookup.insert((e.user, e.item), id as u32).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "edge {id}: duplicate pair ({}, {})",
                    e.user, e.item
                )));
            }
        }
        let adjacency = with_inverse_arcs(num_users, num_items, &edges);
        Ok(InteractionGraph {
            num_users,
            num_items,
            d_raw,
            edges,
            adjacency,
            lookup,
        })
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn num_nodes(&self) -> usize {
        self.num_users + self.num_items
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn num_arcs(&self) -> usize {
        self.adjacency.num_arcs()
    }

    /// Raw feature width, without the direction flag.
    pub fn d_raw(&self) -> usize {
        self.d_raw
    }

    /// Width of arc feature vectors: raw features plus the direction flag.
    pub fn arc_dim(&self) -> usize {
        self.d_raw + 1
    }

    pub fn edges(&self) -> &[EdgeRecord] {
        &self.edges
    }

    pub fn edge(&self, id: usize) -> &EdgeRecord {
        &self.edges[id]
    }

    pub fn adjacency(&self) -> &Adjacency {
        &self.adjacency
    }

    pub fn item_node(&self, item: u32) -> usize {
        self.num_users + item as usize
    }

    pub fn is_user_node(&self, node: usize) -> bool {
        node < self.num_users
    }

    pub fn is_item_node(&self, node: usize) -> bool {
        node >= self.num_users && node < self.num_nodes()
    }

    pub fn edge_id(&self, user: u32, item: u32) -> Option<usize> {
        self.lookup.get(&(user, item)).map(|&id| id as usize)
    }

    pub fn contains(&self, user: u32, item: u32) -> bool {
        self.lookup.contains_key(&(user, item))
    }

    pub fn in_arcs(&self, node: usize) -> &[InArc] {
        self.adjacency.in_arcs(node)
    }

    pub fn degree(&self, node: usize) -> usize {
        self.adjacency.arc_range(node).len()
    }

    /// Feature vector of an arc: its edge's raw features followed by the direction flag.
    pub fn arc_features(&self, arc_id: usize) -> Vec<f64> {
        let arc = &self.adjacency.arcs[arc_id];
        let mut out = self.edges[arc.edge as usize].features.clone();
        out.push(arc.direction.flag());
        out
    }

    /// Row-major `[num_arcs, arc_dim]` matrix of arc features in storage order.
    pub fn arc_feature_matrix(&self) -> Vec<f64> {
        let width = self.arc_dim();
        let mut out = Vec::with_capacity(self.num_arcs() * width);
        for arc in self.adjacency.arcs() {
            out.extend_from_slice(&self.edges[arc.edge as usize].features);
            out.push(arc.direction.flag());
        }
        out
    }

    /// Graph over the same node space holding only the listed edges, in the given order.
    pub fn subgraph(&self, edge_ids: &[usize]) -> Result<InteractionGraph> {
        let mut edges = Vec::with_capacity(edge_ids.len());
        for &id in edge_ids {
            let e = self.edges.get(id).ok_or(Error::UnknownEdge {
                id,
                count: self.edges.len(),
            })?;
            edges.push(e.clone());
        }
        InteractionGraph::new(self.num_users, self.num_items, self.d_raw, edges)
    }

    /// View of the graph with both arcs of every listed edge removed.
    pub fn mask(&self, edge_ids: &[usize]) -> Result<GraphView<'_>> {
        let mut masked_edges = Vec::with_capacity(edge_ids.len());
        let mut masked_arcs = Vec::with_capacity(2 * edge_ids.len());
        for &id in edge_ids {
            if id >= self.edges.len() {
                return Err(Error::UnknownEdge {
                    id,
                    count: self.edges.len(),
                });
            }
            masked_edges.push(id as u32);
            masked_arcs.extend_from_slice(&self.adjacency.edge_arcs[id]);
        }
        masked_edges.sort_unstable();
        masked_edges.dedup();
        masked_arcs.sort_unstable();
        masked_arcs.dedup();
        Ok(GraphView {
            graph: self,
            masked_edges,
            masked_arcs,
        })
    }

    /// Unmasked view.
    pub fn view(&self) -> GraphView<'_> {
        GraphView {
            graph: self,
            masked_edges: Vec::new(),
            masked_arcs: Vec::new(),
        }
    }
}

/// A graph with a set of edges hidden from message passing.
///
/// Only the masked ids are stored; the underlying graph is shared.
#[derive(Clone, Debug)]
pub struct GraphView<'a> {
    graph: &'a InteractionGraph,
    masked_edges: Vec<u32>,
    masked_arcs: Vec<u32>,
}

impl<'a> GraphView<'a> {
    pub fn graph(&self) -> &'a InteractionGraph {
        self.graph
    }

    pub fn masked_edges(&self) -> &[u32] {
        &self.masked_edges
    }

    pub fn is_edge_masked(&self, edge: usize) -> bool {
        self.masked_edges.binary_search(&(edge as u32)).is_ok()
    }

    pub fn is_arc_masked(&self, arc: usize) -> bool {
        self.masked_arcs.binary_search(&(arc as u32)).is_ok()
    }

    /// Unmasked in-arcs of `node` as `(arc_id, arc)` pairs.
    pub fn in_arcs(&self, node: usize) -> impl Iterator<Item = (usize, &'a InArc)> + '_ {
        let range = self.graph.adjacency.arc_range(node);
        let lo = self.masked_arcs.partition_point(|&a| (a as usize) < range.start);
        let hi = self.masked_arcs.partition_point(|&a| (a as usize) < range.end);
        let skip = &self.masked_arcs[lo..hi];
        let arcs = &self.graph.adjacency.arcs[range.clone()];
        let mut next = 0usize;
        arcs.iter()
            .enumerate()
            .filter_map(move |(k, arc)| {
                let id = range.start + k;
                if next < skip.len() && skip[next] as usize == id {
                    next += 1;
                    None
                } else {
                    Some((id, arc))
                }
            })
    }

    pub fn degree(&self, node: usize) -> usize {
        let range = self.graph.adjacency.arc_range(node);
        let lo = self.masked_arcs.partition_point(|&a| (a as usize) < range.start);
        let hi = self.masked_arcs.partition_point(|&a| (a as usize) < range.end);
        range.len() - (hi - lo)
    }

    pub fn num_active_arcs(&self) -> usize {
        self.graph.num_arcs() - self.masked_arcs.len()
    }

    /// Compacts the unmasked arcs into the gather structure used by message passing.
    ///
    /// Rows of the result are arc ids into the full arc array, so per-arc
    /// tensors computed over the whole graph can be indexed directly.
    pub fn message_csr(&self) -> GatherCsr {
        let n = self.graph.num_nodes();
        let mut offsets = Vec::with_capacity(n + 1);
        let mut sources = Vec::with_capacity(self.num_active_arcs());
        let mut rows = Vec::with_capacity(self.num_active_arcs());
        offsets.push(0);
        let arcs = self.graph.adjacency.arcs();
        let mut skip = self.masked_arcs.iter().peekable();
        for v in 0..n {
            for id in self.graph.adjacency.arc_range(v) {
                if skip.peek().is_some_and(|&&m| m as usize == id) {
                    skip.next();
                    continue;
                }
                sources.push(arcs[id].source);
                rows.push(id as u32);
            }
            offsets.push(sources.len());
        }
        GatherCsr::new(offsets, sources, rows)
    }
}

/// Disjoint train/valid/test partition of edge ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

impl DatasetSplit {
    pub fn total(&self) -> usize {
        self.train.len() + self.valid.len() + self.test.len()
    }
}

/// Seeded random split of the edge ids.
///
/// Sizes are apportioned by largest remainder, so they always sum to the
/// edge count and match the ratios within one edge.
pub fn split_edges(
    graph: &InteractionGraph,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<DatasetSplit> {
    let r = [ratios.0, ratios.1, ratios.2];
    if r.iter().any(|x| !x.is_finite() || *x < 0.0) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split ratios must be non-negative and sum to 1, got {ratios:?}"
        )));
    }
    let n = graph.num_edges();
    let sizes = apportion(n, &r);
    if n >= 3 {
        for (k, name) in ["train", "valid", "test"].into_iter().enumerate() {
            if r[k] > 0.0 && sizes[k] == 0 {
                return Err(Error::EmptySplit(name));
            }
        }
    }
    let mut ids: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let test = ids.split_off(sizes[0] + sizes[1]);
    let valid = ids.split_off(sizes[0]);
    Ok(DatasetSplit {
        train: ids,
        valid,
        test,
    })
}

fn apportion(n: usize, ratios: &[f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut sizes = [0usize; 3];
    for k in 0..3 {
        sizes[k] = (exact[k] + 1e-9).floor() as usize;
    }
    let mut left = n.saturating_sub(sizes.iter().sum());
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - sizes[a] as f64;
        let fb = exact[b] - sizes[b] as f64;
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &k in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if ratios[k] > 0.0 {
            sizes[k] += 1;
            left -= 1;
        }
    }
    sizes
}
