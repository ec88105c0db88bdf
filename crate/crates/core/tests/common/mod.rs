//! Shared fixtures and a dense re-implementation of the forward pass.
#![allow(dead_code)]

use nbfrec::diff::ParamStore;
use nbfrec::graph::{EdgeRecord, InteractionGraph};
use nbfrec::model::{Backbone, ModelConfig, ProjectionHead};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_config(d: usize, layers: usize) -> ModelConfig {
    ModelConfig {
        hidden_dim: d,
        proj_dim: 3,
        num_layers: layers,
        proj_hidden: vec![4],
        emb_hidden: vec![d],
        edge_hidden: vec![],
        score_hidden: vec![d],
        ..ModelConfig::default()
    }
}

/// Random bipartite graph with at most `max_nodes` nodes and at least one edge.
pub fn random_graph(rng: &mut ChaCha8Rng, max_nodes: usize, d_raw: usize) -> InteractionGraph {
    let nu = rng.random_range(1..=max_nodes / 2);
    let ni = rng.random_range(1..=max_nodes - nu);
    let density = rng.random_range(0.2..0.8);
    let mut edges = Vec::new();
    for u in 0..nu as u32 {
        for i in 0..ni as u32 {
            if rng.random_bool(density) {
                let f = (0..d_raw).map(|_| rng.random_range(-2.0..2.0)).collect();
                edges.push(EdgeRecord::new(u, i, f));
            }
        }
    }
    if edges.is_empty() {
        edges.push(EdgeRecord::new(0, 0, vec![0.5; d_raw]));
    }
    edges.shuffle(rng);
    InteractionGraph::new(nu, ni, d_raw, edges).unwrap()
}

/// Backbone and head with every parameter perturbed, so no bias is zero.
pub fn random_model(config: &ModelConfig, graph: &InteractionGraph, seed: u64) -> (Backbone, ProjectionHead) {
    let mut backbone = Backbone::init(config.clone(), seed).unwrap();
    nbfrec::model::jitter(&mut backbone.params, 0.3, seed ^ 0x55);
    let mut head = ProjectionHead::for_graph(config, graph, seed + 1);
    nbfrec::model::jitter(&mut head.params, 0.3, seed ^ 0xaa);
    (backbone, head)
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---- dense oracle ---------------------------------------------------------

fn param<'a>(store: &'a ParamStore, name: &str) -> &'a nbfrec::diff::Tensor {
    store.get(name).unwrap_or_else(|| panic!("missing parameter {name}"))
}

/// `x W + b` per layer with relu between layers.
pub fn dense_mlp(store: &ParamStore, prefix: &str, layers: usize, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    for l in 0..layers {
        let w = param(store, &format!("{prefix}.{l}.weight"));
        let b = param(store, &format!("{prefix}.{l}.bias"));
        let (rows, cols) = (w.shape()[0], w.shape()[1]);
        assert_eq!(rows, h.len());
        let mut out = b.data().to_vec();
        for (r, hv) in h.iter().enumerate() {
            for c in 0..cols {
                out[c] += hv * w.data()[r * cols + c];
            }
        }
        if l + 1 < layers {
            out.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        h = out;
    }
    h
}

/// One directed arc as the oracle sees it.
#[derive(Clone, Debug)]
pub struct DenseArc {
    pub edge: usize,
    pub source: usize,
    pub target: usize,
    pub flag: f64,
}

pub fn dense_arcs(graph: &InteractionGraph) -> Vec<DenseArc> {
    let nu = graph.num_users();
    let mut out = Vec::new();
    for (id, e) in graph.edges().iter().enumerate() {
        let (u, i) = (e.user as usize, nu + e.item as usize);
        out.push(DenseArc { edge: id, source: u, target: i, flag: 1.0 });
        out.push(DenseArc { edge: id, source: i, target: u, flag: -1.0 });
    }
    out
}

/// Arc embedding `g(r)` computed from scratch.
pub fn dense_embedding(backbone: &Backbone, head: &ProjectionHead, graph: &InteractionGraph, arc: &DenseArc) -> Vec<f64> {
    let c = &backbone.config;
    if c.structural_only {
        return param(&backbone.params, "structural_edge").data().to_vec();
    }
    let mut x = graph.edge(arc.edge).features.clone();
    x.push(arc.flag);
    for (k, v) in x.iter_mut().enumerate() {
        *v = (*v - head.standardizer.mean[k]) / head.standardizer.std[k];
    }
    let p = dense_mlp(&head.params, "proj", c.proj_hidden.len() + 1, &x);
    dense_mlp(&backbone.params, "emb", c.emb_hidden.len() + 1, &p)
}

/// Node-by-node matrix of summed arc weights: `m[v][x]` adds the layer
/// weights of every active arc `x -> v`.
pub fn dense_weight_matrix(
    backbone: &Backbone,
    layer: usize,
    n: usize,
    arcs: &[DenseArc],
    embeds: &[Vec<f64>],
    masked: &[usize],
) -> Vec<Vec<Vec<f64>>> {
    let d = backbone.config.hidden_dim;
    let depth = backbone.config.edge_hidden.len() + 1;
    let mut m = vec![vec![vec![0.0; d]; n]; n];
    for (arc, g) in arcs.iter().zip(embeds) {
        if masked.contains(&arc.edge) {
            continue;
        }
        let w = dense_mlp(&backbone.params, &format!("layer{layer}.edge"), depth, g);
        for k in 0..d {
            m[arc.target][arc.source][k] += w[k];
        }
    }
    m
}

pub fn dense_update(backbone: &Backbone, layer: usize, h: &[f64], agg: &[f64]) -> Vec<f64> {
    let d = h.len();
    let w = param(&backbone.params, &format!("layer{layer}.update.weight"));
    let b = param(&backbone.params, &format!("layer{layer}.update.bias"));
    let gamma = param(&backbone.params, &format!("layer{layer}.norm.gamma"));
    let beta = param(&backbone.params, &format!("layer{layer}.norm.beta"));
    let z: Vec<f64> = h.iter().chain(agg).copied().collect();
    let mut lin = b.data().to_vec();
    for (r, zv) in z.iter().enumerate() {
        for c in 0..d {
            lin[c] += zv * w.data()[r * d + c];
        }
    }
    let mean = lin.iter().sum::<f64>() / d as f64;
    let var = lin.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
    let s = (var + backbone.config.layer_norm_eps).sqrt();
    (0..d)
        .map(|k| ((lin[k] - mean) / s * gamma.data()[k] + beta.data()[k]).max(0.0))
        .collect()
}

/// One layer over dense matrices.
pub fn dense_layer(
    backbone: &Backbone,
    m: &[Vec<Vec<f64>>],
    h_prev: &[Vec<f64>],
    h0: &[Vec<f64>],
    layer: usize,
) -> Vec<Vec<f64>> {
    let n = h_prev.len();
    let d = backbone.config.hidden_dim;
    (0..n)
        .map(|v| {
            let mut agg = h0[v].clone();
            for x in 0..n {
                for k in 0..d {
                    agg[k] += h_prev[x][k] * m[v][x][k];
                }
            }
            dense_update(backbone, layer, &h_prev[v], &agg)
        })
        .collect()
}

/// Full forward pass over dense matrices; returns scores of `candidates`.
pub fn dense_scores(
    backbone: &Backbone,
    head: &ProjectionHead,
    graph: &InteractionGraph,
    masked: &[usize],
    user: usize,
    candidates: &[usize],
) -> Vec<f64> {
    let n = graph.num_nodes();
    let d = backbone.config.hidden_dim;
    let arcs = dense_arcs(graph);
    let embeds: Vec<Vec<f64>> = arcs.iter().map(|a| dense_embedding(backbone, head, graph, a)).collect();
    let mut h0 = vec![vec![0.0; d]; n];
    h0[user] = param(&backbone.params, "boundary").data().to_vec();
    let mut h = h0.clone();
    for t in 0..backbone.config.num_layers {
        let m = dense_weight_matrix(backbone, t, n, &arcs, &embeds, masked);
        h = dense_layer(backbone, &m, &h, &h0, t);
    }
    let depth = backbone.config.score_hidden.len() + 1;
    candidates
        .iter()
        .map(|&v| {
            let x: Vec<f64> = h[v].iter().chain(&h0[v]).copied().collect();
            dense_mlp(&backbone.params, "score", depth, &x)[0]
        })
        .collect()
}

// ---- brute-force ranking oracle ------------------------------------------

/// Rank of `true_item` by sorting the unfiltered scores: the mean of the
/// first and last 1-based positions its score occupies.
pub fn brute_rank(scores: &[f64], true_item: usize, filter: &std::collections::HashSet<u32>) -> f64 {
    let mut kept: Vec<f64> = scores
        .iter()
        .enumerate()
        .filter(|(j, _)| *j == true_item || !filter.contains(&(*j as u32)))
        .map(|(_, &s)| s)
        .collect();
    kept.sort_by(|a, b| b.total_cmp(a));
    let target = scores[true_item];
    let first = kept.iter().position(|&s| s == target).unwrap() + 1;
    let last = kept.iter().rposition(|&s| s == target).unwrap() + 1;
    (first + last) as f64 / 2.0
}

pub fn brute_hits(ranks: &[f64], k: usize) -> f64 {
    let mut sorted = ranks.to_vec();
    sorted.sort_by(f64::total_cmp);
    let inside = sorted.partition_point(|&r| r <= k as f64);
    inside as f64 / ranks.len() as f64
}

pub fn brute_ndcg(ranks: &[f64], k: usize) -> f64 {
    let mut total = 0.0;
    for &r in ranks {
        if r <= k as f64 {
            total += 1.0 / (r + 1.0).log2();
        }
    }
    total / ranks.len() as f64
}

// ---- fixtures for the end-to-end tests ------------------------------------

/// SHA-256 of every named tensor in the checkpoint, backbone and heads alike.
pub fn tensor_hashes(ck: &nbfrec::checkpoint::Checkpoint) -> std::collections::BTreeMap<String, String> {
    use sha2::{Digest, Sha256};
    let mut out = std::collections::BTreeMap::new();
    let mut add = |name: String, t: &nbfrec::diff::Tensor| {
        let mut h = Sha256::new();
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
        let hex: String = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
        out.insert(name, hex);
    };
    for (name, t) in ck.backbone.iter() {
        add(format!("backbone/{name}"), t);
    }
    for (head, p) in &ck.heads {
        for (name, t) in p.params.iter() {
            add(format!("head:{head}/{name}"), t);
        }
    }
    out
}

/// Small model used by the end-to-end tests.
pub fn desk_config(d: usize, layers: usize) -> ModelConfig {
    ModelConfig {
        hidden_dim: d,
        proj_dim: 8,
        num_layers: layers,
        proj_hidden: vec![],
        emb_hidden: vec![d],
        edge_hidden: vec![],
        score_hidden: vec![d],
        ..ModelConfig::default()
    }
}

pub fn item_nodes(g: &InteractionGraph) -> Vec<usize> {
    (0..g.num_items() as u32).map(|i| g.item_node(i)).collect()
}

/// Scores of every item from `user` after relabelling items by `perm`.
pub fn permuted_scores(g: &InteractionGraph, perm: &[u32], config: &ModelConfig, seed: u64, user: usize) -> (Vec<f64>, Vec<f64>) {
    let (backbone, head) = random_model(config, g, seed);
    let edges: Vec<EdgeRecord> = g
        .edges()
        .iter()
        .map(|e| EdgeRecord::new(e.user, perm[e.item as usize], e.features.clone()))
        .collect();
    let gp = InteractionGraph::new(g.num_users(), g.num_items(), g.d_raw(), edges).unwrap();
    let base = nbfrec::model::score_candidates(&backbone, &head, &g.view(), user, &item_nodes(g)).unwrap();
    let moved = nbfrec::model::score_candidates(&backbone, &head, &gp.view(), user, &item_nodes(&gp)).unwrap();
    let mut pulled = vec![0.0; base.len()];
    for (i, &p) in perm.iter().enumerate() {
        pulled[i] = moved[p as usize];
    }
    (base, pulled)
}

/// Largest gap between sparse and dense layer outputs over every layer of one random model.
pub fn layer_gap(seed: u64) -> f64 {
    use nbfrec::diff::Tensor;
    let mut rng = seeded(seed);
    let d_raw = rng.random_range(0..3);
    let g = random_graph(&mut rng, 20, d_raw);
    let d = 5;
    let config = tiny_config(d, 2);
    let (backbone, head) = random_model(&config, &g, seed);
    let masked: Vec<usize> = (0..g.num_edges()).filter(|_| rng.random_bool(0.3)).collect();
    let view = g.mask(&masked).unwrap();

    let arcs = dense_arcs(&g);
    let embeds: Vec<Vec<f64>> = arcs.iter().map(|a| dense_embedding(&backbone, &head, &g, a)).collect();
    // the oracle's embeddings, laid out in the library's arc order
    let mut table = Vec::new();
    for arc in g.adjacency().arcs() {
        let k = 2 * arc.edge as usize + usize::from(arc.direction.flag() < 0.0);
        table.extend_from_slice(&embeds[k]);
    }
    let arc_embeds = Tensor::new(vec![g.num_arcs(), d], table).unwrap();

    let n = g.num_nodes();
    let mut states = || -> Vec<Vec<f64>> { (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect() };
    let (h_prev, h0) = (states(), states());
    let flat = |rows: &[Vec<f64>]| Tensor::new(vec![n, d], rows.concat()).unwrap();
    let mut gap = 0.0f64;
    for t in 0..2 {
        let sparse = nbfrec::model::propagate_layer(&backbone, t, &flat(&h_prev), &flat(&h0), &view, &arc_embeds).unwrap();
        let m = dense_weight_matrix(&backbone, t, n, &arcs, &embeds, &masked);
        let dense = dense_layer(&backbone, &m, &h_prev, &h0, t);
        for (a, b) in sparse.data().iter().zip(dense.concat()) {
            gap = gap.max((a - b).abs());
        }
    }
    gap
}

/// Largest gap between sparse and dense candidate scores for one random model and query.
pub fn score_gap(seed: u64) -> f64 {
    let mut rng = seeded(1000 + seed);
    let g = random_graph(&mut rng, 20, 2);
    let config = tiny_config(4, 3);
    let (backbone, head) = random_model(&config, &g, seed);
    let masked: Vec<usize> = (0..g.num_edges()).filter(|_| rng.random_bool(0.2)).collect();
    let view = g.mask(&masked).unwrap();
    let user = rng.random_range(0..g.num_users());
    let items = item_nodes(&g);
    let sparse = nbfrec::model::score_candidates(&backbone, &head, &view, user, &items).unwrap();
    let dense = dense_scores(&backbone, &head, &g, &masked, user, &items);
    sparse.iter().zip(&dense).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}
