//! The edge-conditioned Bellman-Ford forward pass.
//!
//! A forward pass has two stages. The arc stage maps every arc's
//! standardized raw features through the dataset's projection head and the
//! backbone's embedding network, then through one edge network per layer,
//! giving a `[num_arcs, d]` weight matrix per layer. It does not depend on
//! the query, so it runs once per graph (or once per training batch). The
//! query stage places the boundary vector on the query user, runs `T`
//! rounds of DistMult messages plus sum aggregation and update, and scores
//! candidate items from `[h_T; h_0]`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{sigmoid, Activation, GatherCsr, Gradients, MlpSpec, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::{GraphView, InteractionGraph};

pub const PROJ_PREFIX: &str = "proj";
pub const EMB_PREFIX: &str = "emb";
pub const SCORE_PREFIX: &str = "score";
pub const BOUNDARY: &str = "boundary";
pub const STRUCTURAL_EDGE: &str = "structural_edge";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Node state width `d`.
    pub hidden_dim: usize,
    /// Shared width of projected edge features.
    pub proj_dim: usize,
    /// Number of message-passing layers `T`.
    pub num_layers: usize,
    pub proj_hidden: Vec<usize>,
    pub emb_hidden: Vec<usize>,
    pub edge_hidden: Vec<usize>,
    pub score_hidden: Vec<usize>,
    /// Replace edge embeddings by one learned constant vector.
    pub structural_only: bool,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_dim: 32,
            proj_dim: 16,
            num_layers: 4,
            proj_hidden: vec![16],
            emb_hidden: vec![32],
            edge_hidden: vec![],
            score_hidden: vec![32],
            structural_only: false,
            layer_norm_eps: 1e-5,
        }
    }
}

fn widths(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut dims = Vec::with_capacity(hidden.len() + 2);
    dims.push(input);
    dims.extend_from_slice(hidden);
    dims.push(output);
    dims
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.proj_dim == 0 || self.num_layers == 0 {
            return Err(Error::InvalidArgument(format!(
                "hidden_dim, proj_dim and num_layers must be >= 1 (got {}, {}, {})",
                self.hidden_dim, self.proj_dim, self.num_layers
            )));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::InvalidArgument("layer_norm_eps must be positive".into()));
        }
        self.emb_spec().validate()?;
        self.edge_spec().validate()?;
        self.score_spec().validate()?;
        self.proj_spec(1).validate()
    }

    pub fn proj_spec(&self, arc_dim: usize) -> MlpSpec {
        MlpSpec {
            dims: widths(arc_dim, &self.proj_hidden, self.proj_dim),
            activation: Activation::Relu,
        }
    }

    pub fn emb_spec(&self) -> MlpSpec {
        MlpSpec {
            dims: widths(self.proj_dim, &self.emb_hidden, self.hidden_dim),
            activation: Activation::Relu,
        }
    }

    pub fn edge_spec(&self) -> MlpSpec {
        MlpSpec {
            dims: widths(self.hidden_dim, &self.edge_hidden, self.hidden_dim),
            activation: Activation::Relu,
        }
    }

    pub fn score_spec(&self) -> MlpSpec {
        MlpSpec {
            dims: widths(2 * self.hidden_dim, &self.score_hidden, 1),
            activation: Activation::Relu,
        }
    }
}

pub fn edge_prefix(layer: usize) -> String {
    format!("layer{layer}.edge")
}

pub fn update_weight(layer: usize) -> String {
    format!("layer{layer}.update.weight")
}

pub fn update_bias(layer: usize) -> String {
    format!("layer{layer}.update.bias")
}

pub fn norm_gamma(layer: usize) -> String {
    format!("layer{layer}.norm.gamma")
}

pub fn norm_beta(layer: usize) -> String {
    format!("layer{layer}.norm.beta")
}

/// Dataset-agnostic parameters. Nothing here is sized by the graph.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Backbone {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.hidden_dim;
        let mut params = ParamStore::new();
        params.insert(BOUNDARY, Tensor::filled(&[d], 1.0));
        if config.structural_only {
            params.insert(STRUCTURAL_EDGE, Tensor::filled(&[1, d], 1.0));
        } else {
            config.emb_spec().init(EMB_PREFIX, &mut params, &mut rng);
        }
        for t in 0..config.num_layers {
            config.edge_spec().init(&edge_prefix(t), &mut params, &mut rng);
            params.insert(
                update_weight(t),
                crate::diff::kaiming_uniform(2 * d, d, &mut rng),
            );
            params.insert(update_bias(t), Tensor::zeros(&[d]));
            params.insert(norm_gamma(t), Tensor::filled(&[d], 1.0));
            params.insert(norm_beta(t), Tensor::zeros(&[d]));
        }
        config.score_spec().init(SCORE_PREFIX, &mut params, &mut rng);
        Ok(Backbone { config, params })
    }

    pub fn num_layers(&self) -> usize {
        self.config.num_layers
    }

    pub fn hidden_dim(&self) -> usize {
        self.config.hidden_dim
    }
}

/// Per-column affine standardization of arc features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Standardizer {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Mean and population standard deviation of every arc feature column.
    ///
    /// Constant columns keep a unit scale.
    pub fn fit(graph: &InteractionGraph) -> Self {
        let dim = graph.arc_dim();
        let n = graph.num_arcs();
        if n == 0 {
            return Standardizer::identity(dim);
        }
        let features = graph.arc_feature_matrix();
        let mut mean = vec![0.0; dim];
        for row in features.chunks(dim) {
            for (m, x) in mean.iter_mut().zip(row) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; dim];
        for row in features.chunks(dim) {
            for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let std = var
            .iter()
            .map(|v| {
                let s = (v / n as f64).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, std }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Standardized `[num_arcs, arc_dim]` feature matrix of a graph.
    pub fn apply(&self, graph: &InteractionGraph) -> Result<Tensor> {
        if graph.arc_dim() != self.dim() {
            return Err(Error::Shape(format!(
                "head expects arc width {}, graph has {}",
                self.dim(),
                graph.arc_dim()
            )));
        }
        let dim = self.dim();
        let mut data = graph.arc_feature_matrix();
        for row in data.chunks_mut(dim) {
            for ((x, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *x = (*x - m) / s;
            }
        }
        Tensor::new(vec![graph.num_arcs(), dim], data)
    }
}

/// Dataset-specific map from raw arc features to the shared projected width.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHead {
    pub spec: MlpSpec,
    pub params: ParamStore,
    pub standardizer: Standardizer,
}

impl ProjectionHead {
    pub fn init(config: &ModelConfig, standardizer: Standardizer, seed: u64) -> Self {
        let spec = config.proj_spec(standardizer.dim());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        spec.init(PROJ_PREFIX, &mut params, &mut rng);
        ProjectionHead {
            spec,
            params,
            standardizer,
        }
    }

    /// Fresh head for `graph`, standardized with statistics of `graph`'s arcs.
    pub fn for_graph(config: &ModelConfig, graph: &InteractionGraph, seed: u64) -> Self {
        ProjectionHead::init(config, Standardizer::fit(graph), seed)
    }

    pub fn arc_dim(&self) -> usize {
        self.spec.input_dim()
    }
}

/// Maps standardized arc features to arc embeddings `[num_arcs, d]`.
pub fn embed_edges(head: &ProjectionHead, backbone: &Backbone, arcs: &Tensor) -> Result<Tensor> {
    if arcs.cols() != head.arc_dim() {
        return Err(Error::Shape(format!(
            "head expects arc width {}, got {:?}",
            head.arc_dim(),
            arcs.shape()
        )));
    }
    let mut tape = Tape::new();
    let x = tape.input(arcs.clone());
    let g = embed_on_tape(&mut tape, head, backbone, x)?;
    Ok(tape.value(g).clone())
}

fn embed_on_tape(tape: &mut Tape, head: &ProjectionHead, backbone: &Backbone, x: Var) -> Result<Var> {
    let p = head.spec.apply(PROJ_PREFIX, tape, &head.params, x)?;
    backbone
        .config
        .emb_spec()
        .apply(EMB_PREFIX, tape, &backbone.params, p)
}

/// Initial states: the boundary vector on the query row, zeros elsewhere.
pub fn init_states(backbone: &Backbone, num_nodes: usize, query: usize) -> Result<Tensor> {
    if query >= num_nodes {
        return Err(Error::NodeOutOfRange {
            node: query,
            count: num_nodes,
        });
    }
    let boundary = backbone.params.require(BOUNDARY)?;
    let mut h = Tensor::zeros(&[num_nodes, boundary.len()]);
    h.row_mut(query).copy_from_slice(boundary.data());
    Ok(h)
}

/// Element-wise product of a source state and an arc weight.
pub fn distmult_message(state: &[f64], weight: &[f64]) -> Vec<f64> {
    state.iter().zip(weight).map(|(h, w)| h * w).collect()
}

pub fn probability(score: f64) -> f64 {
    sigmoid(score)
}

/// One layer on the tape: sum of DistMult messages plus `h0`, then
/// `relu(layer_norm([h; aggregate] W + b))`.
fn layer_on_tape(
    tape: &mut Tape,
    backbone: &Backbone,
    layer: usize,
    h: Var,
    h0: Var,
    weights: Var,
    csr: &Arc<GatherCsr>,
) -> Result<Var> {
    let params = &backbone.params;
    let agg = tape.message(h, weights, h0, Arc::clone(csr))?;
    let z = tape.concat_cols(h, agg)?;
    let w = tape.param(params, &update_weight(layer))?;
    let b = tape.param(params, &update_bias(layer))?;
    let lin = tape.matmul(z, w)?;
    let lin = tape.add_bias(lin, b)?;
    let gamma = tape.param(params, &norm_gamma(layer))?;
    let beta = tape.param(params, &norm_beta(layer))?;
    let normed = tape.layer_norm(lin, gamma, beta, backbone.config.layer_norm_eps)?;
    Ok(tape.relu(normed))
}

/// A single message-passing layer applied to explicit states.
///
/// `arc_embeds` holds one row per arc of the underlying graph (or a single
/// shared row in structural mode); the layer's edge network is applied to it.
pub fn propagate_layer(
    backbone: &Backbone,
    layer: usize,
    h_prev: &Tensor,
    h0: &Tensor,
    view: &GraphView<'_>,
    arc_embeds: &Tensor,
) -> Result<Tensor> {
    if layer >= backbone.num_layers() {
        return Err(Error::InvalidArgument(format!(
            "layer {layer} of {}",
            backbone.num_layers()
        )));
    }
    let n = view.graph().num_nodes();
    if h_prev.rows() != n || h0.rows() != n {
        return Err(Error::Shape(format!(
            "states must have {n} rows, got {:?} and {:?}",
            h_prev.shape(),
            h0.shape()
        )));
    }
    let csr = Arc::new(view.message_csr());
    let mut tape = Tape::new();
    let g = tape.input(arc_embeds.clone());
    let w = backbone
        .config
        .edge_spec()
        .apply(&edge_prefix(layer), &mut tape, &backbone.params, g)?;
    let h = tape.input(h_prev.clone());
    let h0 = tape.input(h0.clone());
    let out = layer_on_tape(&mut tape, backbone, layer, h, h0, w, &csr)?;
    Ok(tape.value(out).clone())
}

/// Query-independent part of a forward pass, kept on its own tape.
pub struct ArcStage {
    tape: Tape,
    weights: Vec<Var>,
}

impl ArcStage {
    pub fn forward(backbone: &Backbone, head: &ProjectionHead, graph: &InteractionGraph) -> Result<Self> {
        let mut tape = Tape::new();
        let g = if backbone.config.structural_only {
            tape.param(&backbone.params, STRUCTURAL_EDGE)?
        } else {
            let x = tape.input(head.standardizer.apply(graph)?);
            embed_on_tape(&mut tape, head, backbone, x)?
        };
        let spec = backbone.config.edge_spec();
        let mut weights = Vec::with_capacity(backbone.num_layers());
        for t in 0..backbone.num_layers() {
            weights.push(spec.apply(&edge_prefix(t), &mut tape, &backbone.params, g)?);
        }
        Ok(ArcStage { tape, weights })
    }

    /// Per-layer arc weight matrices.
    pub fn weights(&self) -> Vec<Arc<Tensor>> {
        self.weights.iter().map(|&w| self.tape.shared_value(w)).collect()
    }

    /// Backpropagates upstream gradients of the per-layer weights.
    pub fn backward(mut self, grads: Vec<Tensor>) -> Result<Gradients> {
        let seeds = self.weights.iter().copied().zip(grads).collect();
        self.tape.backward_seeded(seeds)
    }
}

/// Scores queries against one graph view with precomputed arc weights.
#[derive(Clone)]
pub struct Propagator<'a> {
    backbone: &'a Backbone,
    csr: Arc<GatherCsr>,
    weights: Vec<Arc<Tensor>>,
    num_nodes: usize,
    num_users: usize,
}

/// One query's forward pass, ready for a loss and backward.
pub struct QueryPass {
    tape: Tape,
    weight_inputs: Vec<Var>,
    logits: Var,
}

/// Gradients produced by one query: backbone parameters and per-layer arc weights.
pub struct QueryGrads {
    pub loss: f64,
    pub params: Vec<(String, Tensor)>,
    pub weights: Vec<Tensor>,
}

impl<'a> Propagator<'a> {
    pub fn new(backbone: &'a Backbone, head: &ProjectionHead, view: &GraphView<'_>) -> Result<Self> {
        let stage = ArcStage::forward(backbone, head, view.graph())?;
        Ok(Propagator::from_stage(backbone, &stage, view))
    }

    pub fn from_stage(backbone: &'a Backbone, stage: &ArcStage, view: &GraphView<'_>) -> Self {
        Propagator {
            backbone,
            csr: Arc::new(view.message_csr()),
            weights: stage.weights(),
            num_nodes: view.graph().num_nodes(),
            num_users: view.graph().num_users(),
        }
    }

    pub fn csr(&self) -> &GatherCsr {
        &self.csr
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn pass(&self, user: usize, candidates: &[usize]) -> Result<QueryPass> {
        if user >= self.num_nodes {
            return Err(Error::NodeOutOfRange {
                node: user,
                count: self.num_nodes,
            });
        }
        if user >= self.num_users {
            return Err(Error::NotAUser(user));
        }
        if let Some(&bad) = candidates
            .iter()
            .find(|&&c| c < self.num_users || c >= self.num_nodes)
        {
            return Err(Error::InvalidArgument(format!("candidate {bad} is not an item node")));
        }
        let backbone = self.backbone;
        let mut tape = Tape::new();
        let weight_inputs: Vec<Var> = self
            .weights
            .iter()
            .map(|w| tape.input_shared(Arc::clone(w)))
            .collect();
        let boundary = tape.param(&backbone.params, BOUNDARY)?;
        let h0 = tape.place_row(boundary, user, self.num_nodes)?;
        let mut h = h0;
        for (t, &w) in weight_inputs.iter().enumerate() {
            h = layer_on_tape(&mut tape, backbone, t, h, h0, w, &self.csr)?;
        }
        let hv = tape.gather_rows(h, candidates)?;
        let h0v = tape.gather_rows(h0, candidates)?;
        let feats = tape.concat_cols(hv, h0v)?;
        let logits = backbone
            .config
            .score_spec()
            .apply(SCORE_PREFIX, &mut tape, &backbone.params, feats)?;
        Ok(QueryPass {
            tape,
            weight_inputs,
            logits,
        })
    }

    /// Scores of `candidates` (item node ids) for a query from `user`.
    pub fn score(&self, user: usize, candidates: &[usize]) -> Result<Vec<f64>> {
        if candidates.is_empty() {
            if user >= self.num_users {
                return Err(Error::NotAUser(user));
            }
            return Ok(Vec::new());
        }
        let pass = self.pass(user, candidates)?;
        Ok(pass.scores())
    }
}

impl QueryPass {
    pub fn scores(&self) -> Vec<f64> {
        self.tape.value(self.logits).data().to_vec()
    }

    /// Weighted logistic loss over the candidates and its gradients.
    pub fn backward(mut self, targets: &[f64], weights: &[f64]) -> Result<QueryGrads> {
        let loss = self.tape.logistic_loss(self.logits, targets, weights)?;
        let value = self.tape.value(loss).item();
        let mut grads = self.tape.backward(loss)?;
        let params = grads
            .params()
            .map(|(name, g)| (name.to_string(), g.clone()))
            .collect();
        let weights = self
            .weight_inputs
            .iter()
            .map(|&w| {
                grads
                    .take(w)
                    .unwrap_or_else(|| Tensor::zeros(self.tape.value(w).shape()))
            })
            .collect();
        Ok(QueryGrads {
            loss: value,
            params,
            weights,
        })
    }
}

/// Runs a full forward pass for one query.
pub fn score_candidates(
    backbone: &Backbone,
    head: &ProjectionHead,
    view: &GraphView<'_>,
    user: usize,
    candidates: &[usize],
) -> Result<Vec<f64>> {
    if user >= view.graph().num_users() {
        return Err(Error::NotAUser(user));
    }
    if candidates.is_empty() {
        return Ok(Vec::new());
    }
    Propagator::new(backbone, head, view)?.score(user, candidates)
}

/// Uniform random perturbation of every parameter, for tests and diagnostics.
pub fn jitter(params: &mut ParamStore, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        for v in params.get_mut(&name).unwrap().data_mut() {
            *v += rng.random_range(-scale..scale);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::EdgeRecord;

    fn small_config() -> ModelConfig {
        ModelConfig {
            hidden_dim: 4,
            proj_dim: 3,
            num_layers: 2,
            proj_hidden: vec![3],
            emb_hidden: vec![],
            edge_hidden: vec![],
            score_hidden: vec![4],
            ..ModelConfig::default()
        }
    }

    fn graph() -> InteractionGraph {
        InteractionGraph::new(
            2,
            3,
            1,
            vec![
                EdgeRecord::new(0, 0, vec![1.0]),
                EdgeRecord::new(0, 1, vec![2.0]),
                EdgeRecord::new(1, 1, vec![3.0]),
                EdgeRecord::new(1, 2, vec![5.0]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn distmult_is_elementwise() {
        assert_eq!(distmult_message(&[1.0, 2.0], &[3.0, 4.0]), vec![3.0, 8.0]);
        assert_eq!(distmult_message(&[1.5, -2.0], &[0.0, 0.0]), vec![0.0, 0.0]);
        assert_eq!(distmult_message(&[1.5, -2.0], &[1.0, 1.0]), vec![1.5, -2.0]);
    }

    #[test]
    fn probability_is_logistic() {
        assert_eq!(probability(0.0), 0.5);
        assert!((probability(2.0) - 0.8808).abs() <= 1e-4);
        assert_eq!(probability(f64::INFINITY), 1.0);
        assert!(probability(-1e9) >= 0.0);
    }

    #[test]
    fn init_states_places_boundary_on_query_row() {
        let backbone = Backbone::init(small_config(), 1).unwrap();
        let mut b = backbone.params.get(BOUNDARY).unwrap().clone();
        b.data_mut()[1] = -2.0;
        let h = init_states(&backbone, 5, 3).unwrap();
        let boundary = backbone.params.get(BOUNDARY).unwrap();
        assert_eq!(h.row(3), boundary.data());
        let nonzero = (0..5).filter(|&r| h.row(r).iter().any(|v| *v != 0.0)).count();
        assert_eq!(nonzero, 1);
        let total: Vec<f64> = (0..4).map(|j| (0..5).map(|r| h.row(r)[j]).sum()).collect();
        assert_eq!(total, boundary.data());
        assert!(matches!(init_states(&backbone, 5, 5), Err(Error::NodeOutOfRange { .. })));
    }

    #[test]
    fn zero_features_and_zero_biases_embed_to_zero() {
        let config = small_config();
        let backbone = Backbone::init(config.clone(), 2).unwrap();
        let head = ProjectionHead::init(&config, Standardizer::identity(2), 3);
        let arcs = Tensor::zeros(&[8, 2]);
        let g = embed_edges(&head, &backbone, &arcs).unwrap();
        assert_eq!(g.shape(), &[8, 4]);
        assert!(g.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identity_mlps_embed_affinely() {
        // proj: [2] -> [2] identity plus bias [0.5, 0]; emb: [2] -> [2] identity
        let config = ModelConfig {
            hidden_dim: 2,
            proj_dim: 2,
            num_layers: 1,
            proj_hidden: vec![],
            emb_hidden: vec![],
            ..small_config()
        };
        let mut backbone = Backbone::init(config.clone(), 0).unwrap();
        let mut head = ProjectionHead::init(&config, Standardizer::identity(2), 0);
        let eye = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        *head.params.get_mut("proj.0.weight").unwrap() = eye.clone();
        *head.params.get_mut("proj.0.bias").unwrap() = Tensor::vector(vec![0.5, 0.0]);
        *backbone.params.get_mut("emb.0.weight").unwrap() = eye;
        let arcs = Tensor::matrix(1, 2, vec![2.0, 1.0]).unwrap();
        let g = embed_edges(&head, &backbone, &arcs).unwrap();
        assert_eq!(g.data(), &[2.5, 1.0]);
    }

    #[test]
    fn head_width_mismatch_is_an_error() {
        let config = small_config();
        let backbone = Backbone::init(config.clone(), 2).unwrap();
        let head = ProjectionHead::init(&config, Standardizer::identity(5), 3);
        let g = graph();
        assert!(Propagator::new(&backbone, &head, &g.view()).is_err());
    }

    #[test]
    fn empty_candidate_list_scores_nothing() {
        let config = small_config();
        let backbone = Backbone::init(config.clone(), 2).unwrap();
        let g = graph();
        let head = ProjectionHead::for_graph(&config, &g, 3);
        assert!(score_candidates(&backbone, &head, &g.view(), 0, &[]).unwrap().is_empty());
    }

    #[test]
    fn queries_must_start_at_users() {
        let config = small_config();
        let backbone = Backbone::init(config.clone(), 2).unwrap();
        let g = graph();
        let head = ProjectionHead::for_graph(&config, &g, 3);
        assert!(matches!(
            score_candidates(&backbone, &head, &g.view(), 2, &[3]),
            Err(Error::NotAUser(2))
        ));
        assert!(score_candidates(&backbone, &head, &g.view(), 0, &[1]).is_err());
    }

    #[test]
    fn isolated_node_aggregates_only_its_initial_state() {
        // masking every edge leaves only h0 in each aggregate
        let config = small_config();
        let backbone = Backbone::init(config.clone(), 4).unwrap();
        let g = graph();
        let view = g.mask(&[0, 1, 2, 3]).unwrap();
        let h0 = init_states(&backbone, g.num_nodes(), 0).unwrap();
        let embeds = Tensor::filled(&[g.num_arcs(), 4], 0.3);
        let out = propagate_layer(&backbone, 0, &h0, &h0, &view, &embeds).unwrap();

        let mut tape = Tape::new();
        let h = tape.input(h0.clone());
        let cat = tape.concat_cols(h, h).unwrap();
        let w = tape.param(&backbone.params, &update_weight(0)).unwrap();
        let b = tape.param(&backbone.params, &update_bias(0)).unwrap();
        let lin = tape.matmul(cat, w).unwrap();
        let lin = tape.add_bias(lin, b).unwrap();
        let gm = tape.param(&backbone.params, &norm_gamma(0)).unwrap();
        let bt = tape.param(&backbone.params, &norm_beta(0)).unwrap();
        let ln = tape.layer_norm(lin, gm, bt, 1e-5).unwrap();
        let expected = tape.relu(ln);
        assert_eq!(out.data(), tape.value(expected).data());
    }

    #[test]
    fn zero_boundary_is_a_fixed_point() {
        let config = small_config();
        let mut backbone = Backbone::init(config.clone(), 4).unwrap();
        *backbone.params.get_mut(BOUNDARY).unwrap() = Tensor::zeros(&[4]);
        let g = graph();
        let h0 = init_states(&backbone, g.num_nodes(), 0).unwrap();
        let embeds = Tensor::filled(&[g.num_arcs(), 4], 1.0);
        let mut h = h0.clone();
        for t in 0..2 {
            h = propagate_layer(&backbone, t, &h, &h0, &g.view(), &embeds).unwrap();
            assert!(h.data().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn backbone_size_does_not_depend_on_graph() {
        let a = Backbone::init(ModelConfig::default(), 1).unwrap();
        let b = Backbone::init(ModelConfig::default(), 2).unwrap();
        assert_eq!(a.params.num_scalars(), b.params.num_scalars());
    }
}
