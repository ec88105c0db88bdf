//! Cluster-planted bipartite graphs with informative edge features.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::derive_seed;
use crate::graph::{EdgeRecord, InteractionGraph};
use crate::ingest::{with_default_ids, write_delimited};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub num_users: usize,
    pub num_items: usize,
    pub num_clusters: usize,
    pub p_intra: f64,
    pub p_inter: f64,
    /// Zero, or at least `num_clusters`.
    pub feature_dim: usize,
    /// Weight of the cluster code against unit-variance noise.
    pub feature_signal: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_users: 200,
            num_items: 200,
            num_clusters: 4,
            p_intra: 0.15,
            p_inter: 0.01,
            feature_dim: 4,
            feature_signal: 0.8,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.num_users == 0 || self.num_items == 0 {
            return bad("num_users and num_items must be >= 1".into());
        }
        if self.num_clusters == 0 || self.num_clusters > self.num_users.min(self.num_items) {
            return bad(format!(
                "num_clusters must be in 1..={}",
                self.num_users.min(self.num_items)
            ));
        }
        if !(0.0 <= self.p_inter && self.p_inter < self.p_intra && self.p_intra <= 1.0) {
            return bad(format!(
                "need 0 <= p_inter < p_intra <= 1, got p_inter {} and p_intra {}",
                self.p_inter, self.p_intra
            ));
        }
        if !(0.0..=1.0).contains(&self.feature_signal) {
            return bad(format!("feature_signal {} outside [0, 1]", self.feature_signal));
        }
        if self.feature_dim > 0 && self.feature_dim < self.num_clusters {
            return bad(format!(
                "feature_dim {} cannot hold {} distinct cluster codes",
                self.feature_dim, self.num_clusters
            ));
        }
        Ok(())
    }

    fn cluster_sizes(n: usize, k: usize) -> Vec<usize> {
        (0..k).map(|c| n / k + usize::from(c < n % k)).collect()
    }

    /// Expected number of edges under the block probabilities.
    pub fn expected_edges(&self) -> f64 {
        let k = self.num_clusters.max(1);
        let us = Self::cluster_sizes(self.num_users, k);
        let is = Self::cluster_sizes(self.num_items, k);
        let mut total = 0.0;
        for (a, &nu) in us.iter().enumerate() {
            for (b, &ni) in is.iter().enumerate() {
                let p = if a == b { self.p_intra } else { self.p_inter };
                total += (nu * ni) as f64 * p;
            }
        }
        total
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        SynthSpec { seed, ..self.clone() }
    }
}

/// Hidden block structure. Never an input to the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterLabels {
    pub users: Vec<usize>,
    pub items: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Synthetic {
    pub spec: SynthSpec,
    pub graph: InteractionGraph,
    pub labels: ClusterLabels,
}

/// Unit-norm code of the block (user cluster `a`, item cluster `b`):
/// `e_a` on the diagonal, `(2 e_a + e_b) / sqrt(5)` elsewhere.
pub fn block_code(a: usize, b: usize, dim: usize) -> Vec<f64> {
    let mut code = vec![0.0; dim];
    if a == b {
        code[a] = 1.0;
    } else {
        let s = 5f64.sqrt();
        code[a] = 2.0 / s;
        code[b] = 1.0 / s;
    }
    code
}

/// Inverse of [`block_code`] for noise-free features.
pub fn decode_block(features: &[f64]) -> Option<(usize, usize)> {
    let mut order: Vec<usize> = (0..features.len()).collect();
    order.sort_by(|&x, &y| features[y].total_cmp(&features[x]));
    let a = *order.first()?;
    match order.get(1) {
        Some(&b) if features[b] > 1e-9 => Some((a, b)),
        _ => Some((a, a)),
    }
}

/// Draws one graph. Clusters are assigned round-robin; each pair is an edge
/// independently with the probability of its block.
pub fn generate(spec: &SynthSpec) -> Result<Synthetic> {
    spec.validate()?;
    let expected = spec.expected_edges();
    if expected < 10.0 {
        return Err(Error::InvalidArgument(format!(
            "expected edge count {expected:.2} is below 10"
        )));
    }
    let k = spec.num_clusters;
    let labels = ClusterLabels {
        users: (0..spec.num_users).map(|u| u % k).collect(),
        items: (0..spec.num_items).map(|i| i % k).collect(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut edges = Vec::new();
    for u in 0..spec.num_users {
        for i in 0..spec.num_items {
            let (a, b) = (labels.users[u], labels.items[i]);
            let p = if a == b { spec.p_intra } else { spec.p_inter };
            if !rng.random_bool(p) {
                continue;
            }
            let code = block_code(a, b, spec.feature_dim);
            let features = code
                .iter()
                .map(|&c| {
                    let z: f64 = rng.sample(StandardNormal);
                    spec.feature_signal * c + (1.0 - spec.feature_signal) * z
                })
                .collect();
            edges.push(EdgeRecord::new(u as u32, i as u32, features));
        }
    }
    if edges.is_empty() {
        return Err(Error::EmptyInput);
    }
    let graph = InteractionGraph::new(spec.num_users, spec.num_items, spec.feature_dim, edges)?;
    Ok(Synthetic {
        spec: spec.clone(),
        graph,
        labels,
    })
}

/// Two independent draws of the same family. An identical second draw is rerolled.
pub fn family_pair(spec: &SynthSpec, seed_a: u64, seed_b: u64) -> Result<(Synthetic, Synthetic)> {
    let a = generate(&spec.with_seed(seed_a))?;
    let mut seed = seed_b;
    let mut attempt = 0u32;
    loop {
        let b = generate(&spec.with_seed(seed))?;
        if b.graph != a.graph {
            return Ok((a, b));
        }
        attempt += 1;
        if attempt > 16 {
            return Err(Error::InvalidArgument(
                "family draws keep colliding; the spec admits too few graphs".into(),
            ));
        }
        seed = derive_seed(seed_b, &format!("reroll/{attempt}"));
    }
}

#[derive(Serialize)]
struct Sidecar<'a> {
    spec: &'a SynthSpec,
    labels: &'a ClusterLabels,
}

/// Writes `<stem>.csv` and `<stem>.labels.json` into `dir`, returning both paths.
pub fn write_dataset(data: &Synthetic, dir: &Path, stem: &str) -> Result<(std::path::PathBuf, std::path::PathBuf)> {
    std::fs::create_dir_all(dir)?;
    let csv_path = dir.join(format!("{stem}.csv"));
    let json_path = dir.join(format!("{stem}.labels.json"));
    let file = std::io::BufWriter::new(std::fs::File::create(&csv_path)?);
    write_delimited(&with_default_ids(data.graph.clone()), file, b',')?;
    let sidecar = Sidecar {
        spec: &data.spec,
        labels: &data.labels,
    };
    std::fs::write(&json_path, serde_json::to_vec_pretty(&sidecar)?)?;
    Ok((csv_path, json_path))
}
