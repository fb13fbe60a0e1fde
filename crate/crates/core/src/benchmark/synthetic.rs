use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::sheaf::Graph;
use crate::tensor::Tensor;

use super::{DatasetBundle, Provenance, Split};

/// Bumped whenever the generated bytes for a given config could change.
pub const GENERATOR_VERSION: &str = "synthetic-v1";
pub const MAX_LEVEL: u32 = 10;

const FEATURE_STREAM: u64 = 1;
const REWIRE_STREAM: u64 = 2;
const SPLIT_STREAM: u64 = 3;
const MAX_REWIRE_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_communities: usize,
    pub nodes_per_community: usize,
    pub feature_dim: usize,
    pub sigma: f64,
    pub centers: Vec<Vec<f64>>,
    pub k: usize,
    /// Perturbation level; level `L` rewires `10·L %` of the original edges.
    pub level: u32,
    pub seed: u64,
    /// Fraction of nodes in the training part of the split.
    pub train_fraction: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_communities: 3,
            nodes_per_community: 500,
            feature_dim: 2,
            sigma: 3.0,
            centers: vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]],
            k: 8,
            level: 0,
            seed: 0,
            train_fraction: 0.8,
        }
    }
}

impl SyntheticConfig {
    pub fn new(level: u32, seed: u64) -> Self {
        Self {
            level,
            seed,
            ..Self::default()
        }
    }

    pub fn n(&self) -> usize {
        self.n_communities * self.nodes_per_community
    }

    pub fn validate(&self) -> Result<()> {
        if self.level > MAX_LEVEL {
            return Err(Error::Config(format!(
                "level {} is outside 0..={MAX_LEVEL}",
                self.level
            )));
        }
        if self.n_communities < 2 || self.nodes_per_community == 0 || self.feature_dim == 0 {
            return Err(Error::Config("need at least two communities and positive sizes".into()));
        }
        if self.k == 0 || self.k >= self.nodes_per_community {
            return Err(Error::Config(format!(
                "k = {} must lie in 1..{}",
                self.k, self.nodes_per_community
            )));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma {} must be positive", self.sigma)));
        }
        if self.centers.len() != self.n_communities || self.centers.iter().any(|c| c.len() != self.feature_dim) {
            return Err(Error::Config(
                "need one center of width feature_dim per community".into(),
            ));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config("train_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn name(&self) -> String {
        format!("synthetic-L{}-s{}", self.level, self.seed)
    }
}

/// Undirected union of directed `k`-nearest-neighbour picks among `nodes`
/// by Euclidean distance, ties going to the lower index.
pub fn knn_edges(features: &Tensor, nodes: &[usize], k: usize) -> BTreeSet<(usize, usize)> {
    let dim = features.shape()[1];
    let x = features.data();
    let mut out = BTreeSet::new();
    let mut dist: Vec<(f64, usize)> = Vec::with_capacity(nodes.len());
    for &i in nodes {
        dist.clear();
        for &j in nodes {
            if i != j {
                let d2: f64 = (0..dim).map(|c| (x[i * dim + c] - x[j * dim + c]).powi(2)).sum();
                dist.push((d2, j));
            }
        }
        dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, j) in dist.iter().take(k) {
            out.insert((i.min(j), i.max(j)));
        }
    }
    out
}

/// Pure function of `config`: features, k-NN graph, rewiring and an
/// 80/20 train/validation split.
pub fn generate(config: &SyntheticConfig) -> Result<DatasetBundle> {
    config.validate()?;
    let (kc, per, dim) = (config.n_communities, config.nodes_per_community, config.feature_dim);
    let n = config.n();

    let mut rng = SplitMix64::derive(config.seed, FEATURE_STREAM);
    let mut features = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for (c, center) in config.centers.iter().enumerate() {
        for _ in 0..per {
            let mut z = Vec::with_capacity(dim + 1);
            while z.len() < dim {
                let (a, b) = rng.normal_pair();
                z.push(a);
                z.push(b);
            }
            features.extend((0..dim).map(|j| center[j] + config.sigma * z[j]));
            labels.push(c);
        }
    }
    let features = Tensor::new(vec![n, dim], features)?;

    let mut base = BTreeSet::new();
    for c in 0..kc {
        let nodes: Vec<usize> = (c * per..(c + 1) * per).collect();
        base.extend(knn_edges(&features, &nodes, config.k));
    }
    let original: Vec<(usize, usize)> = base.iter().copied().collect();

    let rewires = (0.1 * config.level as f64 * original.len() as f64).round() as usize;
    let mut rng = SplitMix64::derive(config.seed, REWIRE_STREAM);
    let mut order: Vec<usize> = (0..original.len()).collect();
    rng.shuffle(&mut order);
    let mut current = base;
    for &idx in order.iter().take(rewires) {
        let (u, v) = original[idx];
        current.remove(&(u, v));
        let community = labels[u];
        let others = n - per;
        let mut placed = false;
        for _ in 0..MAX_REWIRE_ATTEMPTS {
            let r = rng.below(others as u64) as usize;
            // skip over u's community block
            let w = if r < community * per { r } else { r + per };
            let e = (u.min(w), u.max(w));
            if current.insert(e) {
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Config(format!(
                "could not rewire edge ({u}, {v}) within {MAX_REWIRE_ATTEMPTS} attempts"
            )));
        }
    }
    let graph = Graph::new(n, current)?;

    let mut rng = SplitMix64::derive(config.seed, SPLIT_STREAM);
    let mut nodes: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut nodes);
    let n_train = (config.train_fraction * n as f64).round() as usize;
    let mut train = nodes[..n_train].to_vec();
    let mut val = nodes[n_train..].to_vec();
    train.sort_unstable();
    val.sort_unstable();

    Ok(DatasetBundle {
        name: config.name(),
        graph,
        features,
        labels,
        classes: kc,
        split: Split {
            train,
            val,
            test: Vec::new(),
        },
        provenance: Some(Provenance {
            config: config.clone(),
            generator_version: GENERATOR_VERSION.into(),
        }),
    })
}
