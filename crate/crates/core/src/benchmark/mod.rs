//! Node-classification datasets: the synthetic community benchmark, its
//! on-disk cache and a loader for user-supplied graphs.

mod cache;
mod external;
mod synthetic;

pub use cache::{cache_path, cache_read, cache_write, load_or_generate, CacheStatus, CACHE_FORMAT};
pub use external::{load_external, parse_external, stratified_split};
pub use synthetic::{generate, knn_edges, SyntheticConfig, GENERATOR_VERSION, MAX_LEVEL};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sheaf::Graph;
use crate::tensor::Tensor;

/// Node index lists; every node appears in at most one list.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// Every node in the test list.
    pub fn all_test(n: usize) -> Self {
        Self {
            train: Vec::new(),
            val: Vec::new(),
            test: (0..n).collect(),
        }
    }

    fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for (name, list) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            for &v in list {
                if v >= n {
                    return Err(Error::Format(format!("split.{name}: node {v} out of range (n = {n})")));
                }
                if std::mem::replace(&mut seen[v], true) {
                    return Err(Error::Format(format!("split.{name}: node {v} listed twice")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config: SyntheticConfig,
    pub generator_version: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub name: String,
    pub graph: Graph,
    /// `[n, F]`.
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
    pub provenance: Option<Provenance>,
}

impl DatasetBundle {
    pub fn n(&self) -> usize {
        self.graph.n()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.shape()[1]
    }

    /// Consistency of all parts; used after every load.
    pub fn validate(&self) -> Result<()> {
        let n = self.graph.n();
        if self.features.shape().len() != 2 || self.features.shape()[0] != n {
            return Err(Error::Format(format!(
                "features have shape {:?} for {n} nodes",
                self.features.shape()
            )));
        }
        if !self.features.is_finite() {
            return Err(Error::Format("features contain non-finite values".into()));
        }
        if self.labels.len() != n {
            return Err(Error::Format(format!("{} labels for {n} nodes", self.labels.len())));
        }
        if let Some((i, &l)) = self.labels.iter().enumerate().find(|(_, &l)| l >= self.classes) {
            return Err(Error::Format(format!(
                "labels[{i}] = {l} is not below the class count {}",
                self.classes
            )));
        }
        self.split.validate(n)
    }
}

/// Fraction of edges whose endpoints carry different labels.
pub fn heterophily_fraction(graph: &Graph, labels: &[usize]) -> Result<f64> {
    if graph.edge_count() == 0 {
        return Err(Error::Config("heterophily of a graph without edges".into()));
    }
    let cross = graph.edges().iter().filter(|&&(u, v)| labels[u] != labels[v]).count();
    Ok(cross as f64 / graph.edge_count() as f64)
}
