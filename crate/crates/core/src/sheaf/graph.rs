use std::collections::HashSet;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::EdgeList;

/// Simple undirected graph. Each edge is stored once as `(u, v)` with `u < v`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "GraphRepr", into = "GraphRepr")]
pub struct Graph {
    n: usize,
    edges: Vec<(usize, usize)>,
    degree: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct GraphRepr {
    n: usize,
    edges: Vec<(usize, usize)>,
}

impl TryFrom<GraphRepr> for Graph {
    type Error = Error;
    fn try_from(r: GraphRepr) -> Result<Self> {
        Graph::new(r.n, r.edges)
    }
}

impl From<Graph> for GraphRepr {
    fn from(g: Graph) -> Self {
        GraphRepr { n: g.n, edges: g.edges }
    }
}

impl Graph {
    /// Validates and canonicalizes an edge list. Order of edges is kept;
    /// each pair is flipped to `u < v`.
    pub fn new(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut canon = Vec::new();
        let mut degree = vec![0; n];
        for (a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::Index {
                    op: "Graph::new",
                    index: a.max(b),
                    bound: n,
                });
            }
            if a == b {
                return Err(Error::Format(format!("self-loop at node {a}")));
            }
            let e = (a.min(b), a.max(b));
            if !seen.insert(e) {
                return Err(Error::Format(format!("duplicate edge {e:?}")));
            }
            degree[a] += 1;
            degree[b] += 1;
            canon.push(e);
        }
        Ok(Self {
            n,
            edges: canon,
            degree,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn degree(&self, v: usize) -> usize {
        self.degree[v]
    }

    pub fn degrees(&self) -> &[usize] {
        &self.degree
    }

    /// `max(1, deg(v))`, so isolated nodes never divide by zero.
    pub fn clamped_degree(&self, v: usize) -> f64 {
        self.degree[v].max(1) as f64
    }

    /// Directed orientations: record `2i` is `u -> v` and `2i + 1` is
    /// `v -> u` for undirected edge `i = (u, v)`. The reverse of record `k`
    /// is `k ^ 1`.
    pub fn directed(&self) -> Vec<(usize, usize)> {
        self.edges.iter().flat_map(|&(u, v)| [(u, v), (v, u)]).collect()
    }

    /// Per directed record, `(d̃_src · d̃_tgt)^(-1/2)`.
    pub fn symmetric_coefficients(&self) -> Vec<f64> {
        self.directed()
            .iter()
            .map(|&(u, v)| 1.0 / (self.clamped_degree(u) * self.clamped_degree(v)).sqrt())
            .collect()
    }

    /// Directed records with symmetric degree normalization, ready for
    /// [`Tape::sheaf_aggregate`](crate::tensor::Tape::sheaf_aggregate).
    pub fn edge_list(&self) -> EdgeList {
        let directed = self.directed();
        EdgeList {
            src: directed.iter().map(|e| e.0).collect::<Vec<_>>().into(),
            tgt: directed.iter().map(|e| e.1).collect::<Vec<_>>().into(),
            coef: Rc::from(self.symmetric_coefficients()),
        }
    }

    /// Dense `n×n` combinatorial Laplacian `D - A`.
    pub fn laplacian(&self) -> Vec<f64> {
        let n = self.n;
        let mut l = vec![0.0; n * n];
        for &(u, v) in &self.edges {
            l[u * n + u] += 1.0;
            l[v * n + v] += 1.0;
            l[u * n + v] -= 1.0;
            l[v * n + u] -= 1.0;
        }
        l
    }

    /// Dense `n×n` adjacency matrix.
    pub fn adjacency(&self) -> Vec<f64> {
        let n = self.n;
        let mut a = vec![0.0; n * n];
        for &(u, v) in &self.edges {
            a[u * n + v] = 1.0;
            a[v * n + u] = 1.0;
        }
        a
    }
}
