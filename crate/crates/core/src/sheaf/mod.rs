//! Graphs, cellular sheaves and their dense block operators.
//!
//! Every undirected edge `(u, v)` is handled as two directed records,
//! `u -> v` and `v -> u` (see [`Graph::directed`]). For record `u -> v` the
//! sheaf stores `F_src`, the restriction of `u`'s stalk, and `F_tgt`, the
//! restriction of `v`'s stalk; node `u` receives the record's contribution.
//! A sheaf is *consistent* when each record's `F_src` equals its reverse
//! record's `F_tgt`, which is the classical one-map-per-incidence sheaf.
//!
//! Stalk signals are tensors of shape `[n, d, f]`. The dense operators here
//! act on them through the `nd×nd` block matrix and exist for analysis and
//! testing; learned layers use the edge-local path on the tape instead.

mod graph;

pub use graph::Graph;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{kernels, Tensor};

/// Eigenvalues of diagonal blocks below this are treated as zero when
/// forming `D^(-1/2)`.
pub const PINV_THRESHOLD: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellularSheaf {
    d: usize,
    f_src: Vec<f64>,
    f_tgt: Vec<f64>,
}

impl CellularSheaf {
    /// General sheaf from per-record maps of shape `[2|E|, d, d]`.
    pub fn from_directed(g: &Graph, d: usize, f_src: &Tensor, f_tgt: &Tensor) -> Result<Self> {
        let expected = [2 * g.edge_count(), d, d];
        for t in [f_src, f_tgt] {
            if t.shape() != expected {
                return Err(Error::shape(
                    "CellularSheaf::from_directed",
                    format!("maps {:?}, expected {expected:?}", t.shape()),
                ));
            }
            if !t.is_finite() {
                return Err(Error::NonFinite("restriction map".into()));
            }
        }
        Ok(Self {
            d,
            f_src: f_src.data().to_vec(),
            f_tgt: f_tgt.data().to_vec(),
        })
    }

    /// Consistent sheaf from one pair of maps per undirected edge:
    /// `maps[i] = (F_{u⊴e}, F_{v⊴e})` for `g.edges()[i] = (u, v)`.
    pub fn from_edge_maps(g: &Graph, d: usize, maps: &[(Tensor, Tensor)]) -> Result<Self> {
        if maps.len() != g.edge_count() {
            return Err(Error::shape(
                "CellularSheaf::from_edge_maps",
                format!("{} map pairs for {} edges", maps.len(), g.edge_count()),
            ));
        }
        let dd = d * d;
        let mut f_src = Vec::with_capacity(2 * maps.len() * dd);
        let mut f_tgt = Vec::with_capacity(2 * maps.len() * dd);
        for (fu, fv) in maps {
            for t in [fu, fv] {
                if t.shape() != [d, d] {
                    return Err(Error::shape(
                        "CellularSheaf::from_edge_maps",
                        format!("map {:?}, expected [{d}, {d}]", t.shape()),
                    ));
                }
                if !t.is_finite() {
                    return Err(Error::NonFinite("restriction map".into()));
                }
            }
            // u -> v, then v -> u
            f_src.extend_from_slice(fu.data());
            f_tgt.extend_from_slice(fv.data());
            f_src.extend_from_slice(fv.data());
            f_tgt.extend_from_slice(fu.data());
        }
        Ok(Self { d, f_src, f_tgt })
    }

    /// Every restriction map is the identity.
    pub fn identity(g: &Graph, d: usize) -> Self {
        let maps = vec![(Tensor::identity(d), Tensor::identity(d)); g.edge_count()];
        Self::from_edge_maps(g, d, &maps).expect("identity maps are well formed")
    }

    /// Consistent sheaf with standard Gaussian map entries.
    pub fn random(g: &Graph, d: usize, rng: &mut SplitMix64) -> Self {
        let maps: Vec<_> = (0..g.edge_count())
            .map(|_| {
                let a = Tensor::from_fn(&[d, d], |_| rng.normal());
                let b = Tensor::from_fn(&[d, d], |_| rng.normal());
                (a, b)
            })
            .collect();
        Self::from_edge_maps(g, d, &maps).expect("random maps are well formed")
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn records(&self) -> usize {
        self.f_src.len() / (self.d * self.d).max(1)
    }

    pub fn src_map(&self, k: usize) -> &[f64] {
        let dd = self.d * self.d;
        &self.f_src[k * dd..(k + 1) * dd]
    }

    pub fn tgt_map(&self, k: usize) -> &[f64] {
        let dd = self.d * self.d;
        &self.f_tgt[k * dd..(k + 1) * dd]
    }

    pub fn src_tensor(&self) -> Tensor {
        Tensor::new(vec![self.records(), self.d, self.d], self.f_src.clone()).expect("stored maps match their shape")
    }

    pub fn tgt_tensor(&self) -> Tensor {
        Tensor::new(vec![self.records(), self.d, self.d], self.f_tgt.clone()).expect("stored maps match their shape")
    }

    /// Whether each record's source map equals its reverse record's target map.
    pub fn is_consistent(&self) -> bool {
        (0..self.records()).all(|k| self.src_map(k) == self.tgt_map(k ^ 1))
    }

    fn check_graph(&self, g: &Graph) -> Result<()> {
        if self.records() != 2 * g.edge_count() {
            return Err(Error::shape(
                "sheaf",
                format!(
                    "{} directed records for a graph with {} edges",
                    self.records(),
                    g.edge_count()
                ),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flavor {
    Laplacian,
    Adjacency,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    None,
    /// `D^(-1/2) · op · D^(-1/2)` with `D` the Laplacian's diagonal blocks.
    StalkBlock,
    /// Each directed record weighted by `(d̃_u d̃_v)^(-1/2)`, `d̃ = max(1, deg)`.
    Degree,
}

/// Dense `nd×nd` operator on stalk signals, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockOperator {
    n: usize,
    d: usize,
    flavor: Flavor,
    normalization: Normalization,
    data: Vec<f64>,
}

impl BlockOperator {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Side length `n·d`.
    pub fn dim(&self) -> usize {
        self.n * self.d
    }

    pub fn flavor(&self) -> Flavor {
        self.flavor
    }

    pub fn normalization(&self) -> Normalization {
        self.normalization
    }

    pub fn is_normalized(&self) -> bool {
        self.normalization != Normalization::None
    }

    pub fn matrix(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.dim() + col]
    }

    /// Copy of block `(u, v)` as a row-major `d×d` slice.
    pub fn block(&self, u: usize, v: usize) -> Vec<f64> {
        let (d, nd) = (self.d, self.dim());
        (0..d * d)
            .map(|k| self.data[(u * d + k / d) * nd + v * d + k % d])
            .collect()
    }

    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim(), self.dim(), &self.data)
    }

    pub fn max_asymmetry(&self) -> f64 {
        let nd = self.dim();
        let mut worst = 0.0f64;
        for i in 0..nd {
            for j in (i + 1)..nd {
                worst = worst.max((self.data[i * nd + j] - self.data[j * nd + i]).abs());
            }
        }
        worst
    }

    /// Ascending eigenvalues; the operator must be symmetric to 1e-12
    /// relative to its largest entry.
    pub fn symmetric_eigenvalues(&self) -> Result<Vec<f64>> {
        let scale = self.data.iter().fold(1.0f64, |m, x| m.max(x.abs()));
        if self.max_asymmetry() > 1e-12 * scale {
            return Err(Error::Config(format!(
                "operator is not symmetric (asymmetry {:.3e})",
                self.max_asymmetry()
            )));
        }
        let mut ev: Vec<f64> = SymmetricEigen::new(self.to_dmatrix())
            .eigenvalues
            .iter()
            .copied()
            .collect();
        ev.sort_by(f64::total_cmp);
        Ok(ev)
    }

    /// `op · X` for a stalk signal `X[n×d×f]` viewed as an `nd×f` matrix.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let f = self.check_signal(x, "BlockOperator::apply")?;
        let nd = self.dim();
        let mut out = vec![0.0; nd * f];
        kernels::matmul(&self.data, x.data(), &mut out, nd, nd, f);
        Tensor::new(x.shape().to_vec(), out)
    }

    fn check_signal(&self, x: &Tensor, op: &'static str) -> Result<usize> {
        match x.shape() {
            [n, d, f] if *n == self.n && *d == self.d => Ok(*f),
            s => Err(Error::shape(
                op,
                format!("signal {s:?} for an operator on n={}, d={}", self.n, self.d),
            )),
        }
    }
}

/// Row-wise assembly from directed records, each record weighted by `w[k]`.
fn assemble(g: &Graph, s: &CellularSheaf, flavor: Flavor, weights: Option<&[f64]>) -> Result<BlockOperator> {
    s.check_graph(g)?;
    let (n, d) = (g.n(), s.d());
    let nd = n * d;
    let mut data = vec![0.0; nd * nd];
    let mut block = vec![0.0; d * d];
    for (k, &(u, v)) in g.directed().iter().enumerate() {
        let w = weights.map_or(1.0, |w| w[k]);
        let (fs, ft) = (s.src_map(k), s.tgt_map(k));
        if flavor == Flavor::Laplacian {
            block.fill(0.0);
            kernels::matmul_tn_acc(fs, fs, &mut block, d, d, d);
            add_block(&mut data, nd, d, u, u, &block, w);
        }
        block.fill(0.0);
        kernels::matmul_tn_acc(fs, ft, &mut block, d, d, d);
        let sign = if flavor == Flavor::Laplacian { -w } else { w };
        add_block(&mut data, nd, d, u, v, &block, sign);
    }
    Ok(BlockOperator {
        n,
        d,
        flavor,
        normalization: Normalization::None,
        data,
    })
}

fn add_block(data: &mut [f64], nd: usize, d: usize, u: usize, v: usize, block: &[f64], w: f64) {
    for i in 0..d {
        for j in 0..d {
            data[(u * d + i) * nd + v * d + j] += w * block[i * d + j];
        }
    }
}

/// Sheaf Laplacian: `L_uu = Σ F_srcᵀF_src`, `L_uv = -Σ F_srcᵀF_tgt` over
/// records leaving `u`. For a consistent sheaf this is `δᵀδ`.
pub fn assemble_laplacian(g: &Graph, s: &CellularSheaf) -> Result<BlockOperator> {
    assemble(g, s, Flavor::Laplacian, None)
}

/// Sheaf adjacency: zero diagonal blocks, `A_uv = Σ F_srcᵀF_tgt`.
pub fn assemble_adjacency(g: &Graph, s: &CellularSheaf) -> Result<BlockOperator> {
    assemble(g, s, Flavor::Adjacency, None)
}

/// Normalize an unnormalized operator assembled from `(g, s)`.
///
/// `Degree` weights every record, diagonal contribution included, by
/// `(d̃_u d̃_v)^(-1/2)`; this is exactly what the learned layers aggregate.
/// `StalkBlock` conjugates by the pseudo-inverse square root of the
/// Laplacian's diagonal blocks.
pub fn normalize(op: &BlockOperator, g: &Graph, s: &CellularSheaf, mode: Normalization) -> Result<BlockOperator> {
    if op.is_normalized() {
        return Err(Error::Config("operator is already normalized".into()));
    }
    if op.n != g.n() || op.d != s.d() {
        return Err(Error::shape(
            "normalize",
            format!(
                "operator n={}, d={} vs graph/sheaf n={}, d={}",
                op.n,
                op.d,
                g.n(),
                s.d()
            ),
        ));
    }
    match mode {
        Normalization::None => Ok(op.clone()),
        Normalization::Degree => {
            let w = g.symmetric_coefficients();
            let mut out = assemble(g, s, op.flavor, Some(&w))?;
            out.normalization = Normalization::Degree;
            Ok(out)
        }
        Normalization::StalkBlock => {
            let mut out = assemble(g, &stalk_normalized(g, s)?, op.flavor, None)?;
            out.normalization = Normalization::StalkBlock;
            Ok(out)
        }
    }
}

/// The sheaf with every map `F` replaced by `F·D^(-1/2)` of its node, where
/// `D_u = Σ F_srcᵀF_src` over records leaving `u` is the Laplacian's diagonal
/// block; assembling it gives the stalk-normalized operators.
///
/// With `B_u = UΣVᵀ` the SVD of `u`'s stacked source maps, the scaled maps
/// are rows of `UVᵀ`. Reading them off the SVD keeps their columns
/// orthonormal to working precision however ill-conditioned `D_u` is, so the
/// normalized spectrum stays inside `[0, 2]`. Components with
/// `σ² <=` [`PINV_THRESHOLD`] are dropped.
fn stalk_normalized(g: &Graph, s: &CellularSheaf) -> Result<CellularSheaf> {
    let d = s.d();
    let dd = d * d;
    let directed = g.directed();
    let mut leaving: Vec<Vec<usize>> = vec![Vec::new(); g.n()];
    for (k, &(u, _)) in directed.iter().enumerate() {
        leaving[u].push(k);
    }
    let mut src = vec![0.0; directed.len() * dd];
    let mut roots = vec![vec![0.0; dd]; g.n()];
    for (u, records) in leaving.iter().enumerate() {
        if records.is_empty() {
            continue;
        }
        let rows: Vec<f64> = records.iter().flat_map(|&k| s.src_map(k).iter().copied()).collect();
        let svd = DMatrix::from_row_slice(records.len() * d, d, &rows).svd(true, true);
        let (left, v_t) = (svd.u.expect("requested U"), svd.v_t.expect("requested V"));
        for (c, &sigma) in svd.singular_values.iter().enumerate() {
            if sigma * sigma <= PINV_THRESHOLD {
                continue;
            }
            for (p, &k) in records.iter().enumerate() {
                for i in 0..d {
                    for j in 0..d {
                        src[k * dd + i * d + j] += left[(p * d + i, c)] * v_t[(c, j)];
                    }
                }
            }
            for i in 0..d {
                for j in 0..d {
                    roots[u][i * d + j] += v_t[(c, i)] * v_t[(c, j)] / sigma;
                }
            }
        }
    }
    let tgt = if s.is_consistent() {
        // the reverse record's source map, bit for bit, keeps the result symmetric
        (0..directed.len())
            .flat_map(|k| src[(k ^ 1) * dd..((k ^ 1) + 1) * dd].to_vec())
            .collect()
    } else {
        let mut tgt = vec![0.0; directed.len() * dd];
        for (k, &(_, v)) in directed.iter().enumerate() {
            kernels::matmul(s.tgt_map(k), &roots[v], &mut tgt[k * dd..(k + 1) * dd], d, d, d);
        }
        tgt
    };
    let shape = vec![directed.len(), d, d];
    CellularSheaf::from_directed(g, d, &Tensor::new(shape.clone(), src)?, &Tensor::new(shape, tgt)?)
}

fn require_laplacian(op: &BlockOperator, what: &str) -> Result<()> {
    if op.flavor != Flavor::Laplacian {
        return Err(Error::Config(format!("{what} needs a Laplacian-flavored operator")));
    }
    Ok(())
}

/// One step of linear sheaf diffusion, `X <- (I - Δ) X`.
pub fn linear_diffusion_step(x: &Tensor, delta: &BlockOperator) -> Result<Tensor> {
    require_laplacian(delta, "linear diffusion")?;
    let dx = delta.apply(x)?;
    let data = x.data().iter().zip(dx.data()).map(|(a, b)| a - b).collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// `trace(Xᵀ Δ X)` with `X` viewed as `nd×f`.
pub fn dirichlet_energy(x: &Tensor, delta: &BlockOperator) -> Result<f64> {
    require_laplacian(delta, "Dirichlet energy")?;
    let dx = delta.apply(x)?;
    Ok(kernels::accurate_sum(
        x.data()
            .iter()
            .zip(dx.data())
            .map(|(a, b)| a * b)
            .collect::<Vec<_>>()
            .iter(),
    ))
}

/// `‖Δ X‖_F`.
pub fn laplacian_signal_norm(x: &Tensor, delta: &BlockOperator) -> Result<f64> {
    require_laplacian(delta, "Laplacian signal norm")?;
    Ok(delta.apply(x)?.frobenius_norm())
}
