use std::rc::Rc;

use super::{kernels, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Tanh,
    /// Derivative at exactly 0 is taken to be 0.
    Relu,
    Sigmoid,
}

impl UnaryOp {
    fn apply(self, x: f64) -> f64 {
        match self {
            UnaryOp::Tanh => x.tanh(),
            UnaryOp::Relu => x.max(0.0),
            UnaryOp::Sigmoid => sigmoid(x),
        }
    }

    /// Local derivative expressed through input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            UnaryOp::Tanh => 1.0 - y * y,
            UnaryOp::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            UnaryOp::Sigmoid => y * (1.0 - y),
        }
    }

    fn name(self) -> &'static str {
        match self {
            UnaryOp::Tanh => "tanh",
            UnaryOp::Relu => "relu",
            UnaryOp::Sigmoid => "sigmoid",
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary(UnaryOp, Var),
    Scale(Var, f64),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul(Var, Var),
    Sum(Var),
    Mean(Var),
    RowMean(Var),
    RowStd(Var),
    ExpandLast(Var),
    RepeatOuter(Var),
    Reshape(Var),
    ConcatLast(Var, Var),
    SliceRows {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        index: Rc<[usize]>,
    },
    SegmentSum {
        x: Var,
        targets: Rc<[usize]>,
    },
    RowScale {
        x: Var,
        coef: Rc<[f64]>,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        transpose_a: bool,
    },
    StalkMix {
        w: Var,
        x: Var,
    },
    DiagEmbed(Var),
    QrQ {
        a: Var,
        r: Vec<f64>,
    },
    SheafAggregate {
        x: Var,
        f_src: Var,
        f_tgt: Var,
        edges: EdgeList,
        adjacency: bool,
    },
    EdgeAffine {
        x: Var,
        w: Var,
        b: Var,
        edges: EdgeList,
    },
    RowNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normed: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Rc<[usize]>,
        mask: Rc<[usize]>,
        probs: Vec<f64>,
    },
}

/// Directed edge arrays consumed by the fused aggregation op: edge `e`
/// runs `src[e] -> tgt[e]`, its message lands on `src[e]` and is scaled by
/// `coef[e]`.
#[derive(Debug, Clone)]
pub struct EdgeList {
    pub src: Rc<[usize]>,
    pub tgt: Rc<[usize]>,
    pub coef: Rc<[f64]>,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run record of tensor operations.
///
/// Nodes are appended in execution order, so the node vector is already a
/// topological order; `backward` walks it once in reverse.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
    consumed: bool,
    qr_regularized: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf that took part in the loss. Leaves that were
    /// recorded but never reached by the loss get `None`.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn rows_last(t: &Tensor) -> (usize, usize) {
    let f = t.last_dim();
    t.len().checked_div(f).map_or((0, 0), |rows| (rows, f))
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            consumed: false,
            qr_regularized: 0,
        }
    }

    /// Tape that records values only; nothing on it requires a gradient.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// How many QR factorizations needed the `1e-8·I` regularization.
    pub fn qr_regularized(&self) -> usize {
        self.qr_regularized
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Trainable leaf; requires a gradient unless the tape is `no_grad`.
    pub fn param(&mut self, value: Tensor) -> Var {
        let rg = self.grad_enabled;
        self.leaf(value, rg)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var], name: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---- elementwise ---------------------------------------------------

    pub fn unary(&mut self, op: UnaryOp, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| op.apply(v));
        self.push(value, Op::Unary(op, x), &[x], op.name())
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Tanh, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Sigmoid, x)
    }

    /// Multiply by a constant.
    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale(x, factor), &[x], "scale")
    }

    fn binary_shape(&self, a: Var, b: Var, op: &'static str) -> Result<Vec<usize>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() || tb.len() == 1 {
            Ok(ta.shape().to_vec())
        } else if ta.len() == 1 {
            Ok(tb.shape().to_vec())
        } else {
            Err(Error::shape(op, format!("{:?} vs {:?}", ta.shape(), tb.shape())))
        }
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let shape = self.binary_shape(a, b, name)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let n: usize = shape.iter().product();
        let pick = |t: &Tensor, i: usize| {
            if t.len() == 1 {
                t.data()[0]
            } else {
                t.data()[i]
            }
        };
        let data = (0..n).map(|i| f(pick(ta, i), pick(tb, i))).collect();
        let value = Tensor::new(shape, data)?;
        self.push(value, op, &[a, b], name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    // ---- linear algebra ------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push(value, Op::MatMul(a, b), &[a, b], "matmul")
    }

    /// Per-batch product: `a[B×m×k]·b[B×k×p]`, or `a[B×k×m]ᵀ·b[B×k×p]`
    /// when `transpose_a`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, transpose_a: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (batch, m, k, p) = match (ta.shape(), tb.shape()) {
            ([ba, r, c], [bb, k2, p]) if ba == bb => {
                let (m, k) = if transpose_a { (*c, *r) } else { (*r, *c) };
                if k != *k2 {
                    return Err(Error::shape(
                        "batch_matmul",
                        format!("{:?} x {:?}", ta.shape(), tb.shape()),
                    ));
                }
                (*ba, m, k, *p)
            }
            (sa, sb) => {
                return Err(Error::shape("batch_matmul", format!("{sa:?} x {sb:?}")));
            }
        };
        let mut out = vec![0.0; batch * m * p];
        for i in 0..batch {
            let ab = &ta.data()[i * m * k..(i + 1) * m * k];
            let bb = &tb.data()[i * k * p..(i + 1) * k * p];
            let ob = &mut out[i * m * p..(i + 1) * m * p];
            if transpose_a {
                kernels::matmul_tn_acc(ab, bb, ob, k, m, p);
            } else {
                kernels::matmul_acc(ab, bb, ob, m, k, p);
            }
        }
        let value = Tensor::new(vec![batch, m, p], out)?;
        self.push(value, Op::BatchMatMul { a, b, transpose_a }, &[a, b], "batch_matmul")
    }

    /// `out[v] = w · x[v]` for `w[d×d]`, `x[n×d×f]`.
    pub fn stalk_mix(&mut self, w: Var, x: Var) -> Result<Var> {
        let (tw, tx) = (self.value(w), self.value(x));
        let (d, n, f) = match (tw.shape(), tx.shape()) {
            ([d1, d2], [n, d3, f]) if d1 == d2 && d2 == d3 => (*d1, *n, *f),
            (sw, sx) => return Err(Error::shape("stalk_mix", format!("{sw:?} · {sx:?}"))),
        };
        let mut out = vec![0.0; n * d * f];
        for v in 0..n {
            kernels::matmul_acc(
                tw.data(),
                &tx.data()[v * d * f..(v + 1) * d * f],
                &mut out[v * d * f..(v + 1) * d * f],
                d,
                d,
                f,
            );
        }
        let value = Tensor::new(vec![n, d, f], out)?;
        self.push(value, Op::StalkMix { w, x }, &[w, x], "stalk_mix")
    }

    /// `[B×d] -> [B×d×d]` with the input on the diagonal.
    pub fn diag_embed(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (b, d) = match tx.shape() {
            [b, d] => (*b, *d),
            s => return Err(Error::shape("diag_embed", format!("{s:?}"))),
        };
        let mut out = vec![0.0; b * d * d];
        for i in 0..b {
            for s in 0..d {
                out[i * d * d + s * d + s] = tx.data()[i * d + s];
            }
        }
        let value = Tensor::new(vec![b, d, d], out)?;
        self.push(value, Op::DiagEmbed(x), &[x], "diag_embed")
    }

    /// Orthogonal factor of each `d×d` matrix in `a[B×d×d]`, with
    /// `diag(R) >= 0`. Rank-deficient inputs are factored as `A + 1e-8·I`.
    pub fn qr_q(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (b, d) = match ta.shape() {
            [b, d1, d2] if d1 == d2 => (*b, *d1),
            s => return Err(Error::shape("qr_q", format!("{s:?}"))),
        };
        let mut q_all = vec![0.0; b * d * d];
        let mut r_all = vec![0.0; b * d * d];
        let mut regularized = 0;
        for i in 0..b {
            let block = &ta.data()[i * d * d..(i + 1) * d * d];
            let (q, r) = match kernels::qr_square(block, d) {
                Ok(qr) => qr,
                Err(Error::RankDeficient) => {
                    regularized += 1;
                    let mut reg = block.to_vec();
                    for s in 0..d {
                        reg[s * d + s] += 1e-8;
                    }
                    kernels::qr_square(&reg, d)?
                }
                Err(e) => return Err(e),
            };
            q_all[i * d * d..(i + 1) * d * d].copy_from_slice(&q);
            r_all[i * d * d..(i + 1) * d * d].copy_from_slice(&r);
        }
        self.qr_regularized += regularized;
        let value = Tensor::new(vec![b, d, d], q_all)?;
        self.push(value, Op::QrQ { a, r: r_all }, &[a], "qr_q")
    }

    // ---- reductions ----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = kernels::accurate_sum(self.value(x).data());
        self.push(Tensor::scalar(s), Op::Sum(x), &[x], "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s = kernels::accurate_sum(t.data()) / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x], "mean")
    }

    fn reduced_shape(t: &Tensor) -> Vec<usize> {
        let mut shape = t.shape().to_vec();
        if let Some(last) = shape.last_mut() {
            *last = 1;
        }
        shape
    }

    /// Mean over the last axis, keeping it as size 1.
    pub fn row_mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (rows, f) = rows_last(t);
        if f == 0 || t.rank() == 0 {
            return Err(Error::shape("row_mean", "empty axis"));
        }
        let data = (0..rows)
            .map(|r| t.data()[r * f..(r + 1) * f].iter().sum::<f64>() / f as f64)
            .collect();
        let value = Tensor::new(Self::reduced_shape(t), data)?;
        self.push(value, Op::RowMean(x), &[x], "row_mean")
    }

    /// `sqrt(population variance + eps)` over the last axis.
    pub fn row_std(&mut self, x: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let (rows, f) = rows_last(t);
        if f == 0 || t.rank() == 0 {
            return Err(Error::shape("row_std", "empty axis"));
        }
        let data = (0..rows)
            .map(|r| {
                let row = &t.data()[r * f..(r + 1) * f];
                let mu = row.iter().sum::<f64>() / f as f64;
                let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / f as f64;
                (var + eps).sqrt()
            })
            .collect();
        let value = Tensor::new(Self::reduced_shape(t), data)?;
        self.push(value, Op::RowStd(x), &[x], "row_std")
    }

    // ---- layout --------------------------------------------------------

    /// `[..., 1] -> [..., k]` by repetition.
    pub fn expand_last(&mut self, x: Var, k: usize) -> Result<Var> {
        let t = self.value(x);
        if t.last_dim() != 1 || t.rank() == 0 {
            return Err(Error::shape("expand_last", format!("{:?}", t.shape())));
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = k;
        let data = t.data().iter().flat_map(|&v| std::iter::repeat_n(v, k)).collect();
        let value = Tensor::new(shape, data)?;
        self.push(value, Op::ExpandLast(x), &[x], "expand_last")
    }

    /// `s -> [n, ...s]` by tiling.
    pub fn repeat_outer(&mut self, x: Var, n: usize) -> Result<Var> {
        let t = self.value(x);
        let mut shape = vec![n];
        shape.extend_from_slice(t.shape());
        let mut data = Vec::with_capacity(n * t.len());
        for _ in 0..n {
            data.extend_from_slice(t.data());
        }
        let value = Tensor::new(shape, data)?;
        self.push(value, Op::RepeatOuter(x), &[x], "repeat_outer")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        self.push(value, Op::Reshape(x), &[x], "reshape")
    }

    /// Concatenate two tensors with equal leading shape along the last axis.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (ra, pa) = rows_last(ta);
        let (rb, pb) = rows_last(tb);
        if ra != rb || ta.rank() != tb.rank() || ta.rank() == 0 {
            return Err(Error::shape(
                "concat_last",
                format!("{:?} | {:?}", ta.shape(), tb.shape()),
            ));
        }
        let mut data = Vec::with_capacity(ta.len() + tb.len());
        for r in 0..ra {
            data.extend_from_slice(&ta.data()[r * pa..(r + 1) * pa]);
            data.extend_from_slice(&tb.data()[r * pb..(r + 1) * pb]);
        }
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = pa + pb;
        let value = Tensor::new(shape, data)?;
        self.push(value, Op::ConcatLast(a, b), &[a, b], "concat_last")
    }

    /// Rows `start..end` along the first axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        let rows = t.shape().first().copied().unwrap_or(0);
        if start > end || end > rows {
            return Err(Error::shape("slice_rows", format!("{start}..{end} of {rows}")));
        }
        let stride = t.len().checked_div(rows).unwrap_or(0);
        let mut shape = t.shape().to_vec();
        shape[0] = end - start;
        let value = Tensor::new(shape, t.data()[start * stride..end * stride].to_vec())?;
        self.push(value, Op::SliceRows { x, start }, &[x], "slice_rows")
    }

    /// `out[i] = x[index[i]]` along the first axis.
    pub fn gather_rows(&mut self, x: Var, index: Rc<[usize]>) -> Result<Var> {
        let t = self.value(x);
        let rows = t.shape().first().copied().unwrap_or(0);
        let stride = t.len().checked_div(rows).unwrap_or(0);
        let mut data = Vec::with_capacity(index.len() * stride);
        for &i in index.iter() {
            if i >= rows {
                return Err(Error::Index {
                    op: "gather_rows",
                    index: i,
                    bound: rows,
                });
            }
            data.extend_from_slice(&t.data()[i * stride..(i + 1) * stride]);
        }
        let mut shape = t.shape().to_vec();
        if shape.is_empty() {
            return Err(Error::shape("gather_rows", "scalar input"));
        }
        shape[0] = index.len();
        let value = Tensor::new(shape, data)?;
        self.push(value, Op::GatherRows { x, index }, &[x], "gather_rows")
    }

    /// Sum rows of `x[E, ...]` into `n` buckets given by `targets`.
    /// Buckets with no incoming row are zero.
    pub fn segment_sum(&mut self, x: Var, targets: Rc<[usize]>, n: usize) -> Result<Var> {
        let t = self.value(x);
        let rows = t.shape().first().copied().unwrap_or(0);
        if targets.len() != rows {
            return Err(Error::shape(
                "segment_sum",
                format!("{} targets for {rows} rows", targets.len()),
            ));
        }
        let stride = if t.rank() == 0 {
            return Err(Error::shape("segment_sum", "scalar input"));
        } else {
            t.shape()[1..].iter().product::<usize>()
        };
        let mut out = vec![0.0; n * stride];
        for (e, &v) in targets.iter().enumerate() {
            if v >= n {
                return Err(Error::Index {
                    op: "segment_sum",
                    index: v,
                    bound: n,
                });
            }
            for (o, x) in out[v * stride..(v + 1) * stride]
                .iter_mut()
                .zip(&t.data()[e * stride..(e + 1) * stride])
            {
                *o += x;
            }
        }
        let mut shape = t.shape().to_vec();
        shape[0] = n;
        let value = Tensor::new(shape, out)?;
        self.push(value, Op::SegmentSum { x, targets }, &[x], "segment_sum")
    }

    /// Scale row `e` of `x[E, ...]` by the constant `coef[e]`.
    pub fn row_scale(&mut self, x: Var, coef: Rc<[f64]>) -> Result<Var> {
        let t = self.value(x);
        let rows = t.shape().first().copied().unwrap_or(0);
        if coef.len() != rows {
            return Err(Error::shape(
                "row_scale",
                format!("{} coefficients for {rows} rows", coef.len()),
            ));
        }
        let stride = t.len().checked_div(rows).unwrap_or(0);
        let data = t.data().iter().enumerate().map(|(i, v)| v * coef[i / stride]).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push(value, Op::RowScale { x, coef }, &[x], "row_scale")
    }

    // ---- fused sheaf aggregation --------------------------------------

    /// Edge-local sheaf message passing without materializing the block
    /// operator. For directed edge `e = (u -> v)` with weight `w`:
    ///
    /// * Laplacian: `δ = F_src·x_u - F_tgt·x_v`
    /// * adjacency: `δ = F_tgt·x_v`
    ///
    /// and `out_u += w · F_srcᵀ·δ`. Shapes: `x[n×d×f]`, maps `[E×d×d]`, or
    /// `[E×d]` holding only the diagonals of diagonal maps.
    pub fn sheaf_aggregate(
        &mut self,
        x: Var,
        f_src: Var,
        f_tgt: Var,
        edges: &EdgeList,
        adjacency: bool,
    ) -> Result<Var> {
        let (tx, ts, tt) = (self.value(x), self.value(f_src), self.value(f_tgt));
        let (n, d, f) = match tx.shape() {
            [n, d, f] => (*n, *d, *f),
            s => return Err(Error::shape("sheaf_aggregate", format!("x {s:?}"))),
        };
        let e_count = edges.src.len();
        let diagonal = ts.shape() == [e_count, d];
        let map_shape: &[usize] = if diagonal { &[e_count, d] } else { &[e_count, d, d] };
        if ts.shape() != map_shape || tt.shape() != map_shape {
            return Err(Error::shape(
                "sheaf_aggregate",
                format!("maps {:?}/{:?}, expected {map_shape:?}", ts.shape(), tt.shape()),
            ));
        }
        if edges.tgt.len() != e_count || edges.coef.len() != e_count {
            return Err(Error::shape("sheaf_aggregate", "edge arrays differ in length"));
        }
        let (m, df) = (map_shape[1..].iter().product::<usize>(), d * f);
        let mut out = vec![0.0; n * df];
        let mut delta = vec![0.0; df];
        for e in 0..e_count {
            let (u, v) = (edges.src[e], edges.tgt[e]);
            if u >= n || v >= n {
                return Err(Error::Index {
                    op: "sheaf_aggregate",
                    index: u.max(v),
                    bound: n,
                });
            }
            let fs = &ts.data()[e * m..(e + 1) * m];
            let ft = &tt.data()[e * m..(e + 1) * m];
            let xu = &tx.data()[u * df..(u + 1) * df];
            let xv = &tx.data()[v * df..(v + 1) * df];
            let w = edges.coef[e];
            let ou = &mut out[u * df..(u + 1) * df];
            if diagonal {
                for j in 0..d {
                    let (a, b, c) = (fs[j], ft[j], w * fs[j]);
                    let rows = xu[j * f..(j + 1) * f].iter().zip(&xv[j * f..(j + 1) * f]);
                    for (o, (xa, xb)) in ou[j * f..(j + 1) * f].iter_mut().zip(rows) {
                        let dv = if adjacency { b * xb } else { a * xa - b * xb };
                        *o += c * dv;
                    }
                }
                continue;
            }
            edge_delta(fs, ft, xu, xv, adjacency, d, f, &mut delta);
            // ou += w · F_srcᵀ δ
            for j in 0..d {
                let drow = &delta[j * f..(j + 1) * f];
                for s in 0..d {
                    let c = w * fs[j * d + s];
                    if c == 0.0 {
                        continue;
                    }
                    for (o, dv) in ou[s * f..(s + 1) * f].iter_mut().zip(drow) {
                        *o += c * dv;
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, d, f], out)?;
        self.push(
            value,
            Op::SheafAggregate {
                x,
                f_src,
                f_tgt,
                edges: edges.clone(),
                adjacency,
            },
            &[x, f_src, f_tgt],
            "sheaf_aggregate",
        )
    }

    /// Per directed edge `e = (u -> v)`: `x_u·W[..c] + x_v·W[c..] + b` as
    /// `[E, k]`, for `x[n, c]`, `w[2c, k]` and `b[k]`.
    pub fn edge_affine(&mut self, x: Var, w: Var, b: Var, edges: &EdgeList) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (n, c) = match tx.shape() {
            [n, c] => (*n, *c),
            s => return Err(Error::shape("edge_affine", format!("x {s:?}"))),
        };
        let k = match tw.shape() {
            [r, k] if *r == 2 * c => *k,
            s => return Err(Error::shape("edge_affine", format!("w {s:?} for c = {c}"))),
        };
        if tb.shape() != [k] {
            return Err(Error::shape(
                "edge_affine",
                format!("b {:?}, expected [{k}]", tb.shape()),
            ));
        }
        if edges.tgt.len() != edges.src.len() {
            return Err(Error::shape("edge_affine", "edge arrays differ in length"));
        }
        let mut from_src = vec![0.0; n * k];
        let mut from_tgt = vec![0.0; n * k];
        kernels::matmul(tx.data(), &tw.data()[..c * k], &mut from_src, n, c, k);
        kernels::matmul(tx.data(), &tw.data()[c * k..], &mut from_tgt, n, c, k);
        let mut out = Vec::with_capacity(edges.src.len() * k);
        for (&u, &v) in edges.src.iter().zip(edges.tgt.iter()) {
            if u >= n || v >= n {
                return Err(Error::Index {
                    op: "edge_affine",
                    index: u.max(v),
                    bound: n,
                });
            }
            let rows = from_src[u * k..(u + 1) * k].iter().zip(&from_tgt[v * k..(v + 1) * k]);
            out.extend(rows.zip(tb.data()).map(|((p, q), bias)| p + q + bias));
        }
        let value = Tensor::new(vec![edges.src.len(), k], out)?;
        self.push(
            value,
            Op::EdgeAffine {
                x,
                w,
                b,
                edges: edges.clone(),
            },
            &[x, w, b],
            "edge_affine",
        )
    }

    /// Normalize every last-axis row of `x` to zero mean and unit
    /// `sqrt(population variance + eps)`, then apply `gamma, beta`, whose
    /// shape is `x.shape()[1..]`, identically to every leading index.
    pub fn row_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let (rows, f) = rows_last(tx);
        if f == 0 || tx.rank() < 2 {
            return Err(Error::shape("row_norm", format!("x {:?}", tx.shape())));
        }
        let inner = &tx.shape()[1..];
        if tg.shape() != inner || tb.shape() != inner {
            return Err(Error::shape(
                "row_norm",
                format!("gamma {:?}, beta {:?}, expected {inner:?}", tg.shape(), tb.shape()),
            ));
        }
        let block = tg.len();
        let mut normed = vec![0.0; tx.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.len()];
        for r in 0..rows {
            let row = &tx.data()[r * f..(r + 1) * f];
            let mu = row.iter().sum::<f64>() / f as f64;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / f as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            let offset = (r * f) % block;
            for i in 0..f {
                let z = (row[i] - mu) * inv;
                normed[r * f + i] = z;
                out[r * f + i] = z * tg.data()[offset + i] + tb.data()[offset + i];
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        self.push(
            value,
            Op::RowNorm {
                x,
                gamma,
                beta,
                normed,
                inv_std,
            },
            &[x, gamma, beta],
            "row_norm",
        )
    }

    // ---- loss ----------------------------------------------------------

    /// Mean over `mask` rows of `-log softmax(logits[i])[labels[i]]`,
    /// evaluated through log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, labels: Rc<[usize]>, mask: Rc<[usize]>) -> Result<Var> {
        let t = self.value(logits);
        let (n, c) = match t.shape() {
            [n, c] => (*n, *c),
            s => return Err(Error::shape("cross_entropy", format!("{s:?}"))),
        };
        if labels.len() != n {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} labels for {n} rows", labels.len()),
            ));
        }
        if mask.is_empty() {
            return Err(Error::shape("cross_entropy", "empty mask"));
        }
        let mut probs = vec![0.0; mask.len() * c];
        let mut terms = Vec::with_capacity(mask.len());
        for (k, &i) in mask.iter().enumerate() {
            if i >= n {
                return Err(Error::Index {
                    op: "cross_entropy",
                    index: i,
                    bound: n,
                });
            }
            let label = labels[i];
            if label >= c {
                return Err(Error::Index {
                    op: "cross_entropy",
                    index: label,
                    bound: c,
                });
            }
            let row = &t.data()[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = row.iter().map(|z| (z - max).exp()).sum();
            let lse = max + sum_exp.ln();
            terms.push(lse - row[label]);
            for (p, z) in probs[k * c..(k + 1) * c].iter_mut().zip(row) {
                *p = (z - lse).exp();
            }
        }
        let value = Tensor::scalar(kernels::accurate_sum(&terms) / mask.len() as f64);
        self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels,
                mask,
                probs,
            },
            &[logits],
            "cross_entropy",
        )
    }

    // ---- backward ------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. The tape can be differentiated
    /// once; a second call without re-recording the forward pass is an error.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Backward(
                "tape already consumed; record a new forward pass".into(),
            ));
        }
        let node = &self.nodes[loss.0];
        if node.value.len() != 1 {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                node.value.shape()
            )));
        }
        if !node.requires_grad {
            return Err(Error::Backward("loss is not connected to any trainable leaf".into()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::full(node.value.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        let gd = g.data();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Unary(op, x) => {
                let xv = nodes[x.0].value.data();
                if let Some(buf) = grad_buf(grads, nodes, *x) {
                    for (k, b) in buf.iter_mut().enumerate() {
                        *b += gd[k] * op.derivative(xv[k], out.data()[k]);
                    }
                }
            }
            Op::Scale(x, factor) => {
                if let Some(buf) = grad_buf(grads, nodes, *x) {
                    for (b, gv) in buf.iter_mut().zip(gd) {
                        *b += factor * gv;
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(nodes[i].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                accumulate_broadcast(grads, nodes, *a, gd, |_, gv| gv);
                accumulate_broadcast(grads, nodes, *b, gd, |_, gv| sign * gv);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                accumulate_broadcast(grads, nodes, *a, gd, |k, gv| gv * bcast(vb, k));
                accumulate_broadcast(grads, nodes, *b, gd, |k, gv| gv * bcast(va, k));
            }
            Op::Div(a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                accumulate_broadcast(grads, nodes, *a, gd, |k, gv| gv / bcast(vb, k));
                accumulate_broadcast(grads, nodes, *b, gd, |k, gv| {
                    let y = bcast(vb, k);
                    -gv * bcast(va, k) / (y * y)
                });
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let p = vb.shape()[1];
                if let Some(buf) = grad_buf(grads, nodes, *a) {
                    // dA = dC · Bᵀ
                    kernels::matmul_nt_acc(gd, vb.data(), buf, m, p, k);
                }
                if let Some(buf) = grad_buf(grads, nodes, *b) {
                    // dB = Aᵀ · dC
                    kernels::matmul_tn_acc(va.data(), gd, buf, m, k, p);
                }
            }
            Op::BatchMatMul { a, b, transpose_a } => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                let batch = va.shape()[0];
                let (m, p) = (out.shape()[1], out.shape()[2]);
                let k = vb.shape()[1];
                let (sa, sb, so) = (m * k, k * p, m * p);
                if let Some(buf) = grad_buf(grads, nodes, *a) {
                    for t in 0..batch {
                        let gb = &gd[t * so..(t + 1) * so];
                        let bb = &vb.data()[t * sb..(t + 1) * sb];
                        let ob = &mut buf[t * sa..(t + 1) * sa];
                        if *transpose_a {
                            // A stored k×m: dA = B · dCᵀ
                            kernels::matmul_nt_acc(bb, gb, ob, k, p, m);
                        } else {
                            kernels::matmul_nt_acc(gb, bb, ob, m, p, k);
                        }
                    }
                }
                if let Some(buf) = grad_buf(grads, nodes, *b) {
                    for t in 0..batch {
                        let gb = &gd[t * so..(t + 1) * so];
                        let ab = &va.data()[t * sa..(t + 1) * sa];
                        let ob = &mut buf[t * sb..(t + 1) * sb];
                        if *transpose_a {
                            kernels::matmul_acc(ab, gb, ob, k, m, p);
                        } else {
                            kernels::matmul_tn_acc(ab, gb, ob, m, k, p);
                        }
                    }
                }
            }
            Op::StalkMix { w, x } => {
                let (vw, vx) = (&nodes[w.0].value, &nodes[x.0].value);
                let (n, d, f) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
                let df = d * f;
                if let Some(buf) = grad_buf(grads, nodes, *x) {
                    for v in 0..n {
                        kernels::matmul_tn_acc(
                            vw.data(),
                            &gd[v * df..(v + 1) * df],
                            &mut buf[v * df..(v + 1) * df],
                            d,
                            d,
                            f,
                        );
                    }
                }
                if let Some(buf) = grad_buf(grads, nodes, *w) {
                    for v in 0..n {
                        kernels::matmul_nt_acc(
                            &gd[v * df..(v + 1) * df],
                            &vx.data()[v * df..(v + 1) * df],
                            buf,
                            d,
                            f,
                            d,
                        );
                    }
                }
            }
            Op::DiagEmbed(x) => {
                let vx = &nodes[x.0].value;
                let (b, d) = (vx.shape()[0], vx.shape()[1]);
                if let Some(buf) = grad_buf(grads, nodes, *x) {
                    for t in 0..b {
                        for s in 0..d {
                            buf[t * d + s] += gd[t * d * d + s * d + s];
                        }
                    }
                }
            }
            Op::QrQ { a, r } => {
                let d = out.shape()[1];
                let dd = d * d;
                let b = out.shape()[0];
                if let Some(buf) = grad_buf(grads, nodes, *a) {
                    for t in 0..b {
                        let da = kernels::qr_q_backward(
                            &out.data()[t * dd..(t + 1) * dd],
                            &r[t * dd..(t + 1) * dd],
                            &gd[t * dd..(t + 1) * dd],
                            d,
                        );
                        for (o, v) in buf[t * dd..(t + 1) * dd].iter_mut().zip(&da) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(buf) = grad_buf(grads, nodes, *x) {
                    buf.iter_mut().for_each(|b| *b += gd[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(buf) = grad_buf(grads, nodes, *x) {
                    let s = gd[0] / buf.len() as f64;
                    buf.iter_mut().for_each(|b| *b += s);
                }
            }
            Op::RowMean(x) => {
                let f = nodes[x.0].value.last_dim();
                if let Some(buf) = grad_buf(grads, nodes, *x) {
                    for (k, b) in buf.iter_mut().enumerate() {
                        *b += gd[k / f] / f as f64;
                    }
                }
            }
            Op::RowStd(x) => {
                let vx = &nodes[x.0].value;
                let (rows, f) = rows_last(vx);
                if let Some(buf) = grad_buf(grads, nodes, *x) {
                    for r in 0..rows {
                        let row = &vx.data()[r * f..(r + 1) * f];
                        let mu = row.iter().sum::<f64>() / f as f64;
                        let s = out.data()[r];
                        for (b, xv) in buf[r * f..(r + 1) * f].iter_mut().zip(row) {
                            *b += gd[r] * (xv - mu) / (f as f64 * s);
                        }
                    }
                }
            }
            Op::ExpandLast(x) => {
                let k = out.last_dim();
                if let Some(buf) = grad_buf(grads, nodes, *x) {
                    for (r, b) in buf.iter_mut().enumerate() {
                        *b += gd[r * k..(r + 1) * k].iter().sum::<f64>();
                    }
                }
            }
            Op::RepeatOuter(x) => {
                if let Some(buf) = grad_buf(grads, nodes, *x) {
                    let len = buf.len();
                    for chunk in gd.chunks(len.max(1)) {
                        for (b, gv) in buf.iter_mut().zip(chunk) {
                            *b += gv;
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(buf) = grad_buf(grads, nodes, *x) {
                    for (b, gv) in buf.iter_mut().zip(gd) {
                        *b += gv;
                    }
                }
            }
            Op::ConcatLast(a, b) => {
                let pa = nodes[a.0].value.last_dim();
                let pb = nodes[b.0].value.last_dim();
                let rows = out.len() / (pa + pb).max(1);
                if let Some(buf) = grad_buf(grads, nodes, *a) {
                    for r in 0..rows {
                        let src = &gd[r * (pa + pb)..r * (pa + pb) + pa];
                        for (o, v) in buf[r * pa..(r + 1) * pa].iter_mut().zip(src) {
                            *o += v;
                        }
                    }
                }
                if let Some(buf) = grad_buf(grads, nodes, *b) {
                    for r in 0..rows {
                        let src = &gd[r * (pa + pb) + pa..(r + 1) * (pa + pb)];
                        for (o, v) in buf[r * pb..(r + 1) * pb].iter_mut().zip(src) {
                            *o += v;
                        }
                    }
                }
            }
            Op::SliceRows { x, start } => {
                let vx = &nodes[x.0].value;
                let rows = vx.shape()[0];
                let stride = vx.len().checked_div(rows).unwrap_or(0);
                if let Some(buf) = grad_buf(grads, nodes, *x) {
                    let off = start * stride;
                    for (o, v) in buf[off..off + gd.len()].iter_mut().zip(gd) {
                        *o += v;
                    }
                }
            }
            Op::GatherRows { x, index } => {
                let stride = if index.is_empty() { 0 } else { out.len() / index.len() };
                if let Some(buf) = grad_buf(grads, nodes, *x) {
                    for (r, &src) in index.iter().enumerate() {
                        for (o, v) in buf[src * stride..(src + 1) * stride]
                            .iter_mut()
                            .zip(&gd[r * stride..(r + 1) * stride])
                        {
                            *o += v;
                        }
                    }
                }
            }
            Op::SegmentSum { x, targets } => {
                let stride = out.shape()[1..].iter().product::<usize>();
                if let Some(buf) = grad_buf(grads, nodes, *x) {
                    for (e, &v) in targets.iter().enumerate() {
                        for (o, gv) in buf[e * stride..(e + 1) * stride]
                            .iter_mut()
                            .zip(&gd[v * stride..(v + 1) * stride])
                        {
                            *o += gv;
                        }
                    }
                }
            }
            Op::RowScale { x, coef } => {
                let stride = if coef.is_empty() { 0 } else { out.len() / coef.len() };
                if let Some(buf) = grad_buf(grads, nodes, *x) {
                    for (k, b) in buf.iter_mut().enumerate() {
                        *b += gd[k] * coef[k / stride];
                    }
                }
            }
            Op::SheafAggregate {
                x,
                f_src,
                f_tgt,
                edges,
                adjacency,
            } => {
                self.sheaf_aggregate_backward(gd, *x, *f_src, *f_tgt, edges, *adjacency, grads);
            }
            Op::EdgeAffine { x, w, b, edges } => {
                let (vx, vw) = (&nodes[x.0].value, &nodes[w.0].value);
                let (n, c) = (vx.shape()[0], vx.shape()[1]);
                let k = vw.shape()[1];
                // Scatter the edge gradient back onto the endpoint rows.
                let mut g_src = vec![0.0; n * k];
                let mut g_tgt = vec![0.0; n * k];
                for (e, (&u, &v)) in edges.src.iter().zip(edges.tgt.iter()).enumerate() {
                    let ge = &gd[e * k..(e + 1) * k];
                    for (o, gv) in g_src[u * k..(u + 1) * k].iter_mut().zip(ge) {
                        *o += gv;
                    }
                    for (o, gv) in g_tgt[v * k..(v + 1) * k].iter_mut().zip(ge) {
                        *o += gv;
                    }
                }
                if let Some(buf) = grad_buf(grads, nodes, *b) {
                    for row in g_src.chunks_exact(k) {
                        for (o, gv) in buf.iter_mut().zip(row) {
                            *o += gv;
                        }
                    }
                }
                if let Some(buf) = grad_buf(grads, nodes, *w) {
                    let (top, bottom) = buf.split_at_mut(c * k);
                    kernels::matmul_tn_acc(vx.data(), &g_src, top, n, c, k);
                    kernels::matmul_tn_acc(vx.data(), &g_tgt, bottom, n, c, k);
                }
                if let Some(buf) = grad_buf(grads, nodes, *x) {
                    kernels::matmul_nt_acc(&g_src, &vw.data()[..c * k], buf, n, k, c);
                    kernels::matmul_nt_acc(&g_tgt, &vw.data()[c * k..], buf, n, k, c);
                }
            }
            Op::RowNorm {
                x,
                gamma,
                beta,
                normed,
                inv_std,
            } => {
                let vg = &nodes[gamma.0].value;
                let block = vg.len();
                let f = out.last_dim();
                if let Some(buf) = grad_buf(grads, nodes, *beta) {
                    for (k, gv) in gd.iter().enumerate() {
                        buf[k % block] += gv;
                    }
                }
                if let Some(buf) = grad_buf(grads, nodes, *gamma) {
                    for (k, (gv, z)) in gd.iter().zip(normed).enumerate() {
                        buf[k % block] += gv * z;
                    }
                }
                if let Some(buf) = grad_buf(grads, nodes, *x) {
                    let mut dz = vec![0.0; f];
                    for (r, inv) in inv_std.iter().enumerate() {
                        let span = r * f..(r + 1) * f;
                        let z = &normed[span.clone()];
                        let offset = (r * f) % block;
                        for i in 0..f {
                            dz[i] = gd[r * f + i] * vg.data()[offset + i];
                        }
                        let mean_dz = dz.iter().sum::<f64>() / f as f64;
                        let mean_dz_z = dz.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() / f as f64;
                        for ((o, dzi), zi) in buf[span].iter_mut().zip(&dz).zip(z) {
                            *o += inv * (dzi - mean_dz - zi * mean_dz_z);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                mask,
                probs,
            } => {
                let c = nodes[logits.0].value.shape()[1];
                let scale = gd[0] / mask.len() as f64;
                if let Some(buf) = grad_buf(grads, nodes, *logits) {
                    for (k, &row) in mask.iter().enumerate() {
                        for j in 0..c {
                            let target = if labels[row] == j { 1.0 } else { 0.0 };
                            buf[row * c + j] += scale * (probs[k * c + j] - target);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn sheaf_aggregate_backward(
        &self,
        gd: &[f64],
        x: Var,
        f_src: Var,
        f_tgt: Var,
        edges: &EdgeList,
        adjacency: bool,
        grads: &mut [Option<Tensor>],
    ) {
        let nodes = &self.nodes;
        let (tx, ts, tt) = (&nodes[x.0].value, &nodes[f_src.0].value, &nodes[f_tgt.0].value);
        let (d, f) = (tx.shape()[1], tx.shape()[2]);
        let (dd, df) = (d * d, d * f);
        let need_x = nodes[x.0].requires_grad;
        let need_s = nodes[f_src.0].requires_grad;
        let need_t = nodes[f_tgt.0].requires_grad;
        let mut gx = need_x.then(|| vec![0.0; tx.len()]);
        let mut gs = need_s.then(|| vec![0.0; ts.len()]);
        let mut gt = need_t.then(|| vec![0.0; tt.len()]);
        let mut delta = vec![0.0; df];
        let mut ddelta = vec![0.0; df];
        if ts.rank() == 2 {
            for e in 0..edges.src.len() {
                let (u, v) = (edges.src[e], edges.tgt[e]);
                let w = edges.coef[e];
                for j in 0..d {
                    let (a, b) = (ts.data()[e * d + j], tt.data()[e * d + j]);
                    let span = |node: usize| node * df + j * f..node * df + (j + 1) * f;
                    let (xu, xv, gu) = (&tx.data()[span(u)], &tx.data()[span(v)], &gd[span(u)]);
                    // m = w a δ, δ = a x_u - b x_v (or b x_v)
                    let (mut ga, mut gb) = (0.0, 0.0);
                    for i in 0..f {
                        let dv = if adjacency { b * xv[i] } else { a * xu[i] - b * xv[i] };
                        let dd = w * a * gu[i];
                        ga += w * dv * gu[i];
                        if adjacency {
                            gb += dd * xv[i];
                        } else {
                            ga += dd * xu[i];
                            gb -= dd * xv[i];
                        }
                    }
                    if let Some(gs) = gs.as_mut() {
                        gs[e * d + j] += ga;
                    }
                    if let Some(gt) = gt.as_mut() {
                        gt[e * d + j] += gb;
                    }
                    if let Some(gx) = gx.as_mut() {
                        let c = w * a;
                        if !adjacency {
                            for (o, g) in gx[span(u)].iter_mut().zip(gu) {
                                *o += c * a * g;
                            }
                        }
                        let sign = if adjacency { 1.0 } else { -1.0 };
                        for (o, g) in gx[span(v)].iter_mut().zip(gu) {
                            *o += sign * c * b * g;
                        }
                    }
                }
            }
        } else {
            for e in 0..edges.src.len() {
                let (u, v) = (edges.src[e], edges.tgt[e]);
                let w = edges.coef[e];
                let fs = &ts.data()[e * dd..(e + 1) * dd];
                let ft = &tt.data()[e * dd..(e + 1) * dd];
                let xu = &tx.data()[u * df..(u + 1) * df];
                let xv = &tx.data()[v * df..(v + 1) * df];
                let gu = &gd[u * df..(u + 1) * df];
                // m = w F_srcᵀ δ; with G = dm:
                //   dF_src += w δ Gᵀ,  dδ = w F_src G
                if let Some(gs) = gs.as_mut() {
                    edge_delta(fs, ft, xu, xv, adjacency, d, f, &mut delta);
                    delta.iter_mut().for_each(|z| *z *= w);
                    kernels::matmul_nt_acc(&delta, gu, &mut gs[e * dd..(e + 1) * dd], d, f, d);
                }
                ddelta.fill(0.0);
                kernels::matmul_acc(fs, gu, &mut ddelta, d, d, f);
                ddelta.iter_mut().for_each(|z| *z *= w);
                if adjacency {
                    // δ = F_tgt x_v
                    if let Some(gt) = gt.as_mut() {
                        kernels::matmul_nt_acc(&ddelta, xv, &mut gt[e * dd..(e + 1) * dd], d, f, d);
                    }
                    if let Some(gx) = gx.as_mut() {
                        kernels::matmul_tn_acc(ft, &ddelta, &mut gx[v * df..(v + 1) * df], d, d, f);
                    }
                } else {
                    // δ = F_src x_u - F_tgt x_v
                    if let Some(gs) = gs.as_mut() {
                        kernels::matmul_nt_acc(&ddelta, xu, &mut gs[e * dd..(e + 1) * dd], d, f, d);
                    }
                    if let Some(gx) = gx.as_mut() {
                        kernels::matmul_tn_acc(fs, &ddelta, &mut gx[u * df..(u + 1) * df], d, d, f);
                    }
                    ddelta.iter_mut().for_each(|z| *z = -*z);
                    if let Some(gt) = gt.as_mut() {
                        kernels::matmul_nt_acc(&ddelta, xv, &mut gt[e * dd..(e + 1) * dd], d, f, d);
                    }
                    if let Some(gx) = gx.as_mut() {
                        kernels::matmul_tn_acc(ft, &ddelta, &mut gx[v * df..(v + 1) * df], d, d, f);
                    }
                }
            }
        }
        for (var, g) in [(x, gx), (f_src, gs), (f_tgt, gt)] {
            if let (Some(g), Some(buf)) = (g, grad_buf(grads, nodes, var)) {
                for (b, v) in buf.iter_mut().zip(&g) {
                    *b += v;
                }
            }
        }
    }
}

/// `delta = F_src·x_u - F_tgt·x_v` (or `F_tgt·x_v` for adjacency).
#[allow(clippy::too_many_arguments)]
fn edge_delta(fs: &[f64], ft: &[f64], xu: &[f64], xv: &[f64], adjacency: bool, d: usize, f: usize, delta: &mut [f64]) {
    delta.fill(0.0);
    kernels::matmul_acc(ft, xv, delta, d, d, f);
    if !adjacency {
        delta.iter_mut().for_each(|z| *z = -*z);
        kernels::matmul_acc(fs, xu, delta, d, d, f);
    }
}

fn bcast(t: &Tensor, k: usize) -> f64 {
    if t.len() == 1 {
        t.data()[0]
    } else {
        t.data()[k]
    }
}

fn grad_buf<'a>(grads: &'a mut [Option<Tensor>], nodes: &[Node], v: Var) -> Option<&'a mut [f64]> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let slot = &mut grads[v.0];
    if slot.is_none() {
        *slot = Some(Tensor::zeros(node.value.shape()));
    }
    slot.as_mut().map(|t| t.data_mut())
}

/// Accumulate an elementwise gradient into `v`, summing when `v` was a
/// broadcast scalar.
fn accumulate_broadcast(
    grads: &mut [Option<Tensor>],
    nodes: &[Node],
    v: Var,
    gd: &[f64],
    local: impl Fn(usize, f64) -> f64,
) {
    let scalar = nodes[v.0].value.len() == 1 && gd.len() != 1;
    if let Some(buf) = grad_buf(grads, nodes, v) {
        if scalar {
            buf[0] += gd.iter().enumerate().map(|(k, &g)| local(k, g)).sum::<f64>();
        } else {
            for (k, b) in buf.iter_mut().enumerate() {
                *b += local(k, gd[k]);
            }
        }
    }
}
