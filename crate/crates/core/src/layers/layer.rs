use std::rc::Rc;

use crate::error::{Error, Result};
use crate::param::{Bound, ParamId, ParamStore};
use crate::rng::SplitMix64;
use crate::sheaf::Graph;
use crate::tensor::{EdgeList, Tape, Tensor, Var};

use super::config::{Flags, MapKind};

/// Variance stabilizer inside the per-stalk LayerNorm.
pub const LN_EPS: f64 = 1e-5;

/// Graph data reused by every layer of a forward pass.
#[derive(Debug, Clone)]
pub struct GraphContext {
    pub n: usize,
    pub edges: EdgeList,
    /// `reverse[k]` is the directed record opposite to record `k`.
    pub reverse: Rc<[usize]>,
}

impl GraphContext {
    pub fn new(g: &Graph) -> Self {
        let edges = g.edge_list();
        let reverse = (0..edges.src.len()).map(|k| k ^ 1).collect::<Vec<_>>();
        Self {
            n: g.n(),
            edges,
            reverse: reverse.into(),
        }
    }

    pub fn records(&self) -> usize {
        self.edges.src.len()
    }
}

pub(crate) fn gaussian(shape: &[usize], std: f64, rng: &mut SplitMix64) -> Tensor {
    Tensor::from_fn(shape, |_| std * rng.normal())
}

/// `I + 0.01·N(0, 1)`.
pub(crate) fn near_identity(n: usize, rng: &mut SplitMix64) -> Tensor {
    Tensor::from_fn(&[n, n], |i| {
        let eye = if i / n == i % n { 1.0 } else { 0.0 };
        eye + 0.01 * rng.normal()
    })
}

/// Computes one `d×d` map per directed record from the concatenated
/// endpoint stalks `[vec(x_src) ‖ vec(x_tgt)]`.
#[derive(Debug, Clone)]
pub struct RestrictionBuilder {
    pub kind: MapKind,
    /// `[2c, k]`: rows `0..c` act on the source stalk, rows `c..2c` on the target.
    pub weight: ParamId,
    pub bias: ParamId,
    d: usize,
}

impl RestrictionBuilder {
    pub(crate) fn register(
        store: &mut ParamStore,
        rng: &mut SplitMix64,
        prefix: &str,
        kind: MapKind,
        d: usize,
        c: usize,
    ) -> Result<Self> {
        let k = kind.output_width(d);
        let mut std = 1.0 / ((2 * c) as f64).sqrt();
        if kind == MapKind::Full {
            std /= 2f64.sqrt();
        }
        let weight = store.add(format!("{prefix}.weight"), gaussian(&[2 * c, k], std, rng))?;
        let bias = store.add(format!("{prefix}.bias"), Tensor::zeros(&[k]))?;
        Ok(Self { kind, weight, bias, d })
    }

    /// Pre-activations `[E, k]` for every directed record.
    pub fn pre_activation(&self, tape: &mut Tape, p: &Bound, xflat: Var, ctx: &GraphContext) -> Result<Var> {
        tape.edge_affine(xflat, p.var(self.weight), p.var(self.bias), &ctx.edges)
    }

    /// Maps `[E, d, d]` for every directed record.
    pub fn build(&self, tape: &mut Tape, p: &Bound, xflat: Var, ctx: &GraphContext) -> Result<Var> {
        let pre = self.pre_activation(tape, p, xflat, ctx)?;
        maps_from_pre_activation(tape, self.kind, pre, self.d)
    }

    /// Like [`build`](Self::build), but diagonal maps stay as their `[E, d]`
    /// diagonals.
    pub fn build_compact(&self, tape: &mut Tape, p: &Bound, xflat: Var, ctx: &GraphContext) -> Result<Var> {
        if self.kind == MapKind::Diag {
            let pre = self.pre_activation(tape, p, xflat, ctx)?;
            tape.tanh(pre)
        } else {
            self.build(tape, p, xflat, ctx)
        }
    }
}

/// Turn builder pre-activations `[E, k]` into maps `[E, d, d]`.
pub fn maps_from_pre_activation(tape: &mut Tape, kind: MapKind, pre: Var, d: usize) -> Result<Var> {
    let e = tape.value(pre).shape()[0];
    match kind {
        MapKind::Diag => {
            let t = tape.tanh(pre)?;
            tape.diag_embed(t)
        }
        MapKind::Full => {
            let t = tape.tanh(pre)?;
            tape.reshape(t, &[e, d, d])
        }
        MapKind::Orthogonal => {
            let m = tape.reshape(pre, &[e, d, d])?;
            tape.qr_q(m)
        }
    }
}

/// Which update equation a layer follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerMode {
    /// Laplacian update with `relu`, one builder, no normalization.
    Nsd,
    /// Flagged update with two builders and per-stalk LayerNorm.
    Dnsd(Flags),
}

#[derive(Debug, Clone)]
pub struct SheafLayer {
    pub index: usize,
    pub mode: LayerMode,
    pub src: RestrictionBuilder,
    /// `None` in NSD mode, where the target map of a record is the source
    /// map of its reverse record.
    pub tgt: Option<RestrictionBuilder>,
    pub w1: ParamId,
    pub w2: ParamId,
    pub eps: ParamId,
    pub ln: Option<(ParamId, ParamId)>,
    pub gate: Option<(ParamId, ParamId)>,
    d: usize,
    f: usize,
}

/// Intermediate values of one layer application.
#[derive(Debug, Clone, Copy)]
pub struct LayerOutput {
    pub out: Var,
    /// Aggregated, normalized messages `X̄` before the nonlinearity.
    pub aggregate: Var,
    /// Maps in the layout of [`SheafLayer::compact_maps`].
    pub f_src: Var,
    pub f_tgt: Var,
    pub gate: Option<Var>,
}

impl SheafLayer {
    pub(crate) fn register(
        store: &mut ParamStore,
        rng: &mut SplitMix64,
        index: usize,
        mode: LayerMode,
        kind: MapKind,
        d: usize,
        f: usize,
    ) -> Result<Self> {
        let c = d * f;
        let prefix = format!("layer{index}");
        let (src, tgt) = match mode {
            LayerMode::Nsd => (
                RestrictionBuilder::register(store, rng, &format!("{prefix}.map"), kind, d, c)?,
                None,
            ),
            LayerMode::Dnsd(_) => (
                RestrictionBuilder::register(store, rng, &format!("{prefix}.src"), kind, d, c)?,
                Some(RestrictionBuilder::register(
                    store,
                    rng,
                    &format!("{prefix}.tgt"),
                    kind,
                    d,
                    c,
                )?),
            ),
        };
        let w1 = store.add(format!("{prefix}.W1"), near_identity(d, rng))?;
        let w2 = store.add(format!("{prefix}.W2"), near_identity(f, rng))?;
        let eps = store.add(format!("{prefix}.eps"), Tensor::zeros(&[1]))?;
        let (ln, gate) = match mode {
            LayerMode::Nsd => (None, None),
            LayerMode::Dnsd(flags) => {
                let gamma = store.add(format!("{prefix}.ln.gamma"), Tensor::ones(&[d, f]))?;
                let beta = store.add(format!("{prefix}.ln.beta"), Tensor::zeros(&[d, f]))?;
                let gate = if flags.gate {
                    let w = store.add(format!("{prefix}.gate.weight"), Tensor::zeros(&[2 * f]))?;
                    let b = store.add(format!("{prefix}.gate.bias"), Tensor::zeros(&[1]))?;
                    Some((w, b))
                } else {
                    None
                };
                (Some((gamma, beta)), gate)
            }
        };
        Ok(Self {
            index,
            mode,
            src,
            tgt,
            w1,
            w2,
            eps,
            ln,
            gate,
            d,
            f,
        })
    }

    pub fn flags(&self) -> Flags {
        match self.mode {
            LayerMode::Nsd => Flags::default(),
            LayerMode::Dnsd(flags) => flags,
        }
    }

    /// Restriction maps `(F_src, F_tgt)`, each `[E, d, d]`.
    pub fn maps(&self, tape: &mut Tape, p: &Bound, x: Var, ctx: &GraphContext) -> Result<(Var, Var)> {
        self.maps_with(tape, p, x, ctx, RestrictionBuilder::build)
    }

    /// Restriction maps as consumed by the aggregation: `[E, d]` diagonals
    /// for diagonal maps, `[E, d, d]` otherwise.
    pub fn compact_maps(&self, tape: &mut Tape, p: &Bound, x: Var, ctx: &GraphContext) -> Result<(Var, Var)> {
        self.maps_with(tape, p, x, ctx, RestrictionBuilder::build_compact)
    }

    fn maps_with(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        ctx: &GraphContext,
        build: fn(&RestrictionBuilder, &mut Tape, &Bound, Var, &GraphContext) -> Result<Var>,
    ) -> Result<(Var, Var)> {
        let xflat = tape.reshape(x, &[ctx.n, self.d * self.f])?;
        let f_src = build(&self.src, tape, p, xflat, ctx)?;
        let f_tgt = match &self.tgt {
            Some(b) => build(b, tape, p, xflat, ctx)?,
            None => tape.gather_rows(f_src, ctx.reverse.clone())?,
        };
        Ok((f_src, f_tgt))
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, ctx: &GraphContext) -> Result<LayerOutput> {
        self.forward_with_maps(tape, p, x, ctx, None)
    }

    /// Layer application; `maps` overrides the builders when given, in
    /// either the full or the compact diagonal layout.
    pub fn forward_with_maps(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        ctx: &GraphContext,
        maps: Option<(Var, Var)>,
    ) -> Result<LayerOutput> {
        self.forward_inner(tape, p, x, ctx, maps).map_err(|e| match e {
            Error::NonFinite(op) => Error::NonFinite(format!("layer {} ({op})", self.index)),
            other => other,
        })
    }

    fn forward_inner(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        ctx: &GraphContext,
        maps: Option<(Var, Var)>,
    ) -> Result<LayerOutput> {
        let (n, d, f) = (ctx.n, self.d, self.f);
        if tape.value(x).shape() != [n, d, f] {
            return Err(Error::shape(
                "SheafLayer::forward",
                format!("input {:?}, expected [{n}, {d}, {f}]", tape.value(x).shape()),
            ));
        }
        let flags = self.flags();
        let (f_src, f_tgt) = match maps {
            Some(m) => m,
            None => self.compact_maps(tape, p, x, ctx)?,
        };
        let aggregate = tape.sheaf_aggregate(x, f_src, f_tgt, &ctx.edges, flags.adj)?;

        let mixed = tape.stalk_mix(p.var(self.w1), aggregate)?;
        let act = if flags.odd {
            tape.tanh(mixed)?
        } else {
            tape.relu(mixed)?
        };
        let rows = tape.reshape(act, &[n * d, f])?;
        let mut update = tape.matmul(rows, p.var(self.w2))?;

        let mut gate_out = None;
        if let Some((w, b)) = self.gate {
            let g = stalk_gate(tape, p.var(w), p.var(b), x, aggregate)?;
            gate_out = Some(g);
            let wide = tape.expand_last(g, f)?;
            update = tape.mul(update, wide)?;
        }
        let update = tape.reshape(update, &[n, d, f])?;

        let scaled = tape.mul(x, p.var(self.eps))?;
        let residual = tape.add(x, scaled)?;
        let mut out = tape.sub(residual, update)?;
        if let Some((gamma, beta)) = self.ln {
            out = stalk_layernorm(tape, out, p.var(gamma), p.var(beta))?;
        }
        Ok(LayerOutput {
            out,
            aggregate,
            f_src,
            f_tgt,
            gate: gate_out,
        })
    }
}

/// Per-(node, stalk) gate `sigmoid(w·[X_{v,s} ‖ X̄_{v,s}] + b)` as `[n·d, 1]`.
pub fn stalk_gate(tape: &mut Tape, w: Var, b: Var, x: Var, aggregate: Var) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let (rows, f) = match shape.as_slice() {
        [n, d, f] => (n * d, *f),
        s => return Err(Error::shape("stalk_gate", format!("{s:?}"))),
    };
    let xr = tape.reshape(x, &[rows, f])?;
    let ar = tape.reshape(aggregate, &[rows, f])?;
    let both = tape.concat_last(xr, ar)?;
    let wcol = tape.reshape(w, &[2 * f, 1])?;
    let logit = tape.matmul(both, wcol)?;
    let logit = tape.add(logit, b)?;
    tape.sigmoid(logit)
}

/// Normalize each stalk row of `x[n, d, f]` across its `f` features, then
/// apply the affine `gamma, beta` of shape `[d, f]` shared by all nodes.
pub fn stalk_layernorm(tape: &mut Tape, x: Var, gamma: Var, beta: Var) -> Result<Var> {
    if tape.value(x).rank() != 3 {
        return Err(Error::shape("stalk_layernorm", format!("{:?}", tape.value(x).shape())));
    }
    tape.row_norm(x, gamma, beta, LN_EPS)
}
