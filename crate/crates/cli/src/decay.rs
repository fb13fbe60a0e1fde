//! Signal decay under linear sheaf diffusion, and the per-layer size of
//! the Laplacian and adjacency aggregates of freshly initialized models.

use std::path::PathBuf;

use dnsd::benchmark::{load_external, load_or_generate, DatasetBundle, SyntheticConfig};
use dnsd::layers::{Family, GraphContext, Model};
use dnsd::rng::SplitMix64;
use dnsd::sheaf::{
    assemble_laplacian, dirichlet_energy, laplacian_signal_norm, linear_diffusion_step, normalize, CellularSheaf,
    Graph, Normalization,
};
use dnsd::tensor::{Tape, Tensor};
use serde::Serialize;

use crate::error::{CliError, Result};
use crate::io;
use crate::spec::{DatasetSpec, ExperimentSpec};

const GRAPH_STREAM: u64 = 0xDECA;
const SHEAF_STREAM: u64 = 0xDECB;
const SIGNAL_STREAM: u64 = 0xDECC;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SheafKind {
    Random,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SignalKind {
    /// Gaussian entries.
    Random,
    /// A harmonic signal of the normalized identity-sheaf Laplacian.
    Kernel,
}

#[derive(Debug, Clone)]
pub struct DecayOptions {
    pub nodes: usize,
    pub edge_prob: f64,
    pub steps: usize,
    pub sheaf: SheafKind,
    pub signal: SignalKind,
    pub seed: u64,
    /// Also measure layer aggregates on the spec's dataset.
    pub layers: bool,
}

impl Default for DecayOptions {
    fn default() -> Self {
        Self {
            nodes: 30,
            edge_prob: 0.2,
            steps: 200,
            sheaf: SheafKind::Random,
            signal: SignalKind::Random,
            seed: 0,
            layers: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecayStep {
    pub step: usize,
    pub signal_norm: f64,
    pub dirichlet_energy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerSignal {
    pub input: String,
    pub layer: usize,
    /// `‖X̄‖_F` of the NSD (Laplacian) aggregate.
    pub laplacian_norm: f64,
    /// `‖X̄‖_F` of the DNSD aggregate with adjacency switched on.
    pub adjacency_norm: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DecaySummary {
    pub trace: PathBuf,
    pub layer_signal: Option<PathBuf>,
    pub steps: usize,
    pub first_norm: f64,
    pub last_norm: f64,
}

/// Erdős–Rényi graph on `n` nodes.
pub fn random_graph(n: usize, p: f64, rng: &mut SplitMix64) -> Result<Graph> {
    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            if rng.uniform() < p {
                edges.push((u, v));
            }
        }
    }
    Ok(Graph::new(n, edges)?)
}

/// `‖Δ X_t‖_F` and the Dirichlet energy for `t = 0..=steps` of
/// `X_{t+1} = X_t − Δ X_t` with the stalk-block normalized Laplacian.
pub fn decay_trace(opts: &DecayOptions, d: usize, f: usize) -> Result<Vec<DecayStep>> {
    if opts.nodes < 2 || !(0.0..=1.0).contains(&opts.edge_prob) {
        return Err(CliError::Usage(
            "need at least two nodes and an edge probability in [0, 1]".into(),
        ));
    }
    let g = random_graph(
        opts.nodes,
        opts.edge_prob,
        &mut SplitMix64::derive(opts.seed, GRAPH_STREAM),
    )?;
    let sheaf = match opts.sheaf {
        SheafKind::Random => CellularSheaf::random(&g, d, &mut SplitMix64::derive(opts.seed, SHEAF_STREAM)),
        SheafKind::Identity => CellularSheaf::identity(&g, d),
    };
    let delta = normalize(&assemble_laplacian(&g, &sheaf)?, &g, &sheaf, Normalization::StalkBlock)?;
    let mut rng = SplitMix64::derive(opts.seed, SIGNAL_STREAM);
    let mut x = match opts.signal {
        SignalKind::Random => Tensor::from_fn(&[g.n(), d, f], |_| rng.normal()),
        SignalKind::Kernel => {
            if opts.sheaf != SheafKind::Identity {
                return Err(CliError::Usage(
                    "a kernel signal is only constructed for the identity sheaf".into(),
                ));
            }
            // The normalized identity-sheaf Laplacian annihilates D^(1/2)·c.
            let stalk: Vec<f64> = (0..d * f).map(|_| rng.normal()).collect();
            Tensor::from_fn(&[g.n(), d, f], |i| {
                (g.degree(i / (d * f)) as f64).sqrt() * stalk[i % (d * f)]
            })
        }
    };
    let mut out = Vec::with_capacity(opts.steps + 1);
    for step in 0..=opts.steps {
        out.push(DecayStep {
            step,
            signal_norm: laplacian_signal_norm(&x, &delta)?,
            dirichlet_energy: dirichlet_energy(&x, &delta)?,
        });
        if step < opts.steps {
            x = linear_diffusion_step(&x, &delta)?;
        }
    }
    Ok(out)
}

fn first_train_graph(spec: &ExperimentSpec) -> Result<DatasetBundle> {
    match &spec.dataset {
        DatasetSpec::Synthetic { level } => {
            let seed = spec.train_seeds[0];
            Ok(load_or_generate(&spec.cache_dir(), &SyntheticConfig::new(*level, seed))?.0)
        }
        DatasetSpec::External { path } => Ok(load_external(path)?),
    }
}

/// Aggregate norms per layer for an NSD model and a DNSD model with the
/// adjacency flag, both at initialization, on two inputs: a stalk signal
/// that is identical on every node and the dataset features.
pub fn layer_signal(spec: &ExperimentSpec, bundle: &DatasetBundle, depth: usize) -> Result<Vec<LayerSignal>> {
    let seed = spec.train_seeds[0];
    let mut nsd_cfg = spec.model_config(bundle.feature_dim(), bundle.classes, depth, seed);
    nsd_cfg.family = Family::Nsd;
    nsd_cfg.flags = Default::default();
    let mut dnsd_cfg = nsd_cfg.clone();
    dnsd_cfg.family = Family::Dnsd;
    dnsd_cfg.flags = spec.flags;
    dnsd_cfg.flags.adj = true;
    let nsd = Model::new(nsd_cfg)?;
    let dnsd = Model::new(dnsd_cfg)?;
    let ctx = GraphContext::new(&bundle.graph);

    let (d, f) = (spec.d, spec.hidden / spec.d);
    let mut rng = SplitMix64::derive(seed, SIGNAL_STREAM);
    let stalk: Vec<f64> = (0..d * f).map(|_| rng.normal()).collect();
    let agreement = Tensor::from_fn(&[bundle.n(), d, f], |i| stalk[i % (d * f)]);

    let lap_agree = chain_norms(&nsd, &agreement, &ctx)?;
    let adj_agree = chain_norms(&dnsd, &agreement, &ctx)?;
    let lap_feat = feature_norms(&nsd, &bundle.features, &ctx)?;
    let adj_feat = feature_norms(&dnsd, &bundle.features, &ctx)?;

    let mut out = Vec::new();
    for (input, lap, adj) in [("agreement", lap_agree, adj_agree), ("features", lap_feat, adj_feat)] {
        for (layer, (l, a)) in lap.into_iter().zip(adj).enumerate() {
            out.push(LayerSignal {
                input: input.into(),
                layer,
                laplacian_norm: l,
                adjacency_norm: a,
            });
        }
    }
    Ok(out)
}

/// Feed a stalk signal straight through the sheaf layers.
fn chain_norms(model: &Model, x0: &Tensor, ctx: &GraphContext) -> Result<Vec<f64>> {
    let mut tape = Tape::no_grad();
    let p = model.params().bind(&mut tape);
    let mut x = tape.constant(x0.clone());
    let mut norms = Vec::new();
    for layer in model.layers() {
        let out = layer.forward(&mut tape, &p, x, ctx)?;
        norms.push(tape.value(out.aggregate).frobenius_norm());
        x = out.out;
    }
    Ok(norms)
}

fn feature_norms(model: &Model, features: &Tensor, ctx: &GraphContext) -> Result<Vec<f64>> {
    let mut tape = Tape::no_grad();
    let p = model.params().bind(&mut tape);
    let x = tape.constant(features.clone());
    let mut aggregates = Vec::new();
    model.forward_inspect(&mut tape, &p, x, ctx, |_, out| aggregates.push(out.aggregate))?;
    Ok(aggregates.into_iter().map(|v| tape.value(v).frobenius_norm()).collect())
}

/// Write `decay_trace.csv` and, when requested, `layer_signal.csv` into
/// the spec's output directory.
pub fn analyze_decay(spec: &ExperimentSpec, opts: &DecayOptions) -> Result<DecaySummary> {
    spec.validate()?;
    let out = &spec.out;
    io::create_dir(out)?;
    spec.save(&out.join(crate::spec::EFFECTIVE_CONFIG))?;
    let trace = decay_trace(opts, spec.d, spec.hidden / spec.d)?;
    let trace_path = out.join("decay_trace.csv");
    let rows: Vec<Vec<String>> = trace
        .iter()
        .map(|s| {
            vec![
                s.step.to_string(),
                s.signal_norm.to_string(),
                s.dirichlet_energy.to_string(),
            ]
        })
        .collect();
    io::write_csv(&trace_path, &["step", "signal_norm", "dirichlet_energy"], &rows)?;

    let layer_path = if opts.layers {
        let depth = *spec.depths.iter().max().expect("validated non-empty");
        let bundle = first_train_graph(spec)?;
        let signal = layer_signal(spec, &bundle, depth)?;
        let rows: Vec<Vec<String>> = signal
            .iter()
            .map(|s| {
                vec![
                    s.input.clone(),
                    s.layer.to_string(),
                    s.laplacian_norm.to_string(),
                    s.adjacency_norm.to_string(),
                ]
            })
            .collect();
        let path = out.join("layer_signal.csv");
        io::write_csv(&path, &["input", "layer", "laplacian_norm", "adjacency_norm"], &rows)?;
        Some(path)
    } else {
        None
    };
    Ok(DecaySummary {
        trace: trace_path,
        layer_signal: layer_path,
        steps: opts.steps,
        first_norm: trace[0].signal_norm,
        last_norm: trace[trace.len() - 1].signal_norm,
    })
}
