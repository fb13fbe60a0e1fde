//! Learned components: restriction-map builders, NSD and DNSD diffusion
//! layers, projections, the MLP baseline and checkpoints.

mod checkpoint;
mod config;
mod layer;

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use config::{Family, Flags, MapKind, ModelConfig};
pub use layer::{
    maps_from_pre_activation, stalk_gate, stalk_layernorm, GraphContext, LayerMode, LayerOutput, RestrictionBuilder,
    SheafLayer, LN_EPS,
};

use crate::error::{Error, Result};
use crate::param::{Bound, ParamId, ParamStore};
use crate::rng::SplitMix64;
use crate::tensor::{Tape, Tensor, Var};

use layer::gaussian;

/// Stream tag for weight initialization draws.
const INIT_STREAM: u64 = 0x1A17;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Linear {
    weight: ParamId,
    bias: ParamId,
}

impl Linear {
    /// Weight `[fan_in, fan_out]` with std `1/√fan_in`, zero bias.
    fn register(
        store: &mut ParamStore,
        rng: &mut SplitMix64,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Result<Self> {
        let std = 1.0 / (fan_in as f64).sqrt();
        let weight = store.add(format!("{prefix}.weight"), gaussian(&[fan_in, fan_out], std, rng))?;
        let bias = store.add(format!("{prefix}.bias"), Tensor::zeros(&[fan_out]))?;
        Ok(Self { weight, bias })
    }

    fn apply(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let rows = tape.value(x).shape()[0];
        let y = tape.matmul(x, p.var(self.weight))?;
        let b = tape.repeat_outer(p.var(self.bias), rows)?;
        tape.add(y, b)
    }
}

/// Total parameter count and the part outside the input/output projections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ParamCount {
    pub total: usize,
    pub backbone: usize,
}

/// A node classifier: MLP baseline or sheaf diffusion network.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    input: Linear,
    hidden: Vec<Linear>,
    layers: Vec<SheafLayer>,
    output: Linear,
}

impl Model {
    /// Build and initialize from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = SplitMix64::derive(config.seed, INIT_STREAM);
        let mut store = ParamStore::new();
        let (c, d) = (config.hidden, config.d);
        let mut hidden = Vec::new();
        let mut layers = Vec::new();
        let (input, output) = match config.family {
            Family::Mlp => {
                if config.layers == 1 {
                    let only = Linear::register(&mut store, &mut rng, "output", config.in_dim, config.classes)?;
                    (only, only)
                } else {
                    let input = Linear::register(&mut store, &mut rng, "input", config.in_dim, c)?;
                    for i in 0..config.layers - 2 {
                        hidden.push(Linear::register(&mut store, &mut rng, &format!("hidden{i}"), c, c)?);
                    }
                    let output = Linear::register(&mut store, &mut rng, "output", c, config.classes)?;
                    (input, output)
                }
            }
            Family::Nsd | Family::Dnsd => {
                let input = Linear::register(&mut store, &mut rng, "input", config.in_dim, c)?;
                let mode = if config.family == Family::Nsd {
                    LayerMode::Nsd
                } else {
                    LayerMode::Dnsd(config.flags)
                };
                for l in 0..config.layers {
                    layers.push(SheafLayer::register(
                        &mut store,
                        &mut rng,
                        l,
                        mode,
                        config.map,
                        d,
                        c / d,
                    )?);
                }
                let output = Linear::register(&mut store, &mut rng, "output", c, config.classes)?;
                (input, output)
            }
        };
        Ok(Self {
            config,
            params: store,
            input,
            hidden,
            layers,
            output,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn layers(&self) -> &[SheafLayer] {
        &self.layers
    }

    pub fn count_parameters(&self) -> ParamCount {
        let total = self.params.scalar_count();
        let projections: usize = self
            .params
            .iter()
            .filter(|p| p.name.starts_with("input.") || p.name.starts_with("output."))
            .map(|p| p.value.len())
            .sum();
        ParamCount {
            total,
            backbone: total - projections,
        }
    }

    /// Logits `[n, C]` for features `[n, F]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, features: Var, ctx: &GraphContext) -> Result<Var> {
        self.forward_inspect(tape, p, features, ctx, |_, _| {})
    }

    /// Forward pass that reports every sheaf layer's intermediate values.
    pub fn forward_inspect(
        &self,
        tape: &mut Tape,
        p: &Bound,
        features: Var,
        ctx: &GraphContext,
        mut inspect: impl FnMut(usize, &LayerOutput),
    ) -> Result<Var> {
        let shape = tape.value(features).shape().to_vec();
        if shape != [ctx.n, self.config.in_dim] {
            return Err(Error::shape(
                "Model::forward",
                format!("features {shape:?}, expected [{}, {}]", ctx.n, self.config.in_dim),
            ));
        }
        match self.config.family {
            Family::Mlp => {
                if self.config.layers == 1 {
                    return self.output.apply(tape, p, features);
                }
                let mut h = self.input.apply(tape, p, features)?;
                h = tape.relu(h)?;
                for lin in &self.hidden {
                    h = lin.apply(tape, p, h)?;
                    h = tape.relu(h)?;
                }
                self.output.apply(tape, p, h)
            }
            Family::Nsd | Family::Dnsd => {
                let (c, d) = (self.config.hidden, self.config.d);
                let h = self.input.apply(tape, p, features)?;
                let mut x = tape.reshape(h, &[ctx.n, d, c / d])?;
                for (l, layer) in self.layers.iter().enumerate() {
                    let out = layer.forward(tape, p, x, ctx)?;
                    inspect(l, &out);
                    x = out.out;
                }
                let flat = tape.reshape(x, &[ctx.n, c])?;
                self.output.apply(tape, p, flat)
            }
        }
    }

    /// Logits without recording gradients.
    pub fn predict(&self, features: &Tensor, ctx: &GraphContext) -> Result<Tensor> {
        let mut tape = Tape::no_grad();
        let p = self.params.bind(&mut tape);
        let x = tape.constant(features.clone());
        let logits = self.forward(&mut tape, &p, x, ctx)?;
        Ok(tape.value(logits).clone())
    }
}
