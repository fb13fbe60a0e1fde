//! Full-batch node-classification training and evaluation.

mod optim;

pub use optim::{Adam, EarlyStopping, Plateau, IMPROVEMENT_TOLERANCE};

use std::rc::Rc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::benchmark::DatasetBundle;
use crate::error::{Error, Result};
use crate::layers::{GraphContext, Model};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub early_stop_patience: usize,
    pub min_lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            weight_decay: 5e-4,
            max_epochs: 500,
            plateau_factor: 0.5,
            plateau_patience: 20,
            early_stop_patience: 100,
            min_lr: 1e-6,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [("lr", self.lr), ("min_lr", self.min_lr)];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Config(format!("{name} = {v} must be positive")));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay = {} must be >= 0",
                self.weight_decay
            )));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::Config(format!(
                "plateau_factor = {} must lie in (0, 1)",
                self.plateau_factor
            )));
        }
        if self.max_epochs == 0 || self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return Err(Error::Config("epoch counts and patiences must be positive".into()));
        }
        if self.early_stop_patience >= self.max_epochs {
            return Err(Error::Config("early_stop_patience must be below max_epochs".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphAccuracy {
    pub name: String,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_graph: Vec<GraphAccuracy>,
    pub pooled: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub restored: bool,
    pub stopped_early: bool,
    /// Filled by the caller after evaluating on held-out graphs.
    pub test: Option<EvalReport>,
    pub wall_time_s: f64,
}

/// Row-wise argmax, first index on ties.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = logits.last_dim();
    logits
        .data()
        .chunks(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |best, (j, &v)| if v > best.1 { (j, v) } else { best },
                )
                .0
        })
        .collect()
}

/// Fraction of `mask` rows whose argmax equals the label.
pub fn accuracy(logits: &Tensor, labels: &[usize], mask: &[usize]) -> f64 {
    let pred = argmax_rows(logits);
    let correct = mask.iter().filter(|&&i| pred[i] == labels[i]).count();
    correct as f64 / mask.len().max(1) as f64
}

/// Masked mean cross-entropy of fixed logits.
pub fn cross_entropy(logits: &Tensor, labels: &[usize], mask: &[usize]) -> Result<f64> {
    let mut tape = Tape::no_grad();
    let x = tape.constant(logits.clone());
    let loss = tape.cross_entropy(x, Rc::from(labels), Rc::from(mask))?;
    Ok(tape.value(loss).data()[0])
}

fn check_bundle(model: &Model, bundle: &DatasetBundle) -> Result<()> {
    let cfg = model.config();
    if bundle.feature_dim() != cfg.in_dim {
        return Err(Error::Config(format!(
            "{}: feature dimension {} but the model expects {}",
            bundle.name,
            bundle.feature_dim(),
            cfg.in_dim
        )));
    }
    if bundle.classes > cfg.classes {
        return Err(Error::Config(format!(
            "{}: {} classes but the model predicts {}",
            bundle.name, bundle.classes, cfg.classes
        )));
    }
    Ok(())
}

fn diverged(epoch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(what) => Error::Diverged { epoch, detail: what },
        other => other,
    }
}

/// Trains on the bundle's train nodes, monitoring accuracy on its val
/// nodes. Each epoch records metrics of the parameters before that epoch's
/// update, so the best snapshot is exactly the evaluated one; it is
/// restored into `model` at the end.
pub fn train(model: &mut Model, bundle: &DatasetBundle, config: &TrainConfig) -> Result<TrainReport> {
    train_observed(model, bundle, config, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_observed(
    model: &mut Model,
    bundle: &DatasetBundle,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    config.validate()?;
    check_bundle(model, bundle)?;
    if bundle.split.train.is_empty() || bundle.split.val.is_empty() {
        return Err(Error::Config(format!(
            "{}: training needs non-empty train and val splits",
            bundle.name
        )));
    }
    let start = Instant::now();
    let ctx = GraphContext::new(&bundle.graph);
    let labels: Rc<[usize]> = Rc::from(bundle.labels.as_slice());
    let train_mask: Rc<[usize]> = Rc::from(bundle.split.train.as_slice());
    let val_mask = bundle.split.val.as_slice();

    let mut adam = Adam::new(model.params());
    let mut plateau = Plateau::new(config.lr, config.plateau_factor, config.plateau_patience, config.min_lr);
    let mut stopper = EarlyStopping::new(config.early_stop_patience);
    let mut best = model.params().snapshot();
    let mut epochs = Vec::new();
    let mut stopped_early = false;

    for epoch in 0..config.max_epochs {
        let mut tape = Tape::new();
        let p = model.params().bind(&mut tape);
        let x = tape.constant(bundle.features.clone());
        let logits = model.forward(&mut tape, &p, x, &ctx).map_err(diverged(epoch))?;
        let loss = tape
            .cross_entropy(logits, labels.clone(), train_mask.clone())
            .map_err(diverged(epoch))?;
        let train_loss = tape.value(loss).data()[0];
        if !train_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                detail: format!("training loss {train_loss}"),
            });
        }
        let values = tape.value(logits).clone();
        let mut grads = tape.backward(loss)?;
        let grads: Vec<Option<Tensor>> = p.vars().iter().map(|&v| grads.take(v)).collect();

        let record = EpochRecord {
            epoch,
            lr: plateau.lr(),
            train_loss,
            train_acc: accuracy(&values, &labels, &train_mask),
            val_loss: cross_entropy(&values, &labels, val_mask)?,
            val_acc: accuracy(&values, &labels, val_mask),
        };
        if stopper.observe(epoch, record.val_acc) {
            best = model.params().snapshot();
        }
        on_epoch(&record);
        epochs.push(record);

        adam.step(model.params_mut(), &grads, plateau.lr(), config.weight_decay);
        plateau.observe(epochs[epoch].val_acc);
        if stopper.should_stop(epoch) {
            stopped_early = epoch + 1 < config.max_epochs;
            break;
        }
    }

    model.params_mut().restore(&best)?;
    let (best_epoch, best_val_acc) = stopper.best().expect("at least one epoch ran");
    Ok(TrainReport {
        epochs,
        best_epoch,
        best_val_acc,
        restored: true,
        stopped_early,
        test: None,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// Accuracy over all nodes of each bundle, plus the pooled accuracy over
/// their concatenation.
pub fn evaluate(model: &Model, bundles: &[&DatasetBundle]) -> Result<EvalReport> {
    if bundles.is_empty() {
        return Err(Error::Config("evaluate needs at least one graph".into()));
    }
    let mut per_graph = Vec::with_capacity(bundles.len());
    for b in bundles {
        check_bundle(model, b)?;
        let logits = model.predict(&b.features, &GraphContext::new(&b.graph))?;
        let pred = argmax_rows(&logits);
        let correct = pred.iter().zip(&b.labels).filter(|(p, l)| p == l).count();
        per_graph.push(GraphAccuracy {
            name: b.name.clone(),
            correct,
            total: b.n(),
            accuracy: correct as f64 / b.n() as f64,
        });
    }
    let correct: usize = per_graph.iter().map(|g| g.correct).sum();
    let total: usize = per_graph.iter().map(|g| g.total).sum();
    Ok(EvalReport {
        per_graph,
        pooled: correct as f64 / total as f64,
    })
}
