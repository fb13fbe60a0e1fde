use crate::param::ParamStore;
use crate::tensor::Tensor;

/// Adam with bias correction. Weight decay is coupled: `λθ` is added to
/// the gradient before the moment updates.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            v: zeros.clone(),
            m: zeros,
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, i: usize) -> &[f64] {
        &self.m[i]
    }

    pub fn second_moment(&self, i: usize) -> &[f64] {
        &self.v[i]
    }

    /// One update. `grads[i]` belongs to the i-th parameter in store order;
    /// `None` is a zero gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>], lr: f64, weight_decay: f64) {
        assert_eq!(grads.len(), self.m.len(), "one gradient slot per parameter");
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let value = params.value_mut(id);
            let g = grads[i].as_ref().map(Tensor::data);
            if let Some(g) = g {
                assert_eq!(g.len(), value.len(), "gradient shape");
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, theta) in value.data_mut().iter_mut().enumerate() {
                let grad = g.map_or(0.0, |g| g[j]) + weight_decay * *theta;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * grad;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * grad * grad;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *theta -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Multiplies the learning rate by `factor` once the monitored metric has
/// gone more than `patience` consecutive observations without a strict
/// improvement, then restarts the count.
#[derive(Debug, Clone)]
pub struct Plateau {
    lr: f64,
    factor: f64,
    patience: usize,
    min_lr: f64,
    best: f64,
    stale: usize,
}

/// Margin a metric must exceed the best value by to count as improvement.
pub const IMPROVEMENT_TOLERANCE: f64 = 1e-12;

impl Plateau {
    pub fn new(lr: f64, factor: f64, patience: usize, min_lr: f64) -> Self {
        Self {
            lr,
            factor,
            patience,
            min_lr,
            best: f64::NEG_INFINITY,
            stale: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn observe(&mut self, metric: f64) -> f64 {
        if metric > self.best + IMPROVEMENT_TOLERANCE {
            self.best = metric;
            self.stale = 0;
        } else {
            self.stale += 1;
            if self.stale > self.patience {
                if self.lr > self.min_lr {
                    self.lr = (self.lr * self.factor).max(self.min_lr);
                }
                self.stale = 0;
            }
        }
        self.lr
    }
}

/// Stops once `patience` observations have passed since the best one.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: Option<usize>,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::NEG_INFINITY,
            best_epoch: None,
        }
    }

    /// Records `metric` for `epoch`; returns true when it is a new best.
    pub fn observe(&mut self, epoch: usize, metric: f64) -> bool {
        if metric > self.best + IMPROVEMENT_TOLERANCE {
            self.best = metric;
            self.best_epoch = Some(epoch);
            true
        } else {
            false
        }
    }

    pub fn should_stop(&self, epoch: usize) -> bool {
        self.best_epoch.is_some_and(|b| epoch >= b + self.patience)
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best_epoch.map(|e| (e, self.best))
    }
}
