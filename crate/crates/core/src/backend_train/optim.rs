//! SGD with classic momentum and L2 weight decay, plus the
//! reduce-on-plateau learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::net::{Backend, Scalar};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauConfig {
    pub factor: f64,
    /// Absolute loss decrease that counts as an improvement.
    pub threshold: f64,
    pub patience: usize,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig { factor: 10.0, threshold: 0.01, patience: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub plateau: PlateauConfig,
    pub seed: u64,
    pub augment: bool,
    /// Compute V1 activations of the training set once. Only valid without
    /// augmentation; memory grows with the training set.
    pub cache_features: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 128,
            epochs: 60,
            plateau: PlateauConfig::default(),
            seed: 0,
            augment: true,
            cache_features: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &'static str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::param(name, format!("must be positive, got {v}")))
            }
        };
        positive("lr0", self.lr0)?;
        positive("plateau.factor", self.plateau.factor)?;
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::param("momentum", format!("must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.plateau.threshold >= 0.0) {
            return Err(Error::param("weight_decay", "weight decay and threshold must be non-negative"));
        }
        if self.batch_size == 0 || self.plateau.patience == 0 {
            return Err(Error::param("batch_size", "batch size and patience must be at least 1"));
        }
        if self.cache_features && self.augment {
            return Err(Error::param("cache_features", "feature caching requires augment = false"));
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<TrainConfig> {
        let cfg: TrainConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `v <- momentum * v + (g + wd * w)`, `w <- w - lr * v`.
pub fn sgd_update<T: Scalar>(w: &mut [T], v: &mut [T], g: &[T], lr: T, momentum: T, weight_decay: T) {
    for ((w, v), &g) in w.iter_mut().zip(v.iter_mut()).zip(g) {
        *v = momentum * *v + (g + weight_decay * *w);
        *w -= lr * *v;
    }
}

/// Applies [`sgd_update`] to every tensor. Fails before touching anything if
/// a gradient holds NaN or infinity.
pub fn sgd_step<T: Scalar>(
    params: &mut Backend<T>,
    velocity: &mut Backend<T>,
    grads: &Backend<T>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    for (name, g) in grads.tensors() {
        if let Some(pos) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(format!("{name}[{pos}]")));
        }
    }
    let (lr, mom, wd) = (T::of(lr), T::of(cfg.momentum), T::of(cfg.weight_decay));
    let gs = grads.tensors();
    for (((_, mut w), (_, mut v)), (name, g)) in params.tensors_mut().into_iter().zip(velocity.tensors_mut()).zip(gs) {
        let shape_ok = w.shape() == g.shape() && v.shape() == g.shape();
        if !shape_ok {
            return Err(Error::Shape(format!("gradient `{name}` does not match its parameter")));
        }
        let (w, v, g) = (
            w.as_slice_mut().expect("contiguous parameter"),
            v.as_slice_mut().expect("contiguous buffer"),
            g.as_slice().expect("contiguous gradient"),
        );
        sgd_update(w, v, g, lr, mom, wd);
    }
    Ok(())
}

/// Counter state of the plateau schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauState {
    pub lr: f64,
    /// Lowest validation loss seen so far.
    pub best: f64,
    pub bad_epochs: usize,
    /// Number of reductions applied; `lr = lr0 / factor^reductions`.
    pub reductions: u32,
}

impl PlateauState {
    pub fn new(lr0: f64) -> Self {
        PlateauState { lr: lr0, best: f64::INFINITY, bad_epochs: 0, reductions: 0 }
    }
}

/// One epoch of reduce-on-plateau. An epoch improves when
/// `val_loss < best - threshold`, with `best` the lowest loss of all
/// previous epochs. After `patience` consecutive epochs without
/// improvement the rate is divided by `factor` and the counter restarts.
pub fn plateau_schedule(state: &mut PlateauState, val_loss: f64, lr0: f64, cfg: &PlateauConfig) {
    if val_loss < state.best - cfg.threshold {
        state.bad_epochs = 0;
    } else {
        state.bad_epochs += 1;
        if state.bad_epochs >= cfg.patience {
            state.reductions += 1;
            state.lr = lr0 / cfg.factor.powi(state.reductions as i32);
            state.bad_epochs = 0;
        }
    }
    if val_loss < state.best {
        state.best = val_loss;
    }
}
