//! Full-batch iRPROP− training of the surrogate.

use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mlp::{weighted_loss_and_gradient, MlpParams, Normalization};
use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RpropConfig {
    pub eta_plus: f64,
    pub eta_minus: f64,
    pub delta0: f64,
    pub delta_min: f64,
    pub delta_max: f64,
    pub epochs: usize,
    /// Share of the records used for training; the rest validates.
    pub train_fraction: f64,
    /// Drives the split shuffle and the weight initialization.
    pub seed: u64,
}

impl Default for RpropConfig {
    fn default() -> Self {
        Self {
            eta_plus: 1.2,
            eta_minus: 0.5,
            delta0: 0.01,
            delta_min: 1e-8,
            delta_max: 1.0,
            epochs: 1000,
            train_fraction: 0.8,
            seed: 1,
        }
    }
}

impl RpropConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta_minus > 0.0 && self.eta_minus < 1.0 && self.eta_plus > 1.0) {
            return Err(Error::Config("RPROP needs 0 < eta_minus < 1 < eta_plus".into()));
        }
        if !(self.delta_min > 0.0 && self.delta_min <= self.delta0 && self.delta0 <= self.delta_max) {
            return Err(Error::Config("RPROP needs 0 < delta_min ≤ delta0 ≤ delta_max".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config("train_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Per-parameter step sizes and previous gradient signs.
#[derive(Debug, Clone, PartialEq)]
pub struct RpropState {
    delta: Vec<f64>,
    prev_grad: Vec<f64>,
}

impl RpropState {
    pub fn new(n: usize, cfg: &RpropConfig) -> Self {
        Self {
            delta: vec![cfg.delta0; n],
            prev_grad: vec![0.0; n],
        }
    }

    /// One iRPROP− update of `theta` in place.
    pub fn step(&mut self, theta: &mut [f64], grad: &[f64], cfg: &RpropConfig) {
        for k in 0..theta.len() {
            let mut g = grad[k];
            let agree = self.prev_grad[k] * g;
            if agree > 0.0 {
                self.delta[k] = (self.delta[k] * cfg.eta_plus).min(cfg.delta_max);
            } else if agree < 0.0 {
                self.delta[k] = (self.delta[k] * cfg.eta_minus).max(cfg.delta_min);
                g = 0.0;
            }
            if g > 0.0 {
                theta[k] -= self.delta[k];
            } else if g < 0.0 {
                theta[k] += self.delta[k];
            }
            self.prev_grad[k] = g;
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    /// Parameters of the epoch with the lowest validation MSE.
    pub params: MlpParams,
    /// MSE per output component, in label units, before each epoch's update.
    pub train_mse: Vec<f64>,
    pub val_mse: Vec<f64>,
    pub best_epoch: Option<usize>,
    pub best_val_mse: f64,
    pub train_time: f64,
    pub n_train: usize,
    pub n_val: usize,
}

/// Trains a network with `layer_sizes` on `(inputs, labels)`.
///
/// Normalization constants come from the training split. Training works on
/// the normalized outputs; the reported MSE is in label units.
pub fn rprop_train(
    inputs: &[Vec<f64>],
    labels: &[Vec<f64>],
    layer_sizes: &[usize],
    cfg: &RpropConfig,
) -> Result<TrainingOutcome> {
    cfg.validate()?;
    check_len("label count", inputs.len(), labels.len())?;
    if inputs.len() < 2 {
        return Err(Error::Config("training needs at least two records".into()));
    }
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order.shuffle(&mut rng);
    let n_train = ((inputs.len() as f64) * cfg.train_fraction).round() as usize;
    let n_train = n_train.clamp(1, inputs.len() - 1);
    let (train_idx, val_idx) = order.split_at(n_train);

    let mut params = MlpParams::random(layer_sizes, cfg.seed)?;
    let train_z: Vec<&[f64]> = train_idx.iter().map(|&i| inputs[i].as_slice()).collect();
    let train_u: Vec<&[f64]> = train_idx.iter().map(|&i| labels[i].as_slice()).collect();
    params.input_norm = Normalization::fit(&train_z);
    params.output_norm = Normalization::fit(&train_u);
    params.validate()?;

    let pick = |idx: &[usize]| -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        (
            idx.iter().map(|&i| inputs[i].clone()).collect(),
            idx.iter().map(|&i| labels[i].clone()).collect(),
        )
    };
    let (tz, tu) = pick(train_idx);
    let (vz, vu) = pick(val_idx);
    let (tzn, ttn) = super::mlp::normalized_batch(&params, &tz, &tu)?;
    let (vzn, vtn) = super::mlp::normalized_batch(&params, &vz, &vu)?;
    let n_out = params.n_out();
    let unit = vec![1.0; n_out];
    let label_w: Vec<f64> = params.output_norm.scale.iter().map(|s| s * s).collect();
    let mse = |loss: f64, rows: usize| 2.0 * loss / (rows * n_out) as f64;

    let start = Instant::now();
    let mut theta = params.theta();
    let mut state = RpropState::new(theta.len(), cfg);
    let mut best = (None, f64::INFINITY, params.clone());
    let mut train_curve = Vec::with_capacity(cfg.epochs);
    let mut val_curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        params.set_theta(&theta)?;
        let (loss, grad) = weighted_loss_and_gradient(&params, tzn.view(), ttn.view(), &unit);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Training { epoch });
        }
        let train_raw = label_loss(&params, &tzn, &ttn, &label_w);
        let val_raw = label_loss(&params, &vzn, &vtn, &label_w);
        let train_mse = mse(train_raw, tz.len());
        let val_mse = mse(val_raw, vz.len());
        if !val_mse.is_finite() {
            return Err(Error::Training { epoch });
        }
        train_curve.push(train_mse);
        val_curve.push(val_mse);
        if val_mse < best.1 {
            best = (Some(epoch), val_mse, params.clone());
        }
        state.step(&mut theta, &grad, cfg);
    }
    Ok(TrainingOutcome {
        params: best.2,
        train_mse: train_curve,
        val_mse: val_curve,
        best_epoch: best.0,
        best_val_mse: best.1,
        train_time: start.elapsed().as_secs_f64(),
        n_train: tz.len(),
        n_val: vz.len(),
    })
}

/// `½ Σ w_j (o − t)²` in normalized space; with `w_j = s_j²` this is the
/// loss in label units.
fn label_loss(params: &MlpParams, zn: &Array2<f64>, tn: &Array2<f64>, w: &[f64]) -> f64 {
    let out = forward_batch(params, zn);
    let diff = out - tn;
    let loss = 0.5
        * diff
            .rows()
            .into_iter()
            .map(|r| r.iter().zip(w).map(|(d, w)| w * d * d).sum::<f64>())
            .sum::<f64>();
    loss
}

fn forward_batch(params: &MlpParams, zn: &Array2<f64>) -> Array2<f64> {
    let n_layers = params.layers.len();
    let mut a = zn.clone();
    for l in 0..n_layers {
        let w = ndarray::ArrayView2::from_shape(
            (params.layer_sizes[l + 1], params.layer_sizes[l]),
            &params.layers[l].weights,
        )
        .expect("validated layer shape");
        let b = ndarray::Array1::from(params.layers[l].bias.clone());
        a = a.dot(&w.t()) + &b;
        if l + 1 < n_layers {
            a.mapv_inplace(|v| 1.0 / (1.0 + (-v).exp()));
        }
    }
    a
}
