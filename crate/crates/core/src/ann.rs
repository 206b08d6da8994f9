//! Windowed supervised baseline: a one-hidden-layer network that predicts the
//! reactive power setpoint from recent voltage and current samples, alarming
//! when delivered reactive power strays too far from the prediction.

use alloc::collections::VecDeque;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_core::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::plant::NodeTelemetry;
use crate::{Error, Result};

/// Signals per feature window (V_g and I_g).
pub const N_SIGNALS: usize = 2;

/// `n_m` voltage samples followed by `n_m` current samples, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureWindow(pub Vec<f64>);

impl FeatureWindow {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn build_features(history: &[NodeTelemetry], n_m: usize) -> Result<FeatureWindow> {
    if n_m == 0 || history.len() < n_m {
        return Err(Error::InsufficientHistory { needed: n_m.max(1), available: history.len() });
    }
    let recent = &history[history.len() - n_m..];
    let mut values = Vec::with_capacity(N_SIGNALS * n_m);
    values.extend(recent.iter().map(|t| t.v_g_meas));
    values.extend(recent.iter().map(|t| t.i_g_meas));
    Ok(FeatureWindow(values))
}

/// Streaming version of [`build_features`] for the step loop.
#[derive(Debug, Clone)]
pub struct FeatureHistory {
    n_m: usize,
    v: VecDeque<f64>,
    i: VecDeque<f64>,
}

impl FeatureHistory {
    pub fn new(n_m: usize) -> Self {
        FeatureHistory { n_m, v: VecDeque::with_capacity(n_m), i: VecDeque::with_capacity(n_m) }
    }

    pub fn push(&mut self, v_g_meas: f64, i_g_meas: f64) {
        if self.v.len() == self.n_m {
            self.v.pop_front();
            self.i.pop_front();
        }
        self.v.push_back(v_g_meas);
        self.i.push_back(i_g_meas);
    }

    pub fn is_ready(&self) -> bool {
        self.n_m > 0 && self.v.len() == self.n_m
    }

    /// Write the current window into `out`; false until the window has filled.
    pub fn fill(&self, out: &mut Vec<f64>) -> bool {
        if !self.is_ready() {
            return false;
        }
        out.clear();
        out.extend(self.v.iter().copied());
        out.extend(self.i.iter().copied());
        true
    }
}

/// Per-feature z-score statistics from the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn fit(rows: &[&[f64]]) -> Result<Self> {
        let first = rows.first().ok_or(Error::Empty("no rows to normalize"))?;
        let dim = first.len();
        let n = rows.len() as f64;
        let mut mean = alloc::vec![0.0; dim];
        for row in rows {
            if row.len() != dim {
                return Err(Error::ShapeMismatch { expected: dim, got: row.len() });
            }
            mean.iter_mut().zip(row.iter()).for_each(|(m, x)| *m += x / n);
        }
        let mut var = alloc::vec![0.0; dim];
        for row in rows {
            var.iter_mut().zip(row.iter().zip(&mean)).for_each(|(v, (x, m))| *v += (x - m) * (x - m) / n);
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = libm::sqrt(v);
                if s > 1e-12 { s } else { 1.0 }
            })
            .collect();
        Ok(Normalizer { mean, std })
    }

    pub fn apply_into(&self, x: &[f64], out: &mut Vec<f64>) -> Result<()> {
        if x.len() != self.mean.len() {
            return Err(Error::ShapeMismatch { expected: self.mean.len(), got: x.len() });
        }
        out.clear();
        out.extend(x.iter().zip(self.mean.iter().zip(&self.std)).map(|(x, (m, s))| (x - m) / s));
        Ok(())
    }
}

/// Weights of a `[n_in, hidden, 1]` network: tanh hidden layer, linear output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layer_sizes: [usize; 3],
    /// Hidden weights, row-major `hidden x n_in`.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl MlpParams {
    pub fn zeros(n_in: usize, hidden: usize) -> Self {
        MlpParams {
            layer_sizes: [n_in, hidden, 1],
            w1: alloc::vec![0.0; n_in * hidden],
            b1: alloc::vec![0.0; hidden],
            w2: alloc::vec![0.0; hidden],
            b2: 0.0,
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn seeded(n_in: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(n_in, hidden);
        let a1 = libm::sqrt(6.0 / (n_in + hidden) as f64);
        let a2 = libm::sqrt(6.0 / (hidden + 1) as f64);
        p.w1.iter_mut().for_each(|w| *w = rng.random_range(-a1..a1));
        p.w2.iter_mut().for_each(|w| *w = rng.random_range(-a2..a2));
        p
    }

    pub fn n_in(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn hidden(&self) -> usize {
        self.layer_sizes[1]
    }

    pub fn n_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        let [n_in, hidden, out] = self.layer_sizes;
        if out != 1 || self.w1.len() != n_in * hidden || self.b1.len() != hidden || self.w2.len() != hidden {
            return Err(Error::ShapeMismatch { expected: n_in * hidden, got: self.w1.len() });
        }
        if !self.to_flat().iter().all(|w| w.is_finite()) {
            return Err(Error::Domain("non-finite network parameter"));
        }
        Ok(())
    }

    /// Parameters in the order w1, b1, w2, b2.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_params());
        v.extend_from_slice(&self.w1);
        v.extend_from_slice(&self.b1);
        v.extend_from_slice(&self.w2);
        v.push(self.b2);
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::ShapeMismatch { expected: self.n_params(), got: flat.len() });
        }
        let (a, rest) = flat.split_at(self.w1.len());
        let (b, rest) = rest.split_at(self.b1.len());
        let (c, d) = rest.split_at(self.w2.len());
        self.w1.copy_from_slice(a);
        self.b1.copy_from_slice(b);
        self.w2.copy_from_slice(c);
        self.b2 = d[0];
        Ok(())
    }

    fn hidden_activations(&self, x: &[f64], h: &mut [f64]) {
        let n_in = self.n_in();
        for (j, hj) in h.iter_mut().enumerate() {
            let row = &self.w1[j * n_in..(j + 1) * n_in];
            let z = row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + self.b1[j];
            *hj = libm::tanh(z);
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.n_in() {
            return Err(Error::ShapeMismatch { expected: self.n_in(), got: x.len() });
        }
        let mut h = alloc::vec![0.0; self.hidden()];
        self.hidden_activations(x, &mut h);
        Ok(h.iter().zip(&self.w2).map(|(h, w)| h * w).sum::<f64>() + self.b2)
    }

    /// Squared error `(y - target)^2` and its gradient, accumulated into `grad`
    /// (flat layout, see [`MlpParams::to_flat`]).
    pub fn accumulate_gradient(&self, x: &[f64], target: f64, grad: &mut [f64]) -> Result<f64> {
        if x.len() != self.n_in() {
            return Err(Error::ShapeMismatch { expected: self.n_in(), got: x.len() });
        }
        if grad.len() != self.n_params() {
            return Err(Error::ShapeMismatch { expected: self.n_params(), got: grad.len() });
        }
        let n_in = self.n_in();
        let hidden = self.hidden();
        let mut h = alloc::vec![0.0; hidden];
        self.hidden_activations(x, &mut h);
        let y = h.iter().zip(&self.w2).map(|(h, w)| h * w).sum::<f64>() + self.b2;
        let err = y - target;
        let dy = 2.0 * err;

        let (g_w1, rest) = grad.split_at_mut(n_in * hidden);
        let (g_b1, rest) = rest.split_at_mut(hidden);
        let (g_w2, g_b2) = rest.split_at_mut(hidden);
        g_b2[0] += dy;
        for j in 0..hidden {
            g_w2[j] += dy * h[j];
            let dz = dy * self.w2[j] * (1.0 - h[j] * h[j]);
            g_b1[j] += dz;
            let row = &mut g_w1[j * n_in..(j + 1) * n_in];
            row.iter_mut().zip(x).for_each(|(g, x)| *g += dz * x);
        }
        Ok(err * err)
    }
}

pub fn forward(params: &MlpParams, x: &FeatureWindow) -> Result<f64> {
    params.forward(x.as_slice())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Initialization and shuffling seed; derived from the scenario seed when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.05,
            epochs: 100,
            batch_size: 16,
            seed: None,
            validation_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config("ann.train.learning_rate", "must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config("ann.train.epochs", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("ann.train.batch_size", "must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::config("ann.train.validation_fraction", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub train_mse: Vec<f64>,
    pub validation_mse: Vec<f64>,
    pub initial_validation_mse: f64,
    pub best_validation_mse: f64,
    pub best_epoch: usize,
    pub train_samples: usize,
    pub validation_samples: usize,
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub params: MlpParams,
    pub report: TrainingReport,
    /// Dataset indices held out for validation.
    pub validation_indices: Vec<usize>,
}

fn mse(params: &MlpParams, rows: &[(FeatureWindow, f64)], idx: &[usize]) -> Result<f64> {
    if idx.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for &i in idx {
        let (x, t) = &rows[i];
        let e = params.forward(x.as_slice())? - t;
        total += e * e;
    }
    Ok(total / idx.len() as f64)
}

/// Shuffled `(train, validation)` index split. The validation part holds
/// `floor(n * validation_fraction)` indices; when that is zero (or everything)
/// both parts cover the whole set.
pub fn split_indices(n: usize, validation_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_val = libm::floor(n as f64 * validation_fraction) as usize;
    if n_val == 0 || n_val >= n {
        (order.clone(), order)
    } else {
        let (v, t) = order.split_at(n_val);
        (t.to_vec(), v.to_vec())
    }
}

/// Mini-batch SGD on mean squared error with a seeded shuffled split.
pub fn train_sgd(dataset: &[(FeatureWindow, f64)], hidden: usize, cfg: &TrainConfig, seed: u64) -> Result<Trained> {
    let seed = cfg.seed.unwrap_or(seed);
    let (train_idx, val_idx) = split_indices(dataset.len(), cfg.validation_fraction, seed);
    train_on_split(dataset, &train_idx, &val_idx, hidden, cfg, seed)
}

/// Mini-batch SGD on mean squared error over a given split.
///
/// Returns the parameters with the lowest validation error seen, including
/// the initial ones, so validation error never ends above its starting value.
pub fn train_on_split(
    dataset: &[(FeatureWindow, f64)],
    train_idx: &[usize],
    val_idx: &[usize],
    hidden: usize,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Trained> {
    let first = dataset.first().ok_or(Error::Empty("empty training set"))?;
    let n_in = first.0.len();
    if let Some((x, _)) = dataset.iter().find(|(x, _)| x.len() != n_in) {
        return Err(Error::ShapeMismatch { expected: n_in, got: x.len() });
    }
    if let Some(&i) = train_idx.iter().chain(val_idx).find(|&&i| i >= dataset.len()) {
        return Err(Error::ShapeMismatch { expected: dataset.len(), got: i });
    }
    if train_idx.is_empty() {
        return Err(Error::Empty("empty training split"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5af1_e5ee);
    let val_idx = val_idx.to_vec();
    let mut params = MlpParams::seeded(n_in, hidden, seed);
    let initial_val = mse(&params, dataset, &val_idx)?;
    let mut best = (initial_val, 0usize, params.clone());
    let mut report = TrainingReport {
        train_mse: Vec::with_capacity(cfg.epochs),
        validation_mse: Vec::with_capacity(cfg.epochs),
        initial_validation_mse: initial_val,
        best_validation_mse: initial_val,
        best_epoch: 0,
        train_samples: train_idx.len(),
        validation_samples: val_idx.len(),
    };

    let mut flat = params.to_flat();
    let mut grad = alloc::vec![0.0; params.n_params()];
    let mut epoch_order = train_idx.to_vec();
    let batch = cfg.batch_size.max(1);
    for epoch in 1..=cfg.epochs {
        epoch_order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in epoch_order.chunks(batch) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for &i in chunk {
                let (x, t) = &dataset[i];
                loss_sum += params.accumulate_gradient(x.as_slice(), *t, &mut grad)?;
            }
            let scale = cfg.learning_rate / chunk.len() as f64;
            flat.iter_mut().zip(&grad).for_each(|(w, g)| *w -= scale * g);
            params.set_flat(&flat)?;
        }
        let train_mse = loss_sum / epoch_order.len().max(1) as f64;
        let val_mse = mse(&params, dataset, &val_idx)?;
        if !train_mse.is_finite() || !val_mse.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
        report.train_mse.push(train_mse);
        report.validation_mse.push(val_mse);
        if val_mse < best.0 {
            best = (val_mse, epoch, params.clone());
        }
    }
    report.best_validation_mse = best.0;
    report.best_epoch = best.1;
    Ok(Trained { params: best.2, report, validation_indices: val_idx })
}

/// Deviation alarm; equality does not fire.
pub fn ann_detect(q_g_meas: f64, q_hat: f64, epsilon_ann: f64) -> bool {
    (q_g_meas - q_hat).abs() > epsilon_ann
}

/// Trained predictor with its normalization and alarm threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnDetector {
    pub n_m: usize,
    pub normalizer: Normalizer,
    pub params: MlpParams,
    pub epsilon: f64,
}

impl AnnDetector {
    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        let n_in = N_SIGNALS * self.n_m;
        if self.params.n_in() != n_in || self.normalizer.mean.len() != n_in || self.normalizer.std.len() != n_in {
            return Err(Error::ShapeMismatch { expected: n_in, got: self.params.n_in() });
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Domain("ANN threshold must be positive"));
        }
        Ok(())
    }

    /// Predicted setpoint for a raw (unnormalized) window. `scratch` is reused
    /// to avoid per-step allocation.
    pub fn predict(&self, raw: &[f64], scratch: &mut Vec<f64>) -> Result<f64> {
        self.normalizer.apply_into(raw, scratch)?;
        self.params.forward(scratch)
    }
}
