//! Comparison models: penalized linear regressions fitted by coordinate
//! descent, a one-hidden-layer feedforward network, and time-series factor
//! regressions on user-supplied factor returns.

use std::collections::BTreeMap;
use std::path::Path;

use log::{debug, info, warn};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Month, PanelDataset, Split};
use crate::error::{Error, Result};
use crate::numerics::{derive_seed, Rng};
use crate::snap::{adam_step, pricing_loss, sample_weights, AdamConfig, AdamState, EpochLog, ReturnPredictor, TrainingLog};
use crate::stats::{ols_robust, OlsFit};

pub const CD_TOLERANCE: f64 = 1e-8;
pub const CD_MAX_SWEEPS: usize = 10_000;
pub const PATH_LENGTH: usize = 100;
/// Smallest lambda on the path as a fraction of the largest.
pub const PATH_RATIO: f64 = 1e-4;

/// Benchmark inputs for one row: its characteristics followed by the macro
/// states of its month (the same normalized values the SNAP branches see).
pub fn row_features(data: &PanelDataset, row: usize) -> Vec<f64> {
    let m = data.rows[row].month;
    let mut x = data.chars(row).to_vec();
    x.extend_from_slice(&data.common(m)[data.n_chars()..]);
    x
}

pub fn panel_design(data: &PanelDataset, rows: &[usize]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let x = rows.iter().map(|&r| row_features(data, r)).collect();
    let y = rows.iter().map(|&r| data.rows[r].excess_return).collect();
    (x, y)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "mix")]
pub enum Penalty {
    None,
    L1,
    L2,
    /// Share of the L1 term, in `[0, 1]`.
    Elastic(f64),
}

impl Penalty {
    pub fn name(self) -> &'static str {
        match self {
            Penalty::None => "ols",
            Penalty::L1 => "lasso",
            Penalty::L2 => "ridge",
            Penalty::Elastic(_) => "elastic_net",
        }
    }

    fn mix(self) -> f64 {
        match self {
            Penalty::None | Penalty::L2 => 0.0,
            Penalty::L1 => 1.0,
            Penalty::Elastic(a) => a,
        }
    }

    fn validate(self) -> Result<()> {
        match self {
            Penalty::Elastic(a) if !(0.0..=1.0).contains(&a) => {
                Err(Error::Parameter(format!("elastic-net mix {a} outside [0, 1]")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub penalty: Penalty,
    pub lambda: f64,
}

impl LinearModel {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.intercept + x.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>()
    }
}

impl ReturnPredictor for LinearModel {
    fn predict_rows(&self, data: &PanelDataset, rows: &[usize]) -> Result<Vec<f64>> {
        rows.iter()
            .map(|&r| {
                let x = row_features(data, r);
                if x.len() != self.weights.len() {
                    return Err(Error::Shape(format!("{} features for {} weights", x.len(), self.weights.len())));
                }
                Ok(self.predict(&x))
            })
            .collect()
    }
}

/// Column-centered copy of a design, stored by column.
struct Centered {
    n: usize,
    cols: Vec<Vec<f64>>,
    x_mean: Vec<f64>,
    y: Vec<f64>,
    y_mean: f64,
}

impl Centered {
    fn new(x: &[Vec<f64>], y: &[f64]) -> Result<Self> {
        let n = y.len();
        if n == 0 || x.len() != n {
            return Err(Error::Shape(format!("{} design rows for {n} targets", x.len())));
        }
        let p = x[0].len();
        if x.iter().any(|r| r.len() != p) {
            return Err(Error::Shape("ragged design matrix".into()));
        }
        if x.iter().flatten().chain(y).any(|v| !v.is_finite()) {
            return Err(Error::Input("design and targets must be finite".into()));
        }
        let y_mean = y.iter().sum::<f64>() / n as f64;
        let mut cols = Vec::with_capacity(p);
        let mut x_mean = Vec::with_capacity(p);
        for j in 0..p {
            let m = x.iter().map(|r| r[j]).sum::<f64>() / n as f64;
            cols.push(x.iter().map(|r| r[j] - m).collect::<Vec<f64>>());
            x_mean.push(m);
        }
        Ok(Self {
            n,
            cols,
            x_mean,
            y: y.iter().map(|v| v - y_mean).collect(),
            y_mean,
        })
    }

    fn p(&self) -> usize {
        self.cols.len()
    }

    /// `max_j |x_jᵀ y| / n`.
    fn max_correlation(&self) -> f64 {
        self.cols
            .iter()
            .map(|c| (c.iter().zip(&self.y).map(|(a, b)| a * b).sum::<f64>() / self.n as f64).abs())
            .fold(0.0, f64::max)
    }

    fn model(&self, weights: Vec<f64>, penalty: Penalty, lambda: f64) -> LinearModel {
        let intercept = self.y_mean - self.x_mean.iter().zip(&weights).map(|(m, w)| m * w).sum::<f64>();
        LinearModel {
            weights,
            intercept,
            penalty,
            lambda,
        }
    }
}

/// Penalized least-squares objective
/// `(1/2n)‖y − Xw‖² + λ(a‖w‖₁ + (1 − a)/2 ‖w‖²)` on centered data.
fn objective(residual: &[f64], w: &[f64], lambda: f64, mix: f64) -> f64 {
    let n = residual.len() as f64;
    let rss = residual.iter().map(|r| r * r).sum::<f64>();
    let l1 = w.iter().map(|v| v.abs()).sum::<f64>();
    let l2 = w.iter().map(|v| v * v).sum::<f64>();
    rss / (2.0 * n) + lambda * (mix * l1 + 0.5 * (1.0 - mix) * l2)
}

fn soft_threshold(z: f64, g: f64) -> f64 {
    if z > g {
        z - g
    } else if z < -g {
        z + g
    } else {
        0.0
    }
}

/// Cyclic coordinate descent from `start`. Returns the weights and the
/// objective after every sweep (the first entry is the starting objective).
fn coordinate_descent(c: &Centered, lambda: f64, mix: f64, start: Vec<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = c.n as f64;
    let scale: Vec<f64> = c.cols.iter().map(|col| col.iter().map(|v| v * v).sum::<f64>() / n).collect();
    let mut w = start;
    let mut r = c.y.clone();
    for (j, col) in c.cols.iter().enumerate() {
        if w[j] != 0.0 {
            r.iter_mut().zip(col).for_each(|(ri, x)| *ri -= x * w[j]);
        }
    }
    let mut trace = vec![objective(&r, &w, lambda, mix)];
    let mut converged = false;
    for _ in 0..CD_MAX_SWEEPS {
        let mut max_change: f64 = 0.0;
        for (j, col) in c.cols.iter().enumerate() {
            let old = w[j];
            let new = if scale[j] == 0.0 {
                0.0
            } else {
                let rho = col.iter().zip(&r).map(|(x, ri)| x * ri).sum::<f64>() / n + scale[j] * old;
                soft_threshold(rho, lambda * mix) / (scale[j] + lambda * (1.0 - mix))
            };
            if new != old {
                let d = new - old;
                r.iter_mut().zip(col).for_each(|(ri, x)| *ri -= x * d);
                w[j] = new;
                max_change = max_change.max(d.abs());
            }
        }
        let obj = objective(&r, &w, lambda, mix);
        let prev = *trace.last().unwrap();
        debug_assert!(obj <= prev + 1e-12 * prev.abs().max(1e-300), "objective rose from {prev} to {obj}");
        trace.push(obj);
        if max_change < CD_TOLERANCE {
            converged = true;
            break;
        }
    }
    if !converged {
        warn!("coordinate descent stopped after {CD_MAX_SWEEPS} sweeps without converging (lambda {lambda})");
    }
    (w, trace)
}

/// Ridge (or plain least squares when `lambda = 0`) from the normal equations.
fn closed_form(c: &Centered, lambda: f64) -> Result<Vec<f64>> {
    let p = c.p();
    let n = c.n as f64;
    let mut a = DMatrix::<f64>::zeros(p, p);
    let mut b = DVector::<f64>::zeros(p);
    for i in 0..p {
        b[i] = c.cols[i].iter().zip(&c.y).map(|(x, y)| x * y).sum::<f64>() / n;
        for j in i..p {
            let v = c.cols[i].iter().zip(&c.cols[j]).map(|(x, y)| x * y).sum::<f64>() / n;
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
        a[(i, i)] += lambda;
    }
    let chol = a
        .cholesky()
        .ok_or_else(|| Error::Singular("normal equations are not positive definite".into()))?;
    Ok(chol.solve(&b).iter().copied().collect())
}

/// Fit one penalized linear model. `L1` and `Elastic` use coordinate descent;
/// `None` and `L2` solve the normal equations.
pub fn fit_regularized(x: &[Vec<f64>], y: &[f64], penalty: Penalty, lambda: f64) -> Result<LinearModel> {
    penalty.validate()?;
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Parameter(format!("lambda must be finite and non-negative, got {lambda}")));
    }
    let c = Centered::new(x, y)?;
    let w = match penalty {
        Penalty::None => closed_form(&c, 0.0)?,
        Penalty::L2 => closed_form(&c, lambda)?,
        Penalty::L1 | Penalty::Elastic(_) => coordinate_descent(&c, lambda, penalty.mix(), vec![0.0; c.p()]).0,
    };
    Ok(c.model(w, penalty, lambda))
}

/// Objective trace of a coordinate-descent fit, for diagnostics.
pub fn descent_trace(x: &[Vec<f64>], y: &[f64], lambda: f64, mix: f64) -> Result<Vec<f64>> {
    let c = Centered::new(x, y)?;
    Ok(coordinate_descent(&c, lambda, mix, vec![0.0; c.p()]).1)
}

/// Smallest lambda that zeroes every weight of the penalty's L1 part. Ridge
/// borrows the value for a mix of 0.001.
pub fn lambda_max(x: &[Vec<f64>], y: &[f64], penalty: Penalty) -> Result<f64> {
    let c = Centered::new(x, y)?;
    Ok(c.max_correlation() / penalty.mix().max(1e-3))
}

/// Log-spaced grid from `lambda_max` down to `PATH_RATIO · lambda_max`.
pub fn lambda_grid(lambda_max: f64, steps: usize) -> Vec<f64> {
    if steps <= 1 {
        return vec![lambda_max];
    }
    let lo = (lambda_max * PATH_RATIO).ln();
    let hi = lambda_max.ln();
    (0..steps)
        .map(|i| (hi + (lo - hi) * i as f64 / (steps - 1) as f64).exp())
        .collect()
}

/// Fit every lambda of the grid, warm-starting coordinate descent along it.
pub fn fit_path(x: &[Vec<f64>], y: &[f64], penalty: Penalty, lambdas: &[f64]) -> Result<Vec<LinearModel>> {
    penalty.validate()?;
    let c = Centered::new(x, y)?;
    match penalty {
        Penalty::None | Penalty::L2 => lambdas
            .par_iter()
            .map(|&l| Ok(c.model(closed_form(&c, if penalty == Penalty::None { 0.0 } else { l })?, penalty, l)))
            .collect(),
        Penalty::L1 | Penalty::Elastic(_) => {
            let mut w = vec![0.0; c.p()];
            let mut out = Vec::with_capacity(lambdas.len());
            for &l in lambdas {
                w = coordinate_descent(&c, l, penalty.mix(), w).0;
                out.push(c.model(w.clone(), penalty, l));
            }
            Ok(out)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathPoint {
    pub lambda: f64,
    pub val_loss: f64,
    pub nonzero: usize,
}

/// Fit the lambda path on the training split and keep the model with the
/// lowest validation pricing loss (first on ties).
pub fn select_linear(data: &PanelDataset, penalty: Penalty) -> Result<(LinearModel, Vec<PathPoint>)> {
    let train_rows = data.rows_in(Split::Train);
    let val_rows = data.rows_in(Split::Validate);
    if train_rows.is_empty() || val_rows.is_empty() {
        return Err(Error::Input("linear benchmarks need training and validation rows".into()));
    }
    let (x, y) = panel_design(data, &train_rows);
    let lambdas = if penalty == Penalty::None {
        vec![0.0]
    } else {
        lambda_grid(lambda_max(&x, &y, penalty)?, PATH_LENGTH)
    };
    let models = fit_path(&x, &y, penalty, &lambdas)?;
    let ids: Vec<u64> = val_rows.iter().map(|&r| data.rows[r].stock_id).collect();
    let targets: Vec<f64> = val_rows.iter().map(|&r| data.rows[r].excess_return).collect();
    let mut path = Vec::with_capacity(models.len());
    let mut best = 0;
    for (i, m) in models.iter().enumerate() {
        let val_loss = pricing_loss(&ids, &targets, &m.predict_rows(data, &val_rows)?)?;
        if val_loss < path.get(best).map_or(f64::INFINITY, |p: &PathPoint| p.val_loss) {
            best = i;
        }
        path.push(PathPoint {
            lambda: m.lambda,
            val_loss,
            nonzero: m.weights.iter().filter(|w| **w != 0.0).count(),
        });
    }
    info!("{}: lambda {:.3e} selected, validation loss {:.6e}", penalty.name(), path[best].lambda, path[best].val_loss);
    Ok((models[best].clone(), path))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Identity => v,
        }
    }

    fn derivative(self, v: f64) -> f64 {
        match self {
            Activation::Relu => {
                if v > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FfnHyper {
    pub hidden: usize,
    pub activation: Activation,
    pub learning_rate: f64,
    pub batch_months: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for FfnHyper {
    fn default() -> Self {
        Self {
            hidden: 32,
            activation: Activation::Relu,
            learning_rate: 1e-3,
            batch_months: 1,
            max_epochs: 30,
            patience: 5,
            grad_clip: 5.0,
            seed: 0,
        }
    }
}

impl FfnHyper {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::Parameter("hidden width must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Parameter("learning rate must be positive".into()));
        }
        if self.batch_months == 0 || self.max_epochs == 0 {
            return Err(Error::Parameter("batch size and epoch count must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FfnModel {
    pub input_dim: usize,
    pub hidden: usize,
    pub activation: Activation,
    /// Row-major `hidden × input_dim`.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl FfnModel {
    /// He-uniform hidden weights; the output layer starts at zero so initial
    /// predictions are on the scale of returns.
    pub fn init(input_dim: usize, hidden: usize, activation: Activation, rng: &mut Rng) -> Self {
        let l1 = (6.0 / input_dim.max(1) as f64).sqrt();
        Self {
            input_dim,
            hidden,
            activation,
            w1: (0..hidden * input_dim).map(|_| rng.uniform_range(-l1, l1)).collect(),
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden],
            b2: 0.0,
        }
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + 1
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        v.extend_from_slice(&self.w1);
        v.extend_from_slice(&self.b1);
        v.extend_from_slice(&self.w2);
        v.push(self.b2);
        v
    }

    pub fn assign(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::Shape(format!("{} values for {} parameters", params.len(), self.num_params())));
        }
        let (a, rest) = params.split_at(self.w1.len());
        let (b, rest) = rest.split_at(self.hidden);
        let (c, d) = rest.split_at(self.hidden);
        self.w1.copy_from_slice(a);
        self.b1.copy_from_slice(b);
        self.w2.copy_from_slice(c);
        self.b2 = d[0];
        Ok(())
    }

    fn pre_activation(&self, x: &[f64]) -> Vec<f64> {
        (0..self.hidden)
            .map(|h| {
                let row = &self.w1[h * self.input_dim..(h + 1) * self.input_dim];
                self.b1[h] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let pre = self.pre_activation(x);
        self.b2 + pre.iter().zip(&self.w2).map(|(p, w)| self.activation.apply(*p) * w).sum::<f64>()
    }

    /// `Σ wᵢ (f(xᵢ) − yᵢ)²` over the listed samples and its gradient in
    /// `flatten` order.
    pub fn loss_and_grad(&self, x: &[Vec<f64>], y: &[f64], weights: &[f64], idx: &[usize]) -> (f64, Vec<f64>) {
        let p = self.input_dim;
        let mut grad = vec![0.0; self.num_params()];
        let (gw1, rest) = grad.split_at_mut(self.w1.len());
        let (gb1, rest) = rest.split_at_mut(self.hidden);
        let (gw2, gb2) = rest.split_at_mut(self.hidden);
        let mut loss = 0.0;
        for &i in idx {
            let pre = self.pre_activation(&x[i]);
            let out = self.b2 + pre.iter().zip(&self.w2).map(|(v, w)| self.activation.apply(*v) * w).sum::<f64>();
            let err = out - y[i];
            loss += weights[i] * err * err;
            let d = 2.0 * weights[i] * err;
            gb2[0] += d;
            for h in 0..self.hidden {
                gw2[h] += d * self.activation.apply(pre[h]);
                let dp = d * self.w2[h] * self.activation.derivative(pre[h]);
                if dp != 0.0 {
                    gb1[h] += dp;
                    gw1[h * p..(h + 1) * p].iter_mut().zip(&x[i]).for_each(|(g, v)| *g += dp * v);
                }
            }
        }
        (loss, grad)
    }
}

impl ReturnPredictor for FfnModel {
    fn predict_rows(&self, data: &PanelDataset, rows: &[usize]) -> Result<Vec<f64>> {
        rows.iter()
            .map(|&r| {
                let x = row_features(data, r);
                if x.len() != self.input_dim {
                    return Err(Error::Shape(format!("{} features for input width {}", x.len(), self.input_dim)));
                }
                Ok(self.predict(&x))
            })
            .collect()
    }
}

/// Training samples with per-sample loss weights and mini-batch groups.
pub struct FfnData<'a> {
    pub x: &'a [Vec<f64>],
    pub y: &'a [f64],
    pub weights: &'a [f64],
}

impl FfnData<'_> {
    fn loss(&self, model: &FfnModel) -> f64 {
        let all: Vec<usize> = (0..self.y.len()).collect();
        let total: f64 = self.weights.iter().sum();
        model.loss_and_grad(self.x, self.y, self.weights, &all).0 / total
    }
}

const FFN_SHUFFLE_KEY: u64 = 0x4646;

/// Adam over shuffled mini-batches with early stopping on validation loss.
/// Batch losses are normalized by the batch's total weight.
pub fn fit_ffn(
    train: &FfnData,
    batches: &[Vec<usize>],
    val: &FfnData,
    hyper: &FfnHyper,
) -> Result<(FfnModel, TrainingLog)> {
    hyper.validate()?;
    if train.y.is_empty() || val.y.is_empty() || batches.is_empty() {
        return Err(Error::Input("feedforward training needs training, validation and batch data".into()));
    }
    let p = train.x[0].len();
    let mut rng = Rng::new(derive_seed(hyper.seed, &[0x1417]));
    let mut model = FfnModel::init(p, hyper.hidden, hyper.activation, &mut rng);
    let adam = AdamConfig {
        learning_rate: hyper.learning_rate,
        grad_clip: hyper.grad_clip,
        ..Default::default()
    };
    let mut state = AdamState::new(model.num_params());
    let mut params = model.flatten();
    let mut best = params.clone();
    let mut log = TrainingLog {
        best_val_loss: f64::INFINITY,
        ..Default::default()
    };
    let mut stale = 0;
    for epoch in 1..=hyper.max_epochs {
        let mut order: Vec<usize> = (0..batches.len()).collect();
        Rng::new(derive_seed(hyper.seed, &[FFN_SHUFFLE_KEY, epoch as u64])).shuffle(&mut order);
        let mut losses = Vec::with_capacity(order.len());
        for &b in &order {
            let idx = &batches[b];
            let total: f64 = idx.iter().map(|&i| train.weights[i]).sum();
            if total <= 0.0 {
                continue;
            }
            let (l, mut g) = model.loss_and_grad(train.x, train.y, train.weights, idx);
            g.iter_mut().for_each(|v| *v /= total);
            adam_step(&mut params, &mut g, &mut state, &adam)?;
            model.assign(&params)?;
            losses.push(l / total);
        }
        let train_loss = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
        let val_loss = val.loss(&model);
        if !val_loss.is_finite() || !train_loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite feedforward loss at epoch {epoch}")));
        }
        log.epochs.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            lr: hyper.learning_rate,
            seed: hyper.seed,
        });
        debug!("ffn epoch {epoch}: train {train_loss:.6e} val {val_loss:.6e}");
        if val_loss < log.best_val_loss {
            log.best_val_loss = val_loss;
            log.best_epoch = epoch;
            best.clone_from(&params);
            stale = 0;
        } else {
            stale += 1;
            if stale > hyper.patience {
                break;
            }
        }
    }
    model.assign(&best)?;
    Ok((model, log))
}

/// Train the feedforward benchmark on a panel with the SNAP sample weights
/// and month mini-batches.
pub fn fit_ffn_panel(data: &PanelDataset, hyper: &FfnHyper) -> Result<(FfnModel, TrainingLog)> {
    let months = data.months_in(Split::Train);
    let val_rows = data.rows_in(Split::Validate);
    if months.is_empty() || val_rows.is_empty() {
        return Err(Error::Input("feedforward benchmark needs training and validation rows".into()));
    }
    let mut train_rows = Vec::new();
    let mut batches = Vec::new();
    for chunk in months.chunks(hyper.batch_months.max(1)) {
        let start = train_rows.len();
        for &m in chunk {
            train_rows.extend(data.month_rows(m));
        }
        batches.push((start..train_rows.len()).collect::<Vec<usize>>());
    }
    let (x, y) = panel_design(data, &train_rows);
    let w = sample_weights(train_rows.iter().map(|&r| data.rows[r].stock_id));
    let (vx, vy) = panel_design(data, &val_rows);
    let vw = sample_weights(val_rows.iter().map(|&r| data.rows[r].stock_id));
    fit_ffn(
        &FfnData {
            x: &x,
            y: &y,
            weights: &w,
        },
        &batches,
        &FfnData {
            x: &vx,
            y: &vy,
            weights: &vw,
        },
        hyper,
    )
}

/// Monthly factor returns, realized in the listed month.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorSeries {
    pub names: Vec<String>,
    pub values: BTreeMap<Month, Vec<f64>>,
}

impl FactorSeries {
    pub fn get(&self, m: Month) -> Result<&[f64]> {
        self.values
            .get(&m)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Alignment(format!("no factor returns for {m}")))
    }

    /// CSV with header `month,<factor_1..factor_F>`.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let file_name = path.display().to_string();
        let mut rdr = csv::Reader::from_path(path)?;
        let header = rdr.headers()?.clone();
        if header.get(0) != Some("month") || header.len() < 2 {
            return Err(Error::Parse {
                file: file_name,
                row: 1,
                column: "month".into(),
                message: "expected header month,<factor...>".into(),
            });
        }
        let names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let mut values = BTreeMap::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let row = i + 2;
            let parse_err = |column: &str, message: String| Error::Parse {
                file: file_name.clone(),
                row,
                column: column.to_string(),
                message,
            };
            let month: Month = rec[0].parse().map_err(|e: Error| parse_err("month", e.to_string()))?;
            let mut v = Vec::with_capacity(names.len());
            for (j, name) in names.iter().enumerate() {
                let cell = rec.get(j + 1).unwrap_or("");
                let x: f64 = cell.trim().parse().map_err(|_| parse_err(name, format!("not a number: {cell:?}")))?;
                if !x.is_finite() {
                    return Err(parse_err(name, "non-finite value".into()));
                }
                v.push(x);
            }
            if values.insert(month, v).is_some() {
                return Err(parse_err("month", format!("duplicate month {month}")));
            }
        }
        Ok(Self { names, values })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["month".to_string()];
        header.extend(self.names.iter().cloned());
        w.write_record(&header)?;
        for (m, v) in &self.values {
            let mut rec = vec![m.to_string()];
            rec.extend(v.iter().map(|x| x.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Time-series OLS of `returns` (realized in `months`) on the factors with an
/// intercept; coefficient 0 is the alpha.
pub fn factor_regression(months: &[Month], returns: &[f64], factors: &FactorSeries) -> Result<OlsFit> {
    if months.len() != returns.len() {
        return Err(Error::Shape(format!("{} months for {} returns", months.len(), returns.len())));
    }
    let x = months
        .iter()
        .map(|&m| {
            let f = factors.get(m)?;
            Ok(std::iter::once(1.0).chain(f.iter().copied()).collect())
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    ols_robust(returns, &x)
}

/// Stock-level factor-model predictions: each stock's betas are re-estimated
/// every month on its own history up to the formation month, and the
/// prediction is `β̂ᵀ f` with the factor returns of the target month.
#[derive(Debug, Clone)]
pub struct FactorModel {
    pub factors: FactorSeries,
    /// Fewest past observations needed before betas are estimated; rows with
    /// less history predict zero.
    pub min_history: usize,
}

impl FactorModel {
    fn target_month(data: &PanelDataset, row: usize) -> Month {
        data.months[data.rows[row].month].offset(1)
    }
}

impl ReturnPredictor for FactorModel {
    fn predict_rows(&self, data: &PanelDataset, rows: &[usize]) -> Result<Vec<f64>> {
        let min = self.min_history.max(self.factors.names.len() + 2);
        rows.par_iter()
            .map(|&r| {
                let f_next = self.factors.get(Self::target_month(data, r))?;
                let mut ys = Vec::new();
                let mut xs = Vec::new();
                let mut cur = data.prev_row(r);
                while let Some(p) = cur {
                    let f = self.factors.get(Self::target_month(data, p))?;
                    ys.push(data.rows[p].excess_return);
                    xs.push(std::iter::once(1.0).chain(f.iter().copied()).collect::<Vec<f64>>());
                    cur = data.prev_row(p);
                }
                if ys.len() < min {
                    return Ok(0.0);
                }
                let fit = ols_robust(&ys, &xs)?;
                Ok(fit.coefficients[1..].iter().zip(f_next).map(|(b, f)| b * f).sum())
            })
            .collect()
    }
}

/// Equal-weighted cross-sectional mean excess return, labeled by realization
/// month. Used as a one-factor market proxy for synthetic panels.
pub fn market_factor(data: &PanelDataset) -> FactorSeries {
    let mut values = BTreeMap::new();
    for (m, month) in data.months.iter().enumerate() {
        let rows = data.month_rows(m);
        if rows.is_empty() {
            continue;
        }
        let n = rows.len() as f64;
        let mean = rows.map(|r| data.rows[r].excess_return).sum::<f64>() / n;
        values.insert(month.offset(1), vec![mean]);
    }
    FactorSeries {
        names: vec!["mkt".into()],
        values,
    }
}
