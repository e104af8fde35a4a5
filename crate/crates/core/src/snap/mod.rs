//! Three-branch conditional pricing network.
//!
//! Predicted excess return for stock `i` at `t + 1` is
//! `alpha(z_i) + beta(z_i) * lambda(zbar, m)`, where each branch is an LSTM
//! stack over a rolling window of inputs followed by an affine head. The masked
//! variant drops the alpha term.

pub mod adam;
mod panel;
mod train;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::PanelDataset;
use crate::error::{Error, Result};
use crate::lstm::{
    init_stack, lstm_backward, lstm_forward, DropoutMask, LstmConfig, LstmForward, LstmLayerParams,
};
use crate::numerics::{derive_seed, Rng};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use panel::{estimate_alpha, prediction_panel, PredictionPanel, PredictionRow, ReturnPredictor};
pub use train::{train, EpochLog, TrainingLog};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SnapHyper {
    /// Hidden width of the alpha and beta branches; derived from the input
    /// dimension when absent.
    pub hidden_dim: Option<usize>,
    /// Hidden width of the lambda branch; derived when absent.
    pub lambda_hidden_dim: Option<usize>,
    pub layers: usize,
    /// Months of history fed to each LSTM.
    pub window: usize,
    pub dropout_keep: f64,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_months: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub grad_clip: f64,
    pub forget_bias: f64,
    pub lstm: LstmConfig,
    pub seed: u64,
}

impl Default for SnapHyper {
    fn default() -> Self {
        Self {
            hidden_dim: None,
            lambda_hidden_dim: None,
            layers: 1,
            window: 12,
            dropout_keep: 0.9,
            learning_rate: 3e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_months: 1,
            max_epochs: 30,
            patience: 5,
            grad_clip: 5.0,
            forget_bias: 1.0,
            lstm: LstmConfig::default(),
            seed: 0,
        }
    }
}

/// Rule of thumb: two thirds of the input dimension, at least 4.
pub fn default_hidden_dim(input_dim: usize) -> usize {
    (2 * input_dim / 3).max(4)
}

impl SnapHyper {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Parameter(m.into()));
        if self.window == 0 {
            return bad("window must be at least 1");
        }
        if self.layers == 0 {
            return bad("layers must be at least 1");
        }
        if !(self.dropout_keep > 0.0 && self.dropout_keep <= 1.0) {
            return bad("dropout_keep must lie in (0, 1]");
        }
        if !(self.adam_beta1 > 0.0 && self.adam_beta1 < 1.0 && self.adam_beta2 > 0.0 && self.adam_beta2 < 1.0) {
            return bad("adam betas must lie in (0, 1)");
        }
        if !(self.learning_rate > 0.0) || self.batch_months == 0 || self.max_epochs == 0 {
            return bad("learning_rate, batch_months and max_epochs must be positive");
        }
        if self.hidden_dim == Some(0) || self.lambda_hidden_dim == Some(0) {
            return bad("hidden dims must be positive");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            grad_clip: self.grad_clip,
        }
    }
}

/// LSTM stack plus an affine head to a scalar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub stack: Vec<LstmLayerParams>,
    pub head_w: Vec<f64>,
    pub head_b: f64,
}

impl Branch {
    pub fn init(rng: &mut Rng, input_dim: usize, hidden_dim: usize, hyper: &SnapHyper) -> Self {
        let stack = init_stack(rng, input_dim, hidden_dim, hyper.layers, hyper.forget_bias);
        let limit = (6.0 / (hidden_dim + 1) as f64).sqrt();
        let head_w = (0..hidden_dim).map(|_| rng.uniform_range(-limit, limit)).collect();
        Self {
            stack,
            head_w,
            head_b: 0.0,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            stack: self
                .stack
                .iter()
                .map(|p| LstmLayerParams::zeros(p.input_dim, p.hidden_dim))
                .collect(),
            head_w: vec![0.0; self.head_w.len()],
            head_b: 0.0,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.stack[0].input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.head_w.len()
    }

    pub fn visit(&self, f: &mut impl FnMut(f64)) {
        for p in &self.stack {
            p.visit(f);
        }
        self.head_w.iter().for_each(|&v| f(v));
        f(self.head_b);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut f64)) {
        for p in &mut self.stack {
            p.visit_mut(f);
        }
        self.head_w.iter_mut().for_each(&mut *f);
        f(&mut self.head_b);
    }

    fn add_assign(&mut self, other: &Branch) {
        let mut src = Vec::new();
        other.visit(&mut |v| src.push(v));
        let mut it = src.into_iter();
        self.visit_mut(&mut |v| *v += it.next().unwrap());
    }

    fn sample_masks(&self, rng: &mut Rng, keep: f64) -> Result<Vec<DropoutMask>> {
        self.stack
            .iter()
            .map(|p| DropoutMask::sample(rng, p.input_dim, keep))
            .collect()
    }

    pub fn forward(
        &self,
        seq: &[&[f64]],
        masks: Option<&[DropoutMask]>,
        cfg: &LstmConfig,
    ) -> Result<(f64, LstmForward)> {
        let fwd = lstm_forward(&self.stack, seq, masks, cfg)?;
        let out = self.head_b + fwd.output.iter().zip(&self.head_w).map(|(h, w)| h * w).sum::<f64>();
        Ok((out, fwd))
    }

    /// Accumulate into `grad` the gradient of `d_out * output`.
    pub fn backward(&self, fwd: &LstmForward, d_out: f64, grad: &mut Branch, cfg: &LstmConfig) -> Result<()> {
        if d_out == 0.0 {
            return Ok(());
        }
        for (g, h) in grad.head_w.iter_mut().zip(&fwd.output) {
            *g += d_out * h;
        }
        grad.head_b += d_out;
        let upstream: Vec<f64> = self.head_w.iter().map(|w| w * d_out).collect();
        let g = lstm_backward(&self.stack, &fwd.cache, &upstream, cfg)?;
        for (acc, layer) in grad.stack.iter_mut().zip(&g.layers) {
            let mut vals = Vec::with_capacity(layer.num_params());
            layer.visit(&mut |v| vals.push(v));
            let mut it = vals.into_iter();
            acc.visit_mut(&mut |v| *v += it.next().unwrap());
        }
        Ok(())
    }
}

/// Outputs of the three branches and the combined prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchOutputs {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub prediction: f64,
}

const ALPHA_KEY: u64 = 1;
const BETA_KEY: u64 = 2;
const LAMBDA_KEY: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapModel {
    pub alpha: Branch,
    pub beta: Branch,
    pub lambda: Branch,
    pub hyper: SnapHyper,
    pub masked: bool,
}

impl SnapModel {
    pub fn new(char_dim: usize, common_dim: usize, hyper: SnapHyper, masked: bool) -> Result<Self> {
        hyper.validate()?;
        if char_dim == 0 || common_dim == 0 {
            return Err(Error::Input("branch inputs must be non-empty".into()));
        }
        let hidden = hyper.hidden_dim.unwrap_or_else(|| default_hidden_dim(char_dim));
        let lambda_hidden = hyper
            .lambda_hidden_dim
            .unwrap_or_else(|| default_hidden_dim(common_dim));
        let mut rng = Rng::new(derive_seed(hyper.seed, &[0x1417]));
        let mut alpha = Branch::init(&mut rng, char_dim, hidden, &hyper);
        let mut beta = Branch::init(&mut rng, char_dim, hidden, &hyper);
        let mut lambda = Branch::init(&mut rng, common_dim, lambda_hidden, &hyper);
        // Start from alpha = lambda = 0 and beta near 1: predictions begin at
        // zero, yet the product beta * lambda is not stuck at its saddle.
        alpha.head_w.fill(0.0);
        lambda.head_w.fill(0.0);
        beta.head_w.iter_mut().for_each(|w| *w *= 0.1);
        beta.head_b = 1.0;
        Ok(Self {
            alpha,
            beta,
            lambda,
            hyper,
            masked,
        })
    }

    pub fn for_dataset(data: &PanelDataset, hyper: SnapHyper, masked: bool) -> Result<Self> {
        Self::new(data.n_chars(), data.common_dim(), hyper, masked)
    }

    pub fn char_dim(&self) -> usize {
        self.alpha.input_dim()
    }

    pub fn common_dim(&self) -> usize {
        self.lambda.input_dim()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            alpha: self.alpha.zeros_like(),
            beta: self.beta.zeros_like(),
            lambda: self.lambda.zeros_like(),
            hyper: self.hyper.clone(),
            masked: self.masked,
        }
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_| n += 1);
        n
    }

    pub fn visit(&self, f: &mut impl FnMut(f64)) {
        self.alpha.visit(f);
        self.beta.visit(f);
        self.lambda.visit(f);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut f64)) {
        self.alpha.visit_mut(f);
        self.beta.visit_mut(f);
        self.lambda.visit_mut(f);
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |v| out.push(v));
        out
    }

    pub fn assign(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape("flat parameter length mismatch".into()));
        }
        let mut it = flat.iter();
        self.visit_mut(&mut |v| *v = *it.next().unwrap());
        Ok(())
    }

    /// Same weights with the alpha branch switched off (or on).
    pub fn with_masked(&self, masked: bool) -> Self {
        Self {
            masked,
            ..self.clone()
        }
    }

    fn combine(&self, alpha: f64, beta: f64, lambda: f64) -> f64 {
        if self.masked {
            beta * lambda
        } else {
            alpha + beta * lambda
        }
    }

    /// Evaluation-mode prediction from explicit input windows.
    pub fn predict(&self, stock_window: &[&[f64]], common_window: &[&[f64]]) -> Result<BranchOutputs> {
        if stock_window.is_empty() || common_window.is_empty() {
            return Err(Error::Input("prediction windows must cover at least one month".into()));
        }
        let cfg = &self.hyper.lstm;
        let (lambda, _) = self.lambda.forward(common_window, None, cfg)?;
        let (beta, _) = self.beta.forward(stock_window, None, cfg)?;
        let alpha = if self.masked {
            0.0
        } else {
            self.alpha.forward(stock_window, None, cfg)?.0
        };
        Ok(BranchOutputs {
            alpha,
            beta,
            lambda,
            prediction: self.combine(alpha, beta, lambda),
        })
    }

    fn common_seq<'a>(&self, data: &'a PanelDataset, month: usize) -> Vec<&'a [f64]> {
        data.common_window(month, self.hyper.window)
            .map(|m| data.common(m))
            .collect()
    }

    fn stock_seq<'a>(&self, data: &'a PanelDataset, row: usize) -> Vec<&'a [f64]> {
        data.stock_window(row, self.hyper.window)
            .into_iter()
            .map(|r| data.chars(r))
            .collect()
    }

    fn check_dims(&self, data: &PanelDataset) -> Result<()> {
        if data.n_chars() != self.char_dim() || data.common_dim() != self.common_dim() {
            return Err(Error::Shape(format!(
                "model expects ({}, {}) inputs, dataset has ({}, {})",
                self.char_dim(),
                self.common_dim(),
                data.n_chars(),
                data.common_dim()
            )));
        }
        Ok(())
    }

    /// Evaluation-mode branch outputs for the given dataset rows.
    pub fn branch_outputs(&self, data: &PanelDataset, rows: &[usize]) -> Result<Vec<BranchOutputs>> {
        self.check_dims(data)?;
        let cfg = &self.hyper.lstm;
        let mut months: Vec<usize> = rows.iter().map(|&r| data.rows[r].month).collect();
        months.sort_unstable();
        months.dedup();
        let lambdas: Vec<(usize, f64)> = months
            .par_iter()
            .map(|&m| Ok((m, self.lambda.forward(&self.common_seq(data, m), None, cfg)?.0)))
            .collect::<Result<_>>()?;
        let lambda_of = |m: usize| {
            let i = lambdas.binary_search_by_key(&m, |x| x.0).expect("month computed");
            lambdas[i].1
        };
        rows.par_iter()
            .map(|&r| {
                let seq = self.stock_seq(data, r);
                let lambda = lambda_of(data.rows[r].month);
                let beta = self.beta.forward(&seq, None, cfg)?.0;
                let alpha = if self.masked {
                    0.0
                } else {
                    self.alpha.forward(&seq, None, cfg)?.0
                };
                Ok(BranchOutputs {
                    alpha,
                    beta,
                    lambda,
                    prediction: self.combine(alpha, beta, lambda),
                })
            })
            .collect()
    }

    /// Weighted pricing loss over `rows` and its gradient with respect to every
    /// parameter. With `dropout = Some((seed, epoch))` fresh inverted-dropout
    /// masks are drawn per sample and branch; `None` is evaluation mode.
    pub fn loss_and_grad(
        &self,
        data: &PanelDataset,
        rows: &[usize],
        dropout: Option<(u64, u64)>,
    ) -> Result<(f64, SnapModel)> {
        self.check_dims(data)?;
        if rows.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let cfg = &self.hyper.lstm;
        let weights = sample_weights(rows.iter().map(|&r| data.rows[r].stock_id));
        let mut grad = self.zeros_like();
        let mut loss = 0.0;

        let mut order: Vec<usize> = (0..rows.len()).collect();
        order.sort_by_key(|&i| (data.rows[rows[i]].month, rows[i]));
        let mut start = 0;
        while start < order.len() {
            let month = data.rows[rows[order[start]]].month;
            let mut end = start;
            while end < order.len() && data.rows[rows[order[end]]].month == month {
                end += 1;
            }
            let members = &order[start..end];
            start = end;

            let keep = self.hyper.dropout_keep;
            let masks_for = |keys: &[u64], branch: &Branch| -> Result<Option<Vec<DropoutMask>>> {
                match dropout {
                    Some((seed, epoch)) => {
                        let mut k = vec![epoch];
                        k.extend_from_slice(keys);
                        let mut rng = Rng::new(derive_seed(seed, &k));
                        branch.sample_masks(&mut rng, keep).map(Some)
                    }
                    None => Ok(None),
                }
            };

            let lambda_masks = masks_for(&[month as u64, LAMBDA_KEY], &self.lambda)?;
            let common = self.common_seq(data, month);
            let (lambda, lambda_fwd) = self.lambda.forward(&common, lambda_masks.as_deref(), cfg)?;

            // Fixed-size chunks reduced in order keep the sum independent of
            // the thread count.
            const CHUNK: usize = 16;
            let partials: Vec<(f64, f64, Branch, Branch)> = members
                .par_chunks(CHUNK)
                .map(|chunk| {
                    let mut g_alpha = self.alpha.zeros_like();
                    let mut g_beta = self.beta.zeros_like();
                    let mut d_lambda = 0.0;
                    let mut chunk_loss = 0.0;
                    for &i in chunk {
                        let r = rows[i];
                        let row = &data.rows[r];
                        let seq = self.stock_seq(data, r);
                        let key = row.stock_id;
                        let beta_masks = masks_for(&[month as u64, key, BETA_KEY], &self.beta)?;
                        let (beta, beta_fwd) = self.beta.forward(&seq, beta_masks.as_deref(), cfg)?;
                        let alpha_part = if self.masked {
                            None
                        } else {
                            let m = masks_for(&[month as u64, key, ALPHA_KEY], &self.alpha)?;
                            Some(self.alpha.forward(&seq, m.as_deref(), cfg)?)
                        };
                        let alpha = alpha_part.as_ref().map_or(0.0, |a| a.0);
                        let pred = self.combine(alpha, beta, lambda);
                        let err = pred - row.excess_return;
                        chunk_loss += weights[i] * err * err;
                        let g = 2.0 * weights[i] * err;
                        if let Some((_, fwd)) = &alpha_part {
                            self.alpha.backward(fwd, g, &mut g_alpha, cfg)?;
                        }
                        self.beta.backward(&beta_fwd, g * lambda, &mut g_beta, cfg)?;
                        d_lambda += g * beta;
                    }
                    Ok((chunk_loss, d_lambda, g_alpha, g_beta))
                })
                .collect::<Result<_>>()?;
            let mut d_lambda = 0.0;
            for (l, dl, ga, gb) in &partials {
                loss += l;
                d_lambda += dl;
                grad.alpha.add_assign(ga);
                grad.beta.add_assign(gb);
            }
            self.lambda.backward(&lambda_fwd, d_lambda, &mut grad.lambda, cfg)?;
        }
        if !loss.is_finite() {
            return Err(Error::Numeric("non-finite loss".into()));
        }
        Ok((loss, grad))
    }
}

/// Per-sample weights `1 / (N * T_i)`: stocks count equally, and months
/// count equally within a stock.
pub fn sample_weights(stock_ids: impl Iterator<Item = u64>) -> Vec<f64> {
    let ids: Vec<u64> = stock_ids.collect();
    let mut counts = std::collections::HashMap::new();
    for id in &ids {
        *counts.entry(*id).or_insert(0usize) += 1;
    }
    let n = counts.len() as f64;
    ids.iter().map(|id| 1.0 / (n * counts[id] as f64)).collect()
}

/// `(1/N) sum_i (1/T_i) sum_t (target - prediction)^2`.
pub fn pricing_loss(stock_ids: &[u64], targets: &[f64], predictions: &[f64]) -> Result<f64> {
    if stock_ids.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    if stock_ids.len() != targets.len() || targets.len() != predictions.len() {
        return Err(Error::Shape("loss inputs differ in length".into()));
    }
    let w = sample_weights(stock_ids.iter().copied());
    Ok(w.iter()
        .zip(targets.iter().zip(predictions))
        .map(|(w, (y, p))| w * (y - p) * (y - p))
        .sum())
}

/// Evaluation-mode loss of `model` over `rows`.
pub fn loss(model: &SnapModel, data: &PanelDataset, rows: &[usize]) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let preds: Vec<f64> = model
        .branch_outputs(data, rows)?
        .iter()
        .map(|o| o.prediction)
        .collect();
    let ids: Vec<u64> = rows.iter().map(|&r| data.rows[r].stock_id).collect();
    let targets: Vec<f64> = rows.iter().map(|&r| data.rows[r].excess_return).collect();
    pricing_loss(&ids, &targets, &preds)
}

/// Versioned on-disk model format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub char_names: Vec<String>,
    pub common_names: Vec<String>,
    /// Per-branch architecture summary; alpha and beta always agree.
    pub branch_hyper: Vec<BranchHyper>,
    pub model: SnapModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchHyper {
    pub branch: String,
    pub layers: usize,
    pub hidden_dim: usize,
    pub window: usize,
    pub dropout_keep: f64,
}

pub const CHECKPOINT_FORMAT: &str = "snap-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn new(model: &SnapModel, data: &PanelDataset) -> Self {
        let summary = |name: &str, b: &Branch| BranchHyper {
            branch: name.into(),
            layers: b.stack.len(),
            hidden_dim: b.hidden_dim(),
            window: model.hyper.window,
            dropout_keep: model.hyper.dropout_keep,
        };
        let mut common_names: Vec<String> = data.char_names.iter().map(|n| format!("mean_{n}")).collect();
        common_names.extend(data.macro_names.iter().cloned());
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            seed: model.hyper.seed,
            char_names: data.char_names.clone(),
            common_names,
            branch_hyper: vec![
                summary("alpha", &model.alpha),
                summary("beta", &model.beta),
                summary("lambda", &model.lambda),
            ],
            model: model.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(s)?;
        if c.format != CHECKPOINT_FORMAT || c.version != CHECKPOINT_VERSION {
            return Err(Error::Input(format!(
                "unsupported checkpoint {} v{}",
                c.format, c.version
            )));
        }
        Ok(c)
    }
}
