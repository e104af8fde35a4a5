//! Regularized LSTM cell and stack with analytic backpropagation-through-time.
//!
//! Gate pre-activations come from one affine map of `[dropout(x); h_prev]`
//! with blocks ordered `[input | forget | output | g]`. The three gates use
//! ReLU by default (sigmoid is available as a config alternative), the
//! candidate `g` uses tanh, and dropout only touches the non-recurrent input.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GateActivation {
    #[default]
    Relu,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LstmConfig {
    pub gate: GateActivation,
    /// Optional upper cap on ReLU gate outputs. Off by default.
    pub gate_cap: Option<f64>,
}

impl Default for LstmConfig {
    fn default() -> Self {
        Self {
            gate: GateActivation::Relu,
            gate_cap: None,
        }
    }
}

impl LstmConfig {
    fn gate(&self, p: f64) -> f64 {
        match self.gate {
            GateActivation::Relu => {
                let v = p.max(0.0);
                match self.gate_cap {
                    Some(cap) => v.min(cap),
                    None => v,
                }
            }
            GateActivation::Sigmoid => 1.0 / (1.0 + (-p).exp()),
        }
    }

    /// Derivative given pre-activation `p` and activation `a`.
    /// The ReLU subgradient at exactly zero is 0.
    fn gate_grad(&self, p: f64, a: f64) -> f64 {
        match self.gate {
            GateActivation::Relu => {
                let capped = self.gate_cap.is_some_and(|cap| p >= cap);
                if p > 0.0 && !capped {
                    1.0
                } else {
                    0.0
                }
            }
            GateActivation::Sigmoid => a * (1.0 - a),
        }
    }
}

/// One LSTM layer. `w` has shape `(input_dim + hidden_dim) x 4*hidden_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmLayerParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w: Matrix,
    pub b: Vec<f64>,
}

impl LstmLayerParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dim,
            w: Matrix::zeros(input_dim + hidden_dim, 4 * hidden_dim),
            b: vec![0.0; 4 * hidden_dim],
        }
    }

    pub fn num_params(&self) -> usize {
        self.w.data().len() + self.b.len()
    }

    pub fn visit(&self, f: &mut impl FnMut(f64)) {
        self.w.data().iter().chain(&self.b).for_each(|&v| f(v));
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut f64)) {
        self.w.data_mut().iter_mut().for_each(&mut *f);
        self.b.iter_mut().for_each(f);
    }

    fn check(&self) -> Result<()> {
        let d = self.hidden_dim;
        if self.w.rows() != self.input_dim + d || self.w.cols() != 4 * d || self.b.len() != 4 * d {
            return Err(Error::Shape(format!(
                "layer params inconsistent with dims ({}, {d})",
                self.input_dim
            )));
        }
        Ok(())
    }
}

/// Glorot-uniform weights; zero biases except the forget block.
pub fn init_params(
    rng: &mut Rng,
    input_dim: usize,
    hidden_dim: usize,
    forget_bias: f64,
) -> LstmLayerParams {
    let fan_in = input_dim + hidden_dim;
    let fan_out = 4 * hidden_dim;
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut p = LstmLayerParams::zeros(input_dim, hidden_dim);
    for v in p.w.data_mut() {
        *v = rng.uniform_range(-limit, limit);
    }
    for v in &mut p.b[hidden_dim..2 * hidden_dim] {
        *v = forget_bias;
    }
    p
}

pub fn init_stack(
    rng: &mut Rng,
    input_dim: usize,
    hidden_dim: usize,
    layers: usize,
    forget_bias: f64,
) -> Vec<LstmLayerParams> {
    (0..layers)
        .map(|l| {
            let d_in = if l == 0 { input_dim } else { hidden_dim };
            init_params(rng, d_in, hidden_dim, forget_bias)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmState {
    pub fn zeros(d: usize) -> Self {
        Self {
            h: vec![0.0; d],
            c: vec![0.0; d],
        }
    }
}

/// Inverted dropout mask: entries are 0 or `1 / keep_prob`.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    pub keep_prob: f64,
    pub mask: Vec<f64>,
}

impl DropoutMask {
    pub fn identity(dim: usize) -> Self {
        Self {
            keep_prob: 1.0,
            mask: vec![1.0; dim],
        }
    }

    pub fn sample(rng: &mut Rng, dim: usize, keep_prob: f64) -> Result<Self> {
        if !(keep_prob > 0.0 && keep_prob <= 1.0) {
            return Err(Error::Parameter(format!(
                "keep probability must lie in (0, 1], got {keep_prob}"
            )));
        }
        if keep_prob == 1.0 {
            return Ok(Self::identity(dim));
        }
        let scale = 1.0 / keep_prob;
        let mask = (0..dim)
            .map(|_| if rng.bernoulli(keep_prob) { scale } else { 0.0 })
            .collect();
        Ok(Self { keep_prob, mask })
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mask).map(|(v, m)| v * m).collect()
    }
}

/// Per-step activations retained for the backward pass.
#[derive(Debug, Clone)]
pub struct StepCache {
    /// Layer input after dropout.
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub c_prev: Vec<f64>,
    pub pre: Vec<f64>,
    pub act: Vec<f64>,
    pub c: Vec<f64>,
    pub tanh_c: Vec<f64>,
}

fn step_cached(
    params: &LstmLayerParams,
    x: Vec<f64>,
    prev: &LstmState,
    cfg: &LstmConfig,
) -> Result<(LstmState, StepCache)> {
    let d = params.hidden_dim;
    let n4 = 4 * d;
    let w = params.w.data();
    let mut pre = params.b.clone();
    for (k, &xk) in x.iter().chain(&prev.h).enumerate() {
        if xk == 0.0 {
            continue;
        }
        let row = &w[k * n4..(k + 1) * n4];
        for (p, wv) in pre.iter_mut().zip(row) {
            *p += xk * wv;
        }
    }
    if pre.iter().any(|p| !p.is_finite()) {
        return Err(Error::Numeric("non-finite LSTM pre-activation".into()));
    }
    let mut act = vec![0.0; n4];
    for j in 0..3 * d {
        act[j] = cfg.gate(pre[j]);
    }
    for j in 3 * d..n4 {
        act[j] = pre[j].tanh();
    }
    let mut c = vec![0.0; d];
    let mut tanh_c = vec![0.0; d];
    let mut h = vec![0.0; d];
    for j in 0..d {
        let (i, f, o, g) = (act[j], act[d + j], act[2 * d + j], act[3 * d + j]);
        c[j] = f * prev.c[j] + i * g;
        tanh_c[j] = c[j].tanh();
        h[j] = o * tanh_c[j];
    }
    if c.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite LSTM cell state".into()));
    }
    let state = LstmState { h: h.clone(), c: c.clone() };
    let cache = StepCache {
        x,
        h_prev: prev.h.clone(),
        c_prev: prev.c.clone(),
        pre,
        act,
        c,
        tanh_c,
    };
    Ok((state, cache))
}

/// One transition of the cell. `x` is the (already dropped-out) layer input.
pub fn lstm_step(
    params: &LstmLayerParams,
    x: &[f64],
    prev: &LstmState,
    cfg: &LstmConfig,
) -> Result<LstmState> {
    params.check()?;
    if x.len() != params.input_dim || prev.h.len() != params.hidden_dim || prev.c.len() != params.hidden_dim {
        return Err(Error::Shape("lstm_step input does not match layer dims".into()));
    }
    step_cached(params, x.to_vec(), prev, cfg).map(|(s, _)| s)
}

#[derive(Debug, Clone)]
pub struct LstmCache {
    /// `steps[layer][t]`
    pub steps: Vec<Vec<StepCache>>,
    pub masks: Vec<DropoutMask>,
}

#[derive(Debug, Clone)]
pub struct LstmForward {
    /// Top-layer hidden state at the last timestep.
    pub output: Vec<f64>,
    pub cache: LstmCache,
}

/// Run the stack over `sequence` from zero initial states. `masks` holds one
/// dropout mask per layer (reused at every timestep); `None` is evaluation mode.
pub fn lstm_forward(
    stack: &[LstmLayerParams],
    sequence: &[&[f64]],
    masks: Option<&[DropoutMask]>,
    cfg: &LstmConfig,
) -> Result<LstmForward> {
    if sequence.is_empty() {
        return Err(Error::Input("empty input sequence".into()));
    }
    if stack.is_empty() {
        return Err(Error::Input("empty LSTM stack".into()));
    }
    for (l, p) in stack.iter().enumerate() {
        p.check()?;
        if l > 0 && p.input_dim != stack[l - 1].hidden_dim {
            return Err(Error::Shape(format!("layer {l} input dim mismatch")));
        }
    }
    if sequence.iter().any(|x| x.len() != stack[0].input_dim) {
        return Err(Error::Shape("sequence feature dim mismatch".into()));
    }
    let masks: Vec<DropoutMask> = match masks {
        Some(m) => {
            if m.len() != stack.len()
                || m.iter().zip(stack).any(|(mk, p)| mk.mask.len() != p.input_dim)
            {
                return Err(Error::Shape("dropout masks do not match the stack".into()));
            }
            m.to_vec()
        }
        None => stack.iter().map(|p| DropoutMask::identity(p.input_dim)).collect(),
    };

    let mut steps = Vec::with_capacity(stack.len());
    let mut inputs: Vec<Vec<f64>> = sequence.iter().map(|x| x.to_vec()).collect();
    for (params, mask) in stack.iter().zip(&masks) {
        let mut state = LstmState::zeros(params.hidden_dim);
        let mut layer_steps = Vec::with_capacity(inputs.len());
        let mut outputs = Vec::with_capacity(inputs.len());
        for x in &inputs {
            let dropped = if mask.keep_prob == 1.0 { x.clone() } else { mask.apply(x) };
            let (next, cache) = step_cached(params, dropped, &state, cfg)?;
            outputs.push(next.h.clone());
            layer_steps.push(cache);
            state = next;
        }
        steps.push(layer_steps);
        inputs = outputs;
    }
    let output = inputs.pop().expect("non-empty sequence");
    Ok(LstmForward {
        output,
        cache: LstmCache { steps, masks },
    })
}

#[derive(Debug, Clone)]
pub struct LstmGrads {
    /// Parameter gradients laid out like the stack.
    pub layers: Vec<LstmLayerParams>,
    /// Gradient with respect to each raw (pre-dropout) input vector.
    pub inputs: Vec<Vec<f64>>,
}

pub fn lstm_backward(
    stack: &[LstmLayerParams],
    cache: &LstmCache,
    upstream: &[f64],
    cfg: &LstmConfig,
) -> Result<LstmGrads> {
    if cache.steps.len() != stack.len() || cache.masks.len() != stack.len() {
        return Err(Error::Shape("cache does not match the stack".into()));
    }
    let top = stack.last().expect("non-empty stack");
    if upstream.len() != top.hidden_dim {
        return Err(Error::Shape("upstream gradient dim mismatch".into()));
    }
    let t_len = cache.steps[0].len();
    let mut layers: Vec<LstmLayerParams> = stack
        .iter()
        .map(|p| LstmLayerParams::zeros(p.input_dim, p.hidden_dim))
        .collect();

    // Gradient arriving at h^l_t from the layer above (or the loss).
    let mut from_above = vec![vec![0.0; top.hidden_dim]; t_len];
    from_above[t_len - 1].copy_from_slice(upstream);

    for l in (0..stack.len()).rev() {
        let params = &stack[l];
        let steps = &cache.steps[l];
        if steps.len() != t_len {
            return Err(Error::Shape("ragged cache".into()));
        }
        let d = params.hidden_dim;
        let n4 = 4 * d;
        let w = params.w.data();
        let grad = &mut layers[l];
        let mut dh_next = vec![0.0; d];
        let mut dc_next = vec![0.0; d];
        let mut d_inputs = vec![vec![0.0; params.input_dim]; t_len];
        let mut dpre = vec![0.0; n4];

        for t in (0..t_len).rev() {
            let s = &steps[t];
            for j in 0..d {
                let dh = from_above[t][j] + dh_next[j];
                let (i, f, o, g) = (s.act[j], s.act[d + j], s.act[2 * d + j], s.act[3 * d + j]);
                let d_o = dh * s.tanh_c[j];
                let dc = dh * o * (1.0 - s.tanh_c[j] * s.tanh_c[j]) + dc_next[j];
                let d_f = dc * s.c_prev[j];
                let d_i = dc * g;
                let d_g = dc * i;
                dc_next[j] = dc * f;
                dpre[j] = d_i * cfg.gate_grad(s.pre[j], i);
                dpre[d + j] = d_f * cfg.gate_grad(s.pre[d + j], f);
                dpre[2 * d + j] = d_o * cfg.gate_grad(s.pre[2 * d + j], o);
                dpre[3 * d + j] = d_g * (1.0 - g * g);
            }
            for (bj, dp) in grad.b.iter_mut().zip(&dpre) {
                *bj += dp;
            }
            let gw = grad.w.data_mut();
            let dx = &mut d_inputs[t];
            for (k, &zk) in s.x.iter().chain(&s.h_prev).enumerate() {
                let w_row = &w[k * n4..(k + 1) * n4];
                if zk != 0.0 {
                    let g_row = &mut gw[k * n4..(k + 1) * n4];
                    for (gv, dp) in g_row.iter_mut().zip(&dpre) {
                        *gv += zk * dp;
                    }
                }
                let dz: f64 = w_row.iter().zip(&dpre).map(|(a, b)| a * b).sum();
                if k < params.input_dim {
                    dx[k] = dz;
                } else {
                    dh_next[k - params.input_dim] = dz;
                }
            }
            // Chain through the dropout mask to the raw input.
            let mask = &cache.masks[l].mask;
            for (v, m) in dx.iter_mut().zip(mask) {
                *v *= m;
            }
        }
        from_above = d_inputs;
    }
    Ok(LstmGrads {
        layers,
        inputs: from_above,
    })
}
