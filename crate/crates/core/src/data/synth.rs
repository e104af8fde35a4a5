//! Synthetic panels with a known pricing structure.
//!
//! Latent characteristics follow stock-level AR(1) processes and macro states
//! follow AR(1) processes with unit stationary variance. The true functions act
//! on the month's rank-normalized characteristics and the raw macro states, so
//! the preprocessed dataset exposes exactly the truth's inputs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{preprocess, rank_normalize, Month, PanelDataset, PreprocessConfig, RawPanel, RawRow, Split, SplitConfig, TransformCode};
use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::snap::ReturnPredictor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruthForm {
    Linear,
    AdditiveNonlinear,
    Neural,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_stocks: usize,
    pub n_months: usize,
    pub n_chars: usize,
    pub n_macro: usize,
    pub form: TruthForm,
    /// Zero gives a panel without mispricing.
    pub alpha_scale: f64,
    pub beta_scale: f64,
    pub lambda_scale: f64,
    /// Explicit noise SD. Overrides `target_oracle_r2` when set.
    pub noise_sd: Option<f64>,
    /// Uncentered R² of the true expected returns; sets the noise SD.
    pub target_oracle_r2: f64,
    pub char_persistence: f64,
    pub macro_persistence: f64,
    /// Share of stock-months deleted at random.
    pub missing_fraction: f64,
    pub validate_fraction: f64,
    pub test_fraction: f64,
    pub start: Month,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_stocks: 200,
            n_months: 240,
            n_chars: 10,
            n_macro: 5,
            form: TruthForm::Linear,
            alpha_scale: 0.02,
            beta_scale: 1.0,
            lambda_scale: 0.05,
            noise_sd: None,
            target_oracle_r2: 0.1,
            char_persistence: 0.9,
            macro_persistence: 0.9,
            missing_fraction: 0.0,
            validate_fraction: 0.2,
            test_fraction: 0.2,
            start: Month { year: 2000, month: 1 },
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Parameter(m.into()));
        if self.n_stocks == 0 || self.n_chars == 0 || self.n_macro == 0 {
            return bad("stocks, characteristics and macro states must be positive");
        }
        if self.n_months < 5 {
            return bad("at least 5 months are needed for three splits");
        }
        if !(0.0..1.0).contains(&self.char_persistence) || !(0.0..1.0).contains(&self.macro_persistence) {
            return bad("persistence must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.missing_fraction) {
            return bad("missing_fraction must lie in [0, 1)");
        }
        if !(self.target_oracle_r2 > 0.0 && self.target_oracle_r2 <= 1.0) {
            return bad("target_oracle_r2 must lie in (0, 1]");
        }
        if self.noise_sd.is_some_and(|s| !(s >= 0.0)) {
            return bad("noise_sd must be non-negative");
        }
        let (v, t) = (self.validate_fraction, self.test_fraction);
        if !(v > 0.0 && t > 0.0 && v + t < 1.0) {
            return bad("validate and test fractions must be positive and sum below 1");
        }
        Ok(())
    }

    pub fn split_config(&self) -> SplitConfig {
        let t = self.n_months as f64;
        let train = ((1.0 - self.validate_fraction - self.test_fraction) * t).round().max(1.0) as i64;
        let test = (self.test_fraction * t).round().max(1.0) as i64;
        let test_start = (self.n_months as i64 - test).max(train + 1);
        SplitConfig {
            validate_start: self.start.offset(train),
            test_start: self.start.offset(test_start),
        }
    }

    pub fn truth_model(&self) -> TruthModel {
        let k = self.n_chars;
        let active = if k >= 4 { [1, 3] } else { [0, k - 1] };
        TruthModel {
            form: self.form,
            alpha_scale: self.alpha_scale,
            beta_scale: self.beta_scale,
            lambda_scale: self.lambda_scale,
            active,
            driver: 0,
            n_chars: k,
            n_macro: self.n_macro,
            masked: false,
        }
    }
}

/// The generating functions, evaluable on any preprocessed dataset built
/// from the synthetic panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthModel {
    pub form: TruthForm,
    pub alpha_scale: f64,
    pub beta_scale: f64,
    pub lambda_scale: f64,
    /// Characteristics that enter alpha and beta.
    pub active: [usize; 2],
    /// Macro state that drives lambda.
    pub driver: usize,
    pub n_chars: usize,
    pub n_macro: usize,
    /// Drop the alpha term.
    pub masked: bool,
}

impl TruthModel {
    pub fn alpha(&self, z: &[f64]) -> f64 {
        let (a, b) = (z[self.active[0]], z[self.active[1]]);
        self.alpha_scale
            * match self.form {
                TruthForm::Linear => 0.5 * (1.0 + a),
                TruthForm::AdditiveNonlinear => 1.5 * a * a + 0.25 * (1.0 + b),
                TruthForm::Neural => 0.5 + 0.5 * (2.0 * a - b).tanh(),
            }
    }

    pub fn beta(&self, z: &[f64]) -> f64 {
        let (a, b) = (z[self.active[0]], z[self.active[1]]);
        self.beta_scale
            * match self.form {
                TruthForm::Linear => b + 0.5 * a,
                TruthForm::AdditiveNonlinear => (std::f64::consts::PI * b).sin() + a * a.abs(),
                TruthForm::Neural => (1.5 * a + 2.0 * b).tanh(),
            }
    }

    /// `m` holds the raw (unstandardized) macro states.
    pub fn lambda(&self, m: &[f64]) -> f64 {
        let x = m[self.driver];
        self.lambda_scale
            * match self.form {
                TruthForm::Linear => x,
                TruthForm::AdditiveNonlinear => (1.5 * x).tanh(),
                TruthForm::Neural => x.tanh() + 0.25 * x,
            }
    }

    pub fn expected(&self, z: &[f64], m: &[f64]) -> f64 {
        let bl = self.beta(z) * self.lambda(m);
        if self.masked {
            bl
        } else {
            self.alpha(z) + bl
        }
    }

    /// Raw macro states of `month`, undoing the dataset's standardization.
    fn raw_macro(&self, data: &PanelDataset, month: usize) -> Vec<f64> {
        let k = data.n_chars();
        let c = data.common(month);
        (0..self.n_macro)
            .map(|j| {
                let (mean, sd) = data.macro_stats[j];
                c[k + j] * sd + mean
            })
            .collect()
    }
}

impl ReturnPredictor for TruthModel {
    fn predict_rows(&self, data: &PanelDataset, rows: &[usize]) -> Result<Vec<f64>> {
        if data.n_chars() != self.n_chars || data.n_macro() < self.n_macro {
            return Err(Error::Shape("dataset does not match the synthetic design".into()));
        }
        let mut cache: Option<(usize, Vec<f64>)> = None;
        rows.iter()
            .map(|&r| {
                let month = data.rows[r].month;
                if cache.as_ref().map(|c| c.0) != Some(month) {
                    cache = Some((month, self.raw_macro(data, month)));
                }
                let m = &cache.as_ref().unwrap().1;
                Ok(self.expected(data.chars(r), m))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub stock_id: u64,
    pub month: Month,
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub expected: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPanel {
    pub spec: SyntheticSpec,
    pub raw: RawPanel,
    /// Aligned with `raw.rows`.
    pub truth: Vec<TruthRow>,
    pub noise_sd: f64,
}

impl SyntheticPanel {
    pub fn split_config(&self) -> SplitConfig {
        self.spec.split_config()
    }

    pub fn preprocess_config(&self) -> PreprocessConfig {
        PreprocessConfig::new(self.split_config())
    }

    pub fn dataset(&self) -> Result<PanelDataset> {
        Ok(preprocess(&self.raw, &self.preprocess_config())?.0)
    }

    pub fn truth_model(&self) -> TruthModel {
        self.spec.truth_model()
    }

    /// Realized uncentered R² of the true expected returns on a split.
    pub fn oracle_r2(&self, split: Split) -> f64 {
        let cfg = self.split_config();
        let (mut sse, mut sst) = (0.0, 0.0);
        for (row, t) in self.raw.rows.iter().zip(&self.truth) {
            if cfg.split_of(row.month) == split {
                sse += (row.excess_return - t.expected).powi(2);
                sst += row.excess_return.powi(2);
            }
        }
        1.0 - sse / sst
    }

    pub fn write_truth_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        for t in &self.truth {
            w.serialize(t)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

const CHAR_KEY: u64 = 1;
const MACRO_KEY: u64 = 2;
const NOISE_KEY: u64 = 3;
const PRESENCE_KEY: u64 = 4;
const CAP_KEY: u64 = 5;

fn ar1_path(rng: &mut Rng, n: usize, rho: f64) -> Vec<f64> {
    let innov = (1.0 - rho * rho).sqrt();
    let mut x = rng.standard_normal();
    (0..n)
        .map(|t| {
            if t > 0 {
                x = rho * x + innov * rng.standard_normal();
            }
            x
        })
        .collect()
}

pub fn synthesize(spec: &SyntheticSpec) -> Result<SyntheticPanel> {
    spec.validate()?;
    let (n, t_len, k, j) = (spec.n_stocks, spec.n_months, spec.n_chars, spec.n_macro);
    let root = Rng::new(spec.seed);

    let mut macro_rng = root.child(&[MACRO_KEY]);
    let macro_paths: Vec<Vec<f64>> = (0..j)
        .map(|_| ar1_path(&mut macro_rng, t_len, spec.macro_persistence))
        .collect();

    // latent[i][k][t]
    let mut char_rng = root.child(&[CHAR_KEY]);
    let latent: Vec<Vec<Vec<f64>>> = (0..n)
        .map(|_| {
            (0..k)
                .map(|_| ar1_path(&mut char_rng, t_len, spec.char_persistence))
                .collect()
        })
        .collect();

    let mut cap_rng = root.child(&[CAP_KEY]);
    let log_caps: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let base = cap_rng.normal(5.0, 1.5);
            ar1_path(&mut cap_rng, t_len, 0.95)
                .into_iter()
                .map(|x| base + 0.3 * x)
                .collect()
        })
        .collect();

    let mut presence_rng = root.child(&[PRESENCE_KEY]);
    let present: Vec<Vec<bool>> = (0..t_len)
        .map(|_| {
            (0..n)
                .map(|_| spec.missing_fraction == 0.0 || !presence_rng.bernoulli(spec.missing_fraction))
                .collect()
        })
        .collect();

    let truth_model = spec.truth_model();
    let mut rows = Vec::new();
    let mut truth = Vec::new();
    for t in 0..t_len {
        let ids: Vec<usize> = (0..n).filter(|&i| present[t][i]).collect();
        if ids.is_empty() {
            continue;
        }
        let mut z: Vec<f64> = ids
            .iter()
            .flat_map(|&i| (0..k).map(move |c| (i, c)))
            .map(|(i, c)| latent[i][c][t])
            .collect();
        rank_normalize(&mut z, k, &[0..ids.len()]);
        let m: Vec<f64> = macro_paths.iter().map(|p| p[t]).collect();
        let lambda = truth_model.lambda(&m);
        let month = spec.start.offset(t as i64);
        for (pos, &i) in ids.iter().enumerate() {
            let zi = &z[pos * k..(pos + 1) * k];
            let alpha = truth_model.alpha(zi);
            let beta = truth_model.beta(zi);
            truth.push(TruthRow {
                stock_id: i as u64 + 1,
                month,
                alpha,
                beta,
                lambda,
                expected: alpha + beta * lambda,
            });
            rows.push(RawRow {
                stock_id: i as u64 + 1,
                month,
                excess_return: 0.0,
                mktcap: Some(log_caps[i][t].exp()),
                chars: (0..k).map(|c| Some(latent[i][c][t])).collect(),
            });
        }
    }

    let signal = truth.iter().map(|t| t.expected * t.expected).sum::<f64>() / truth.len() as f64;
    let noise_sd = match spec.noise_sd {
        Some(s) => s,
        None => (signal * (1.0 / spec.target_oracle_r2 - 1.0)).sqrt(),
    };
    let mut noise_rng = root.child(&[NOISE_KEY]);
    for (row, t) in rows.iter_mut().zip(&truth) {
        row.excess_return = t.expected + noise_sd * noise_rng.standard_normal();
    }

    let raw = RawPanel {
        char_names: (0..k).map(|c| format!("char_{c}")).collect(),
        rows,
        macro_names: (0..j).map(|c| format!("macro_{c}")).collect(),
        macro_rows: (0..t_len)
            .map(|t| {
                (
                    spec.start.offset(t as i64),
                    macro_paths.iter().map(|p| Some(p[t])).collect(),
                )
            })
            .collect(),
        transforms: vec![TransformCode::Level; j],
    };
    Ok(SyntheticPanel {
        spec: spec.clone(),
        raw,
        truth,
        noise_sd,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::snap::prediction_panel;

    fn small(seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            n_stocks: 30,
            n_months: 40,
            n_chars: 5,
            n_macro: 2,
            seed,
            ..Default::default()
        }
    }

    fn r2(panel: &crate::snap::PredictionPanel) -> f64 {
        let sse: f64 = panel.rows.iter().map(|r| r.residual * r.residual).sum();
        let sst: f64 = panel.rows.iter().map(|r| r.realized * r.realized).sum();
        1.0 - sse / sst
    }

    #[test]
    fn noiseless_truth_is_exact_on_every_split() {
        for form in [TruthForm::Linear, TruthForm::AdditiveNonlinear, TruthForm::Neural] {
            let spec = SyntheticSpec {
                noise_sd: Some(0.0),
                form,
                ..small(3)
            };
            let panel = synthesize(&spec).unwrap();
            let ds = panel.dataset().unwrap();
            let truth = panel.truth_model();
            for split in Split::ALL {
                let p = prediction_panel(&truth, &ds, split).unwrap();
                assert!((r2(&p) - 1.0).abs() < 1e-12, "{form:?} {split:?}");
            }
        }
    }

    #[test]
    fn target_r2_sets_noise_level() {
        let spec = SyntheticSpec {
            n_stocks: 100,
            n_months: 120,
            ..small(5)
        };
        let panel = synthesize(&spec).unwrap();
        let r2 = panel.oracle_r2(Split::Train);
        assert!((r2 - 0.1).abs() < 0.02, "oracle r2 {r2}");
    }

    #[test]
    fn same_seed_same_panel() {
        assert_eq!(synthesize(&small(9)).unwrap(), synthesize(&small(9)).unwrap());
        assert_ne!(synthesize(&small(9)).unwrap().raw, synthesize(&small(10)).unwrap().raw);
    }

    #[test]
    fn unbalanced_panel_preprocesses() {
        let spec = SyntheticSpec {
            missing_fraction: 0.3,
            noise_sd: Some(0.0),
            ..small(2)
        };
        let panel = synthesize(&spec).unwrap();
        let expected = 30 * 40;
        let kept = panel.raw.rows.len() as f64 / expected as f64;
        assert!((kept - 0.7).abs() < 0.05);
        let ds = panel.dataset().unwrap();
        let p = prediction_panel(&panel.truth_model(), &ds, Split::Test).unwrap();
        assert!((r2(&p) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn split_fractions() {
        let s = SyntheticSpec::default().split_config();
        assert_eq!(s.validate_start, "2012-01".parse().unwrap());
        assert_eq!(s.test_start, "2016-01".parse().unwrap());
        let bad = SyntheticSpec {
            validate_fraction: 0.6,
            test_fraction: 0.5,
            ..Default::default()
        };
        assert!(synthesize(&bad).is_err());
    }
}
