//! Noise-perturbation feature importance: jitter one input column, re-predict,
//! and measure the root-mean-square change in predicted returns.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{PanelDataset, Split};
use crate::error::{Error, Result};
use crate::numerics::{derive_seed, Rng};
use crate::snap::ReturnPredictor;

pub const DEFAULT_NOISE_SCALE: f64 = 0.2;

/// Which input space a feature index refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    /// Stock-level characteristics seen by the alpha and beta branches.
    Characteristic,
    /// Average characteristics followed by macro states, seen by the factor branch.
    Common,
}

impl Scope {
    pub fn name(self) -> &'static str {
        match self {
            Scope::Characteristic => "characteristic",
            Scope::Common => "common",
        }
    }

    fn key(self) -> u64 {
        match self {
            Scope::Characteristic => 0x4348,
            Scope::Common => 0x434d,
        }
    }

    pub fn feature_count(self, data: &PanelDataset) -> usize {
        match self {
            Scope::Characteristic => data.n_chars(),
            Scope::Common => data.common_dim(),
        }
    }

    pub fn feature_names(self, data: &PanelDataset) -> Vec<String> {
        match self {
            Scope::Characteristic => data.char_names.clone(),
            Scope::Common => data
                .char_names
                .iter()
                .map(|c| format!("mean_{c}"))
                .chain(data.macro_names.iter().cloned())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImportanceConfig {
    pub split: Split,
    pub scale: f64,
    pub repetitions: usize,
    pub seed: u64,
}

impl Default for ImportanceConfig {
    fn default() -> Self {
        Self {
            split: Split::Test,
            scale: DEFAULT_NOISE_SCALE,
            repetitions: 1,
            seed: 0,
        }
    }
}

/// RMS difference between predictions on the original data and on a copy in
/// which `feature` carries additive `N(0, scale²)` noise.
pub fn perturb_importance(
    model: &dyn ReturnPredictor,
    data: &PanelDataset,
    scope: Scope,
    feature: usize,
    cfg: &ImportanceConfig,
) -> Result<f64> {
    let n = scope.feature_count(data);
    if feature >= n {
        return Err(Error::Input(format!("feature {feature} out of range for {} scope of size {n}", scope.name())));
    }
    if !(cfg.scale >= 0.0 && cfg.scale.is_finite()) {
        return Err(Error::Input("noise scale must be finite and non-negative".into()));
    }
    if cfg.repetitions == 0 {
        return Err(Error::Input("repetitions must be positive".into()));
    }
    let rows = data.rows_in(cfg.split);
    if rows.is_empty() {
        return Err(Error::Input(format!("no rows in the {} split", cfg.split.name())));
    }
    let base = model.predict_rows(data, &rows)?;
    let mut sq = 0.0;
    for rep in 0..cfg.repetitions {
        let mut rng = Rng::new(derive_seed(cfg.seed, &[scope.key(), feature as u64, rep as u64]));
        let mut noisy = data.clone();
        match scope {
            Scope::Characteristic => noisy.map_char(feature, |_, v| v + rng.normal(0.0, cfg.scale)),
            Scope::Common => noisy.map_common(feature, |_, v| v + rng.normal(0.0, cfg.scale)),
        }
        let pert = model.predict_rows(&noisy, &rows)?;
        sq += base.iter().zip(&pert).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    Ok((sq / (rows.len() * cfg.repetitions) as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceRow {
    pub feature: usize,
    pub name: String,
    pub scope: Scope,
    pub rms: f64,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub scope: Scope,
    /// Sorted by rank.
    pub rows: Vec<ImportanceRow>,
}

impl ImportanceReport {
    pub fn top(&self, n: usize) -> Vec<usize> {
        self.rows.iter().take(n).map(|r| r.feature).collect()
    }

    pub fn rank_of(&self, feature: usize) -> Option<usize> {
        self.rows.iter().find(|r| r.feature == feature).map(|r| r.rank)
    }
}

/// Rank features by RMS, largest first; equal values keep feature order.
pub fn rank_features(rms: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..rms.len()).collect();
    order.sort_by(|&a, &b| rms[b].total_cmp(&rms[a]).then(a.cmp(&b)));
    let mut ranks = vec![0; rms.len()];
    for (r, &f) in order.iter().enumerate() {
        ranks[f] = r + 1;
    }
    ranks
}

pub fn importance_report(
    model: &dyn ReturnPredictor,
    data: &PanelDataset,
    scope: Scope,
    cfg: &ImportanceConfig,
) -> Result<ImportanceReport> {
    let names = scope.feature_names(data);
    let rms = (0..names.len())
        .into_par_iter()
        .map(|f| perturb_importance(model, data, scope, f, cfg))
        .collect::<Result<Vec<f64>>>()?;
    let ranks = rank_features(&rms);
    let mut rows: Vec<ImportanceRow> = names
        .into_iter()
        .enumerate()
        .map(|(feature, name)| ImportanceRow {
            feature,
            name,
            scope,
            rms: rms[feature],
            rank: ranks[feature],
        })
        .collect();
    rows.sort_by_key(|r| r.rank);
    Ok(ImportanceReport { scope, rows })
}

/// Tidy CSV: one line per (model, feature).
pub fn write_importance_csv(reports: &[(String, &ImportanceReport)], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["model_name", "scope", "feature", "name", "rms", "rank"])?;
    for (model, rep) in reports {
        for r in &rep.rows {
            w.write_record([
                model.as_str(),
                r.scope.name(),
                &r.feature.to_string(),
                &r.name,
                &r.rms.to_string(),
                &r.rank.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
