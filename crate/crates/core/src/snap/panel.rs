use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::SnapModel;
use crate::data::{Month, PanelDataset, Split};
use crate::error::{Error, Result};

/// Anything that maps dataset rows to predicted next-month excess returns.
pub trait ReturnPredictor: Sync {
    fn predict_rows(&self, data: &PanelDataset, rows: &[usize]) -> Result<Vec<f64>>;
}

impl ReturnPredictor for SnapModel {
    fn predict_rows(&self, data: &PanelDataset, rows: &[usize]) -> Result<Vec<f64>> {
        Ok(self
            .branch_outputs(data, rows)?
            .into_iter()
            .map(|o| o.prediction)
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub stock_id: u64,
    /// Month the features are observed; `realized` is the following month's return.
    pub month: Month,
    pub realized: f64,
    pub predicted: f64,
    pub residual: f64,
    pub alpha: Option<f64>,
    pub mktcap: Option<f64>,
}

/// Predictions keyed by `(month, stock_id)`, sorted in that order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PredictionPanel {
    pub rows: Vec<PredictionRow>,
}

impl PredictionPanel {
    pub fn from_rows(mut rows: Vec<PredictionRow>) -> Self {
        rows.sort_by_key(|r| (r.month, r.stock_id));
        Self { rows }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn residuals(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.residual).collect()
    }

    /// Rows grouped by month, in month order.
    pub fn by_month(&self) -> BTreeMap<Month, Vec<&PredictionRow>> {
        let mut out: BTreeMap<Month, Vec<&PredictionRow>> = BTreeMap::new();
        for r in &self.rows {
            out.entry(r.month).or_default().push(r);
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rdr = csv::Reader::from_reader(file);
        let rows = rdr.deserialize().collect::<std::result::Result<Vec<PredictionRow>, _>>()?;
        Ok(Self::from_rows(rows))
    }
}

/// Evaluate `model` on every row of `split`.
pub fn prediction_panel(
    model: &dyn ReturnPredictor,
    data: &PanelDataset,
    split: Split,
) -> Result<PredictionPanel> {
    let rows = data.rows_in(split);
    if rows.is_empty() {
        return Err(Error::Input(format!("{} split is empty", split.name())));
    }
    let preds = model.predict_rows(data, &rows)?;
    let out = rows
        .iter()
        .zip(preds)
        .map(|(&r, predicted)| {
            let row = &data.rows[r];
            PredictionRow {
                stock_id: row.stock_id,
                month: data.months[row.month],
                realized: row.excess_return,
                predicted,
                residual: row.excess_return - predicted,
                alpha: None,
                mktcap: row.mktcap,
            }
        })
        .collect();
    Ok(PredictionPanel::from_rows(out))
}

/// `alpha = masked residual - unmasked residual`, attached to the unmasked rows.
pub fn estimate_alpha(unmasked: &PredictionPanel, masked: &PredictionPanel) -> Result<PredictionPanel> {
    if unmasked.len() != masked.len() {
        return Err(Error::Alignment(format!(
            "panels have {} and {} rows",
            unmasked.len(),
            masked.len()
        )));
    }
    let rows = unmasked
        .rows
        .iter()
        .zip(&masked.rows)
        .map(|(u, m)| {
            if u.stock_id != m.stock_id || u.month != m.month {
                return Err(Error::Alignment(format!(
                    "key mismatch: ({}, {}) vs ({}, {})",
                    u.stock_id, u.month, m.stock_id, m.month
                )));
            }
            Ok(PredictionRow {
                alpha: Some(m.residual - u.residual),
                ..*u
            })
        })
        .collect::<Result<_>>()?;
    Ok(PredictionPanel { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(id: u64, realized: f64, predicted: f64) -> PredictionRow {
        PredictionRow {
            stock_id: id,
            month: "2000-01".parse().unwrap(),
            realized,
            predicted,
            residual: realized - predicted,
            alpha: None,
            mktcap: None,
        }
    }

    #[test]
    fn alpha_is_residual_difference() {
        let u = PredictionPanel::from_rows(vec![row(1, 0.07, 0.05), row(2, 0.1, 0.1)]);
        let m = PredictionPanel::from_rows(vec![row(1, 0.07, 0.02), row(2, 0.1, 0.1)]);
        let a = estimate_alpha(&u, &m).unwrap();
        assert!((a.rows[0].alpha.unwrap() - 0.03).abs() < 1e-15);
        assert_eq!(a.rows[1].alpha, Some(0.0));
        let same = estimate_alpha(&u, &u).unwrap();
        assert!(same.rows.iter().all(|r| r.alpha == Some(0.0)));
    }

    #[test]
    fn key_mismatch_is_alignment_error() {
        let u = PredictionPanel::from_rows(vec![row(1, 0.0, 0.0)]);
        let m = PredictionPanel::from_rows(vec![row(2, 0.0, 0.0)]);
        assert!(matches!(estimate_alpha(&u, &m), Err(Error::Alignment(_))));
        assert!(matches!(
            estimate_alpha(&u, &PredictionPanel::default()),
            Err(Error::Alignment(_))
        ));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        let mut p = PredictionPanel::from_rows(vec![row(3, 0.125, -0.5), row(1, 0.1, 0.3)]);
        p.rows[0].alpha = Some(0.25);
        p.rows[1].mktcap = Some(12.5);
        p.write_csv(&path).unwrap();
        assert_eq!(PredictionPanel::read_csv(&path).unwrap(), p);
    }
}
