//! Predictive R², decile long-short and alpha-weighted portfolios, Sharpe
//! ratios and out-of-sample decay.

use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::{Month, Split};
use crate::error::{Error, Result};
use crate::numerics::{mean, sample_sd, sorted_quantile};
use crate::snap::PredictionPanel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    Equal,
    Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Construction {
    DecileLongShort,
    Arbitrage,
}

/// Monthly portfolio returns. `months[t]` is the formation month; the return
/// is realized over the following month.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortfolioSeries {
    pub months: Vec<Month>,
    pub returns: Vec<f64>,
    pub weighting: Weighting,
    pub construction: Construction,
}

/// One stock in a monthly cross-section.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Holding {
    pub stock_id: u64,
    pub prediction: f64,
    pub realized: f64,
    /// Market cap at formation.
    pub mktcap: Option<f64>,
}

/// `1 - sum(residual^2) / sum(realized^2)`.
pub fn r2_from(realized: &[f64], predicted: &[f64]) -> Result<f64> {
    if realized.is_empty() || realized.len() != predicted.len() {
        return Err(Error::Input("R² needs equal-length, non-empty inputs".into()));
    }
    let sst: f64 = realized.iter().map(|r| r * r).sum();
    if sst <= 0.0 {
        return Err(Error::Degenerate("all realized returns are zero".into()));
    }
    let sse: f64 = realized
        .iter()
        .zip(predicted)
        .map(|(r, p)| (r - p) * (r - p))
        .sum();
    Ok(1.0 - sse / sst)
}

pub fn r2_predictive(panel: &PredictionPanel) -> Result<f64> {
    let realized: Vec<f64> = panel.rows.iter().map(|r| r.realized).collect();
    let predicted: Vec<f64> = panel.rows.iter().map(|r| r.predicted).collect();
    r2_from(&realized, &predicted)
}

fn leg_return(leg: &[&Holding], weighting: Weighting) -> Result<f64> {
    match weighting {
        Weighting::Equal => Ok(leg.iter().map(|h| h.realized).sum::<f64>() / leg.len() as f64),
        Weighting::Value => {
            let mut total = 0.0;
            let mut acc = 0.0;
            for h in leg {
                let cap = h
                    .mktcap
                    .filter(|c| c.is_finite() && *c > 0.0)
                    .ok_or_else(|| Error::Input(format!("stock {} lacks a market cap", h.stock_id)))?;
                total += cap;
                acc += cap * h.realized;
            }
            Ok(acc / total)
        }
    }
}

/// Top-decile minus bottom-decile return. Stocks are ordered by prediction,
/// ties by stock id; position `p` of `n` falls in decile `floor(10 p / n)`.
pub fn decile_long_short(holdings: &[Holding], weighting: Weighting) -> Result<f64> {
    let n = holdings.len();
    if n < 10 {
        return Err(Error::Input(format!("decile sort needs at least 10 stocks, got {n}")));
    }
    let mut sorted: Vec<&Holding> = holdings.iter().collect();
    sorted.sort_by(|a, b| {
        a.prediction
            .total_cmp(&b.prediction)
            .then(a.stock_id.cmp(&b.stock_id))
    });
    let decile = |p: usize| p * 10 / n;
    let short: Vec<&Holding> = (0..n).filter(|&p| decile(p) == 0).map(|p| sorted[p]).collect();
    let long: Vec<&Holding> = (0..n).filter(|&p| decile(p) == 9).map(|p| sorted[p]).collect();
    Ok(leg_return(&long, weighting)? - leg_return(&short, weighting)?)
}

/// Annualized Sharpe ratio of monthly returns: `mean / sd * sqrt(12)`.
pub fn sharpe_of(returns: &[f64]) -> Result<f64> {
    if returns.len() < 2 {
        return Err(Error::Input("Sharpe ratio needs at least two months".into()));
    }
    let sd = sample_sd(returns);
    if !(sd > 0.0) {
        return Err(Error::Degenerate("return series has zero variance".into()));
    }
    Ok(mean(returns) / sd * 12f64.sqrt())
}

pub fn sharpe(series: &PortfolioSeries) -> Result<f64> {
    sharpe_of(&series.returns)
}

/// `sum_i (alpha_i / N) * R_i`.
pub fn arbitrage_portfolio(alpha: &[f64], realized: &[f64]) -> Result<f64> {
    if alpha.is_empty() {
        return Err(Error::Input("empty month".into()));
    }
    if alpha.len() != realized.len() {
        return Err(Error::Shape("alpha and return vectors differ in length".into()));
    }
    let n = alpha.len() as f64;
    Ok(alpha.iter().zip(realized).map(|(a, r)| a / n * r).sum())
}

/// Monthly decile long-short returns; months with fewer than ten stocks are skipped.
pub fn long_short_series(panel: &PredictionPanel, weighting: Weighting) -> Result<PortfolioSeries> {
    let mut months = Vec::new();
    let mut returns = Vec::new();
    for (month, rows) in panel.by_month() {
        let holdings: Vec<Holding> = rows
            .iter()
            .map(|r| Holding {
                stock_id: r.stock_id,
                prediction: r.predicted,
                realized: r.realized,
                mktcap: r.mktcap,
            })
            .collect();
        if holdings.len() < 10 {
            warn!("skipping {month}: {} stocks", holdings.len());
            continue;
        }
        months.push(month);
        returns.push(decile_long_short(&holdings, weighting)?);
    }
    Ok(PortfolioSeries {
        months,
        returns,
        weighting,
        construction: Construction::DecileLongShort,
    })
}

/// Monthly arbitrage-portfolio returns from a panel carrying alpha estimates.
pub fn arbitrage_series(panel: &PredictionPanel) -> Result<PortfolioSeries> {
    let mut months = Vec::new();
    let mut returns = Vec::new();
    for (month, rows) in panel.by_month() {
        let alpha = rows
            .iter()
            .map(|r| {
                r.alpha
                    .ok_or_else(|| Error::Input(format!("no alpha for stock {} in {month}", r.stock_id)))
            })
            .collect::<Result<Vec<f64>>>()?;
        let realized: Vec<f64> = rows.iter().map(|r| r.realized).collect();
        months.push(month);
        returns.push(arbitrage_portfolio(&alpha, &realized)?);
    }
    Ok(PortfolioSeries {
        months,
        returns,
        weighting: Weighting::Equal,
        construction: Construction::Arbitrage,
    })
}

/// Keep, month by month, the stocks whose market cap is at least the
/// cross-sectional `q` quantile. Rows without a market cap are dropped.
pub fn exclude_microcap(panel: &PredictionPanel, q: f64) -> Result<PredictionPanel> {
    if !(0.0..1.0).contains(&q) {
        return Err(Error::Parameter(format!("micro-cap quantile {q} outside [0, 1)")));
    }
    let mut kept = Vec::with_capacity(panel.len());
    for rows in panel.by_month().values() {
        let mut caps: Vec<f64> = rows.iter().filter_map(|r| r.mktcap).collect();
        if caps.is_empty() {
            continue;
        }
        caps.sort_by(f64::total_cmp);
        let cut = sorted_quantile(&caps, q);
        kept.extend(rows.iter().filter(|r| r.mktcap.is_some_and(|c| c >= cut)).map(|r| **r));
    }
    Ok(PredictionPanel::from_rows(kept))
}

/// `(train - value) / train * 100`; undefined when the training value is 0.
pub fn decay_percent(train: f64, value: f64) -> Option<f64> {
    (train != 0.0).then(|| (train - value) / train * 100.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub split: Split,
    pub r2_predictive: f64,
    /// `None` when the series is too short or constant.
    pub sharpe_ew: Option<f64>,
    pub sharpe_vw: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayRow {
    pub metric: String,
    pub split: Split,
    pub percent: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub model: String,
    pub splits: Vec<SplitMetrics>,
    pub decay: Vec<DecayRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub decay_definition: String,
    pub sharpe_annualization: String,
    pub models: Vec<ModelReport>,
}

pub const DECAY_DEFINITION: &str = "(train - split) / train * 100";

fn metrics(split: Split, panel: &PredictionPanel) -> Result<SplitMetrics> {
    let r2 = r2_predictive(panel)?;
    let sr = |w: Weighting| match long_short_series(panel, w).and_then(|s| sharpe(&s)) {
        Ok(v) => Ok(Some(v)),
        Err(e @ (Error::Degenerate(_) | Error::Input(_))) => {
            warn!("{} {:?} Sharpe unavailable: {e}", split.name(), w);
            Ok(None)
        }
        Err(e) => Err(e),
    };
    Ok(SplitMetrics {
        split,
        r2_predictive: r2,
        sharpe_ew: sr(Weighting::Equal)?,
        sharpe_vw: sr(Weighting::Value)?,
    })
}

/// Assemble R², Sharpe ratios and their decay for every model and split.
pub fn eval_report(models: &[(String, Vec<(Split, PredictionPanel)>)]) -> Result<EvalReport> {
    let mut out = Vec::with_capacity(models.len());
    for (name, panels) in models {
        let splits = panels
            .iter()
            .map(|(s, p)| metrics(*s, p))
            .collect::<Result<Vec<_>>>()?;
        let mut decay = Vec::new();
        if let Some(train) = splits.iter().find(|m| m.split == Split::Train) {
            for m in splits.iter().filter(|m| m.split != Split::Train) {
                let pairs = [
                    ("r2_predictive", Some(train.r2_predictive), Some(m.r2_predictive)),
                    ("sharpe_ew", train.sharpe_ew, m.sharpe_ew),
                    ("sharpe_vw", train.sharpe_vw, m.sharpe_vw),
                ];
                for (metric, t, v) in pairs {
                    decay.push(DecayRow {
                        metric: metric.into(),
                        split: m.split,
                        percent: t.zip(v).and_then(|(t, v)| decay_percent(t, v)),
                    });
                }
            }
        }
        out.push(ModelReport {
            model: name.clone(),
            splits,
            decay,
        });
    }
    Ok(EvalReport {
        decay_definition: DECAY_DEFINITION.into(),
        sharpe_annualization: "monthly mean / monthly sd * sqrt(12)".into(),
        models: out,
    })
}

/// Tidy `(month, series_name, value)` CSV.
pub fn write_series_csv(series: &[(String, &PortfolioSeries)], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["month", "series_name", "value"])?;
    for (name, s) in series {
        for (m, r) in s.months.iter().zip(&s.returns) {
            w.write_record([m.to_string(), name.clone(), r.to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
