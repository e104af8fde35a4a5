//! Stock-month panel ingestion and preprocessing.
//!
//! A row `(stock, t)` holds characteristics observed at the end of month `t`
//! together with the excess return realized over month `t + 1`. Preprocessing
//! imputes missing characteristics with the month's cross-sectional median,
//! maps each characteristic to `[-1, 1]` by cross-sectional rank, transforms
//! macro series to stationarity and standardizes them with training-split
//! moments only.

pub mod io;
pub mod synth;

use std::collections::HashMap;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{median, midranks};

pub use io::{load_panel, read_raw_panel, save_panel, write_raw_panel};

/// Calendar month.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Month {
    pub year: i32,
    /// 1..=12
    pub month: u32,
}

impl Month {
    pub fn new(year: i32, month: u32) -> Result<Self> {
        if !(1..=12).contains(&month) {
            return Err(Error::Input(format!("month {month} out of range")));
        }
        Ok(Self { year, month })
    }

    pub fn ordinal(self) -> i64 {
        self.year as i64 * 12 + (self.month as i64 - 1)
    }

    pub fn from_ordinal(o: i64) -> Self {
        Self {
            year: o.div_euclid(12) as i32,
            month: (o.rem_euclid(12) + 1) as u32,
        }
    }

    pub fn offset(self, months: i64) -> Self {
        Self::from_ordinal(self.ordinal() + months)
    }
}

impl fmt::Display for Month {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year, self.month)
    }
}

impl FromStr for Month {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Input(format!("expected YYYY-MM, got {s:?}"));
        let (y, m) = s.trim().split_once('-').ok_or_else(bad)?;
        if y.len() != 4 || m.len() != 2 {
            return Err(bad());
        }
        Month::new(y.parse().map_err(|_| bad())?, m.parse().map_err(|_| bad())?)
    }
}

impl Serialize for Month {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Month {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validate,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validate, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validate => "validate",
            Split::Test => "test",
        }
    }
}

/// Date boundaries. A month equal to a boundary belongs to the later split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub validate_start: Month,
    pub test_start: Month,
}

impl SplitConfig {
    pub fn split_of(&self, m: Month) -> Split {
        if m < self.validate_start {
            Split::Train
        } else if m < self.test_start {
            Split::Validate
        } else {
            Split::Test
        }
    }

    fn validate(&self) -> Result<()> {
        if self.validate_start >= self.test_start {
            return Err(Error::Config(
                "validation start must precede test start".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformCode {
    Level,
    Diff,
    SecondDiff,
    Log,
    LogDiff,
    LogSecondDiff,
    PctChange,
}

impl TransformCode {
    pub fn name(self) -> &'static str {
        match self {
            TransformCode::Level => "level",
            TransformCode::Diff => "diff",
            TransformCode::SecondDiff => "second_diff",
            TransformCode::Log => "log",
            TransformCode::LogDiff => "log_diff",
            TransformCode::LogSecondDiff => "log_second_diff",
            TransformCode::PctChange => "pct_change",
        }
    }

    /// Apply to a monthly series; undefined leading entries become NaN.
    pub fn apply(self, series: &[f64]) -> Vec<f64> {
        let log = |xs: &[f64]| -> Vec<f64> {
            xs.iter()
                .map(|&v| if v > 0.0 { v.ln() } else { f64::NAN })
                .collect()
        };
        let diff = |xs: &[f64]| -> Vec<f64> {
            (0..xs.len())
                .map(|t| if t == 0 { f64::NAN } else { xs[t] - xs[t - 1] })
                .collect()
        };
        match self {
            TransformCode::Level => series.to_vec(),
            TransformCode::Diff => diff(series),
            TransformCode::SecondDiff => diff(&diff(series)),
            TransformCode::Log => log(series),
            TransformCode::LogDiff => diff(&log(series)),
            TransformCode::LogSecondDiff => diff(&diff(&log(series))),
            TransformCode::PctChange => (0..series.len())
                .map(|t| {
                    if t == 0 || series[t - 1] == 0.0 {
                        f64::NAN
                    } else {
                        series[t] / series[t - 1] - 1.0
                    }
                })
                .collect(),
        }
    }
}

impl FromStr for TransformCode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "level" => TransformCode::Level,
            "diff" => TransformCode::Diff,
            "second_diff" => TransformCode::SecondDiff,
            "log" => TransformCode::Log,
            "log_diff" => TransformCode::LogDiff,
            "log_second_diff" => TransformCode::LogSecondDiff,
            "pct_change" => TransformCode::PctChange,
            other => return Err(Error::Input(format!("unknown transform code {other:?}"))),
        })
    }
}

/// One unprocessed stock-month observation. `None` marks a missing value.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRow {
    pub stock_id: u64,
    pub month: Month,
    pub excess_return: f64,
    pub mktcap: Option<f64>,
    pub chars: Vec<Option<f64>>,
}

/// Panel exactly as read from (or written to) disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RawPanel {
    pub char_names: Vec<String>,
    pub rows: Vec<RawRow>,
    pub macro_names: Vec<String>,
    pub macro_rows: Vec<(Month, Vec<Option<f64>>)>,
    pub transforms: Vec<TransformCode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub split: SplitConfig,
    pub impute: bool,
    pub rank_normalize: bool,
    pub standardize_macro: bool,
    /// Append the lagged equal-weighted market excess return as a macro state.
    pub add_market_feature: bool,
    /// Characteristics missing more often than this abort the load.
    pub max_missing_rate: f64,
}

impl PreprocessConfig {
    pub fn new(split: SplitConfig) -> Self {
        Self {
            split,
            impute: true,
            rank_normalize: true,
            standardize_macro: true,
            add_market_feature: true,
            max_missing_rate: 0.5,
        }
    }

    /// Settings that reload an already preprocessed panel unchanged.
    pub fn passthrough(split: SplitConfig) -> Self {
        Self {
            split,
            impute: true,
            rank_normalize: false,
            standardize_macro: false,
            add_market_feature: false,
            max_missing_rate: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureQuality {
    pub name: String,
    pub observations: usize,
    pub missing: usize,
    pub missing_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub rows: usize,
    pub stocks: usize,
    pub months: usize,
    pub features: Vec<FeatureQuality>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PanelRow {
    pub stock_id: u64,
    /// Index into `PanelDataset::months`.
    pub month: usize,
    pub excess_return: f64,
    pub mktcap: Option<f64>,
}

/// Preprocessed, immutable panel. Rows are sorted by `(month, stock_id)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    pub char_names: Vec<String>,
    pub macro_names: Vec<String>,
    /// Contiguous calendar months covering the panel.
    pub months: Vec<Month>,
    pub month_split: Vec<Split>,
    pub split: SplitConfig,
    pub rows: Vec<PanelRow>,
    chars: Vec<f64>,
    macro_values: Vec<f64>,
    /// Per-month input of the common branch: mean characteristics then macro states.
    common: Vec<f64>,
    /// `(mean, sd)` used to standardize each macro column.
    pub macro_stats: Vec<(f64, f64)>,
    month_rows: Vec<Range<usize>>,
    prev_row: Vec<Option<usize>>,
}

impl PanelDataset {
    pub fn n_chars(&self) -> usize {
        self.char_names.len()
    }

    pub fn n_macro(&self) -> usize {
        self.macro_names.len()
    }

    pub fn common_dim(&self) -> usize {
        self.n_chars() + self.n_macro()
    }

    pub fn chars(&self, row: usize) -> &[f64] {
        let k = self.n_chars();
        &self.chars[row * k..(row + 1) * k]
    }

    pub fn chars_mut(&mut self, row: usize) -> &mut [f64] {
        let k = self.n_chars();
        &mut self.chars[row * k..(row + 1) * k]
    }

    pub fn macro_values(&self, month: usize) -> &[f64] {
        let j = self.n_macro();
        &self.macro_values[month * j..(month + 1) * j]
    }

    pub fn common(&self, month: usize) -> &[f64] {
        let c = self.common_dim();
        &self.common[month * c..(month + 1) * c]
    }

    pub fn common_mut(&mut self, month: usize) -> &mut [f64] {
        let c = self.common_dim();
        &mut self.common[month * c..(month + 1) * c]
    }

    pub fn month_rows(&self, month: usize) -> Range<usize> {
        self.month_rows[month].clone()
    }

    pub fn prev_row(&self, row: usize) -> Option<usize> {
        self.prev_row[row]
    }

    pub fn months_in(&self, split: Split) -> Vec<usize> {
        (0..self.months.len())
            .filter(|&m| self.month_split[m] == split && !self.month_rows[m].is_empty())
            .collect()
    }

    pub fn rows_in(&self, split: Split) -> Vec<usize> {
        self.months_in(split)
            .into_iter()
            .flat_map(|m| self.month_rows[m].clone())
            .collect()
    }

    /// Rows of the same stock within the `window` months ending at `row`'s
    /// month, oldest first. Missing months are skipped.
    pub fn stock_window(&self, row: usize, window: usize) -> Vec<usize> {
        let end = self.rows[row].month;
        let mut out = vec![row];
        let mut cur = row;
        while let Some(p) = self.prev_row[cur] {
            if end - self.rows[p].month >= window {
                break;
            }
            out.push(p);
            cur = p;
        }
        out.reverse();
        out
    }

    /// Month indices of the common window ending at `month`, oldest first.
    pub fn common_window(&self, month: usize, window: usize) -> Range<usize> {
        (month + 1).saturating_sub(window)..month + 1
    }

    pub fn month_index(&self, m: Month) -> Option<usize> {
        let first = self.months.first()?.ordinal();
        let idx = m.ordinal() - first;
        (idx >= 0 && (idx as usize) < self.months.len()).then_some(idx as usize)
    }

    /// Replace the characteristic value for every row (used by perturbation).
    pub fn map_char(&mut self, k: usize, mut f: impl FnMut(usize, f64) -> f64) {
        let kk = self.n_chars();
        for r in 0..self.rows.len() {
            let v = &mut self.chars[r * kk + k];
            *v = f(r, *v);
        }
    }

    /// Replace one common-branch input for every month.
    pub fn map_common(&mut self, j: usize, mut f: impl FnMut(usize, f64) -> f64) {
        let c = self.common_dim();
        for m in 0..self.months.len() {
            let v = &mut self.common[m * c + j];
            *v = f(m, *v);
        }
    }

    /// Drop the rows for which `keep` is false and rebuild the indexes.
    pub fn filter_rows(&self, mut keep: impl FnMut(usize, &PanelRow) -> bool) -> PanelDataset {
        let k = self.n_chars();
        let mut rows = Vec::new();
        let mut chars = Vec::new();
        for (r, row) in self.rows.iter().enumerate() {
            if keep(r, row) {
                rows.push(*row);
                chars.extend_from_slice(&self.chars[r * k..(r + 1) * k]);
            }
        }
        let (month_rows, prev_row) = build_indexes(&rows, self.months.len());
        PanelDataset {
            rows,
            chars,
            month_rows,
            prev_row,
            ..self.clone()
        }
    }

    /// Convert back to the on-disk layout (preprocessed values, `level` codes).
    pub fn to_raw(&self) -> RawPanel {
        RawPanel {
            char_names: self.char_names.clone(),
            rows: self
                .rows
                .iter()
                .enumerate()
                .map(|(r, row)| RawRow {
                    stock_id: row.stock_id,
                    month: self.months[row.month],
                    excess_return: row.excess_return,
                    mktcap: row.mktcap,
                    chars: self.chars(r).iter().map(|&v| Some(v)).collect(),
                })
                .collect(),
            macro_names: self.macro_names.clone(),
            macro_rows: (0..self.months.len())
                .map(|m| {
                    (
                        self.months[m],
                        self.macro_values(m).iter().map(|&v| Some(v)).collect(),
                    )
                })
                .collect(),
            transforms: vec![TransformCode::Level; self.n_macro()],
        }
    }
}

fn build_indexes(rows: &[PanelRow], n_months: usize) -> (Vec<Range<usize>>, Vec<Option<usize>>) {
    let mut month_rows = vec![0..0; n_months];
    let mut start = 0;
    while start < rows.len() {
        let m = rows[start].month;
        let mut end = start;
        while end < rows.len() && rows[end].month == m {
            end += 1;
        }
        month_rows[m] = start..end;
        start = end;
    }
    let mut last: HashMap<u64, usize> = HashMap::new();
    let prev_row = rows
        .iter()
        .enumerate()
        .map(|(r, row)| last.insert(row.stock_id, r))
        .collect();
    (month_rows, prev_row)
}

/// Impute, normalize and split a raw panel.
pub fn preprocess(raw: &RawPanel, cfg: &PreprocessConfig) -> Result<(PanelDataset, QualityReport)> {
    cfg.split.validate()?;
    if raw.rows.is_empty() {
        return Err(Error::Input("panel has no rows".into()));
    }
    let k = raw.char_names.len();
    if raw.rows.iter().any(|r| r.chars.len() != k) {
        return Err(Error::Shape("row characteristic count mismatch".into()));
    }

    let mut order: Vec<usize> = (0..raw.rows.len()).collect();
    order.sort_by_key(|&i| (raw.rows[i].month, raw.rows[i].stock_id));
    for w in order.windows(2) {
        let (a, b) = (&raw.rows[w[0]], &raw.rows[w[1]]);
        if a.month == b.month && a.stock_id == b.stock_id {
            return Err(Error::Input(format!(
                "duplicate observation for stock {} in {}",
                a.stock_id, a.month
            )));
        }
    }

    let first = raw.rows[order[0]].month;
    let last = raw.rows[*order.last().unwrap()].month;
    let months: Vec<Month> = (first.ordinal()..=last.ordinal())
        .map(Month::from_ordinal)
        .collect();
    let month_idx = |m: Month| (m.ordinal() - first.ordinal()) as usize;

    let rows: Vec<PanelRow> = order
        .iter()
        .map(|&i| {
            let r = &raw.rows[i];
            PanelRow {
                stock_id: r.stock_id,
                month: month_idx(r.month),
                excess_return: r.excess_return,
                mktcap: r.mktcap,
            }
        })
        .collect();
    let (month_rows, prev_row) = build_indexes(&rows, months.len());

    // Quality report and missing-rate guard.
    let mut features = Vec::with_capacity(k);
    for (j, name) in raw.char_names.iter().enumerate() {
        let missing = raw.rows.iter().filter(|r| r.chars[j].is_none()).count();
        let rate = missing as f64 / raw.rows.len() as f64;
        if rate > cfg.max_missing_rate {
            return Err(Error::Input(format!(
                "characteristic {name} is missing in {:.1}% of rows (limit {:.1}%)",
                100.0 * rate,
                100.0 * cfg.max_missing_rate
            )));
        }
        features.push(FeatureQuality {
            name: name.clone(),
            observations: raw.rows.len() - missing,
            missing,
            missing_rate: rate,
        });
    }

    let mut chars = vec![f64::NAN; rows.len() * k];
    for (r, &i) in order.iter().enumerate() {
        for (j, v) in raw.rows[i].chars.iter().enumerate() {
            if let Some(v) = v {
                chars[r * k + j] = *v;
            }
        }
    }
    if cfg.impute {
        impute_medians(&mut chars, k, &month_rows);
    } else if chars.iter().any(|v| v.is_nan()) {
        return Err(Error::Input("missing characteristics with imputation disabled".into()));
    }
    if cfg.rank_normalize {
        rank_normalize(&mut chars, k, &month_rows);
    }

    let month_split: Vec<Split> = months.iter().map(|&m| cfg.split.split_of(m)).collect();
    let (macro_names, macro_values, macro_stats) =
        build_macro(raw, cfg, &months, &rows, &month_rows, &month_split)?;

    let j = macro_names.len();
    let mut common = vec![0.0; months.len() * (k + j)];
    for m in 0..months.len() {
        let dst = &mut common[m * (k + j)..(m + 1) * (k + j)];
        if !month_rows[m].is_empty() {
            dst[..k].copy_from_slice(&cross_sectional_means_raw(&chars, k, month_rows[m].clone()));
        }
        dst[k..].copy_from_slice(&macro_values[m * j..(m + 1) * j]);
    }

    let stocks = {
        let mut ids: Vec<u64> = rows.iter().map(|r| r.stock_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    };
    let report = QualityReport {
        rows: rows.len(),
        stocks,
        months: months.len(),
        features,
    };
    let ds = PanelDataset {
        char_names: raw.char_names.clone(),
        macro_names,
        months,
        month_split,
        split: cfg.split,
        rows,
        chars,
        macro_values,
        common,
        macro_stats,
        month_rows,
        prev_row,
    };
    Ok((ds, report))
}

/// Fill missing characteristics with the month's cross-sectional median,
/// falling back to the latest earlier month with one, then to 0.
fn impute_medians(chars: &mut [f64], k: usize, month_rows: &[Range<usize>]) {
    for j in 0..k {
        let mut last_median: Option<f64> = None;
        for range in month_rows {
            if range.is_empty() {
                continue;
            }
            let present: Vec<f64> = range
                .clone()
                .map(|r| chars[r * k + j])
                .filter(|v| !v.is_nan())
                .collect();
            let fill = if present.is_empty() {
                last_median.unwrap_or(0.0)
            } else {
                let m = median(&present);
                last_median = Some(m);
                m
            };
            for r in range.clone() {
                if chars[r * k + j].is_nan() {
                    chars[r * k + j] = fill;
                }
            }
        }
    }
}

/// Map each characteristic, month by month, to `2 * rank / (n + 1) - 1`.
/// Ties share their midrank; a single-stock month maps to 0.
pub fn rank_normalize(chars: &mut [f64], k: usize, month_rows: &[Range<usize>]) {
    for range in month_rows {
        let n = range.len();
        if n == 0 {
            continue;
        }
        for j in 0..k {
            let vals: Vec<f64> = range.clone().map(|r| chars[r * k + j]).collect();
            let ranks = midranks(&vals);
            for (r, rank) in range.clone().zip(ranks) {
                chars[r * k + j] = 2.0 * rank / (n as f64 + 1.0) - 1.0;
            }
        }
    }
}

fn cross_sectional_means_raw(chars: &[f64], k: usize, range: Range<usize>) -> Vec<f64> {
    let n = range.len() as f64;
    let mut out = vec![0.0; k];
    for r in range {
        for (o, v) in out.iter_mut().zip(&chars[r * k..(r + 1) * k]) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= n);
    out
}

/// Mean characteristic vector over the stocks present in `month`.
pub fn cross_sectional_means(ds: &PanelDataset, month: usize) -> Result<Vec<f64>> {
    let range = ds
        .month_rows
        .get(month)
        .cloned()
        .ok_or_else(|| Error::Input(format!("month index {month} out of range")))?;
    if range.is_empty() {
        return Err(Error::Input(format!("no stocks in {}", ds.months[month])));
    }
    Ok(cross_sectional_means_raw(&ds.chars, ds.n_chars(), range))
}

type MacroParts = (Vec<String>, Vec<f64>, Vec<(f64, f64)>);

fn build_macro(
    raw: &RawPanel,
    cfg: &PreprocessConfig,
    months: &[Month],
    rows: &[PanelRow],
    month_rows: &[Range<usize>],
    month_split: &[Split],
) -> Result<MacroParts> {
    let by_month: HashMap<Month, &Vec<Option<f64>>> =
        raw.macro_rows.iter().map(|(m, v)| (*m, v)).collect();
    let mut names = raw.macro_names.clone();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    for (j, code) in raw.transforms.iter().enumerate() {
        let mut series = Vec::with_capacity(months.len());
        let mut last = f64::NAN;
        for m in months {
            let v = by_month
                .get(m)
                .ok_or_else(|| Error::Alignment(format!("macro table has no row for {m}")))?
                .get(j)
                .copied()
                .flatten();
            // Forward-fill gaps inside a series.
            if let Some(v) = v {
                last = v;
            }
            series.push(last);
        }
        columns.push(code.apply(&series));
    }
    if cfg.add_market_feature {
        names.push("mkt_excess_lag".into());
        let col = (0..months.len())
            .map(|m| {
                if m == 0 || month_rows[m - 1].is_empty() {
                    f64::NAN
                } else {
                    let r = month_rows[m - 1].clone();
                    let n = r.len() as f64;
                    rows[r].iter().map(|x| x.excess_return).sum::<f64>() / n
                }
            })
            .collect();
        columns.push(col);
    }

    let mut stats = Vec::with_capacity(columns.len());
    for col in &mut columns {
        let (mean, sd) = if cfg.standardize_macro {
            let train: Vec<f64> = col
                .iter()
                .zip(month_split)
                .filter(|(v, s)| **s == Split::Train && v.is_finite())
                .map(|(v, _)| *v)
                .collect();
            if train.len() < 2 {
                (0.0, 1.0)
            } else {
                let mean = train.iter().sum::<f64>() / train.len() as f64;
                let var = train.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
                    / (train.len() as f64 - 1.0);
                (mean, if var > 0.0 { var.sqrt() } else { 1.0 })
            }
        } else {
            (0.0, 1.0)
        };
        for v in col.iter_mut() {
            *v = if v.is_finite() { (*v - mean) / sd } else { 0.0 };
        }
        stats.push((mean, sd));
    }
    let j = columns.len();
    let mut values = vec![0.0; months.len() * j];
    for (c, col) in columns.iter().enumerate() {
        for (m, v) in col.iter().enumerate() {
            values[m * j + c] = *v;
        }
    }
    Ok((names, values, stats))
}
