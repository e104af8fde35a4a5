//! K-means over monthly (alpha, return) pairs, elbow selection, and the
//! highest/median/lowest cluster Sharpe series with its time trend.

use std::path::Path;

use log::{debug, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Month;
use crate::error::{Error, Result};
use crate::numerics::{derive_seed, mean, median, sample_sd, sorted_quantile, Rng};
use crate::snap::PredictionPanel;
use crate::stats::{ols_robust, OlsFit};

pub type Point = [f64; 2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansResult {
    pub k: usize,
    pub centroids: Vec<Point>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    /// Inertia after each assignment step of the winning restart.
    pub history: Vec<f64>,
}

fn dist2(a: &Point, b: &Point) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

fn nearest(p: &Point, centroids: &[Point]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = dist2(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn distinct_count(points: &[Point]) -> usize {
    let mut keys: Vec<(u64, u64)> = points
        .iter()
        .map(|p| ((p[0] + 0.0).to_bits(), (p[1] + 0.0).to_bits()))
        .collect();
    keys.sort_unstable();
    keys.dedup();
    keys.len()
}

fn plus_plus_seed(points: &[Point], k: usize, rng: &mut Rng) -> Vec<Point> {
    let mut centroids = vec![points[rng.below(points.len())]];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.uniform() * total;
            let mut acc = 0.0;
            let mut pick = points.len() - 1;
            for (i, d) in d2.iter().enumerate() {
                acc += d;
                if acc > target && *d > 0.0 {
                    pick = i;
                    break;
                }
            }
            while d2[pick] == 0.0 {
                pick -= 1;
            }
            pick
        } else {
            rng.below(points.len())
        };
        let c = points[next];
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(dist2(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Lloyd iterations from the given centroids.
fn lloyd(points: &[Point], mut centroids: Vec<Point>, max_iter: usize) -> KMeansResult {
    let k = centroids.len();
    let mut assignments = vec![usize::MAX; points.len()];
    let mut history = Vec::new();
    for _ in 0..max_iter.max(1) {
        let mut changed = false;
        let mut dists = vec![0.0; points.len()];
        for (i, p) in points.iter().enumerate() {
            let (j, d) = nearest(p, &centroids);
            if assignments[i] != j {
                assignments[i] = j;
                changed = true;
            }
            dists[i] = d;
        }
        // Repair empty clusters with the point farthest from its centroid.
        let mut counts = vec![0usize; k];
        assignments.iter().for_each(|&a| counts[a] += 1);
        for j in 0..k {
            if counts[j] == 0 {
                let far = (0..points.len())
                    .filter(|&i| counts[assignments[i]] > 1)
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .expect("k <= distinct points");
                counts[assignments[far]] -= 1;
                assignments[far] = j;
                counts[j] = 1;
                dists[far] = 0.0;
                centroids[j] = points[far];
                changed = true;
            }
        }
        history.push(dists.iter().sum());
        if !changed {
            break;
        }
        let mut sums = vec![[0.0, 0.0]; k];
        for (p, &a) in points.iter().zip(&assignments) {
            sums[a][0] += p[0];
            sums[a][1] += p[1];
        }
        for j in 0..k {
            centroids[j] = [sums[j][0] / counts[j] as f64, sums[j][1] / counts[j] as f64];
        }
    }
    let inertia = points
        .iter()
        .zip(&assignments)
        .map(|(p, &a)| dist2(p, &centroids[a]))
        .sum();
    KMeansResult {
        k,
        centroids,
        assignments,
        inertia,
        history,
    }
}

/// Single-point transfers that lower inertia, alternated with Lloyd passes
/// until neither moves a point.
fn refine(points: &[Point], mut fit: KMeansResult, max_iter: usize) -> KMeansResult {
    let k = fit.k;
    for _ in 0..max_iter.max(1) {
        let mut counts = vec![0usize; k];
        fit.assignments.iter().for_each(|&a| counts[a] += 1);
        let mut moved = false;
        for (i, p) in points.iter().enumerate() {
            let a = fit.assignments[i];
            if counts[a] < 2 {
                continue;
            }
            let na = counts[a] as f64;
            let cost_out = na / (na - 1.0) * dist2(p, &fit.centroids[a]);
            let mut best = (a, 0.0);
            for b in (0..k).filter(|&b| b != a) {
                let nb = counts[b] as f64;
                let delta = nb / (nb + 1.0) * dist2(p, &fit.centroids[b]) - cost_out;
                if delta < best.1 - 1e-12 * cost_out.max(f64::MIN_POSITIVE) {
                    best = (b, delta);
                }
            }
            let b = best.0;
            if b == a {
                continue;
            }
            let nb = counts[b] as f64;
            for d in 0..2 {
                fit.centroids[a][d] = (na * fit.centroids[a][d] - p[d]) / (na - 1.0);
                fit.centroids[b][d] = (nb * fit.centroids[b][d] + p[d]) / (nb + 1.0);
            }
            counts[a] -= 1;
            counts[b] += 1;
            fit.assignments[i] = b;
            moved = true;
        }
        if !moved {
            break;
        }
        let next = lloyd(points, fit.centroids.clone(), max_iter);
        let mut history = std::mem::take(&mut fit.history);
        history.extend(next.history.iter().copied());
        fit = KMeansResult { history, ..next };
    }
    fit
}

/// K-means++ seeding, Lloyd iterations and `n_init` restarts; the restart
/// with the lowest inertia wins (earliest on ties).
pub fn kmeans(points: &[Point], k: usize, rng: &mut Rng, max_iter: usize, n_init: usize) -> Result<KMeansResult> {
    if k == 0 {
        return Err(Error::Input("k must be positive".into()));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Input("points must be finite".into()));
    }
    let distinct = distinct_count(points);
    if k > distinct {
        return Err(Error::Input(format!("k = {k} exceeds {distinct} distinct points")));
    }
    let mut best: Option<KMeansResult> = None;
    for _ in 0..n_init.max(1) {
        let fit = refine(points, lloyd(points, plus_plus_seed(points, k, rng), max_iter), max_iter);
        if best.as_ref().is_none_or(|b| fit.inertia < b.inertia) {
            best = Some(fit);
        }
    }
    Ok(best.unwrap())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElbowResult {
    pub ks: Vec<usize>,
    pub inertia: Vec<f64>,
    pub chosen: usize,
}

/// Pick the interior `k` with the largest second difference of the log
/// inertia curve, i.e. where the relative improvement drops most sharply.
/// Ties go to the smallest `k`.
pub fn elbow_from_curve(ks: &[usize], inertia: &[f64]) -> Result<usize> {
    if ks.len() < 3 || ks.len() != inertia.len() {
        return Err(Error::Input("elbow needs at least three points on the curve".into()));
    }
    if inertia.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::Input("inertia must be finite and non-negative".into()));
    }
    let floor = (inertia[0] * 1e-12).max(f64::MIN_POSITIVE);
    let log: Vec<f64> = inertia.iter().map(|v| v.max(floor).ln()).collect();
    let mut best = (ks[1], f64::NEG_INFINITY);
    for i in 1..ks.len() - 1 {
        let d2 = log[i - 1] - 2.0 * log[i] + log[i + 1];
        if d2 > best.1 {
            best = (ks[i], d2);
        }
    }
    Ok(best.0)
}

/// Inertia curve over `ks` and its elbow. Each `k` also starts one run from
/// the `k - 1` solution plus the worst-served point, which keeps the curve
/// non-increasing.
pub fn elbow_detect(points: &[Point], ks: std::ops::RangeInclusive<usize>, rng: &mut Rng, n_init: usize) -> Result<ElbowResult> {
    let ks: Vec<usize> = ks.collect();
    let mut inertia = Vec::with_capacity(ks.len());
    let mut prev: Option<KMeansResult> = None;
    for &k in &ks {
        let mut fit = kmeans(points, k, rng, 300, n_init)?;
        if let Some(p) = prev.as_ref().filter(|p| p.k + 1 == k) {
            let far = points
                .iter()
                .map(|q| nearest(q, &p.centroids).1)
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
                .map(|(i, _)| i)
                .unwrap();
            let mut start = p.centroids.clone();
            start.push(points[far]);
            let warm = lloyd(points, start, 300);
            if warm.inertia < fit.inertia {
                fit = warm;
            }
        }
        inertia.push(fit.inertia);
        prev = Some(fit);
    }
    let chosen = elbow_from_curve(&ks, &inertia)?;
    Ok(ElbowResult { ks, inertia, chosen })
}

/// Stocks of one formation month with their alpha estimates and next-month returns.
#[derive(Debug, Clone, PartialEq)]
pub struct MonthPoints {
    pub month: Month,
    pub stock_ids: Vec<u64>,
    pub alpha: Vec<f64>,
    pub realized: Vec<f64>,
}

/// Group an alpha-carrying prediction panel by month.
pub fn month_points(panel: &PredictionPanel) -> Result<Vec<MonthPoints>> {
    panel
        .by_month()
        .into_iter()
        .map(|(month, rows)| {
            let alpha = rows
                .iter()
                .map(|r| r.alpha.ok_or_else(|| Error::Input(format!("missing alpha in {month}"))))
                .collect::<Result<_>>()?;
            Ok(MonthPoints {
                month,
                stock_ids: rows.iter().map(|r| r.stock_id).collect(),
                alpha,
                realized: rows.iter().map(|r| r.realized).collect(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterConfig {
    pub k: usize,
    /// Standardize both coordinates within each month before clustering.
    pub standardize: bool,
    /// Drop points further than this many IQRs from the monthly median.
    pub outlier_iqr: Option<f64>,
    pub n_init: usize,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            k: 5,
            standardize: true,
            outlier_iqr: Some(8.0),
            n_init: 10,
            max_iter: 300,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub cluster: usize,
    pub size: usize,
    /// Centroid in the clustering space.
    pub centroid: Point,
    /// Cross-sectional mean / SD of member returns; `None` if undefined.
    pub sharpe: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonthClusters {
    pub month: Month,
    pub stock_ids: Vec<u64>,
    pub points: Vec<Point>,
    pub assignments: Vec<usize>,
    pub clusters: Vec<ClusterSummary>,
    pub dropped_outliers: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterSharpeRow {
    pub month: Month,
    pub highest: f64,
    pub median: f64,
    pub lowest: f64,
    pub highest_size: usize,
    pub median_size: usize,
    pub lowest_size: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ClusterSharpeSeries {
    pub rows: Vec<ClusterSharpeRow>,
}

fn outlier_mask(xs: &[f64], width: f64) -> Vec<bool> {
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = sorted_quantile(&sorted, 0.75) - sorted_quantile(&sorted, 0.25);
    let med = median(xs);
    xs.iter()
        .map(|v| iqr > 0.0 && (v - med).abs() > width * iqr)
        .collect()
}

fn standardize(xs: &[f64]) -> Vec<f64> {
    let m = mean(xs);
    let sd = if xs.len() > 1 { sample_sd(xs) } else { 0.0 };
    xs.iter()
        .map(|v| if sd > 0.0 { (v - m) / sd } else { v - m })
        .collect()
}

pub fn cluster_month(mp: &MonthPoints, cfg: &ClusterConfig) -> Result<MonthClusters> {
    let n = mp.alpha.len();
    if mp.realized.len() != n || mp.stock_ids.len() != n {
        return Err(Error::Shape(format!("{}: ragged month data", mp.month)));
    }
    let keep: Vec<bool> = match cfg.outlier_iqr {
        Some(w) => {
            let a = outlier_mask(&mp.alpha, w);
            let r = outlier_mask(&mp.realized, w);
            a.iter().zip(&r).map(|(x, y)| !(x | y)).collect()
        }
        None => vec![true; n],
    };
    let idx: Vec<usize> = (0..n).filter(|&i| keep[i]).collect();
    let dropped = n - idx.len();
    if dropped > 0 {
        debug!("{}: dropped {dropped} outlying points", mp.month);
    }
    if idx.len() < cfg.k {
        return Err(Error::Input(format!(
            "{}: {} points for k = {}",
            mp.month,
            idx.len(),
            cfg.k
        )));
    }
    let alpha: Vec<f64> = idx.iter().map(|&i| mp.alpha[i]).collect();
    let realized: Vec<f64> = idx.iter().map(|&i| mp.realized[i]).collect();
    let (xa, xr) = if cfg.standardize {
        (standardize(&alpha), standardize(&realized))
    } else {
        (alpha.clone(), realized.clone())
    };
    let points: Vec<Point> = xa.iter().zip(&xr).map(|(a, r)| [*a, *r]).collect();
    let mut rng = Rng::new(derive_seed(cfg.seed, &[mp.month.ordinal() as u64]));
    let fit = kmeans(&points, cfg.k, &mut rng, cfg.max_iter, cfg.n_init)?;

    let clusters = (0..cfg.k)
        .map(|c| {
            let members: Vec<f64> = fit
                .assignments
                .iter()
                .zip(&realized)
                .filter(|(a, _)| **a == c)
                .map(|(_, r)| *r)
                .collect();
            let sharpe = if members.len() < 2 {
                debug!("{}: cluster {c} has {} member(s); Sharpe undefined", mp.month, members.len());
                None
            } else {
                let sd = sample_sd(&members);
                if sd > 0.0 {
                    Some(mean(&members) / sd)
                } else {
                    debug!("{}: cluster {c} has constant returns; Sharpe undefined", mp.month);
                    None
                }
            };
            ClusterSummary {
                cluster: c,
                size: members.len(),
                centroid: fit.centroids[c],
                sharpe,
            }
        })
        .collect();
    Ok(MonthClusters {
        month: mp.month,
        stock_ids: idx.iter().map(|&i| mp.stock_ids[i]).collect(),
        points,
        assignments: fit.assignments,
        clusters,
        dropped_outliers: dropped,
    })
}

/// Highest, median (lower-middle rank) and lowest Sharpe among clusters with
/// a defined Sharpe ratio.
pub fn rank_clusters(mc: &MonthClusters) -> Option<ClusterSharpeRow> {
    let mut valid: Vec<(f64, usize)> = mc
        .clusters
        .iter()
        .filter_map(|c| c.sharpe.map(|s| (s, c.size)))
        .collect();
    if valid.is_empty() {
        warn!("{}: no cluster has a defined Sharpe ratio", mc.month);
        return None;
    }
    valid.sort_by(|a, b| a.0.total_cmp(&b.0));
    let lo = valid[0];
    let mid = valid[(valid.len() - 1) / 2];
    let hi = valid[valid.len() - 1];
    Some(ClusterSharpeRow {
        month: mc.month,
        highest: hi.0,
        median: mid.0,
        lowest: lo.0,
        highest_size: hi.1,
        median_size: mid.1,
        lowest_size: lo.1,
    })
}

/// Cluster every month independently (each with its own child seed).
pub fn monthly_clusters(months: &[MonthPoints], cfg: &ClusterConfig) -> Result<Vec<MonthClusters>> {
    months.par_iter().map(|mp| cluster_month(mp, cfg)).collect()
}

pub fn monthly_cluster_sharpes(months: &[MonthPoints], cfg: &ClusterConfig) -> Result<(ClusterSharpeSeries, Vec<MonthClusters>)> {
    let clusters = monthly_clusters(months, cfg)?;
    let rows = clusters.iter().filter_map(rank_clusters).collect();
    Ok((ClusterSharpeSeries { rows }, clusters))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharpeTrend {
    pub highest: OlsFit,
    pub median: OlsFit,
    pub lowest: OlsFit,
    /// Highest minus lowest.
    pub spread: OlsFit,
}

/// OLS of each ranked series on a `0, 1, 2, ...` month index.
pub fn trend(values: &[f64]) -> Result<OlsFit> {
    if values.len() < 3 {
        return Err(Error::Input("trend regression needs at least three months".into()));
    }
    let x: Vec<Vec<f64>> = (0..values.len()).map(|t| vec![1.0, t as f64]).collect();
    ols_robust(values, &x)
}

pub fn sharpe_trend(series: &ClusterSharpeSeries) -> Result<SharpeTrend> {
    let col = |f: fn(&ClusterSharpeRow) -> f64| series.rows.iter().map(f).collect::<Vec<f64>>();
    Ok(SharpeTrend {
        highest: trend(&col(|r| r.highest))?,
        median: trend(&col(|r| r.median))?,
        lowest: trend(&col(|r| r.lowest))?,
        spread: trend(&col(|r| r.highest - r.lowest))?,
    })
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

/// Per-point assignments: `month, stock_id, x_alpha, x_return, cluster`.
pub fn write_assignments_csv(clusters: &[MonthClusters], path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["month", "stock_id", "x_alpha", "x_return", "cluster"])?;
    for mc in clusters {
        for ((id, p), a) in mc.stock_ids.iter().zip(&mc.points).zip(&mc.assignments) {
            w.write_record([
                mc.month.to_string(),
                id.to_string(),
                p[0].to_string(),
                p[1].to_string(),
                a.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Per-cluster centroids, sizes and Sharpe ratios.
pub fn write_centroids_csv(clusters: &[MonthClusters], path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["month", "cluster", "x_alpha", "x_return", "size", "sharpe"])?;
    for mc in clusters {
        for c in &mc.clusters {
            w.write_record([
                mc.month.to_string(),
                c.cluster.to_string(),
                c.centroid[0].to_string(),
                c.centroid[1].to_string(),
                c.size.to_string(),
                c.sharpe.map(|s| s.to_string()).unwrap_or_default(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Tidy `(month, series_name, value)` rows for highest/median/lowest.
pub fn write_sharpe_series_csv(series: &ClusterSharpeSeries, path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["month", "series_name", "value"])?;
    for r in &series.rows {
        for (name, v) in [("highest", r.highest), ("median", r.median), ("lowest", r.lowest)] {
            w.write_record([r.month.to_string(), name.to_string(), v.to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
