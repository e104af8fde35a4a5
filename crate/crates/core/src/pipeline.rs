//! Run configuration, manifests and the batch commands behind the `snap`
//! binary. Every command reads and writes files under one output directory.

use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::benchmarks::{fit_ffn_panel, market_factor, select_linear, FactorModel, FactorSeries, FfnHyper, FfnModel, LinearModel, Penalty};
use crate::clustering::{
    elbow_detect, month_points, monthly_cluster_sharpes, sharpe_trend, write_assignments_csv, write_centroids_csv,
    write_sharpe_series_csv, ClusterConfig, SharpeTrend,
};
use crate::data::io::{load_panel, write_raw_panel, MACRO_FILE, PANEL_FILE, TRANSFORM_FILE};
use crate::data::synth::{synthesize, SyntheticSpec};
use crate::data::{Month, PanelDataset, PreprocessConfig, Split, SplitConfig};
use crate::error::{Error, Result};
use crate::importance::{importance_report, write_importance_csv, ImportanceConfig, ImportanceReport, Scope};
use crate::numerics::{derive_seed, Rng};
use crate::portfolio::{
    arbitrage_series, eval_report, exclude_microcap, long_short_series, sharpe, write_series_csv, EvalReport, PortfolioSeries,
    Weighting,
};
use crate::snap::{estimate_alpha, prediction_panel, train, Checkpoint, PredictionPanel, ReturnPredictor, SnapHyper, SnapModel};
use crate::stats::{mispricing_test, MispricingTest};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRUTH_FILE: &str = "truth.csv";
pub const FACTOR_FILE: &str = "factors.csv";
pub const ALPHA_PANEL_FILE: &str = "alpha_panel.csv";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory holding `panel.csv`, `macro.csv` and optionally
    /// `transforms.csv`; defaults to `<out>/data`.
    pub dir: Option<PathBuf>,
    /// Factor returns CSV; defaults to `<data dir>/factors.csv` when present.
    pub factors: Option<PathBuf>,
    /// Split boundaries; default to the ones implied by `[simulate]`.
    pub validate_start: Option<Month>,
    pub test_start: Option<Month>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub lasso: bool,
    pub ridge: bool,
    pub elastic_net: bool,
    pub elastic_mix: f64,
    pub ffn: bool,
    pub ffn_hyper: FfnHyper,
    /// Months of stock history before factor betas are estimated.
    pub factor_min_history: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            lasso: true,
            ridge: true,
            elastic_net: true,
            elastic_mix: 0.5,
            ffn: true,
            ffn_hyper: FfnHyper::default(),
            factor_min_history: 24,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    /// Drop stocks below this market-cap quantile each month.
    pub exclude_microcap: Option<f64>,
    /// Split used by `test-alpha` and therefore by `cluster`.
    pub alpha_split: Split,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            exclude_microcap: None,
            alpha_split: Split::Test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; copied into every component seed.
    pub seed: u64,
    #[serde(skip_serializing)]
    pub out: PathBuf,
    pub data: DataConfig,
    pub simulate: SyntheticSpec,
    pub snap: SnapHyper,
    pub benchmarks: BenchmarkConfig,
    pub evaluate: EvaluateConfig,
    pub cluster: ClusterConfig,
    pub importance: ImportanceConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("snap-out"),
            data: DataConfig::default(),
            simulate: SyntheticSpec::default(),
            snap: SnapHyper::default(),
            benchmarks: BenchmarkConfig::default(),
            evaluate: EvaluateConfig::default(),
            cluster: ClusterConfig::default(),
            importance: ImportanceConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Apply command-line overrides and spread the master seed.
    pub fn resolve(mut self, seed: Option<u64>, out: Option<PathBuf>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(o) = out {
            self.out = o;
        }
        self.simulate.seed = self.seed;
        self.snap.seed = self.seed;
        self.benchmarks.ffn_hyper.seed = self.seed;
        self.cluster.seed = self.seed;
        self.importance.seed = self.seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.simulate.validate()?;
        self.snap.validate()?;
        self.benchmarks.ffn_hyper.validate()?;
        if !(0.0..=1.0).contains(&self.benchmarks.elastic_mix) {
            return Err(Error::Config("benchmarks.elastic_mix must lie in [0, 1]".into()));
        }
        if let Some(q) = self.evaluate.exclude_microcap {
            if !(0.0..1.0).contains(&q) {
                return Err(Error::Config("evaluate.exclude_microcap must lie in [0, 1)".into()));
            }
        }
        Ok(())
    }

    /// SHA-256 of the resolved configuration, excluding the output path.
    pub fn hash(&self) -> Result<String> {
        let json = serde_json::to_string(self)?;
        Ok(hex::encode(Sha256::digest(json.as_bytes())))
    }

    pub fn split_config(&self) -> SplitConfig {
        let implied = self.simulate.split_config();
        SplitConfig {
            validate_start: self.data.validate_start.unwrap_or(implied.validate_start),
            test_start: self.data.test_start.unwrap_or(implied.test_start),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub config_sha256: String,
    pub config: RunConfig,
}

/// Wraps a JSON result with the hash of the configuration that produced it.
#[derive(Debug, Clone, Serialize)]
struct Stamped<'a, T: Serialize> {
    config_sha256: &'a str,
    #[serde(flatten)]
    body: &'a T,
}

/// Resolved configuration plus output locations for one command.
#[derive(Debug, Clone)]
pub struct Context {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub hash: String,
}

fn create_dir(path: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

impl Context {
    /// Validate the configuration, create the output directory and write the
    /// manifest.
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let out = create_dir(&cfg.out)?;
        let hash = cfg.hash()?;
        let manifest = Manifest {
            tool: "snap".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: cfg.seed,
            config_sha256: hash.clone(),
            config: cfg.clone(),
        };
        write_text(&out.join(MANIFEST_FILE), &(serde_json::to_string_pretty(&manifest)? + "\n"))?;
        Ok(Self { cfg, out, hash })
    }

    pub fn data_dir(&self) -> PathBuf {
        self.cfg.data.dir.clone().unwrap_or_else(|| self.out.join("data"))
    }

    pub fn models_dir(&self) -> PathBuf {
        self.out.join("models")
    }

    fn subdir(&self, name: &str) -> Result<PathBuf> {
        create_dir(&self.out.join(name))
    }

    fn write_json<T: Serialize>(&self, path: &Path, body: &T) -> Result<()> {
        let stamped = Stamped {
            config_sha256: &self.hash,
            body,
        };
        write_text(path, &(serde_json::to_string_pretty(&stamped)? + "\n"))
    }

    pub fn load_data(&self) -> Result<PanelDataset> {
        let dir = self.data_dir();
        let transforms = dir.join(TRANSFORM_FILE);
        let transforms = transforms.exists().then_some(transforms);
        let (ds, quality) = load_panel(
            &dir.join(PANEL_FILE),
            &dir.join(MACRO_FILE),
            transforms.as_deref(),
            &PreprocessConfig::new(self.cfg.split_config()),
        )?;
        info!("loaded {} rows over {} months from {}", ds.rows.len(), quality.months, dir.display());
        Ok(ds)
    }

    fn factor_path(&self) -> Option<PathBuf> {
        self.cfg
            .data
            .factors
            .clone()
            .or_else(|| Some(self.data_dir().join(FACTOR_FILE)).filter(|p| p.exists()))
    }

    pub fn snap_path(&self, masked: bool) -> PathBuf {
        self.models_dir().join(if masked { "snap_masked.json" } else { "snap.json" })
    }

    pub fn load_snap(&self, masked: bool) -> Result<SnapModel> {
        let path = self.snap_path(masked);
        Ok(Checkpoint::from_json(&read_text(&path)?)?.model)
    }
}

/// Generate a synthetic panel with its truth file and a one-factor market proxy.
pub fn cmd_simulate(ctx: &Context) -> Result<PathBuf> {
    let dir = create_dir(&ctx.data_dir())?;
    let panel = synthesize(&ctx.cfg.simulate)?;
    write_raw_panel(&panel.raw, &dir)?;
    panel.write_truth_csv(&dir.join(TRUTH_FILE))?;
    let ds = panel.dataset()?;
    market_factor(&ds).write_csv(&dir.join(FACTOR_FILE))?;
    #[derive(Serialize)]
    struct Oracle {
        noise_sd: f64,
        oracle_r2_train: f64,
        oracle_r2_validate: f64,
        oracle_r2_test: f64,
    }
    let oracle = Oracle {
        noise_sd: panel.noise_sd,
        oracle_r2_train: panel.oracle_r2(Split::Train),
        oracle_r2_validate: panel.oracle_r2(Split::Validate),
        oracle_r2_test: panel.oracle_r2(Split::Test),
    };
    ctx.write_json(&dir.join("oracle.json"), &oracle)?;
    info!("wrote synthetic panel to {}", dir.display());
    Ok(dir)
}

fn linear_benchmarks(cfg: &BenchmarkConfig) -> Vec<Penalty> {
    let mut out = Vec::new();
    if cfg.lasso {
        out.push(Penalty::L1);
    }
    if cfg.ridge {
        out.push(Penalty::L2);
    }
    if cfg.elastic_net {
        out.push(Penalty::Elastic(cfg.elastic_mix));
    }
    out
}

/// Train SNAP (or its masked variant) and, optionally, the enabled benchmarks.
pub fn cmd_train(ctx: &Context, masked: bool, benchmarks: bool) -> Result<PathBuf> {
    let data = ctx.load_data()?;
    let dir = create_dir(&ctx.models_dir())?;
    let (model, log) = train(&data, &ctx.cfg.snap, masked)?;
    let stem = if masked { "snap_masked" } else { "snap" };
    write_text(&ctx.snap_path(masked), &Checkpoint::new(&model, &data).to_json()?)?;
    log.write_csv(&dir.join(format!("{stem}_log.csv")))?;
    info!("{stem}: best epoch {}, validation loss {:.6e}", log.best_epoch, log.best_val_loss);

    if benchmarks {
        for pen in linear_benchmarks(&ctx.cfg.benchmarks) {
            let (m, path) = select_linear(&data, pen)?;
            write_text(&dir.join(format!("{}.json", pen.name())), &serde_json::to_string(&m)?)?;
            let mut w = csv::Writer::from_path(dir.join(format!("{}_path.csv", pen.name())))?;
            for p in &path {
                w.serialize(p)?;
            }
            w.flush().map_err(|e| Error::io(&dir, e))?;
        }
        if ctx.cfg.benchmarks.ffn {
            let (m, log) = fit_ffn_panel(&data, &ctx.cfg.benchmarks.ffn_hyper)?;
            write_text(&dir.join("ffn.json"), &serde_json::to_string(&m)?)?;
            log.write_csv(&dir.join("ffn_log.csv"))?;
        }
    }
    Ok(ctx.snap_path(masked))
}

/// Every model found under `models/`, plus the factor model when factor
/// returns are available.
fn available_models(ctx: &Context) -> Result<Vec<(String, Box<dyn ReturnPredictor>)>> {
    let dir = ctx.models_dir();
    let mut out: Vec<(String, Box<dyn ReturnPredictor>)> = vec![("snap".into(), Box::new(ctx.load_snap(false)?))];
    if ctx.snap_path(true).exists() {
        out.push(("snap_masked".into(), Box::new(ctx.load_snap(true)?)));
    }
    for name in ["lasso", "ridge", "elastic_net"] {
        let path = dir.join(format!("{name}.json"));
        if path.exists() {
            let m: LinearModel = serde_json::from_str(&read_text(&path)?)?;
            out.push((name.into(), Box::new(m)));
        }
    }
    let path = dir.join("ffn.json");
    if path.exists() {
        let m: FfnModel = serde_json::from_str(&read_text(&path)?)?;
        out.push(("ffn".into(), Box::new(m)));
    }
    if let Some(path) = ctx.factor_path() {
        out.push((
            "factor".into(),
            Box::new(FactorModel {
                factors: FactorSeries::read_csv(&path)?,
                min_history: ctx.cfg.benchmarks.factor_min_history,
            }),
        ));
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvaluateOutput {
    pub exclude_microcap: Option<f64>,
    pub report: EvalReport,
}

/// R², Sharpe ratios and decay for every available model and split.
pub fn cmd_evaluate(ctx: &Context, exclude: Option<f64>) -> Result<EvaluateOutput> {
    let exclude = exclude.or(ctx.cfg.evaluate.exclude_microcap);
    let data = ctx.load_data()?;
    let dir = ctx.subdir("eval")?;
    let mut panels = Vec::new();
    let mut series: Vec<(String, PortfolioSeries)> = Vec::new();
    for (name, model) in available_models(ctx)? {
        let mut per_split = Vec::new();
        let mut all_rows = Vec::new();
        for split in [Split::Train, Split::Validate, Split::Test] {
            let mut p = prediction_panel(model.as_ref(), &data, split)?;
            if let Some(q) = exclude {
                p = exclude_microcap(&p, q)?;
            }
            all_rows.extend(p.rows.iter().copied());
            per_split.push((split, p));
        }
        PredictionPanel::from_rows(all_rows).write_csv(&dir.join(format!("predictions_{name}.csv")))?;
        let test = &per_split[2].1;
        series.push((format!("{name}_ls_ew"), long_short_series(test, Weighting::Equal)?));
        if let Ok(vw) = long_short_series(test, Weighting::Value) {
            series.push((format!("{name}_ls_vw"), vw));
        }
        panels.push((name, per_split));
    }
    let report = eval_report(&panels)?;
    let named: Vec<(String, &PortfolioSeries)> = series.iter().map(|(n, s)| (n.clone(), s)).collect();
    write_series_csv(&named, &dir.join("portfolio_series.csv"))?;
    let output = EvaluateOutput {
        exclude_microcap: exclude,
        report,
    };
    ctx.write_json(&dir.join("report.json"), &output)?;
    Ok(output)
}

#[derive(Debug, Clone, Serialize)]
pub struct AlphaOutput {
    pub split: Split,
    pub test: MispricingTest,
    pub arbitrage_sharpe: Option<f64>,
}

/// Compare unmasked and masked residuals and store the alpha panel.
pub fn cmd_test_alpha(ctx: &Context, split: Option<Split>) -> Result<AlphaOutput> {
    let split = split.unwrap_or(ctx.cfg.evaluate.alpha_split);
    let data = ctx.load_data()?;
    let unmasked = ctx.load_snap(false)?;
    let masked = ctx.load_snap(true)?;
    let dir = ctx.subdir("alpha")?;
    let pu = prediction_panel(&unmasked, &data, split)?;
    let pm = prediction_panel(&masked, &data, split)?;
    let test = mispricing_test(&pu.residuals(), &pm.residuals())?;
    let alpha = estimate_alpha(&pu, &pm)?;
    alpha.write_csv(&dir.join(ALPHA_PANEL_FILE))?;
    let arb = arbitrage_series(&alpha)?;
    write_series_csv(&[("arbitrage".to_string(), &arb)], &dir.join("arbitrage_series.csv"))?;
    let output = AlphaOutput {
        split,
        test,
        arbitrage_sharpe: sharpe(&arb).ok(),
    };
    ctx.write_json(&dir.join("alpha_test.json"), &output)?;
    info!(
        "mispricing test on {}: {:?} p = {:.3e}",
        split.name(),
        output.test.path,
        output.test.test.p_value
    );
    Ok(output)
}

#[derive(Debug, Clone, Serialize)]
pub struct ElbowSummary {
    pub months: usize,
    /// `(k, months choosing k)`, ascending in `k`.
    pub chosen_counts: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ClusterOutput {
    pub k: usize,
    pub months: usize,
    pub trend: SharpeTrend,
    pub elbow: ElbowSummary,
}

const ELBOW_KEY: u64 = 0x454c;

/// Monthly k-means on the alpha panel, cluster Sharpe series and their trend.
pub fn cmd_cluster(ctx: &Context) -> Result<ClusterOutput> {
    let path = ctx.out.join("alpha").join(ALPHA_PANEL_FILE);
    if !path.exists() {
        return Err(Error::Config(format!("{} not found; run test-alpha first", path.display())));
    }
    let alpha = PredictionPanel::read_csv(&path)?;
    let dir = ctx.subdir("cluster")?;
    let months = month_points(&alpha)?;
    let cfg = &ctx.cfg.cluster;
    let (series, clusters) = monthly_cluster_sharpes(&months, cfg)?;
    write_assignments_csv(&clusters, &dir.join("assignments.csv"))?;
    write_centroids_csv(&clusters, &dir.join("centroids.csv"))?;
    write_sharpe_series_csv(&series, &dir.join("sharpe_series.csv"))?;
    let trend = sharpe_trend(&series)?;

    let curves = clusters
        .par_iter()
        .filter(|mc| mc.points.len() >= 4)
        .map(|mc| {
            let hi = 15.min(mc.points.len() - 1);
            let mut rng = Rng::new(derive_seed(cfg.seed, &[ELBOW_KEY, mc.month.ordinal() as u64]));
            elbow_detect(&mc.points, 2..=hi, &mut rng, cfg.n_init).map(|e| (mc.month, e))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut w = csv::Writer::from_path(dir.join("elbow.csv"))?;
    w.write_record(["month", "k", "inertia", "chosen"])?;
    let mut counts = std::collections::BTreeMap::new();
    for (month, e) in &curves {
        *counts.entry(e.chosen).or_insert(0usize) += 1;
        for (k, i) in e.ks.iter().zip(&e.inertia) {
            w.write_record([month.to_string(), k.to_string(), i.to_string(), (*k == e.chosen).to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io(&dir, e))?;

    let output = ClusterOutput {
        k: cfg.k,
        months: series.rows.len(),
        trend,
        elbow: ElbowSummary {
            months: curves.len(),
            chosen_counts: counts.into_iter().collect(),
        },
    };
    ctx.write_json(&dir.join("trend.json"), &output)?;
    Ok(output)
}

/// Perturbation importance of the unmasked SNAP model over both input scopes.
pub fn cmd_importance(ctx: &Context) -> Result<Vec<ImportanceReport>> {
    let data = ctx.load_data()?;
    let model = ctx.load_snap(false)?;
    let dir = ctx.subdir("importance")?;
    let reports = [Scope::Characteristic, Scope::Common]
        .iter()
        .map(|&s| importance_report(&model, &data, s, &ctx.cfg.importance))
        .collect::<Result<Vec<_>>>()?;
    let named: Vec<(String, &ImportanceReport)> = reports.iter().map(|r| ("snap".to_string(), r)).collect();
    write_importance_csv(&named, &dir.join("importance.csv"))?;
    Ok(reports)
}
