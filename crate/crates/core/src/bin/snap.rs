use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use snap_core::data::Split;
use snap_core::pipeline::{cmd_cluster, cmd_evaluate, cmd_importance, cmd_simulate, cmd_test_alpha, cmd_train, Context, RunConfig};
use snap_core::{Error, Result};

/// Three-branch LSTM asset-pricing model: simulate, train, evaluate, test
/// for mispricing, cluster arbitrage portfolios and rank feature importance.
#[derive(Debug, Parser)]
#[command(name = "snap", version, about)]
struct Cli {
    /// TOML run configuration; built-in defaults are used when absent.
    #[arg(long, global = true, env = "SNAP_CONFIG")]
    config: Option<PathBuf>,
    /// Master seed, overriding the configuration.
    #[arg(long, global = true, env = "SNAP_SEED")]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "SNAP_THREADS")]
    threads: Option<usize>,
    /// Output directory, overriding the configuration.
    #[arg(long, global = true, env = "SNAP_OUT")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Validate,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Validate => Split::Validate,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic panel, its truth file and a market factor.
    Simulate,
    /// Train SNAP on the panel.
    Train {
        /// Train the model without the alpha branch.
        #[arg(long)]
        masked: bool,
        /// Also fit the enabled benchmark models.
        #[arg(long)]
        benchmarks: bool,
    },
    /// Report R², Sharpe ratios and decay for every trained model.
    Evaluate {
        /// Drop stocks below this market-cap quantile each month.
        #[arg(long, value_name = "Q")]
        exclude_microcap: Option<f64>,
    },
    /// Test whether masked and unmasked residuals differ.
    TestAlpha {
        #[arg(long, value_enum)]
        split: Option<SplitArg>,
    },
    /// Cluster monthly (alpha, return) pairs and fit the Sharpe trend.
    Cluster,
    /// Perturbation importance of characteristics and common inputs.
    Importance,
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let cfg = match &cli.config {
        Some(path) => RunConfig::from_toml_file(path)?,
        None => RunConfig::default(),
    };
    let ctx = Context::new(cfg.resolve(cli.seed, cli.out))?;
    match cli.command {
        Command::Simulate => {
            let dir = cmd_simulate(&ctx)?;
            println!("panel written to {}", dir.display());
        }
        Command::Train { masked, benchmarks } => {
            let path = cmd_train(&ctx, masked, benchmarks)?;
            println!("checkpoint written to {}", path.display());
        }
        Command::Evaluate { exclude_microcap } => {
            let out = cmd_evaluate(&ctx, exclude_microcap)?;
            for m in &out.report.models {
                let test = m.splits.iter().find(|s| s.split == Split::Test);
                if let Some(s) = test {
                    println!(
                        "{:<12} test R2 {:>9.5}  SR {:>7}",
                        m.model,
                        s.r2_predictive,
                        s.sharpe_ew.map_or("n/a".into(), |v| format!("{v:.3}"))
                    );
                }
            }
        }
        Command::TestAlpha { split } => {
            let out = cmd_test_alpha(&ctx, split.map(Split::from))?;
            println!(
                "{:?} statistic {:.4} p-value {:.3e}",
                out.test.test.method, out.test.test.statistic, out.test.test.p_value
            );
        }
        Command::Cluster => {
            let out = cmd_cluster(&ctx)?;
            let s = &out.trend.spread;
            println!(
                "spread slope {:.4e} (p {:.3e}) over {} months",
                s.coefficients[1], s.p_values[1], out.months
            );
        }
        Command::Importance => {
            for rep in cmd_importance(&ctx)? {
                let top: Vec<&str> = rep.rows.iter().take(3).map(|r| r.name.as_str()).collect();
                println!("{} top features: {}", rep.scope.name(), top.join(", "));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("SNAP_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config_or_io() { 2 } else { 1 })
        }
    }
}
