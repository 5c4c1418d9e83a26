//! `polymodel` command-line driver.

mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use polymodel::backtest::{self, BacktestError, Strategy};
use polymodel::itf::{self, ItfError};
use polymodel::panel::{self, ReturnPanel};
use polymodel::pipeline::{self, PipelineError};
use polymodel::risk_features::{self, FeatureFrame};
use polymodel::significance;
use polymodel::synth::{self, SynthSpec};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "polymodel", version, about = "Factor-regression features, trend classification and fund-selection backtests")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Configuration file (`key = value`; a JSON spec for `synth`).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Top-level seed; overrides the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (results do not depend on this).
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic panel with planted factor relationships.
    Synth(Common),
    /// Compute feature frames and significance scores.
    Features(Common),
    /// Train the trend classifier.
    Train(Common),
    /// Backtest SA/WA selection from a trained checkpoint.
    Backtest {
        #[command(flatten)]
        common: Common,
        /// Checkpoint file; overrides the configuration.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Summarise a backtest output directory.
    Report(Common),
}

/// Failure classes mapped to exit codes 2 and 3.
enum Failure {
    Input(anyhow::Error),
    Numerical(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Input(e.into())
    }
}

fn pipeline_failure(e: PipelineError) -> Failure {
    let numerical = matches!(
        e,
        PipelineError::Model(ItfError::NumericalError(_) | ItfError::Diverged { .. })
            | PipelineError::Backtest(BacktestError::Conservation { .. } | BacktestError::BadCurve)
    );
    if numerical {
        Failure::Numerical(e.into())
    } else {
        Failure::Input(e.into())
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = run(cli);
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Numerical(e)) => {
            eprintln!("numerical failure: {e:#}");
            ExitCode::from(3)
        }
    }
}

fn run(cli: Cli) -> CmdResult {
    let common = match &cli.command {
        Command::Synth(c) | Command::Features(c) | Command::Train(c) | Command::Report(c) => c,
        Command::Backtest { common, .. } => common,
    };
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(anyhow!("--threads must be at least 1").into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring worker threads")?;
    }
    match &cli.command {
        Command::Synth(c) => cmd_synth(c),
        Command::Features(c) => cmd_features(c),
        Command::Train(c) => cmd_train(c),
        Command::Backtest { common, checkpoint } => cmd_backtest(common, checkpoint.as_deref()),
        Command::Report(c) => cmd_report(c),
    }
}

/// Parsed configuration and the output directory it was echoed into.
struct Loaded {
    config: RunConfig,
    out: PathBuf,
}

fn load_config(c: &Common) -> Result<Loaded, Failure> {
    let path = c.config.as_ref().ok_or_else(|| anyhow!("--config is required"))?;
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut config = RunConfig::parse(&text).with_context(|| format!("in {}", path.display()))?;
    let mut echo = text.clone();
    if !echo.is_empty() && !echo.ends_with('\n') {
        echo.push('\n');
    }
    if let Some(seed) = c.seed {
        config.apply_seed(seed);
        echo.push_str(&format!("seed = {seed} # command line\n"));
    }
    if let Some(out) = &c.out {
        echo.push_str(&format!("output = {} # command line\n", out.display()));
    }
    let out = c
        .out
        .clone()
        .or_else(|| config.output.clone())
        .ok_or_else(|| anyhow!("no output directory: pass --out or set 'output'"))?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.txt"), &echo).context("writing config echo")?;
    Ok(Loaded { config, out })
}

fn load_panel(config: &RunConfig) -> Result<ReturnPanel, Failure> {
    let returns = config.returns.as_ref().ok_or_else(|| anyhow!("'returns' file is not set"))?;
    let mut raw = panel::read_returns_csv(returns)?;
    if let Some(b) = &config.benchmark {
        raw.extend(panel::read_returns_csv(b)?);
    }
    let mut p = ReturnPanel::align(raw)?;
    if let Some(a) = &config.aum {
        p = p.with_aum(panel::read_aum_csv(a)?)?;
    }
    if let Some(v) = &config.volume {
        p = p.with_volume(panel::read_volume_csv(v)?)?;
    }
    if p.is_empty() {
        return Err(anyhow!("{}: no observations", returns.display()).into());
    }
    Ok(p)
}

fn frames_for(config: &RunConfig, panel: &ReturnPanel) -> Result<Vec<FeatureFrame>, Failure> {
    match &config.features {
        Some(path) => Ok(risk_features::read_features_csv(path)?),
        None => Ok(pipeline::compute_features(panel, &config.pipeline.features)
            .map_err(pipeline_failure)?
            .frames),
    }
}

fn cmd_synth(c: &Common) -> CmdResult {
    let (mut spec, echo) = match &c.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            (SynthSpec::from_json(&text)?, text)
        }
        None => {
            let spec = SynthSpec::default();
            let text = spec.to_json();
            (spec, text)
        }
    };
    if let Some(seed) = c.seed {
        spec.seed = seed;
    }
    let out = c.out.clone().ok_or_else(|| anyhow!("--out is required"))?;
    let (panel, truth) = synth::generate(&spec)?;
    synth::write_outputs(&out, &panel, &truth)?;
    fs::write(out.join("config.txt"), echo)?;
    fs::write(out.join("spec.json"), spec.to_json() + "\n")?;
    println!(
        "wrote {} months, {} funds, {} factors to {}",
        spec.n_months,
        spec.n_funds,
        spec.n_factors,
        out.display()
    );
    Ok(())
}

fn cmd_features(c: &Common) -> CmdResult {
    let Loaded { config, out, .. } = load_config(c)?;
    let panel = load_panel(&config)?;
    let run = pipeline::compute_features(&panel, &config.pipeline.features).map_err(pipeline_failure)?;
    risk_features::write_features_csv(&run.frames, &out.join("features.csv"))?;
    significance::write_scores_csv(&run.scores, &out.join("scores.csv"))?;
    let valid = run.frames.iter().filter(|f| f.valid).count();
    println!("{} frames ({valid} valid) written to {}", run.frames.len(), out.display());
    Ok(())
}

fn cmd_train(c: &Common) -> CmdResult {
    let Loaded { config, out, .. } = load_config(c)?;
    let panel = load_panel(&config)?;
    let frames = frames_for(&config, &panel)?;
    let p = &config.pipeline;
    let samples = pipeline::build_samples(&panel, &frames, p.model.lookback, p.tau);
    if samples.is_empty() {
        return Err(anyhow!("no labelled samples: need {} consecutive valid frames", p.model.lookback).into());
    }
    let boundary = pipeline::split_month(&samples, p.train_fraction)
        .ok_or_else(|| anyhow!("need samples from at least two months"))?;
    let (train, valid) = pipeline::chronological_split(&samples, boundary).map_err(pipeline_failure)?;
    let trained = pipeline::train_model(&train, &valid, p.model, &p.schedule).map_err(pipeline_failure)?;
    itf::save_checkpoint(&trained.model, &out.join("model.ckpt"))?;
    let mut buf = Vec::new();
    itf::write_loss_trace(&trained.trace, &mut buf)?;
    fs::write(out.join("loss.csv"), buf)?;
    let last = trained.trace.iter().rev().find(|e| e.split == itf::Split::Train);
    println!(
        "trained on {} samples (labels before {boundary}), {} held out; final train loss {:.4}",
        train.len(),
        valid.len(),
        last.map_or(f64::NAN, |e| e.loss)
    );
    Ok(())
}

fn cmd_backtest(c: &Common, checkpoint: Option<&Path>) -> CmdResult {
    let Loaded { config, out, .. } = load_config(c)?;
    let ckpt = checkpoint
        .map(Path::to_path_buf)
        .or_else(|| config.checkpoint.clone())
        .ok_or_else(|| anyhow!("no checkpoint: pass --checkpoint or set 'checkpoint'"))?;
    if !ckpt.is_file() {
        return Err(anyhow!("checkpoint {} not found", ckpt.display()).into());
    }
    let model = itf::load_checkpoint(&ckpt)?;
    let panel = load_panel(&config)?;
    let frames = frames_for(&config, &panel)?;
    let p = &config.pipeline;
    let samples = pipeline::build_samples(&panel, &frames, model.params.config.lookback, p.tau);
    let start = pipeline::split_month(&samples, p.train_fraction)
        .ok_or_else(|| anyhow!("not enough labelled months to place the evaluation period"))?;
    let end = *panel.calendar().last().expect("non-empty panel");
    let forecasts = pipeline::forecasts_by_rebalance(&frames, &model, start, end).map_err(pipeline_failure)?;
    let suite = pipeline::run_suite(&panel, &forecasts, p, &config.strategies, start, end).map_err(pipeline_failure)?;
    let reports = suite.reports();
    backtest::write_curve_csv(&reports, &out.join("curve.csv"))?;
    backtest::write_stats_json(&reports, &out.join("stats.json"))?;
    let logs: Vec<(Strategy, &[backtest::TradeLogEntry])> =
        suite.runs.iter().map(|(s, r)| (*s, r.trades.as_slice())).collect();
    backtest::write_trades_csv(&logs, &out.join("trades.csv"))?;
    for r in &reports {
        println!("{:<8} cumulative {:+.4}", r.name, r.cumulative_return());
    }
    Ok(())
}

const SUMMARY_COLUMNS: [&str; 6] = [
    "annualized_return",
    "annualized_volatility",
    "sharpe",
    "max_drawdown",
    "cumulative_return",
    "months",
];

fn cmd_report(c: &Common) -> CmdResult {
    let dir = c.out.clone().ok_or_else(|| anyhow!("--out DIR (a backtest output directory) is required"))?;
    let curve_path = dir.join("curve.csv");
    let stats_path = dir.join("stats.json");
    if !curve_path.is_file() || !stats_path.is_file() {
        bail_input(format!("{} has no curve.csv/stats.json", dir.display()))?;
    }
    let stats: BTreeMap<String, serde_json::Value> =
        serde_json::from_str(&fs::read_to_string(&stats_path)?).context("parsing stats.json")?;
    let text = fs::read_to_string(&curve_path)?;
    let mut lines = text.lines();
    if lines.next() != Some("month,strategy,value") {
        bail_input("curve.csv has an unexpected header".into())?;
    }
    let mut order: Vec<String> = Vec::new();
    let mut wide: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
    for (i, line) in lines.enumerate() {
        let parts: Vec<&str> = line.split(',').collect();
        let [month, name, value] = parts.as_slice() else {
            return Err(anyhow!("curve.csv line {}: expected three fields", i + 2).into());
        };
        if !order.iter().any(|o| o == name) {
            order.push(name.to_string());
        }
        wide.entry(month.to_string())
            .or_default()
            .insert(name.to_string(), value.to_string());
    }
    if order.is_empty() {
        bail_input("curve.csv holds no rows".into())?;
    }
    let mut summary = format!("strategy,{}\n", SUMMARY_COLUMNS.join(","));
    for name in &order {
        let s = stats
            .get(name)
            .ok_or_else(|| anyhow!("stats.json lacks '{name}'"))?;
        let field = |k: &str| match s.get(k) {
            Some(serde_json::Value::Number(n)) => n.to_string(),
            _ => String::new(),
        };
        let months = wide.values().filter(|m| m.contains_key(name)).count().saturating_sub(1);
        summary.push_str(&format!(
            "{name},{},{},{},{},{},{months}\n",
            field("annualized_return"),
            field("annualized_volatility"),
            field("sharpe"),
            field("max_drawdown"),
            field("cumulative_return")
        ));
    }
    fs::write(dir.join("summary.csv"), &summary)?;
    let mut table = format!("month,{}\n", order.join(","));
    for (month, row) in &wide {
        let cells: Vec<&str> = order.iter().map(|n| row.get(n).map_or("", String::as_str)).collect();
        table.push_str(&format!("{month},{}\n", cells.join(",")));
    }
    fs::write(dir.join("curve_wide.csv"), table)?;
    print!("{summary}");
    Ok(())
}

fn bail_input(msg: String) -> CmdResult {
    Err(Failure::Input(anyhow!(msg)))
}
