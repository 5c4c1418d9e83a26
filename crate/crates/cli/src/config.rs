//! Flat `key = value` run configuration.

use std::path::PathBuf;

use anyhow::{anyhow, bail, Context, Result};
use polymodel::backtest::{Strategy, WaMode};
use polymodel::itf::{ModelConfig, Schedule, SelectionScore};
use polymodel::panel::SeriesId;
use polymodel::pipeline::PipelineConfig;
use polymodel::risk_features::FeatureConfig;
use polymodel::significance::ShuffleConfig;

pub const KEYS: &[&str] = &[
    "returns",
    "aum",
    "volume",
    "benchmark",
    "features",
    "checkpoint",
    "output",
    "seed",
    "window_len",
    "lambda",
    "shuffles",
    "score_threshold",
    "kappa",
    "gamma",
    "xi",
    "tau",
    "excess_benchmark",
    "lookback",
    "d_model",
    "n_heads",
    "n_layers",
    "ff_mult",
    "epochs",
    "batch_size",
    "learning_rate",
    "momentum",
    "lr_decay",
    "train_fraction",
    "strategies",
    "wa_mode",
    "selection",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub returns: Option<PathBuf>,
    pub aum: Option<PathBuf>,
    pub volume: Option<PathBuf>,
    pub benchmark: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub seed: u64,
    pub strategies: Vec<Strategy>,
    pub pipeline: PipelineConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            returns: None,
            aum: None,
            volume: None,
            benchmark: None,
            features: None,
            checkpoint: None,
            output: None,
            seed: 0,
            strategies: vec![Strategy::SA, Strategy::WA],
            pipeline: PipelineConfig::default(),
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| anyhow!("{key}: cannot parse '{value}': {e}"))
}

/// Splits text into `(line number, key, value)` entries; later entries win.
pub fn parse_entries(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("line {}: expected 'key = value'", i + 1))?;
        let key = k.trim();
        if !KEYS.contains(&key) {
            bail!("line {}: unknown key '{key}'", i + 1);
        }
        out.push((i + 1, key.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        let mut model = ModelConfig::default();
        let mut shuffle = ShuffleConfig::default();
        let mut features = FeatureConfig::default();
        let mut schedule = Schedule::default();
        for (line, key, v) in parse_entries(text)? {
            let v = v.as_str();
            let path = || Some(PathBuf::from(v));
            (|| -> Result<()> {
                match key.as_str() {
                    "returns" => c.returns = path(),
                    "aum" => c.aum = path(),
                    "volume" => c.volume = path(),
                    "benchmark" => c.benchmark = path(),
                    "features" => c.features = path(),
                    "checkpoint" => c.checkpoint = path(),
                    "output" => c.output = path(),
                    "seed" => c.seed = num(&key, v)?,
                    "window_len" => features.window_len = num(&key, v)?,
                    "lambda" => features.lambda = num(&key, v)?,
                    "shuffles" => shuffle.n_shuffles = num(&key, v)?,
                    "score_threshold" => shuffle.threshold_score = num(&key, v)?,
                    "kappa" => features.kappa = num(&key, v)?,
                    "gamma" => features.gamma = num(&key, v)?,
                    "xi" => features.xi = num(&key, v)?,
                    "tau" => c.pipeline.tau = num(&key, v)?,
                    "excess_benchmark" => features.benchmark = Some(SeriesId::benchmark(v)),
                    "lookback" => model.lookback = num(&key, v)?,
                    "d_model" => model.d_model = num(&key, v)?,
                    "n_heads" => model.n_heads = num(&key, v)?,
                    "n_layers" => model.n_layers = num(&key, v)?,
                    "ff_mult" => model.ff_mult = num(&key, v)?,
                    "epochs" => schedule.epochs = num(&key, v)?,
                    "batch_size" => schedule.batch_size = num(&key, v)?,
                    "learning_rate" => schedule.learning_rate = num(&key, v)?,
                    "momentum" => schedule.momentum = num(&key, v)?,
                    "lr_decay" => schedule.lr_decay = num(&key, v)?,
                    "train_fraction" => c.pipeline.train_fraction = num(&key, v)?,
                    "strategies" => {
                        c.strategies = v
                            .split(',')
                            .map(|s| s.parse::<Strategy>().map_err(|e| anyhow!("{e}")))
                            .collect::<Result<_>>()?;
                    }
                    "wa_mode" => {
                        c.pipeline.wa_mode = match v {
                            "proceeds" => WaMode::ProceedsOnly,
                            "full" => WaMode::FullBook,
                            _ => bail!("wa_mode must be 'proceeds' or 'full'"),
                        }
                    }
                    "selection" => {
                        c.pipeline.score = match v {
                            "up" => SelectionScore::Up,
                            "up_half_unchanged" => SelectionScore::UpPlusHalfUnchanged,
                            _ => bail!("selection must be 'up' or 'up_half_unchanged'"),
                        }
                    }
                    _ => unreachable!("key list checked"),
                }
                Ok(())
            })()
            .with_context(|| format!("line {line}"))?;
        }
        if model.n_heads == 0 || model.d_model % model.n_heads != 0 {
            bail!("d_model ({}) must be divisible by n_heads ({})", model.d_model, model.n_heads);
        }
        model.d_head = model.d_model / model.n_heads;
        if !(c.pipeline.train_fraction > 0.0 && c.pipeline.train_fraction < 1.0) {
            bail!("train_fraction must lie in (0, 1)");
        }
        if !(c.pipeline.tau > 0.0) {
            bail!("tau must be positive");
        }
        if c.strategies.is_empty() {
            bail!("at least one strategy is required");
        }
        c.pipeline.features = FeatureConfig { shuffle, ..features };
        c.pipeline.model = model;
        c.pipeline.schedule = schedule;
        c.apply_seed(c.seed);
        Ok(c)
    }

    /// The single seed feeds the shuffle, initialisation and batching streams.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.pipeline.features.shuffle.seed = seed;
        self.pipeline.schedule.seed = seed;
    }
}
