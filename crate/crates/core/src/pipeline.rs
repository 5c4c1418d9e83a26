//! End-to-end wiring: panel → feature frames → labelled samples → trained
//! classifier → forecasts → backtests.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backtest::{self, BacktestConfig, BacktestError, BacktestRun, Strategy, WaMode};
use crate::itf::{
    self, index_frames, label_trend, lookback_tensor, EpochStats, ItfError, ModelConfig, ModelParams,
    Normalizer, SampleTensor, Schedule, SelectionScore, TrainedModel, TrendForecast, DEFAULT_TAU,
};
use crate::panel::{MonthIndex, ReturnPanel, SeriesId, SeriesKind};
use crate::risk_features::{build_feature_frames, FeatureConfig, FeatureError, FeatureFrame, FeatureRun};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Model(#[from] ItfError),
    #[error(transparent)]
    Backtest(#[from] BacktestError),
    #[error("no labelled samples could be built")]
    NoSamples,
    #[error("training split is empty: {0}")]
    EmptySplit(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub features: FeatureConfig,
    pub model: ModelConfig,
    pub schedule: Schedule,
    pub tau: f64,
    /// Share of label months (oldest first) used for training.
    pub train_fraction: f64,
    pub wa_mode: WaMode,
    pub score: SelectionScore,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            features: FeatureConfig::default(),
            model: ModelConfig::default(),
            schedule: Schedule::default(),
            tau: DEFAULT_TAU,
            train_fraction: 0.6,
            wa_mode: WaMode::default(),
            score: SelectionScore::default(),
        }
    }
}

impl PipelineConfig {
    pub fn backtest_config(&self, strategy: Strategy) -> BacktestConfig {
        BacktestConfig {
            strategy,
            wa_mode: self.wa_mode,
            score: self.score,
        }
    }
}

/// Feature frames for every fund and calendar month of the panel.
pub fn compute_features(panel: &ReturnPanel, config: &FeatureConfig) -> Result<FeatureRun, PipelineError> {
    let funds = panel.ids_of_kind(SeriesKind::Fund);
    let factors = panel.ids_of_kind(SeriesKind::Factor);
    Ok(build_feature_frames(panel, &funds, &factors, panel.calendar(), config)?)
}

/// A classifier input built from data through `info_month`, labelled by the
/// return of `label_month` (the following month).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub fund: SeriesId,
    pub info_month: MonthIndex,
    pub label_month: MonthIndex,
    pub sample: SampleTensor,
}

/// One sample per (fund, month) with a full lookback of valid frames and a
/// next-month return.
pub fn build_samples(panel: &ReturnPanel, frames: &[FeatureFrame], lookback: usize, tau: f64) -> Vec<LabeledSample> {
    let index = index_frames(frames);
    let mut out = Vec::new();
    for &(fund, month) in index.keys() {
        let label_month = month.succ();
        let Some(next) = panel.value(fund, label_month) else {
            continue;
        };
        if let Some(values) = lookback_tensor(&index, fund, month, lookback) {
            out.push(LabeledSample {
                fund: fund.clone(),
                info_month: month,
                label_month,
                sample: SampleTensor {
                    values,
                    label: label_trend(next, tau),
                },
            });
        }
    }
    out
}

/// First label month of the evaluation split.
pub fn split_month(samples: &[LabeledSample], train_fraction: f64) -> Option<MonthIndex> {
    let months: Vec<MonthIndex> = samples
        .iter()
        .map(|s| s.label_month)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if months.len() < 2 {
        return None;
    }
    let k = ((months.len() as f64 * train_fraction).round() as usize).clamp(1, months.len() - 1);
    Some(months[k])
}

/// Training samples have label months strictly before `boundary`; the rest evaluate.
pub fn chronological_split(
    samples: &[LabeledSample],
    boundary: MonthIndex,
) -> Result<(Vec<LabeledSample>, Vec<LabeledSample>), PipelineError> {
    let (train, eval): (Vec<_>, Vec<_>) = samples.iter().cloned().partition(|s| s.label_month < boundary);
    let train_months: Vec<MonthIndex> = train.iter().map(|s| s.label_month).collect();
    let eval_months: Vec<MonthIndex> = eval.iter().map(|s| s.label_month).collect();
    itf::assert_chronological(&train_months, &eval_months)?;
    Ok((train, eval))
}

#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub model: TrainedModel,
    pub trace: Vec<EpochStats>,
}

/// Fits the normalizer on `train`, initialises from `schedule.seed` and trains.
pub fn train_model(
    train: &[LabeledSample],
    valid: &[LabeledSample],
    model: ModelConfig,
    schedule: &Schedule,
) -> Result<TrainedRun, PipelineError> {
    if train.is_empty() {
        return Err(PipelineError::EmptySplit("training"));
    }
    let raw: Vec<SampleTensor> = train.iter().map(|s| s.sample.clone()).collect();
    let normalizer = Normalizer::fit(&raw)?;
    let train_set: Vec<SampleTensor> = raw.iter().map(|s| normalizer.apply(s)).collect();
    let valid_set: Vec<SampleTensor> = valid.iter().map(|s| normalizer.apply(&s.sample)).collect();
    let params = ModelParams::init(model, schedule.seed)?;
    let outcome = itf::train(&train_set, &valid_set, params, schedule)?;
    Ok(TrainedRun {
        model: TrainedModel {
            params: outcome.params,
            normalizer,
        },
        trace: outcome.trace,
    })
}

/// Forecasts for each rebalance month, each made from frames through the month before.
pub fn forecasts_by_rebalance(
    frames: &[FeatureFrame],
    model: &TrainedModel,
    start: MonthIndex,
    end: MonthIndex,
) -> Result<BTreeMap<MonthIndex, Vec<TrendForecast>>, PipelineError> {
    let mut out = BTreeMap::new();
    for month in MonthIndex::range_inclusive(start, end) {
        let (fc, _) = itf::predict_panel(frames, model, month.pred())?;
        out.insert(month, fc);
    }
    Ok(out)
}

/// Recomputes the forecasts for one rebalance month from the panel alone,
/// building only the frames its lookback needs.
pub fn forecasts_from_panel(
    panel: &ReturnPanel,
    features: &FeatureConfig,
    model: &TrainedModel,
    rebalance: MonthIndex,
) -> Result<Vec<TrendForecast>, PipelineError> {
    let lookback = model.params.config.lookback;
    let info = rebalance.pred();
    let first = info.add_months(1 - lookback as i64);
    let months: Vec<MonthIndex> = MonthIndex::range_inclusive(first, info)
        .into_iter()
        .filter(|m| panel.position(*m).is_some())
        .collect();
    let funds = panel.ids_of_kind(SeriesKind::Fund);
    let factors = panel.ids_of_kind(SeriesKind::Factor);
    let run = build_feature_frames(panel, &funds, &factors, &months, features)?;
    Ok(itf::predict_panel(&run.frames, model, info)?.0)
}

/// Forecasts that know each fund's realized return sign in the rebalance month.
pub fn oracle_forecasts(
    panel: &ReturnPanel,
    funds: &[SeriesId],
    start: MonthIndex,
    end: MonthIndex,
) -> BTreeMap<MonthIndex, Vec<TrendForecast>> {
    MonthIndex::range_inclusive(start, end)
        .into_iter()
        .map(|month| {
            let fc = funds
                .iter()
                .filter_map(|f| {
                    panel.value(f, month).map(|r| TrendForecast {
                        fund: f.clone(),
                        month: month.pred(),
                        probs: if r > 0.0 { [0.0, 0.0, 1.0] } else { [1.0, 0.0, 0.0] },
                    })
                })
                .collect();
            (month, fc)
        })
        .collect()
}

/// Outcome of perturbing one month's returns.
#[derive(Debug, Clone, PartialEq)]
pub struct TripwireCheck {
    pub month: MonthIndex,
    pub original: Vec<SeriesId>,
    pub perturbed: Vec<SeriesId>,
}

impl TripwireCheck {
    pub fn passed(&self) -> bool {
        self.original == self.perturbed
    }
}

/// For each rebalance month, scrambles every return dated in that month and
/// confirms the selection driven by the recomputed forecasts is unchanged.
pub fn look_ahead_tripwire(
    panel: &ReturnPanel,
    features: &FeatureConfig,
    model: &TrainedModel,
    forecasts: &BTreeMap<MonthIndex, Vec<TrendForecast>>,
    score: SelectionScore,
) -> Result<Vec<TripwireCheck>, PipelineError> {
    let mut out = Vec::with_capacity(forecasts.len());
    for (&month, fc) in forecasts {
        let shocked = panel.map_month(month, |_, v| 0.05 - 3.0 * v);
        let recomputed = forecasts_from_panel(&shocked, features, model, month)?;
        out.push(TripwireCheck {
            month,
            original: backtest::select_funds(fc, score),
            perturbed: backtest::select_funds(&recomputed, score),
        });
    }
    Ok(out)
}

/// SA, WA and the equal-weight baseline over `start..=end`.
#[derive(Debug, Clone)]
pub struct BacktestSuite {
    pub runs: Vec<(Strategy, BacktestRun)>,
    pub baseline: backtest::PerformanceReport,
    pub benchmarks: Vec<backtest::PerformanceReport>,
}

impl BacktestSuite {
    pub fn reports(&self) -> Vec<backtest::PerformanceReport> {
        let mut out: Vec<_> = self.runs.iter().map(|(_, r)| r.report.clone()).collect();
        out.push(self.baseline.clone());
        out.extend(self.benchmarks.iter().cloned());
        out
    }

    pub fn run(&self, strategy: Strategy) -> Option<&BacktestRun> {
        self.runs.iter().find(|(s, _)| *s == strategy).map(|(_, r)| r)
    }
}

pub const BASELINE_NAME: &str = "EW";

pub fn run_suite(
    panel: &ReturnPanel,
    forecasts: &BTreeMap<MonthIndex, Vec<TrendForecast>>,
    config: &PipelineConfig,
    strategies: &[Strategy],
    start: MonthIndex,
    end: MonthIndex,
) -> Result<BacktestSuite, PipelineError> {
    let runs = strategies
        .iter()
        .map(|&s| Ok((s, backtest::run_backtest(panel, forecasts, &config.backtest_config(s), start, end)?)))
        .collect::<Result<Vec<_>, PipelineError>>()?;
    let funds = panel.ids_of_kind(SeriesKind::Fund);
    let baseline = backtest::performance_stats(BASELINE_NAME, &backtest::equal_weight_curve(panel, &funds, start, end))?;
    let benchmarks = panel
        .ids_of_kind(SeriesKind::Benchmark)
        .iter()
        .map(|b| backtest::performance_stats(&b.id, &backtest::buy_and_hold_curve(panel, b, start, end)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(BacktestSuite {
        runs,
        baseline,
        benchmarks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::significance::ShuffleConfig;
    use crate::synth::{generate, SynthSpec};

    fn quick_config() -> PipelineConfig {
        PipelineConfig {
            features: FeatureConfig {
                window_len: 24,
                shuffle: ShuffleConfig {
                    n_shuffles: 100,
                    ..ShuffleConfig::default()
                },
                ..FeatureConfig::default()
            },
            model: ModelConfig {
                lookback: 4,
                d_model: 8,
                n_heads: 2,
                d_head: 4,
                n_layers: 1,
                ..ModelConfig::default()
            },
            schedule: Schedule {
                epochs: 2,
                ..Schedule::default()
            },
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn samples_respect_lookback_and_split() {
        let (panel, _) = generate(&SynthSpec::planted(3, 4, 1, 60, 2)).unwrap();
        let cfg = quick_config();
        let run = compute_features(&panel, &cfg.features).unwrap();
        let samples = build_samples(&panel, &run.frames, cfg.model.lookback, cfg.tau);
        assert!(!samples.is_empty());
        for s in &samples {
            assert_eq!(s.label_month, s.info_month.succ());
            assert_eq!(s.sample.values.ncols(), cfg.model.lookback);
        }
        let boundary = split_month(&samples, cfg.train_fraction).unwrap();
        let (train, eval) = chronological_split(&samples, boundary).unwrap();
        assert!(train.iter().all(|s| s.label_month < boundary));
        assert!(eval.iter().all(|s| s.label_month >= boundary));
        assert_eq!(train.len() + eval.len(), samples.len());
    }

    #[test]
    fn recomputed_forecasts_match_full_run() {
        let (panel, _) = generate(&SynthSpec::planted(3, 4, 1, 48, 4)).unwrap();
        let cfg = quick_config();
        let run = compute_features(&panel, &cfg.features).unwrap();
        let samples = build_samples(&panel, &run.frames, cfg.model.lookback, cfg.tau);
        let trained = train_model(&samples, &[], cfg.model, &cfg.schedule).unwrap();
        let last = *panel.calendar().last().unwrap();
        let fc = forecasts_by_rebalance(&run.frames, &trained.model, last.add_months(-3), last).unwrap();
        for (&month, f) in &fc {
            let again = forecasts_from_panel(&panel, &cfg.features, &trained.model, month).unwrap();
            assert_eq!(&again, f);
        }
        let checks = look_ahead_tripwire(&panel, &cfg.features, &trained.model, &fc, cfg.score).unwrap();
        assert!(checks.iter().all(TripwireCheck::passed));
    }
}
