//! Factor-regression features, trend classification and fund-selection
//! backtesting for monthly hedge-fund panels.
//!
//! The pipeline runs in stages:
//!
//! 1. [`panel`] aligns fund, factor and benchmark returns on one calendar.
//! 2. [`hermite_ridge`] fits a degree-4 Hermite ridge regression per
//!    (fund, factor, window), and [`significance`] scores each fit by target
//!    shuffling.
//! 3. [`risk_features`] turns the significant fits into StressVaR, long-term
//!    alpha, ratio and stability features alongside Sharpe and MRaR.
//! 4. [`itf`] classifies next-month trends with an inverted transformer.
//! 5. [`backtest`] rebalances a fund portfolio monthly from those forecasts.
//!
//! [`synth`] generates panels with planted factor relationships for
//! validation, and [`pipeline`] wires the stages together.

pub mod backtest;
pub mod hermite_ridge;
pub mod itf;
pub mod panel;
pub mod pipeline;

pub mod risk_features;
pub mod seeding;
pub mod significance;
pub mod synth;

pub use backtest::{PerformanceReport, PortfolioState, Strategy, TradeLogEntry};
pub use hermite_ridge::{HermiteDesign, PolyFit};
pub use itf::{ModelConfig, ModelParams, TrendClass, TrendForecast};
pub use panel::{MonthIndex, ReturnPanel, SeriesId, SeriesKind};
pub use risk_features::{FeatureConfig, FeatureFrame, QuantileGrid};
pub use significance::{ShuffleConfig, SignificanceResult};
pub use synth::SynthSpec;
