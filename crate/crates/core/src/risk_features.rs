//! Per-fund, per-month feature construction.
//!
//! Fund-only features (Sharpe, MRaR) come straight from the trailing window.
//! Factor-conditional features combine the ridge fits of the relevant
//! factors with quantiles of each factor's long history: StressVaR takes the
//! worst fitted loss over the 1st..99th factor percentiles plus residual
//! uncertainty, LTA integrates the fitted polynomial over five quantile
//! nodes, and LTR/LTS combine the two.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::hermite_ridge::{PolyFit, DEFAULT_LAMBDA};
use crate::panel::{self, MonthIndex, PanelError, ReturnPanel, SeriesId};
use crate::significance::{self, ShuffleConfig, SignificanceError};

/// Probability nodes of the long-term-alpha quadrature.
pub const QUANTILE_LEVELS: [f64; 5] = [0.01, 0.16, 0.50, 0.84, 0.99];
/// Index of each quantile node within the 1..=99 percentile grid.
const LEVEL_PERCENTILE_INDEX: [usize; 5] = [0, 15, 49, 83, 98];

pub const DEFAULT_WINDOW: usize = 36;
pub const DEFAULT_KAPPA: f64 = 0.05;
pub const DEFAULT_GAMMA: f64 = 2.0;
pub const DEFAULT_XI: f64 = 2.33;
pub const DEFAULT_TAIL_FRACTION: f64 = 0.10;
/// Minimum exceedances beyond the tail threshold for a GPD fit.
pub const MIN_TAIL_EXCEEDANCES: usize = 10;
/// Minimum history for any quantile grid.
pub const MIN_HISTORY: usize = 20;
/// Minimum history before tail fitting is attempted.
pub const MIN_TAIL_HISTORY: usize = 60;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("zero volatility of excess returns")]
    ZeroVolatility,
    #[error("domain error: {0}")]
    DomainError(String),
    #[error("need at least {needed} observations, got {got}")]
    InsufficientHistory { needed: usize, got: usize },
    #[error("quantile grid is degenerate (all quantiles equal)")]
    DegenerateGrid,
    #[error("no relevant factors")]
    NoRelevantFactors,
    #[error("stress VaR is zero")]
    ZeroSVaR,
    #[error("benchmark length {0} does not match returns length {1}")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Panel(#[from] PanelError),
    #[error(transparent)]
    Significance(#[from] SignificanceError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

fn excess_returns(returns: &[f64], benchmark: Option<&[f64]>) -> Result<Vec<f64>, FeatureError> {
    match benchmark {
        None => Ok(returns.to_vec()),
        Some(b) if b.len() != returns.len() => {
            Err(FeatureError::LengthMismatch(b.len(), returns.len()))
        }
        Some(b) => Ok(returns.iter().zip(b).map(|(r, f)| r - f).collect()),
    }
}

/// Monthly Sharpe ratio of returns in excess of `benchmark` (zero when `None`).
pub fn sharpe_ratio(returns: &[f64], benchmark: Option<&[f64]>) -> Result<f64, FeatureError> {
    if returns.len() < 2 {
        return Err(FeatureError::InsufficientHistory {
            needed: 2,
            got: returns.len(),
        });
    }
    let ex = excess_returns(returns, benchmark)?;
    let m = panel::mean(&ex);
    let sd = panel::sample_sd(&ex);
    let scale = ex.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if !(sd > 1e-14 * scale) || sd == 0.0 {
        return Err(FeatureError::ZeroVolatility);
    }
    Ok(m / sd)
}

/// Morningstar risk-adjusted return over the whole window:
/// `(mean((1 + r_G)^-γ))^(-n/γ) - 1` with geometric excess returns
/// `r_G = (1 + r) / (1 + r_f) - 1`.
pub fn mrar(returns: &[f64], benchmark: Option<&[f64]>, gamma: f64) -> Result<f64, FeatureError> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(FeatureError::DomainError(format!(
            "risk aversion must be positive, got {gamma}"
        )));
    }
    if returns.is_empty() {
        return Err(FeatureError::InsufficientHistory { needed: 1, got: 0 });
    }
    if let Some(b) = benchmark {
        if b.len() != returns.len() {
            return Err(FeatureError::LengthMismatch(b.len(), returns.len()));
        }
    }
    let n = returns.len() as f64;
    let mut acc = 0.0;
    for (t, &r) in returns.iter().enumerate() {
        let rf = benchmark.map_or(0.0, |b| b[t]);
        if !(1.0 + rf > 0.0) {
            return Err(FeatureError::DomainError(format!(
                "benchmark gross return 1 + {rf} is not positive"
            )));
        }
        let gross = (1.0 + r) / (1.0 + rf);
        if !(gross > 0.0) {
            return Err(FeatureError::DomainError(format!(
                "geometric excess gross return {gross} is not positive"
            )));
        }
        acc += gross.powf(-gamma);
    }
    Ok((acc / n).powf(-n / gamma) - 1.0)
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn empirical_quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Generalized Pareto fit to threshold exceedances, in exceedance units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpdTail {
    pub threshold: f64,
    pub scale: f64,
    pub shape: f64,
    /// Fraction of the history beyond the threshold.
    pub exceed_fraction: f64,
}

impl GpdTail {
    /// Method-of-moments fit: `shape = (1 - m²/s²)/2`, `scale = m (1 + m²/s²)/2`.
    pub fn fit_moments(threshold: f64, excess: &[f64], n_total: usize) -> Option<Self> {
        if excess.len() < MIN_TAIL_EXCEEDANCES {
            return None;
        }
        let m = panel::mean(excess);
        let v = excess.iter().map(|e| (e - m) * (e - m)).sum::<f64>() / (excess.len() - 1) as f64;
        if !(m > 0.0) || !(v > 0.0) {
            return None;
        }
        let ratio = m * m / v;
        Some(Self {
            threshold,
            scale: 0.5 * m * (1.0 + ratio),
            shape: 0.5 * (1.0 - ratio),
            exceed_fraction: excess.len() as f64 / n_total as f64,
        })
    }

    /// Distance beyond the threshold exceeded with total probability `tail_prob`.
    pub fn excess_at(&self, tail_prob: f64) -> f64 {
        let r = self.exceed_fraction / tail_prob;
        if self.shape.abs() < 1e-9 {
            self.scale * r.ln()
        } else {
            self.scale / self.shape * (r.powf(self.shape) - 1.0)
        }
    }
}

/// Five-level quantile summary of a factor's history plus its 1..=99 percentile grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileGrid {
    pub levels: [f64; 5],
    pub theta: [f64; 5],
    /// (lower, upper) tails fitted by GPD.
    pub tail_fitted: (bool, bool),
    pub degenerate: bool,
    /// Quantiles at 1%, 2%, ..., 99%.
    pub percentiles: Vec<f64>,
    pub lower_tail: Option<GpdTail>,
    pub upper_tail: Option<GpdTail>,
}

/// Quantile grid of a factor history. Central levels are empirical; the
/// levels beyond `tail_fraction` come from GPD fits to the exceedances
/// when enough data are available.
pub fn factor_quantiles(history: &[f64], tail_fraction: f64) -> Result<QuantileGrid, FeatureError> {
    if history.len() < MIN_HISTORY {
        return Err(FeatureError::InsufficientHistory {
            needed: MIN_HISTORY,
            got: history.len(),
        });
    }
    if !(tail_fraction > 0.01 && tail_fraction < 0.16) {
        return Err(FeatureError::DomainError(format!(
            "tail fraction {tail_fraction} must lie in (0.01, 0.16)"
        )));
    }
    let mut sorted = history.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let (lower_tail, upper_tail) = if n >= MIN_TAIL_HISTORY {
        let lo_u = empirical_quantile(&sorted, tail_fraction);
        let hi_u = empirical_quantile(&sorted, 1.0 - tail_fraction);
        let lo_ex: Vec<f64> = sorted.iter().filter(|&&x| x < lo_u).map(|x| lo_u - x).collect();
        let hi_ex: Vec<f64> = sorted.iter().filter(|&&x| x > hi_u).map(|x| x - hi_u).collect();
        (
            GpdTail::fit_moments(lo_u, &lo_ex, n),
            GpdTail::fit_moments(hi_u, &hi_ex, n),
        )
    } else {
        (None, None)
    };
    let quantile = |p: f64| -> f64 {
        match (&lower_tail, &upper_tail) {
            (Some(t), _) if p < tail_fraction => t.threshold - t.excess_at(p),
            (_, Some(t)) if p > 1.0 - tail_fraction => t.threshold + t.excess_at(1.0 - p),
            _ => empirical_quantile(&sorted, p),
        }
    };
    let mut percentiles: Vec<f64> = (1..=99).map(|k| quantile(k as f64 / 100.0)).collect();
    for i in 1..percentiles.len() {
        if percentiles[i] < percentiles[i - 1] {
            percentiles[i] = percentiles[i - 1];
        }
    }
    let theta = LEVEL_PERCENTILE_INDEX.map(|i| percentiles[i]);
    Ok(QuantileGrid {
        levels: QUANTILE_LEVELS,
        theta,
        tail_fitted: (lower_tail.is_some(), upper_tail.is_some()),
        degenerate: theta[0] == theta[4],
        percentiles,
        lower_tail,
        upper_tail,
    })
}

/// Quadrature weights over the five quantile nodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LtaWeights {
    pub w: [f64; 5],
}

/// `∫₀¹ L_k(p) dp` for the Lagrange basis over [`QUANTILE_LEVELS`].
pub fn lagrange_base_weights() -> [f64; 5] {
    let nodes = QUANTILE_LEVELS;
    let mut out = [0.0; 5];
    for (k, w) in out.iter_mut().enumerate() {
        // coefficients of L_k in increasing powers of p
        let mut poly = vec![1.0];
        let mut denom = 1.0;
        for (j, &pj) in nodes.iter().enumerate() {
            if j == k {
                continue;
            }
            let mut next = vec![0.0; poly.len() + 1];
            for (d, &c) in poly.iter().enumerate() {
                next[d + 1] += c;
                next[d] -= c * pj;
            }
            poly = next;
            denom *= nodes[k] - pj;
        }
        *w = poly
            .iter()
            .enumerate()
            .map(|(d, c)| c / (d + 1) as f64)
            .sum::<f64>()
            / denom;
    }
    out
}

/// Lagrange quadrature weights, minimally adjusted (Euclidean norm) so that
/// `Σ w = 1` and `Σ w θ = factor_mean`.
pub fn lta_weights(grid: &QuantileGrid, factor_mean: f64) -> Result<LtaWeights, FeatureError> {
    let theta = grid.theta;
    let c = panel::mean(&theta);
    // centre θ so the 2×2 system is well conditioned
    let d: [f64; 5] = theta.map(|t| t - c);
    let sdd: f64 = d.iter().map(|x| x * x).sum();
    let scale = theta.iter().fold(0.0f64, |a, t| a.max(t.abs()));
    if grid.degenerate || !(sdd > (1e-12 * scale).powi(2) * 5.0) || sdd == 0.0 {
        return Err(FeatureError::DegenerateGrid);
    }
    let target_c = factor_mean - c;
    let mut w = lagrange_base_weights();
    // two passes: the second removes rounding left by the first
    for _ in 0..2 {
        let r1 = 1.0 - w.iter().sum::<f64>();
        let r2 = target_c - w.iter().zip(&d).map(|(a, b)| a * b).sum::<f64>();
        // constraints on (1, d) are orthogonal because Σ d = 0
        let a1 = r1 / 5.0;
        let a2 = r2 / sdd;
        for k in 0..5 {
            w[k] += a1 + a2 * d[k];
        }
    }
    Ok(LtaWeights { w })
}

/// Stress contribution of one factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FactorStress {
    /// Largest fitted loss over the percentile grid (0 when no loss is predicted).
    pub y_max: f64,
    pub svar: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StressVar {
    pub svar: f64,
    pub worst_factor: SeriesId,
    pub per_factor: Vec<(SeriesId, FactorStress)>,
}

/// `Φ⁻¹(alpha)`, for callers wanting the analytically consistent stress multiplier.
pub fn xi_from_alpha(alpha: f64) -> f64 {
    Normal::standard().inverse_cdf(alpha)
}

/// `sqrt(ŷ_max² + residual_var · ξ²)`, evaluated as a hypotenuse so it never
/// falls below either leg.
pub fn factor_stress(fit: &PolyFit, grid: &QuantileGrid, xi: f64) -> FactorStress {
    let worst = grid
        .percentiles
        .iter()
        .map(|&x| fit.predict(x))
        .fold(f64::INFINITY, f64::min);
    let y_max = if worst < 0.0 { -worst } else { 0.0 };
    let residual = xi * fit.residual_var.sqrt();
    FactorStress {
        y_max,
        svar: y_max.hypot(residual),
    }
}

/// StressVaR of a fund: the maximum per-factor stress over its relevant factors.
pub fn stress_var(
    factors: &[(SeriesId, &PolyFit, &QuantileGrid)],
    xi: f64,
) -> Result<StressVar, FeatureError> {
    if factors.is_empty() {
        return Err(FeatureError::NoRelevantFactors);
    }
    let per_factor: Vec<(SeriesId, FactorStress)> = factors
        .iter()
        .map(|(id, fit, grid)| (id.clone(), factor_stress(fit, grid, xi)))
        .collect();
    let (worst, best) = per_factor
        .iter()
        .max_by(|a, b| {
            a.1.svar
                .total_cmp(&b.1.svar)
                .then_with(|| b.0.id.cmp(&a.0.id))
        })
        .expect("non-empty");
    Ok(StressVar {
        svar: best.svar,
        worst_factor: worst.clone(),
        per_factor,
    })
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// `Σ_q w_q Φ(θ_q)` for one factor.
pub fn factor_lta(fit: &PolyFit, grid: &QuantileGrid, weights: &LtaWeights) -> f64 {
    grid.theta
        .iter()
        .zip(&weights.w)
        .map(|(&t, &w)| w * fit.predict(t))
        .sum()
}

/// Median of per-factor long-term alphas; also returns the per-factor values.
pub fn long_term_alpha(
    factors: &[(&PolyFit, &QuantileGrid, &LtaWeights)],
) -> Result<(f64, Vec<f64>), FeatureError> {
    if factors.is_empty() {
        return Err(FeatureError::NoRelevantFactors);
    }
    let per: Vec<f64> = factors
        .iter()
        .map(|(f, g, w)| factor_lta(f, g, w))
        .collect();
    Ok((median(&per), per))
}

pub fn long_term_ratio(lta: f64, svar: f64) -> Result<f64, FeatureError> {
    if !(svar > 0.0) {
        return Err(FeatureError::ZeroSVaR);
    }
    Ok(lta / svar)
}

pub fn long_term_stability(lta: f64, svar: f64, kappa: f64) -> f64 {
    lta - kappa * svar
}

/// Why a feature frame is not usable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Reason {
    IncompleteWindow,
    MissingReturn,
    ZeroVolatility,
    MrarDomain,
    NoRelevantFactors,
    DegenerateGrid,
    ZeroSVaR,
    MissingAum,
    MissingVolume,
}

impl Reason {
    pub const ALL: [Reason; 9] = [
        Reason::IncompleteWindow,
        Reason::MissingReturn,
        Reason::ZeroVolatility,
        Reason::MrarDomain,
        Reason::NoRelevantFactors,
        Reason::DegenerateGrid,
        Reason::ZeroSVaR,
        Reason::MissingAum,
        Reason::MissingVolume,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Reason::IncompleteWindow => "IncompleteWindow",
            Reason::MissingReturn => "MissingReturn",
            Reason::ZeroVolatility => "ZeroVolatility",
            Reason::MrarDomain => "MrarDomain",
            Reason::NoRelevantFactors => "NoRelevantFactors",
            Reason::DegenerateGrid => "DegenerateGrid",
            Reason::ZeroSVaR => "ZeroSVaR",
            Reason::MissingAum => "MissingAum",
            Reason::MissingVolume => "MissingVolume",
        }
    }
}

impl fmt::Display for Reason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Reason {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Reason::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| format!("unknown reason '{s}'"))
    }
}

/// Constructed features of one fund at one month.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFrame {
    pub fund: SeriesId,
    pub month: MonthIndex,
    pub sharpe: f64,
    pub mrar: f64,
    pub svar: f64,
    pub lta: f64,
    pub ltr: f64,
    pub lts: f64,
    pub aum: f64,
    pub volume: f64,
    pub trailing_return: f64,
    pub valid: bool,
    pub reason: Option<Reason>,
}

/// Number of numeric features per frame.
pub const N_FEATURES: usize = 9;
pub const FEATURE_NAMES: [&str; N_FEATURES] = [
    "sharpe",
    "mrar",
    "svar",
    "lta",
    "ltr",
    "lts",
    "aum",
    "volume",
    "trailing_return",
];

impl FeatureFrame {
    fn empty(fund: SeriesId, month: MonthIndex) -> Self {
        Self {
            fund,
            month,
            sharpe: f64::NAN,
            mrar: f64::NAN,
            svar: f64::NAN,
            lta: f64::NAN,
            ltr: f64::NAN,
            lts: f64::NAN,
            aum: f64::NAN,
            volume: f64::NAN,
            trailing_return: f64::NAN,
            valid: false,
            reason: None,
        }
    }

    fn invalid(mut self, reason: Reason) -> Self {
        self.valid = false;
        self.reason = Some(reason);
        self
    }

    /// Numeric features in [`FEATURE_NAMES`] order.
    pub fn values(&self) -> [f64; N_FEATURES] {
        [
            self.sharpe,
            self.mrar,
            self.svar,
            self.lta,
            self.ltr,
            self.lts,
            self.aum,
            self.volume,
            self.trailing_return,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub window_len: usize,
    pub lambda: f64,
    pub shuffle: ShuffleConfig,
    pub kappa: f64,
    pub gamma: f64,
    pub xi: f64,
    pub tail_fraction: f64,
    pub benchmark: Option<SeriesId>,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            window_len: DEFAULT_WINDOW,
            lambda: DEFAULT_LAMBDA,
            shuffle: ShuffleConfig::default(),
            kappa: DEFAULT_KAPPA,
            gamma: DEFAULT_GAMMA,
            xi: DEFAULT_XI,
            tail_fraction: DEFAULT_TAIL_FRACTION,
            benchmark: None,
        }
    }
}

/// Frames plus the score matrices they were built from.
#[derive(Debug, Clone, Default)]
pub struct FeatureRun {
    pub frames: Vec<FeatureFrame>,
    pub scores: Vec<significance::ScoreMatrix>,
}

/// Builds one frame per (fund, month); frames that cannot be built carry a reason code.
pub fn build_feature_frames(
    panel: &ReturnPanel,
    funds: &[SeriesId],
    factors: &[SeriesId],
    months: &[MonthIndex],
    config: &FeatureConfig,
) -> Result<FeatureRun, FeatureError> {
    config.shuffle.validate()?;
    for id in funds.iter().chain(factors).chain(config.benchmark.iter()) {
        panel.row(id)?;
    }
    let per_month: Vec<(Vec<FeatureFrame>, Option<significance::ScoreMatrix>)> = months
        .par_iter()
        .map(|&month| month_frames(panel, funds, factors, month, config))
        .collect::<Result<_, _>>()?;
    let mut frames = Vec::new();
    let mut scores = Vec::new();
    for (f, s) in per_month {
        frames.extend(f);
        scores.extend(s);
    }
    frames.sort_by(|a, b| a.fund.cmp(&b.fund).then(a.month.cmp(&b.month)));
    Ok(FeatureRun { frames, scores })
}

fn month_frames(
    panel: &ReturnPanel,
    funds: &[SeriesId],
    factors: &[SeriesId],
    month: MonthIndex,
    config: &FeatureConfig,
) -> Result<(Vec<FeatureFrame>, Option<significance::ScoreMatrix>), FeatureError> {
    let fits_calendar = panel
        .position(month)
        .is_some_and(|p| p + 1 >= config.window_len);
    if !fits_calendar {
        let frames = funds
            .iter()
            .map(|f| FeatureFrame::empty(f.clone(), month).invalid(Reason::IncompleteWindow))
            .collect();
        return Ok((frames, None));
    }
    let scores = significance::score_matrix(
        panel,
        funds,
        factors,
        month,
        config.window_len,
        config.lambda,
        &config.shuffle,
    )?;
    let mut grids: BTreeMap<SeriesId, Option<(QuantileGrid, f64)>> = BTreeMap::new();
    for x in factors {
        let hist = panel.history_through(x, month)?;
        let grid = factor_quantiles(&hist, config.tail_fraction)
            .ok()
            .filter(|g| !g.degenerate)
            .map(|g| (g, panel::mean(&hist)));
        grids.insert(x.clone(), grid);
    }
    let benchmark = match &config.benchmark {
        Some(b) => Some(panel.series_window(b, month, config.window_len)?),
        None => None,
    };
    let frames = funds
        .iter()
        .map(|fund| fund_frame(panel, fund, month, config, &scores, &grids, benchmark.as_ref()))
        .collect::<Result<_, _>>()?;
    Ok((frames, Some(scores)))
}

fn fund_frame(
    panel: &ReturnPanel,
    fund: &SeriesId,
    month: MonthIndex,
    config: &FeatureConfig,
    scores: &significance::ScoreMatrix,
    grids: &BTreeMap<SeriesId, Option<(QuantileGrid, f64)>>,
    benchmark: Option<&Option<Vec<f64>>>,
) -> Result<FeatureFrame, FeatureError> {
    let mut frame = FeatureFrame::empty(fund.clone(), month);
    frame.trailing_return = panel.value(fund, month).unwrap_or(f64::NAN);
    frame.aum = panel.aum_at(fund, month).unwrap_or(f64::NAN);
    frame.volume = panel.volume_at(fund, month).unwrap_or(f64::NAN);
    let Some(window) = panel.series_window(fund, month, config.window_len)? else {
        return Ok(frame.invalid(Reason::IncompleteWindow));
    };
    let bench = match benchmark {
        Some(Some(b)) => Some(b.as_slice()),
        Some(None) => return Ok(frame.invalid(Reason::IncompleteWindow)),
        None => None,
    };
    frame.sharpe = match sharpe_ratio(&window, bench) {
        Ok(s) => s,
        Err(_) => return Ok(frame.invalid(Reason::ZeroVolatility)),
    };
    frame.mrar = match mrar(&window, bench, config.gamma) {
        Ok(m) => m,
        Err(_) => return Ok(frame.invalid(Reason::MrarDomain)),
    };

    let usable: Vec<(SeriesId, f64)> = scores
        .fund_scores(fund)
        .into_iter()
        .filter(|(x, _)| matches!(grids.get(x), Some(Some(_))))
        .collect();
    let relevant = significance::relevant_factors(&usable, config.shuffle.threshold_score);
    if relevant.is_empty() {
        return Ok(frame.invalid(Reason::NoRelevantFactors));
    }
    let mut stress_in = Vec::with_capacity(relevant.len());
    let mut weights = Vec::with_capacity(relevant.len());
    for x in &relevant {
        let fit = &scores.get(fund, x).expect("scored pair").fit;
        let (grid, mean) = grids[x].as_ref().expect("usable grid");
        let w = match lta_weights(grid, *mean) {
            Ok(w) => w,
            Err(_) => return Ok(frame.invalid(Reason::DegenerateGrid)),
        };
        stress_in.push((x.clone(), fit, grid));
        weights.push(w);
    }
    let sv = stress_var(&stress_in, config.xi)?;
    let lta_in: Vec<(&PolyFit, &QuantileGrid, &LtaWeights)> = stress_in
        .iter()
        .zip(&weights)
        .map(|((_, f, g), w)| (*f, *g, w))
        .collect();
    let (lta, _) = long_term_alpha(&lta_in)?;
    frame.svar = sv.svar;
    frame.lta = lta;
    frame.lts = long_term_stability(lta, sv.svar, config.kappa);
    frame.ltr = match long_term_ratio(lta, sv.svar) {
        Ok(r) => r,
        Err(_) => return Ok(frame.invalid(Reason::ZeroSVaR)),
    };
    if frame.trailing_return.is_nan() {
        return Ok(frame.invalid(Reason::MissingReturn));
    }
    if frame.aum.is_nan() {
        return Ok(frame.invalid(Reason::MissingAum));
    }
    if frame.volume.is_nan() {
        return Ok(frame.invalid(Reason::MissingVolume));
    }
    frame.valid = true;
    Ok(frame)
}

fn fmt_num(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

pub const FEATURE_CSV_HEADER: [&str; 13] = [
    "fund_id",
    "month",
    "sharpe",
    "mrar",
    "svar",
    "lta",
    "ltr",
    "lts",
    "aum",
    "volume",
    "trailing_return",
    "valid",
    "reason",
];

fn io_err(path: &Path, e: impl fmt::Display) -> FeatureError {
    FeatureError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Writes frames as `fund_id,month,sharpe,...,valid,reason`; missing numbers are empty.
pub fn write_features_csv(frames: &[FeatureFrame], path: &Path) -> Result<(), FeatureError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    w.write_record(FEATURE_CSV_HEADER).map_err(|e| io_err(path, e))?;
    for f in frames {
        let mut rec = vec![f.fund.id.clone(), f.month.to_string()];
        rec.extend(f.values().iter().map(|&v| fmt_num(v)));
        rec.push(f.valid.to_string());
        rec.push(f.reason.map(|r| r.to_string()).unwrap_or_default());
        w.write_record(&rec).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_features_csv(path: &Path) -> Result<Vec<FeatureFrame>, FeatureError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
    let header = rdr.headers().map_err(|e| io_err(path, e))?.clone();
    if header.iter().ne(FEATURE_CSV_HEADER) {
        return Err(io_err(path, "unexpected header"));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| io_err(path, e))?;
        let num = |i: usize| -> Result<f64, FeatureError> {
            let s = &rec[i];
            if s.is_empty() {
                Ok(f64::NAN)
            } else {
                s.parse().map_err(|e| io_err(path, e))
            }
        };
        let reason = match &rec[12] {
            "" => None,
            s => Some(s.parse::<Reason>().map_err(|e| io_err(path, e))?),
        };
        out.push(FeatureFrame {
            fund: SeriesId::fund(&rec[0]),
            month: rec[1].parse()?,
            sharpe: num(2)?,
            mrar: num(3)?,
            svar: num(4)?,
            lta: num(5)?,
            ltr: num(6)?,
            lts: num(7)?,
            aum: num(8)?,
            volume: num(9)?,
            trailing_return: num(10)?,
            valid: rec[11].parse().map_err(|e| io_err(path, e))?,
            reason,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hermite_ridge::N_BASIS;
    use crate::panel::Affine;

    fn flat_fit(beta: [f64; N_BASIS], residual_var: f64) -> PolyFit {
        PolyFit {
            beta,
            lambda: 0.0,
            r2: 0.0,
            adj_r2: 0.0,
            residual_var,
            n: 36,
            factor_affine: Affine::IDENTITY,
            degenerate: false,
        }
    }

    fn linear_grid() -> QuantileGrid {
        let hist: Vec<f64> = (0..200).map(|i| (i as f64 - 99.5) / 50.0).collect();
        factor_quantiles(&hist, 0.1).unwrap()
    }

    #[test]
    fn sharpe_examples() {
        let s = sharpe_ratio(&[0.01, 0.03], None).unwrap();
        assert!((s - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(sharpe_ratio(&[0.02; 12], None), Err(FeatureError::ZeroVolatility));
        let r = [0.01, 0.02, -0.01, 0.03];
        assert_eq!(sharpe_ratio(&r, Some(&r)), Err(FeatureError::ZeroVolatility));
    }

    #[test]
    fn mrar_examples() {
        assert_eq!(mrar(&[0.0; 12], None, 2.0).unwrap(), 0.0);
        let m = mrar(&[0.01; 12], None, 2.0).unwrap();
        assert!((m - (1.01f64.powi(12) - 1.0)).abs() < 1e-12);
        for gamma in [0.5, 1.0, 2.0, 5.0] {
            let m = mrar(&[0.01; 12], None, gamma).unwrap();
            assert!((m - (1.01f64.powi(12) - 1.0)).abs() < 1e-12);
        }
        let even = mrar(&[0.01, 0.01], None, 2.0).unwrap();
        assert!(mrar(&[0.0, 0.0201], None, 2.0).unwrap() < even);
        assert!(mrar(&[0.0, 0.02], None, 2.0).unwrap() < even);
        assert!(matches!(mrar(&[-1.0; 12], None, 2.0), Err(FeatureError::DomainError(_))));
        assert!(matches!(mrar(&[0.01; 12], None, 0.0), Err(FeatureError::DomainError(_))));
        let b = [0.01; 12];
        assert_eq!(mrar(&b, Some(&b), 2.0).unwrap(), 0.0);
    }

    #[test]
    fn short_history_uses_empirical_quantiles() {
        let hist: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let g = factor_quantiles(&hist, 0.1).unwrap();
        assert_eq!(g.tail_fitted, (false, false));
        assert!((g.theta[2] - 14.5).abs() < 1e-12);
        assert!((g.theta[0] - 0.29).abs() < 1e-12);
        assert!(matches!(
            factor_quantiles(&hist[..19], 0.1),
            Err(FeatureError::InsufficientHistory { .. })
        ));
    }

    #[test]
    fn constant_history_is_degenerate() {
        let g = factor_quantiles(&[0.02; 120], 0.1).unwrap();
        assert!(g.degenerate);
        assert_eq!(g.tail_fitted, (false, false));
        assert!(g.theta.iter().all(|&t| t == 0.02));
        assert_eq!(lta_weights(&g, 0.02), Err(FeatureError::DegenerateGrid));
    }

    #[test]
    fn grid_is_monotone_with_tails() {
        let hist: Vec<f64> = (0..500).map(|i| ((i * 7919) % 500) as f64 / 100.0 - 2.5).collect();
        let g = factor_quantiles(&hist, 0.1).unwrap();
        assert_eq!(g.tail_fitted, (true, true));
        assert!(g.percentiles.windows(2).all(|w| w[0] <= w[1]));
        assert!(g.theta.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(g.percentiles.len(), 99);
    }

    #[test]
    fn base_weights_are_a_quadrature_rule() {
        let w = lagrange_base_weights();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // exact for polynomials up to degree 4: ∫ p dp = 1/2
        let first: f64 = w.iter().zip(QUANTILE_LEVELS).map(|(w, p)| w * p).sum();
        assert!((first - 0.5).abs() < 1e-12);
        assert!((w[0] - w[4]).abs() < 1e-12);
        assert!((w[1] - w[3]).abs() < 1e-12);
    }

    #[test]
    fn weights_satisfy_constraints() {
        let g = linear_grid();
        let w = lta_weights(&g, 0.123).unwrap();
        assert!((w.w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let m: f64 = w.w.iter().zip(&g.theta).map(|(a, b)| a * b).sum();
        assert!((m - 0.123).abs() < 1e-12);
    }

    #[test]
    fn stress_examples() {
        let g = linear_grid();
        let fit = flat_fit([0.0; 5], 0.0004);
        let s = stress_var(&[(SeriesId::factor("A"), &fit, &g)], DEFAULT_XI).unwrap();
        assert_eq!(s.svar, DEFAULT_XI * 0.0004f64.sqrt());

        // linear loss: Φ(x) = 0.05 x, worst at the 1st percentile
        let lin = flat_fit([0.0, 0.05, 0.0, 0.0, 0.0], 0.0);
        let st = factor_stress(&lin, &g, DEFAULT_XI);
        assert!((st.y_max - 0.05 * -g.percentiles[0]).abs() < 1e-15);
        assert_eq!(st.svar, st.y_max);

        let always_up = flat_fit([0.1, 0.0, 0.0, 0.0, 0.0], 0.0);
        assert_eq!(factor_stress(&always_up, &g, DEFAULT_XI).y_max, 0.0);

        assert_eq!(stress_var(&[], DEFAULT_XI), Err(FeatureError::NoRelevantFactors));
    }

    #[test]
    fn stress_takes_maximum_factor() {
        let g = linear_grid();
        let a = flat_fit([0.0; 5], (0.08f64 / DEFAULT_XI).powi(2));
        let b = flat_fit([0.0; 5], (0.12f64 / DEFAULT_XI).powi(2));
        let s = stress_var(
            &[(SeriesId::factor("A"), &a, &g), (SeriesId::factor("B"), &b, &g)],
            DEFAULT_XI,
        )
        .unwrap();
        assert!((s.svar - 0.12).abs() < 1e-15);
        assert_eq!(s.worst_factor, SeriesId::factor("B"));
        // tie: lower id wins
        let s = stress_var(
            &[(SeriesId::factor("Z"), &a, &g), (SeriesId::factor("Y"), &a, &g)],
            DEFAULT_XI,
        )
        .unwrap();
        assert_eq!(s.worst_factor, SeriesId::factor("Y"));
    }

    #[test]
    fn alpha_examples() {
        let g = linear_grid();
        let w = lta_weights(&g, 0.0).unwrap();
        let c = flat_fit([0.07, 0.0, 0.0, 0.0, 0.0], 0.0);
        let (lta, _) = long_term_alpha(&[(&c, &g, &w)]).unwrap();
        assert!((lta - 0.07).abs() < 1e-15);

        // identity on the standardized factor with weights matching the mean
        let mean = 0.3;
        let w = lta_weights(&g, mean).unwrap();
        let mut lin = flat_fit([0.0, 1.0, 0.0, 0.0, 0.0], 0.0);
        lin.factor_affine = Affine { mean, sd: 1.7 };
        assert!(factor_lta(&lin, &g, &w).abs() < 1e-12);

        assert_eq!(median(&[0.01, 0.03]), 0.02);
        assert_eq!(median(&[0.05, 0.01, 0.03]), 0.03);
        assert_eq!(long_term_alpha(&[]), Err(FeatureError::NoRelevantFactors));
    }

    #[test]
    fn ratio_and_stability() {
        assert!((long_term_ratio(0.02, 0.10).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(long_term_ratio(0.0, 0.3).unwrap(), 0.0);
        assert_eq!(long_term_ratio(0.02, 0.0), Err(FeatureError::ZeroSVaR));
        assert!((long_term_stability(0.02, 0.10, 0.05) - 0.015).abs() < 1e-15);
        assert_eq!(long_term_stability(0.02, 0.0, 0.05), 0.02);
        assert_eq!(long_term_stability(0.02, 0.4, 0.0), 0.02);
    }

    #[test]
    fn analytic_xi() {
        assert!((xi_from_alpha(0.98) - 2.0537).abs() < 1e-4);
        assert!((xi_from_alpha(0.99) - 2.3263).abs() < 1e-4);
    }
}
