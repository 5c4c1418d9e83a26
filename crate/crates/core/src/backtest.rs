//! Monthly-rebalanced fund portfolios driven by trend forecasts.
//!
//! Each month the top half of funds by forecast score is selected. Positions
//! outside the selection are sold; positions inside it are left alone; the
//! cash raised is invested in newly selected funds, equally (SA) or in
//! proportion to AUM (WA). Holdings are then marked to that month's returns.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::itf::{SelectionScore, TrendForecast};
use crate::panel::{MonthIndex, ReturnPanel, SeriesId};

/// Relative tolerance for value conservation across a rebalance.
pub const CONSERVATION_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BacktestError {
    #[error("no forecasts for rebalance month {0}")]
    MissingForecast(MonthIndex),
    #[error("forecast for {fund} dated {forecast} cannot drive the rebalance at {rebalance}")]
    LookAhead {
        fund: SeriesId,
        forecast: MonthIndex,
        rebalance: MonthIndex,
    },
    #[error("value not conserved at {month}: {before} before, {after} after")]
    Conservation { month: MonthIndex, before: f64, after: f64 },
    #[error("curve needs at least two strictly positive values")]
    BadCurve,
    #[error("start month {start} is after end month {end}")]
    BadRange { start: MonthIndex, end: MonthIndex },
    #[error("unknown strategy '{0}'")]
    UnknownStrategy(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Strategy {
    SA,
    WA,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::SA => "SA",
            Strategy::WA => "WA",
        })
    }
}

impl FromStr for Strategy {
    type Err = BacktestError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "SA" => Ok(Strategy::SA),
            "WA" => Ok(Strategy::WA),
            _ => Err(BacktestError::UnknownStrategy(s.to_string())),
        }
    }
}

/// How WA allocates at each rebalance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum WaMode {
    /// Only liquidation proceeds are allocated by AUM; held positions stay put.
    #[default]
    ProceedsOnly,
    /// The whole book is reset to AUM weights over the selection.
    FullBook,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    Buy,
    Sell,
    Hold,
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Action::Buy => "buy",
            Action::Sell => "sell",
            Action::Hold => "hold",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeLogEntry {
    pub month: MonthIndex,
    pub fund: SeriesId,
    pub action: Action,
    pub amount: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortfolioState {
    pub month: MonthIndex,
    pub holdings: BTreeMap<SeriesId, f64>,
    pub cash: f64,
    pub total: f64,
}

impl PortfolioState {
    pub fn all_cash(month: MonthIndex, cash: f64) -> Self {
        Self {
            month,
            holdings: BTreeMap::new(),
            cash,
            total: cash,
        }
    }

    pub fn recompute_total(&mut self) {
        self.total = self.cash + self.holdings.values().sum::<f64>();
    }

    /// Relative gap between `total` and cash plus holdings.
    pub fn accounting_error(&self) -> f64 {
        let sum = self.cash + self.holdings.values().sum::<f64>();
        (self.total - sum).abs() / self.total.abs().max(f64::MIN_POSITIVE)
    }
}

fn relative_gap(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Top `⌈n/2⌉` funds by score, ties broken by fund id.
pub fn select_funds(forecasts: &[TrendForecast], score: SelectionScore) -> Vec<SeriesId> {
    let mut ranked: Vec<(f64, &SeriesId)> = forecasts.iter().map(|f| (f.score(score), &f.fund)).collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    let keep = forecasts.len().div_ceil(2);
    ranked.into_iter().take(keep).map(|(_, id)| id.clone()).collect()
}

/// Sells positions outside `selected`, returning the surviving state and the log.
fn liquidate_unselected(
    state: &PortfolioState,
    selected: &BTreeSet<&SeriesId>,
    month: MonthIndex,
) -> (PortfolioState, Vec<TradeLogEntry>) {
    let mut next = state.clone();
    next.month = month;
    let mut trades = Vec::new();
    for (fund, &value) in &state.holdings {
        if selected.contains(fund) {
            trades.push(TradeLogEntry {
                month,
                fund: fund.clone(),
                action: Action::Hold,
                amount: value,
            });
        } else {
            next.holdings.remove(fund);
            next.cash += value;
            trades.push(TradeLogEntry {
                month,
                fund: fund.clone(),
                action: Action::Sell,
                amount: value,
            });
        }
    }
    (next, trades)
}

/// Spends all cash on `targets` in proportion to the given weights.
fn invest_cash(state: &mut PortfolioState, targets: &[(SeriesId, f64)], month: MonthIndex, trades: &mut Vec<TradeLogEntry>) {
    let weight_sum: f64 = targets.iter().map(|t| t.1).sum();
    if targets.is_empty() || !(weight_sum > 0.0) {
        return;
    }
    let cash = state.cash;
    let mut spent = 0.0;
    for (i, (fund, w)) in targets.iter().enumerate() {
        let amount = if i + 1 == targets.len() {
            cash - spent
        } else {
            cash * w / weight_sum
        };
        spent += amount;
        *state.holdings.entry(fund.clone()).or_insert(0.0) += amount;
        trades.push(TradeLogEntry {
            month,
            fund: fund.clone(),
            action: Action::Buy,
            amount,
        });
    }
    state.cash = 0.0;
}

fn new_names<'a>(state: &PortfolioState, selected: &'a [SeriesId]) -> Vec<&'a SeriesId> {
    selected.iter().filter(|f| !state.holdings.contains_key(*f)).collect()
}

/// Simple-average rebalance: cash is split equally over newly selected funds.
pub fn rebalance_sa(
    state: &PortfolioState,
    selected: &[SeriesId],
    month: MonthIndex,
) -> (PortfolioState, Vec<TradeLogEntry>) {
    let keep: BTreeSet<&SeriesId> = selected.iter().collect();
    let (mut next, mut trades) = liquidate_unselected(state, &keep, month);
    let targets: Vec<(SeriesId, f64)> = new_names(&next, selected).into_iter().map(|f| (f.clone(), 1.0)).collect();
    invest_cash(&mut next, &targets, month, &mut trades);
    next.recompute_total();
    (next, trades)
}

/// Result of a WA rebalance, including funds skipped for missing AUM.
#[derive(Debug, Clone, PartialEq)]
pub struct WaRebalance {
    pub state: PortfolioState,
    pub trades: Vec<TradeLogEntry>,
    pub skipped: Vec<SeriesId>,
}

/// AUM-weighted rebalance.
pub fn rebalance_wa(
    state: &PortfolioState,
    selected: &[SeriesId],
    aum: impl Fn(&SeriesId) -> Option<f64>,
    month: MonthIndex,
    mode: WaMode,
) -> WaRebalance {
    let keep: BTreeSet<&SeriesId> = selected.iter().collect();
    let (mut next, mut trades) = liquidate_unselected(state, &keep, month);
    let mut skipped = Vec::new();
    let candidates: Vec<&SeriesId> = match mode {
        WaMode::ProceedsOnly => new_names(&next, selected),
        WaMode::FullBook => selected.iter().collect(),
    };
    let mut targets = Vec::new();
    for fund in candidates {
        match aum(fund).filter(|a| *a > 0.0 && a.is_finite()) {
            Some(a) => targets.push((fund.clone(), a)),
            None => skipped.push(fund.clone()),
        }
    }
    if mode == WaMode::FullBook && !targets.is_empty() {
        // Sell everything into cash, then buy back at target weights.
        let held: Vec<(SeriesId, f64)> = next.holdings.iter().map(|(k, v)| (k.clone(), *v)).collect();
        trades.retain(|t| t.action != Action::Hold);
        for (fund, value) in held {
            next.cash += value;
            trades.push(TradeLogEntry {
                month,
                fund: fund.clone(),
                action: Action::Sell,
                amount: value,
            });
        }
        next.holdings.clear();
    }
    invest_cash(&mut next, &targets, month, &mut trades);
    next.recompute_total();
    WaRebalance {
        state: next,
        trades,
        skipped,
    }
}

/// Marks holdings to `month`'s returns. A holding without a return is moved
/// to cash at its last value and reported in the second element.
pub fn step_month(
    state: &PortfolioState,
    month: MonthIndex,
    returns: impl Fn(&SeriesId) -> Option<f64>,
) -> (PortfolioState, Vec<TradeLogEntry>) {
    let mut next = state.clone();
    next.month = month;
    let mut liquidated = Vec::new();
    for (fund, value) in next.holdings.iter_mut() {
        match returns(fund) {
            Some(r) => *value *= 1.0 + r,
            None => liquidated.push(TradeLogEntry {
                month,
                fund: fund.clone(),
                action: Action::Sell,
                amount: *value,
            }),
        }
    }
    for t in &liquidated {
        next.holdings.remove(&t.fund);
        next.cash += t.amount;
    }
    next.recompute_total();
    (next, liquidated)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceReport {
    pub name: String,
    pub curve: Vec<(MonthIndex, f64)>,
    pub annualized_return: f64,
    pub annualized_volatility: f64,
    pub sharpe: Option<f64>,
    pub max_drawdown: f64,
}

impl PerformanceReport {
    pub fn cumulative_return(&self) -> f64 {
        let first = self.curve.first().map_or(1.0, |c| c.1);
        let last = self.curve.last().map_or(1.0, |c| c.1);
        last / first - 1.0
    }
}

/// Annualized return and volatility, Sharpe against a zero benchmark, and max drawdown.
pub fn performance_stats(name: &str, curve: &[(MonthIndex, f64)]) -> Result<PerformanceReport, BacktestError> {
    if curve.len() < 2 || curve.iter().any(|c| !(c.1 > 0.0) || !c.1.is_finite()) {
        return Err(BacktestError::BadCurve);
    }
    let months = (curve.len() - 1) as f64;
    let first = curve[0].1;
    let last = curve[curve.len() - 1].1;
    let annualized_return = (last / first).powf(12.0 / months) - 1.0;
    let rets: Vec<f64> = curve.windows(2).map(|w| w[1].1 / w[0].1 - 1.0).collect();
    let sd = if rets.len() < 2 {
        0.0
    } else {
        crate::panel::sample_sd(&rets)
    };
    let annualized_volatility = sd * 12f64.sqrt();
    let sharpe = (annualized_volatility > 1e-14).then(|| annualized_return / annualized_volatility);
    let mut peak = f64::NEG_INFINITY;
    let mut max_drawdown: f64 = 0.0;
    for &(_, v) in curve {
        peak = peak.max(v);
        max_drawdown = max_drawdown.max(1.0 - v / peak);
    }
    Ok(PerformanceReport {
        name: name.to_string(),
        curve: curve.to_vec(),
        annualized_return,
        annualized_volatility,
        sharpe,
        max_drawdown,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BacktestConfig {
    pub strategy: Strategy,
    pub wa_mode: WaMode,
    pub score: SelectionScore,
}

impl BacktestConfig {
    pub fn new(strategy: Strategy) -> Self {
        Self {
            strategy,
            wa_mode: WaMode::default(),
            score: SelectionScore::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BacktestRun {
    pub report: PerformanceReport,
    pub trades: Vec<TradeLogEntry>,
    pub selections: BTreeMap<MonthIndex, Vec<SeriesId>>,
    pub states: Vec<PortfolioState>,
    /// Largest relative change in total value across any rebalance.
    pub max_conservation_error: f64,
    /// Funds liquidated because their return was missing.
    pub flagged: Vec<(MonthIndex, SeriesId)>,
    /// Funds WA skipped for missing AUM.
    pub skipped: Vec<(MonthIndex, SeriesId)>,
}

/// Simulates `start..=end`. Starts with 1.0 in cash at the beginning of
/// `start`. Forecasts are keyed by the rebalance month they drive and must be
/// dated strictly before it.
pub fn run_backtest(
    panel: &ReturnPanel,
    forecasts: &BTreeMap<MonthIndex, Vec<TrendForecast>>,
    config: &BacktestConfig,
    start: MonthIndex,
    end: MonthIndex,
) -> Result<BacktestRun, BacktestError> {
    if start > end {
        return Err(BacktestError::BadRange { start, end });
    }
    let origin = start.pred();
    let mut state = PortfolioState::all_cash(origin, 1.0);
    let mut curve = vec![(origin, 1.0)];
    let mut trades = Vec::new();
    let mut selections = BTreeMap::new();
    let mut states = Vec::new();
    let mut flagged = Vec::new();
    let mut skipped = Vec::new();
    let mut max_err: f64 = 0.0;
    for month in MonthIndex::range_inclusive(start, end) {
        let fc = forecasts.get(&month).ok_or(BacktestError::MissingForecast(month))?;
        if let Some(bad) = fc.iter().find(|f| f.month >= month) {
            return Err(BacktestError::LookAhead {
                fund: bad.fund.clone(),
                forecast: bad.month,
                rebalance: month,
            });
        }
        let selected = select_funds(fc, config.score);
        let before = state.total;
        let (next, log) = match config.strategy {
            Strategy::SA => rebalance_sa(&state, &selected, month),
            Strategy::WA => {
                let r = rebalance_wa(&state, &selected, |f| panel.aum_at(f, month.pred()), month, config.wa_mode);
                skipped.extend(r.skipped.into_iter().map(|f| (month, f)));
                (r.state, r.trades)
            }
        };
        let err = relative_gap(before, next.total).max(next.accounting_error());
        max_err = max_err.max(err);
        if err > CONSERVATION_TOL {
            return Err(BacktestError::Conservation {
                month,
                before,
                after: next.total,
            });
        }
        trades.extend(log);
        selections.insert(month, selected);
        let (marked, liquidated) = step_month(&next, month, |f| panel.value(f, month));
        flagged.extend(liquidated.iter().map(|t| (month, t.fund.clone())));
        trades.extend(liquidated);
        curve.push((month, marked.total));
        states.push(marked.clone());
        state = marked;
    }
    let report = performance_stats(&config.strategy.to_string(), &curve)?;
    Ok(BacktestRun {
        report,
        trades,
        selections,
        states,
        max_conservation_error: max_err,
        flagged,
        skipped,
    })
}

/// Monthly-rebalanced equal weight over every fund with a return that month.
pub fn equal_weight_curve(
    panel: &ReturnPanel,
    funds: &[SeriesId],
    start: MonthIndex,
    end: MonthIndex,
) -> Vec<(MonthIndex, f64)> {
    let mut v = 1.0;
    let mut curve = vec![(start.pred(), v)];
    for month in MonthIndex::range_inclusive(start, end) {
        let rets: Vec<f64> = funds.iter().filter_map(|f| panel.value(f, month)).collect();
        if !rets.is_empty() {
            v *= 1.0 + rets.iter().sum::<f64>() / rets.len() as f64;
        }
        curve.push((month, v));
    }
    curve
}

/// Compounds one series' returns (missing months count as zero).
pub fn buy_and_hold_curve(panel: &ReturnPanel, id: &SeriesId, start: MonthIndex, end: MonthIndex) -> Vec<(MonthIndex, f64)> {
    let mut v = 1.0;
    let mut curve = vec![(start.pred(), v)];
    for month in MonthIndex::range_inclusive(start, end) {
        v *= 1.0 + panel.value(id, month).unwrap_or(0.0);
        curve.push((month, v));
    }
    curve
}

fn io_err(path: &Path, e: impl fmt::Display) -> BacktestError {
    BacktestError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn write_file(path: &Path, f: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<(), BacktestError> {
    let file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).map_err(|e| io_err(path, e))
}

/// `month,strategy,value` rows for every report, in report order.
pub fn write_curve_csv(reports: &[PerformanceReport], path: &Path) -> Result<(), BacktestError> {
    write_file(path, |w| {
        writeln!(w, "month,strategy,value")?;
        for r in reports {
            for (m, v) in &r.curve {
                writeln!(w, "{m},{},{v}", r.name)?;
            }
        }
        Ok(())
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct StatsRecord {
    annualized_return: f64,
    annualized_volatility: f64,
    sharpe: Option<f64>,
    max_drawdown: f64,
    cumulative_return: f64,
}

/// Metrics per strategy, keyed by report name.
pub fn write_stats_json(reports: &[PerformanceReport], path: &Path) -> Result<(), BacktestError> {
    let map: BTreeMap<&str, StatsRecord> = reports
        .iter()
        .map(|r| {
            (
                r.name.as_str(),
                StatsRecord {
                    annualized_return: r.annualized_return,
                    annualized_volatility: r.annualized_volatility,
                    sharpe: r.sharpe,
                    max_drawdown: r.max_drawdown,
                    cumulative_return: r.cumulative_return(),
                },
            )
        })
        .collect();
    let text = serde_json::to_string_pretty(&map).expect("stats serialize");
    write_file(path, |w| writeln!(w, "{text}"))
}

/// `month,fund,action,amount` rows preceded by the strategy that made them.
pub fn write_trades_csv(runs: &[(Strategy, &[TradeLogEntry])], path: &Path) -> Result<(), BacktestError> {
    write_file(path, |w| {
        writeln!(w, "strategy,month,fund,action,amount")?;
        for (s, trades) in runs {
            for t in trades.iter() {
                writeln!(w, "{s},{},{},{},{}", t.month, t.fund.id, t.action, t.amount)?;
            }
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::RawSeries;

    fn m(y: i32, mo: u32) -> MonthIndex {
        MonthIndex::new(y, mo).unwrap()
    }

    fn f(id: &str) -> SeriesId {
        SeriesId::fund(id)
    }

    fn fc(id: &str, up: f64) -> TrendForecast {
        TrendForecast {
            fund: f(id),
            month: m(2000, 1),
            probs: [1.0 - up, 0.0, up],
        }
    }

    fn state(h: &[(&str, f64)], cash: f64) -> PortfolioState {
        let mut s = PortfolioState {
            month: m(2000, 1),
            holdings: h.iter().map(|(k, v)| (f(k), *v)).collect(),
            cash,
            total: 0.0,
        };
        s.recompute_total();
        s
    }

    fn bought(trades: &[TradeLogEntry]) -> Vec<(String, f64)> {
        trades
            .iter()
            .filter(|t| t.action == Action::Buy)
            .map(|t| (t.fund.id.clone(), t.amount))
            .collect()
    }

    #[test]
    fn selection_takes_upper_half() {
        let four = [fc("A", 0.9), fc("B", 0.7), fc("C", 0.4), fc("D", 0.1)];
        assert_eq!(select_funds(&four, SelectionScore::Up), vec![f("A"), f("B")]);
        let five = [fc("E", 0.2), fc("A", 0.9), fc("B", 0.7), fc("C", 0.4), fc("D", 0.1)];
        assert_eq!(select_funds(&five, SelectionScore::Up).len(), 3);
        let tied = [fc("C", 0.5), fc("A", 0.5), fc("D", 0.5), fc("B", 0.5)];
        assert_eq!(select_funds(&tied, SelectionScore::Up), vec![f("A"), f("B")]);
    }

    #[test]
    fn sa_examples() {
        let s = state(&[("A", 1.0)], 0.0);
        let (next, trades) = rebalance_sa(&s, &[f("A")], m(2000, 2));
        assert_eq!(next.holdings, s.holdings);
        assert!(trades.iter().all(|t| t.action == Action::Hold));

        let (next, trades) = rebalance_sa(&s, &[f("B"), f("C")], m(2000, 2));
        assert_eq!(bought(&trades), vec![("B".into(), 0.5), ("C".into(), 0.5)]);
        assert_eq!(next.holdings.len(), 2);
        assert_eq!(next.cash, 0.0);
        assert!(trades.iter().any(|t| t.action == Action::Sell && t.fund == f("A") && t.amount == 1.0));

        let s = state(&[("A", 0.6), ("B", 0.4)], 0.0);
        let (next, _) = rebalance_sa(&s, &[f("A")], m(2000, 2));
        assert_eq!(next.cash, 0.4);
        assert_eq!(next.holdings.get(&f("A")), Some(&0.6));
        assert!((next.total - 1.0).abs() < 1e-15);
    }

    #[test]
    fn wa_examples() {
        let s = state(&[("A", 1.0)], 0.0);
        let aum = |id: &SeriesId| match id.id.as_str() {
            "B" => Some(100.0),
            "C" => Some(300.0),
            _ => None,
        };
        let r = rebalance_wa(&s, &[f("B"), f("C")], aum, m(2000, 2), WaMode::ProceedsOnly);
        assert_eq!(bought(&r.trades), vec![("B".into(), 0.25), ("C".into(), 0.75)]);

        let r = rebalance_wa(&s, &[f("B")], aum, m(2000, 2), WaMode::ProceedsOnly);
        assert_eq!(bought(&r.trades), vec![("B".into(), 1.0)]);

        let r = rebalance_wa(&s, &[f("A")], aum, m(2000, 2), WaMode::ProceedsOnly);
        assert!(bought(&r.trades).is_empty());
        assert_eq!(r.state.holdings.get(&f("A")), Some(&1.0));

        let r = rebalance_wa(&s, &[f("B"), f("D")], aum, m(2000, 2), WaMode::ProceedsOnly);
        assert_eq!(r.skipped, vec![f("D")]);
        assert_eq!(bought(&r.trades), vec![("B".into(), 1.0)]);
    }

    #[test]
    fn wa_full_book_resets_weights() {
        let s = state(&[("B", 0.9), ("A", 0.1)], 0.0);
        let aum = |id: &SeriesId| Some(if id.id == "B" { 100.0 } else { 300.0 });
        let r = rebalance_wa(&s, &[f("B"), f("C")], aum, m(2000, 2), WaMode::FullBook);
        assert!((r.state.holdings[&f("B")] - 0.25).abs() < 1e-15);
        assert!((r.state.holdings[&f("C")] - 0.75).abs() < 1e-15);
        assert!((r.state.total - 1.0).abs() < 1e-15);
    }

    #[test]
    fn step_month_examples() {
        let s = state(&[("A", 1.0)], 0.0);
        let (next, _) = step_month(&s, m(2000, 2), |_| Some(0.10));
        assert!((next.total - 1.1).abs() < 1e-15);

        let empty = state(&[], 0.3);
        let (next, _) = step_month(&empty, m(2000, 2), |_| Some(0.5));
        assert_eq!(next.total, 0.3);

        let s = state(&[("A", 0.5), ("B", 0.5)], 0.0);
        let (next, _) = step_month(&s, m(2000, 2), |id| Some(if id.id == "A" { 0.1 } else { -0.1 }));
        assert!((next.total - 1.0).abs() < 1e-15);

        let (next, flagged) = step_month(&s, m(2000, 2), |id| (id.id == "A").then_some(0.1));
        assert_eq!(flagged.len(), 1);
        assert_eq!(next.cash, 0.5);
        assert!((next.total - 1.05).abs() < 1e-15);
    }

    #[test]
    fn stats_examples() {
        let curve: Vec<(MonthIndex, f64)> = (0..=12).map(|i| (m(2000, 1).add_months(i), 1.01f64.powi(i as i32))).collect();
        let r = performance_stats("x", &curve).unwrap();
        assert!((r.annualized_return - (1.01f64.powi(12) - 1.0)).abs() < 1e-12);
        assert!((r.annualized_return - 0.12683).abs() < 1e-5);
        assert_eq!(r.max_drawdown, 0.0);
        assert_eq!(r.sharpe, None);

        let c = [(m(2000, 1), 1.0), (m(2000, 2), 0.8), (m(2000, 3), 0.9)];
        let r = performance_stats("x", &c).unwrap();
        assert!((r.max_drawdown - 0.2).abs() < 1e-15);
        assert!(r.sharpe.is_some());
        assert_eq!(performance_stats("x", &c[..1]), Err(BacktestError::BadCurve));
    }

    fn panel_of(series: &[(&str, Vec<f64>)]) -> ReturnPanel {
        let raw: Vec<RawSeries> = series
            .iter()
            .map(|(id, vals)| {
                (
                    f(id),
                    vals.iter().enumerate().map(|(i, v)| (m(2000, 1).add_months(i as i64), *v)).collect(),
                )
            })
            .collect();
        let aum: Vec<RawSeries> = series
            .iter()
            .map(|(id, vals)| (f(id), (0..vals.len()).map(|i| (m(2000, 1).add_months(i as i64), 50.0)).collect()))
            .collect();
        ReturnPanel::align(raw).unwrap().with_aum(aum).unwrap()
    }

    fn forecasts_for(panel: &ReturnPanel, funds: &[&str], start: MonthIndex, end: MonthIndex) -> BTreeMap<MonthIndex, Vec<TrendForecast>> {
        MonthIndex::range_inclusive(start, end)
            .into_iter()
            .map(|mo| {
                let v = funds
                    .iter()
                    .map(|id| TrendForecast {
                        fund: f(id),
                        month: mo.pred(),
                        probs: if panel.value(&f(id), mo).unwrap_or(0.0) > 0.0 {
                            [0.0, 0.0, 1.0]
                        } else {
                            [1.0, 0.0, 0.0]
                        },
                    })
                    .collect();
                (mo, v)
            })
            .collect()
    }

    #[test]
    fn zero_return_universe_is_flat() {
        let p = panel_of(&[("A", vec![0.0; 6]), ("B", vec![0.0; 6])]);
        let fcs = forecasts_for(&p, &["A", "B"], m(2000, 2), m(2000, 6));
        let run = run_backtest(&p, &fcs, &BacktestConfig::new(Strategy::SA), m(2000, 2), m(2000, 6)).unwrap();
        assert!(run.report.curve.iter().all(|c| c.1 == 1.0));
        assert_eq!(run.report.max_drawdown, 0.0);
        assert_eq!(run.report.curve[0], (m(2000, 1), 1.0));
    }

    #[test]
    fn single_fund_strategies_match_buy_and_hold() {
        let rets = vec![0.01, -0.02, 0.03, 0.005, -0.01, 0.02];
        let p = panel_of(&[("A", rets)]);
        let (s, e) = (m(2000, 2), m(2000, 6));
        let fcs = forecasts_for(&p, &["A"], s, e);
        let bh = buy_and_hold_curve(&p, &f("A"), s, e);
        for strat in [Strategy::SA, Strategy::WA] {
            let run = run_backtest(&p, &fcs, &BacktestConfig::new(strat), s, e).unwrap();
            for (a, b) in run.report.curve.iter().zip(&bh) {
                assert_eq!(a.0, b.0);
                assert!((a.1 - b.1).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn forecast_gaps_and_look_ahead_abort() {
        let p = panel_of(&[("A", vec![0.01; 6]), ("B", vec![0.0; 6])]);
        let mut fcs = forecasts_for(&p, &["A", "B"], m(2000, 2), m(2000, 6));
        fcs.remove(&m(2000, 4));
        let cfg = BacktestConfig::new(Strategy::SA);
        assert_eq!(
            run_backtest(&p, &fcs, &cfg, m(2000, 2), m(2000, 6)).unwrap_err(),
            BacktestError::MissingForecast(m(2000, 4))
        );
        let mut fcs = forecasts_for(&p, &["A", "B"], m(2000, 2), m(2000, 6));
        fcs.get_mut(&m(2000, 3)).unwrap()[0].month = m(2000, 3);
        assert!(matches!(
            run_backtest(&p, &fcs, &cfg, m(2000, 2), m(2000, 6)),
            Err(BacktestError::LookAhead { .. })
        ));
    }

    #[test]
    fn sa_and_wa_select_the_same_funds() {
        let p = panel_of(&[
            ("A", vec![0.01, -0.02, 0.03, 0.0, 0.01]),
            ("B", vec![-0.01, 0.02, -0.01, 0.02, 0.0]),
            ("C", vec![0.02, 0.01, -0.03, -0.01, 0.02]),
        ]);
        let fcs = forecasts_for(&p, &["A", "B", "C"], m(2000, 2), m(2000, 5));
        let sa = run_backtest(&p, &fcs, &BacktestConfig::new(Strategy::SA), m(2000, 2), m(2000, 5)).unwrap();
        let wa = run_backtest(&p, &fcs, &BacktestConfig::new(Strategy::WA), m(2000, 2), m(2000, 5)).unwrap();
        assert_eq!(sa.selections, wa.selections);
        assert!(sa.max_conservation_error <= CONSERVATION_TOL);
    }
}
