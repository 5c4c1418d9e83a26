//! Target-shuffling significance of Hermite ridge fits.
//!
//! For each (fund, factor, window) the observed R² is compared with the R²
//! of `N` refits on permutations of the target, keeping the factor order
//! fixed. The p-value is `(1 + #{R²_shuffled ≥ R²_observed}) / (N + 1)` and
//! the P-Value Score is `-ln(p)`.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hermite_ridge::{self, PolyFit, RidgeError, RidgeSystem};
use crate::panel::{MonthIndex, PanelError, ReturnPanel, SeriesId, WindowOutcome};
use crate::seeding::{self, streams};

pub const MIN_SHUFFLES: usize = 100;
pub const DEFAULT_SHUFFLES: usize = 200;
pub const DEFAULT_THRESHOLD_SCORE: f64 = 3.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SignificanceError {
    #[error("n_shuffles must be at least {MIN_SHUFFLES}, got {0}")]
    TooFewShuffles(usize),
    #[error("threshold score must be positive, got {0}")]
    BadThreshold(f64),
    #[error("target and factor lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Ridge(#[from] RidgeError),
    #[error(transparent)]
    Panel(#[from] PanelError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShuffleConfig {
    pub n_shuffles: usize,
    pub seed: u64,
    /// Minimum P-Value Score (on the `-ln p` scale) for a factor to be relevant.
    pub threshold_score: f64,
}

impl Default for ShuffleConfig {
    fn default() -> Self {
        Self {
            n_shuffles: DEFAULT_SHUFFLES,
            seed: 0,
            threshold_score: DEFAULT_THRESHOLD_SCORE,
        }
    }
}

impl ShuffleConfig {
    pub fn validate(&self) -> Result<(), SignificanceError> {
        if self.n_shuffles < MIN_SHUFFLES {
            return Err(SignificanceError::TooFewShuffles(self.n_shuffles));
        }
        if !(self.threshold_score > 0.0) {
            return Err(SignificanceError::BadThreshold(self.threshold_score));
        }
        Ok(())
    }
}

/// Identifies the permutation stream of one (fund, factor, window) cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PairKey<'a> {
    pub fund: &'a str,
    pub factor: &'a str,
    pub window_end: MonthIndex,
}

impl PairKey<'_> {
    fn stream_seed(&self, seed: u64) -> u64 {
        let end = self.window_end.to_string();
        seeding::derive_seed(
            seed,
            &[
                streams::SHUFFLE.as_bytes(),
                self.fund.as_bytes(),
                self.factor.as_bytes(),
                end.as_bytes(),
            ],
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    pub r2_observed: f64,
    pub p_value: f64,
    pub score: f64,
    pub n_shuffles: usize,
    pub degenerate: bool,
}

/// Add-one smoothed p-value of `observed` against a null sample.
pub fn p_value_from_null(observed: f64, null: &[f64]) -> f64 {
    let exceed = null.iter().filter(|&&r| r >= observed).count();
    (1 + exceed) as f64 / (null.len() + 1) as f64
}

/// The permuted target for shuffle `index` of the stream `stream_seed`.
fn shuffled(y: &[f64], stream_seed: u64, index: usize, buf: &mut Vec<f64>) {
    let mut rng: ChaCha8Rng = seeding::rng_from(stream_seed);
    rng.set_stream(index as u64);
    buf.clear();
    buf.extend_from_slice(y);
    buf.shuffle(&mut rng);
}

/// R² values of the fixed-design system refitted on `n` permutations of `y`.
pub fn null_r2(system: &RidgeSystem, y: &[f64], n: usize, stream_seed: u64) -> Vec<f64> {
    let tss = hermite_ridge::total_sum_of_squares(y);
    let mut buf = Vec::with_capacity(y.len());
    (0..n)
        .map(|i| {
            shuffled(y, stream_seed, i, &mut buf);
            let (_, rss) = system.solve_rss(&buf);
            1.0 - rss / tss
        })
        .collect()
}

fn degenerate_result(n: usize) -> SignificanceResult {
    SignificanceResult {
        r2_observed: 0.0,
        p_value: 1.0,
        score: 0.0,
        n_shuffles: n,
        degenerate: true,
    }
}

/// Shuffle test on a prebuilt ridge system; also returns the observed fit.
pub fn shuffle_test_system(
    system: &RidgeSystem,
    y: &[f64],
    config: &ShuffleConfig,
    key: PairKey<'_>,
) -> Result<(PolyFit, SignificanceResult), SignificanceError> {
    config.validate()?;
    let fit = system.fit(y)?;
    if fit.degenerate {
        return Ok((fit, degenerate_result(config.n_shuffles)));
    }
    let null = null_r2(system, y, config.n_shuffles, key.stream_seed(config.seed));
    let p_value = p_value_from_null(fit.r2, &null);
    let result = SignificanceResult {
        r2_observed: fit.r2,
        p_value,
        score: -p_value.ln(),
        n_shuffles: config.n_shuffles,
        degenerate: false,
    };
    Ok((fit, result))
}

/// Fits the pair, shuffles the target `N` times and scores the observed R².
pub fn shuffle_test(
    y: &[f64],
    factor: &[f64],
    lambda: f64,
    config: &ShuffleConfig,
    key: PairKey<'_>,
) -> Result<SignificanceResult, SignificanceError> {
    shuffle_test_with_fit(y, factor, lambda, config, key).map(|(_, r)| r)
}

/// As [`shuffle_test`], also returning the observed fit (with its factor affine).
pub fn shuffle_test_with_fit(
    y: &[f64],
    factor: &[f64],
    lambda: f64,
    config: &ShuffleConfig,
    key: PairKey<'_>,
) -> Result<(PolyFit, SignificanceResult), SignificanceError> {
    if y.len() != factor.len() {
        return Err(SignificanceError::LengthMismatch(y.len(), factor.len()));
    }
    let (system, affine) = hermite_ridge::pair_system(factor, lambda)?;
    let (mut fit, result) = shuffle_test_system(&system, y, config, key)?;
    fit.factor_affine = affine;
    Ok((fit, result))
}

/// Fit and significance of one (fund, factor) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct PairResult {
    pub fit: PolyFit,
    pub significance: SignificanceResult,
}

/// Results of every complete (fund, factor) pair for one window end.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreMatrix {
    pub window_end: Option<MonthIndex>,
    pub results: BTreeMap<(SeriesId, SeriesId), PairResult>,
    /// Pairs skipped because a window entry was missing.
    pub omitted: usize,
    /// Pairs whose factor window was constant or otherwise unfittable.
    pub failed: Vec<((SeriesId, SeriesId), String)>,
}

impl ScoreMatrix {
    /// Scores of one fund, keyed by factor.
    pub fn fund_scores(&self, fund: &SeriesId) -> Vec<(SeriesId, f64)> {
        self.results
            .iter()
            .filter(|((f, _), r)| f == fund && !r.significance.degenerate)
            .map(|((_, x), r)| (x.clone(), r.significance.score))
            .collect()
    }

    pub fn get(&self, fund: &SeriesId, factor: &SeriesId) -> Option<&PairResult> {
        self.results.get(&(fund.clone(), factor.clone()))
    }
}

enum Cell {
    Done(PairResult),
    Incomplete,
    Failed(String),
}

/// Shuffle tests for every (fund, factor) pair whose window ending at `end` is complete.
///
/// Pairs are evaluated in parallel on the current rayon pool; the output does
/// not depend on the pool size.
pub fn score_matrix(
    panel: &ReturnPanel,
    funds: &[SeriesId],
    factors: &[SeriesId],
    end: MonthIndex,
    window_len: usize,
    lambda: f64,
    config: &ShuffleConfig,
) -> Result<ScoreMatrix, SignificanceError> {
    config.validate()?;
    let pairs: Vec<(&SeriesId, &SeriesId)> = funds
        .iter()
        .flat_map(|f| factors.iter().map(move |x| (f, x)))
        .collect();
    // validate ids and window bounds up front so per-cell failures are data issues only
    for (f, x) in pairs.iter().take(1) {
        panel.extract_window(f, x, end, window_len)?;
    }
    for id in funds.iter().chain(factors) {
        panel.row(id)?;
    }
    let cells: Vec<Cell> = pairs
        .par_iter()
        .map(|(fund, factor)| {
            match panel.extract_window(fund, factor, end, window_len) {
                Ok(WindowOutcome::Complete { target, factor: x }) => {
                    let key = PairKey {
                        fund: &fund.id,
                        factor: &factor.id,
                        window_end: end,
                    };
                    match shuffle_test_with_fit(&target, &x, lambda, config, key) {
                        Ok((fit, significance)) => Cell::Done(PairResult { fit, significance }),
                        Err(e) => Cell::Failed(e.to_string()),
                    }
                }
                Ok(WindowOutcome::Incomplete { .. }) => Cell::Incomplete,
                Err(e) => Cell::Failed(e.to_string()),
            }
        })
        .collect();
    let mut out = ScoreMatrix {
        window_end: Some(end),
        ..Default::default()
    };
    for ((fund, factor), cell) in pairs.into_iter().zip(cells) {
        let key = (fund.clone(), factor.clone());
        match cell {
            Cell::Done(r) => {
                out.results.insert(key, r);
            }
            Cell::Incomplete => out.omitted += 1,
            Cell::Failed(msg) => out.failed.push((key, msg)),
        }
    }
    Ok(out)
}

/// All factors ordered by descending score, ties by factor id.
pub fn rank_factors(scores: &[(SeriesId, f64)]) -> Vec<SeriesId> {
    let mut v: Vec<&(SeriesId, f64)> = scores.iter().collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.id.cmp(&b.0.id)));
    v.into_iter().map(|(id, _)| id.clone()).collect()
}

/// Factors whose score exceeds `threshold`, in ranking order.
pub fn relevant_factors(scores: &[(SeriesId, f64)], threshold: f64) -> Vec<SeriesId> {
    let above: Vec<(SeriesId, f64)> = scores
        .iter()
        .filter(|(_, s)| *s > threshold)
        .cloned()
        .collect();
    rank_factors(&above)
}

/// Writes `fund_id,factor_id,window_end,r2,p_value,score` rows.
pub fn write_scores_csv<'a>(
    matrices: impl IntoIterator<Item = &'a ScoreMatrix>,
    path: &Path,
) -> Result<(), SignificanceError> {
    let io = |e: &dyn std::fmt::Display| SignificanceError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(|e| io(&e))?;
    w.write_record(["fund_id", "factor_id", "window_end", "r2", "p_value", "score"])
        .map_err(|e| io(&e))?;
    for m in matrices {
        let end = m.window_end.map(|e| e.to_string()).unwrap_or_default();
        for ((fund, factor), r) in &m.results {
            let s = &r.significance;
            w.write_record([
                fund.id.as_str(),
                factor.id.as_str(),
                end.as_str(),
                &format!("{}", s.r2_observed),
                &format!("{}", s.p_value),
                &format!("{}", s.score),
            ])
            .map_err(|e| io(&e))?;
        }
    }
    w.flush().map_err(|e| io(&e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::MonthIndex;

    fn key() -> PairKey<'static> {
        PairKey {
            fund: "F",
            factor: "X",
            window_end: MonthIndex::new(2000, 12).unwrap(),
        }
    }

    fn factor_row(n: usize) -> Vec<f64> {
        (0..n).map(|i| ((i * 37 + 11) % 53) as f64 / 53.0 - 0.5).collect()
    }

    #[test]
    fn perfect_quadratic_hits_floor() {
        let x = factor_row(36);
        let y: Vec<f64> = x.iter().map(|v| 0.01 + 0.3 * v + 0.8 * v * v).collect();
        let cfg = ShuffleConfig {
            n_shuffles: 200,
            seed: 42,
            threshold_score: 3.0,
        };
        let r = shuffle_test(&y, &x, 0.0, &cfg, key()).unwrap();
        assert_eq!(r.p_value, 1.0 / 201.0);
        assert!((r.score - 201f64.ln()).abs() < 1e-12);
        assert!((r.score - 5.3033).abs() < 1e-4);
    }

    #[test]
    fn floor_with_hundred_shuffles() {
        assert_eq!(p_value_from_null(0.9, &[0.1; 100]), 1.0 / 101.0);
        assert_eq!(p_value_from_null(0.1, &[0.1; 100]), 1.0);
    }

    #[test]
    fn constant_target_is_degenerate() {
        let x = factor_row(36);
        let r = shuffle_test(&[0.02; 36], &x, 1e-4, &ShuffleConfig::default(), key()).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.score, 0.0);
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn config_validation() {
        let x = factor_row(36);
        let cfg = ShuffleConfig {
            n_shuffles: 99,
            ..Default::default()
        };
        assert_eq!(
            shuffle_test(&x, &x, 0.0, &cfg, key()),
            Err(SignificanceError::TooFewShuffles(99))
        );
        let cfg = ShuffleConfig {
            threshold_score: 0.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn stream_depends_on_key() {
        let x = factor_row(36);
        let y: Vec<f64> = (0..36).map(|i| ((i * 13) % 7) as f64).collect();
        let cfg = ShuffleConfig::default();
        let a = shuffle_test(&y, &x, 1e-4, &cfg, key()).unwrap();
        let b = shuffle_test(&y, &x, 1e-4, &cfg, key()).unwrap();
        assert_eq!(a, b);
        let other = PairKey {
            factor: "Z",
            ..key()
        };
        let (sys, _) = hermite_ridge::pair_system(&x, 1e-4).unwrap();
        let n1 = null_r2(&sys, &y, 50, key().stream_seed(cfg.seed));
        let n2 = null_r2(&sys, &y, 50, other.stream_seed(cfg.seed));
        assert_ne!(n1, n2);
    }

    #[test]
    fn relevant_factor_ordering() {
        let a = SeriesId::factor("A");
        let b = SeriesId::factor("B");
        let c = SeriesId::factor("C");
        assert_eq!(
            relevant_factors(&[(a.clone(), 6.0), (b.clone(), 1.0)], 3.0),
            vec![a.clone()]
        );
        assert!(relevant_factors(&[(a.clone(), 1.0), (b.clone(), 2.0)], 3.0).is_empty());
        assert_eq!(
            relevant_factors(&[(c.clone(), 4.0), (b.clone(), 4.0), (a.clone(), 5.0)], 3.0),
            vec![a, b, c]
        );
    }
}
