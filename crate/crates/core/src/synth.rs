//! Synthetic panels with planted factor relationships.
//!
//! Factors follow AR(1) processes. Each signal fund is a degree-4 Hermite
//! polynomial of one standardized factor plus Gaussian noise; noise funds are
//! white noise. AUM and volume are geometric random walks. One ChaCha stream
//! derived from the spec seed drives everything, so output depends only on the
//! spec.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hermite_ridge::{hermite_all, N_BASIS};
use crate::panel::{self, MonthIndex, PanelError, RawSeries, ReturnPanel, SeriesId};
use crate::seeding::{self, streams};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Panel(#[from] PanelError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalFund {
    /// Zero-based index of the driving factor.
    pub factor: usize,
    /// Hermite coefficients He0..He4 applied to the standardized factor.
    pub coefficients: [f64; N_BASIS],
    pub noise_sd: f64,
}

impl SignalFund {
    /// Standard deviation of the planted component when the factor is standard normal.
    pub fn signal_sd(&self) -> f64 {
        const FACTORIALS: [f64; N_BASIS] = [1.0, 1.0, 2.0, 6.0, 24.0];
        self.coefficients[1..]
            .iter()
            .zip(&FACTORIALS[1..])
            .map(|(c, f)| c * c * f)
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FactorDynamics {
    pub ar: f64,
    pub innovation_sd: f64,
    /// Student-t innovations (rescaled to `innovation_sd`) when set.
    #[serde(default)]
    pub student_t_df: Option<f64>,
}

impl Default for FactorDynamics {
    fn default() -> Self {
        Self {
            ar: 0.2,
            innovation_sd: 0.04,
            student_t_df: None,
        }
    }
}

/// Geometric random walk: `x_t = x_{t-1} · exp(drift + vol · ε_t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WalkSpec {
    pub initial: f64,
    pub drift: f64,
    pub vol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_factors: usize,
    pub n_funds: usize,
    pub n_months: usize,
    pub start: MonthIndex,
    pub seed: u64,
    pub signals: Vec<SignalFund>,
    pub noise_funds: usize,
    pub noise_fund_sd: f64,
    #[serde(default)]
    pub factor_dynamics: FactorDynamics,
    #[serde(default = "default_aum")]
    pub aum: WalkSpec,
    #[serde(default = "default_volume")]
    pub volume: WalkSpec,
}

fn default_aum() -> WalkSpec {
    WalkSpec {
        initial: 100.0,
        drift: 0.005,
        vol: 0.05,
    }
}

fn default_volume() -> WalkSpec {
    WalkSpec {
        initial: 10.0,
        drift: 0.0,
        vol: 0.1,
    }
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self::planted(8, 14, 6, 120, 0)
    }
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

impl SynthSpec {
    /// A spec with `n_signal` planted funds cycling over the factors, drawn
    /// deterministically from `seed`. Intercepts differ across funds so that
    /// some funds have persistently higher mean returns than others.
    pub fn planted(n_factors: usize, n_signal: usize, n_noise: usize, n_months: usize, seed: u64) -> Self {
        let mut rng = seeding::rng_from(seeding::derive_seed(seed, &[streams::SYNTH.as_bytes(), b"planted"]));
        let signals = (0..n_signal)
            .map(|i| {
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                SignalFund {
                    factor: i % n_factors.max(1),
                    coefficients: [
                        uniform(&mut rng, -0.004, 0.008),
                        sign * uniform(&mut rng, 0.008, 0.015),
                        uniform(&mut rng, -0.004, 0.004),
                        uniform(&mut rng, -0.002, 0.002),
                        uniform(&mut rng, -0.001, 0.001),
                    ],
                    noise_sd: 0.008,
                }
            })
            .collect();
        Self {
            n_factors,
            n_funds: n_signal + n_noise,
            n_months,
            start: MonthIndex::new(2000, 1).expect("valid month"),
            seed,
            signals,
            noise_funds: n_noise,
            noise_fund_sd: 0.015,
            factor_dynamics: FactorDynamics::default(),
            aum: default_aum(),
            volume: default_volume(),
        }
    }

    /// Sets each signal fund's noise to `ratio` times its planted signal sd.
    pub fn with_noise_ratio(mut self, ratio: f64) -> Self {
        for s in &mut self.signals {
            s.noise_sd = ratio * s.signal_sd();
        }
        self
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        if self.n_factors == 0 || self.n_months < 2 {
            return bad("need at least one factor and two months".into());
        }
        if self.signals.len() + self.noise_funds != self.n_funds {
            return bad(format!(
                "n_funds ({}) must equal signal funds ({}) plus noise funds ({})",
                self.n_funds,
                self.signals.len(),
                self.noise_funds
            ));
        }
        for (i, s) in self.signals.iter().enumerate() {
            if s.factor >= self.n_factors {
                return bad(format!("signal {i} uses factor {} of {}", s.factor, self.n_factors));
            }
            if !(s.noise_sd >= 0.0) || s.coefficients.iter().any(|c| !c.is_finite()) {
                return bad(format!("signal {i} has invalid coefficients or noise sd"));
            }
        }
        if self.noise_funds > 0 && !(self.noise_fund_sd > 0.0) {
            return bad("noise fund sd must be positive".into());
        }
        let d = &self.factor_dynamics;
        if !(d.ar > -1.0 && d.ar < 1.0) {
            return bad(format!("AR coefficient {} outside (-1, 1)", d.ar));
        }
        if !(d.innovation_sd > 0.0) {
            return bad("innovation sd must be positive".into());
        }
        if let Some(df) = d.student_t_df {
            if !(df > 2.0) {
                return bad(format!("Student-t df {df} must exceed 2"));
            }
        }
        for (name, w) in [("aum", &self.aum), ("volume", &self.volume)] {
            if !(w.initial > 0.0) || !w.drift.is_finite() || !(w.vol >= 0.0) {
                return bad(format!("{name} walk needs positive initial value and finite parameters"));
            }
        }
        Ok(())
    }

    pub fn factor_id(i: usize) -> SeriesId {
        SeriesId::factor(format!("F{:02}", i + 1))
    }

    pub fn signal_fund_id(i: usize) -> SeriesId {
        SeriesId::fund(format!("S{:03}", i + 1))
    }

    pub fn noise_fund_id(i: usize) -> SeriesId {
        SeriesId::fund(format!("N{:03}", i + 1))
    }

    pub fn from_json(text: &str) -> Result<Self, SynthError> {
        let spec: Self = serde_json::from_str(text).map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedPair {
    pub fund: String,
    pub factor: String,
    pub coefficients: [f64; N_BASIS],
    pub noise_sd: f64,
    pub signal_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub planted: Vec<PlantedPair>,
    pub noise_funds: Vec<String>,
    /// Full-sample mean and sd used to standardize each factor.
    pub factor_standardization: Vec<(String, f64, f64)>,
}

impl GroundTruth {
    pub fn planted_factor(&self, fund: &str) -> Option<&str> {
        self.planted.iter().find(|p| p.fund == fund).map(|p| p.factor.as_str())
    }
}

fn innovation(rng: &mut impl Rng, d: &FactorDynamics, t_dist: Option<&StudentT<f64>>) -> f64 {
    match (t_dist, d.student_t_df) {
        (Some(t), Some(df)) => d.innovation_sd * ((df - 2.0) / df).sqrt() * t.sample(rng),
        _ => d.innovation_sd * rng.sample::<f64, _>(StandardNormal),
    }
}

fn walk(rng: &mut impl Rng, w: &WalkSpec, n: usize) -> Vec<f64> {
    let mut x = w.initial;
    (0..n)
        .map(|_| {
            x *= (w.drift + w.vol * rng.sample::<f64, _>(StandardNormal)).exp();
            x
        })
        .collect()
}

fn dated(start: MonthIndex, values: &[f64]) -> Vec<(MonthIndex, f64)> {
    values
        .iter()
        .enumerate()
        .map(|(t, &v)| (start.add_months(t as i64), v))
        .collect()
}

/// Generates the panel (returns, AUM, volume) and its ground truth.
pub fn generate(spec: &SynthSpec) -> Result<(ReturnPanel, GroundTruth), SynthError> {
    spec.validate()?;
    let mut rng = seeding::rng_from(seeding::substream(spec.seed, streams::SYNTH));
    let n = spec.n_months;
    let d = &spec.factor_dynamics;
    let t_dist = match d.student_t_df {
        Some(df) => Some(StudentT::new(df).map_err(|e| SynthError::InvalidSpec(e.to_string()))?),
        None => None,
    };
    let stationary_sd = d.innovation_sd / (1.0 - d.ar * d.ar).sqrt();

    let mut factors = Vec::with_capacity(spec.n_factors);
    for _ in 0..spec.n_factors {
        let mut x = stationary_sd * rng.sample::<f64, _>(StandardNormal);
        let row: Vec<f64> = (0..n)
            .map(|_| {
                x = d.ar * x + innovation(&mut rng, d, t_dist.as_ref());
                x
            })
            .collect();
        factors.push(row);
    }
    let mut standardized = Vec::with_capacity(spec.n_factors);
    let mut factor_standardization = Vec::with_capacity(spec.n_factors);
    for (i, row) in factors.iter().enumerate() {
        let (z, affine) = panel::standardize(row)?;
        standardized.push(z);
        factor_standardization.push((SynthSpec::factor_id(i).id, affine.mean, affine.sd));
    }

    let mut raw: Vec<RawSeries> = factors
        .iter()
        .enumerate()
        .map(|(i, row)| (SynthSpec::factor_id(i), dated(spec.start, row)))
        .collect();
    let mut planted = Vec::with_capacity(spec.signals.len());
    let mut fund_ids = Vec::with_capacity(spec.n_funds);
    for (i, s) in spec.signals.iter().enumerate() {
        let id = SynthSpec::signal_fund_id(i);
        let row: Vec<f64> = standardized[s.factor]
            .iter()
            .map(|&z| {
                let h = hermite_all(z);
                let signal: f64 = h.iter().zip(&s.coefficients).map(|(a, b)| a * b).sum();
                signal + s.noise_sd * rng.sample::<f64, _>(StandardNormal)
            })
            .collect();
        planted.push(PlantedPair {
            fund: id.id.clone(),
            factor: SynthSpec::factor_id(s.factor).id,
            coefficients: s.coefficients,
            noise_sd: s.noise_sd,
            signal_sd: s.signal_sd(),
        });
        raw.push((id.clone(), dated(spec.start, &row)));
        fund_ids.push(id);
    }
    let mut noise_funds = Vec::with_capacity(spec.noise_funds);
    for i in 0..spec.noise_funds {
        let id = SynthSpec::noise_fund_id(i);
        let row: Vec<f64> = (0..n)
            .map(|_| spec.noise_fund_sd * rng.sample::<f64, _>(StandardNormal))
            .collect();
        noise_funds.push(id.id.clone());
        raw.push((id.clone(), dated(spec.start, &row)));
        fund_ids.push(id);
    }

    let mut aum = Vec::with_capacity(fund_ids.len());
    let mut volume = Vec::with_capacity(fund_ids.len());
    for id in &fund_ids {
        aum.push((id.clone(), dated(spec.start, &walk(&mut rng, &spec.aum, n))));
        volume.push((id.clone(), dated(spec.start, &walk(&mut rng, &spec.volume, n))));
    }
    let panel = ReturnPanel::align(raw)?.with_aum(aum)?.with_volume(volume)?;
    Ok((
        panel,
        GroundTruth {
            seed: spec.seed,
            planted,
            noise_funds,
            factor_standardization,
        },
    ))
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> SynthError {
    SynthError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Writes `returns.csv`, `aum.csv`, `volume.csv` and `ground_truth.json` into `dir`.
pub fn write_outputs(dir: &Path, panel: &ReturnPanel, truth: &GroundTruth) -> Result<(), SynthError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    panel::write_returns_csv(panel, &dir.join("returns.csv"))?;
    panel::write_aum_csv(panel, &dir.join("aum.csv"))?;
    panel::write_volume_csv(panel, &dir.join("volume.csv"))?;
    let path = dir.join("ground_truth.json");
    let text = serde_json::to_string_pretty(truth).expect("ground truth serializes");
    std::fs::write(&path, text + "\n").map_err(|e| io_err(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hermite_ridge::fit_pair;
    use crate::itf::{label_trend, TrendClass, DEFAULT_TAU};
    use crate::panel::SeriesKind;

    #[test]
    fn same_seed_same_panel() {
        let spec = SynthSpec::default();
        let (a, ta) = generate(&spec).unwrap();
        let (b, tb) = generate(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        let other = SynthSpec {
            seed: 1,
            ..spec.clone()
        };
        assert_ne!(generate(&other).unwrap().0, a);
    }

    #[test]
    fn shapes_and_positivity() {
        let spec = SynthSpec::default();
        let (panel, truth) = generate(&spec).unwrap();
        assert_eq!(panel.calendar().len(), spec.n_months);
        assert_eq!(panel.ids_of_kind(SeriesKind::Factor).len(), spec.n_factors);
        let funds = panel.ids_of_kind(SeriesKind::Fund);
        assert_eq!(funds.len(), spec.n_funds);
        assert_eq!(truth.planted.len(), spec.signals.len());
        for f in &funds {
            for &m in panel.calendar() {
                assert!(panel.aum_at(f, m).unwrap() > 0.0);
                assert!(panel.volume_at(f, m).unwrap() > 0.0);
            }
        }
    }

    #[test]
    fn noiseless_signal_is_recovered_exactly() {
        let mut spec = SynthSpec::planted(3, 3, 0, 120, 5);
        for s in &mut spec.signals {
            s.noise_sd = 0.0;
        }
        let (panel, truth) = generate(&spec).unwrap();
        for p in &truth.planted {
            let y = panel.history_through(&SeriesId::fund(&p.fund), *panel.calendar().last().unwrap()).unwrap();
            let x = panel
                .history_through(&SeriesId::factor(&p.factor), *panel.calendar().last().unwrap())
                .unwrap();
            let fit = fit_pair(&x, &y, 0.0).unwrap();
            for (b, c) in fit.beta.iter().zip(&p.coefficients) {
                assert!((b - c).abs() < 1e-6, "{b} vs {c}");
            }
        }
    }

    #[test]
    fn heavy_tail_innovations_are_finite() {
        let mut spec = SynthSpec::planted(2, 2, 1, 240, 3);
        spec.factor_dynamics.student_t_df = Some(4.0);
        let (panel, _) = generate(&spec).unwrap();
        let x = panel.history_through(&SynthSpec::factor_id(0), *panel.calendar().last().unwrap()).unwrap();
        assert!(x.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = SynthSpec::default();
        spec.factor_dynamics.ar = 1.0;
        assert!(matches!(generate(&spec), Err(SynthError::InvalidSpec(_))));
        let mut spec = SynthSpec::default();
        spec.n_funds += 1;
        assert!(spec.validate().is_err());
        let mut spec = SynthSpec::default();
        spec.signals[0].factor = 99;
        assert!(spec.validate().is_err());
        assert!(SynthSpec::from_json("{\"n_factors\": 2}").is_err());
    }

    #[test]
    fn json_round_trip() {
        let spec = SynthSpec::default();
        assert_eq!(SynthSpec::from_json(&spec.to_json()).unwrap(), spec);
    }

    #[test]
    fn default_spec_balances_trend_classes() {
        let (panel, _) = generate(&SynthSpec::default()).unwrap();
        let mut counts = [0usize; 3];
        for f in panel.ids_of_kind(SeriesKind::Fund) {
            for v in panel.row(&f).unwrap().iter().flatten() {
                counts[label_trend(*v, DEFAULT_TAU).index()] += 1;
            }
        }
        let total: usize = counts.iter().sum();
        for c in [TrendClass::Down, TrendClass::Unchanged, TrendClass::Up] {
            let share = counts[c.index()] as f64 / total as f64;
            assert!(share >= 0.15, "{c:?} share {share}");
        }
    }
}
