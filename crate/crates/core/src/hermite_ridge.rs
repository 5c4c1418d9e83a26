//! Degree-4 Hermite-basis ridge regression of a target on one risk factor.
//!
//! The factor is z-scored over the fit window and expanded in the
//! probabilists' Hermite polynomials `He_0..He_4`. Coefficients solve
//! `(H Hᵀ + λ I₅) β = H y` through a Cholesky factorisation of the 5×5
//! Gram matrix.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::panel::{self, Affine, PanelError};

/// Number of basis functions (degree 4 plus the constant).
pub const N_BASIS: usize = 5;

/// Default ridge penalty shared by every (target, factor) pair.
pub const DEFAULT_LAMBDA: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RidgeError {
    #[error("Hermite degree {0} is outside 0..=4")]
    DegreeOutOfRange(usize),
    #[error("target length {y} does not match design width {t}")]
    LengthMismatch { y: usize, t: usize },
    #[error("need more than {N_BASIS} observations, got {0}")]
    TooFewObservations(usize),
    #[error("ridge penalty must be finite and non-negative, got {0}")]
    BadLambda(f64),
    #[error("normal equations are singular")]
    SingularDesign,
    #[error("non-finite value in input")]
    NonFinite,
    #[error(transparent)]
    Panel(#[from] PanelError),
}

/// Probabilists' Hermite polynomial `He_k(x)` for `k` in `0..=4`.
pub fn hermite_basis(x: f64, k: usize) -> Result<f64, RidgeError> {
    if k >= N_BASIS {
        return Err(RidgeError::DegreeOutOfRange(k));
    }
    Ok(hermite_all(x)[k])
}

/// All five basis values at `x`, via the three-term recurrence
/// `He_{k+1} = x He_k - k He_{k-1}`.
#[inline]
pub fn hermite_all(x: f64) -> [f64; N_BASIS] {
    let mut h = [0.0; N_BASIS];
    h[0] = 1.0;
    h[1] = x;
    for k in 1..N_BASIS - 1 {
        h[k + 1] = x * h[k] - k as f64 * h[k - 1];
    }
    h
}

/// The 5×T basis matrix. Stored column-major: `columns[t][k] = He_k(x_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HermiteDesign {
    columns: Vec<[f64; N_BASIS]>,
}

impl HermiteDesign {
    pub fn width(&self) -> usize {
        self.columns.len()
    }

    pub fn column(&self, t: usize) -> &[f64; N_BASIS] {
        &self.columns[t]
    }

    pub fn columns(&self) -> &[[f64; N_BASIS]] {
        &self.columns
    }

    /// Basis row `k` across all observations.
    pub fn row(&self, k: usize) -> Vec<f64> {
        self.columns.iter().map(|c| c[k]).collect()
    }

    pub fn get(&self, k: usize, t: usize) -> f64 {
        self.columns[t][k]
    }

    /// `H Hᵀ` (5×5, symmetric).
    pub fn gram(&self) -> [[f64; N_BASIS]; N_BASIS] {
        let mut g = [[0.0; N_BASIS]; N_BASIS];
        for c in &self.columns {
            for i in 0..N_BASIS {
                for j in i..N_BASIS {
                    g[i][j] += c[i] * c[j];
                }
            }
        }
        for i in 0..N_BASIS {
            for j in 0..i {
                g[i][j] = g[j][i];
            }
        }
        g
    }

    /// `H y`.
    pub fn project(&self, y: &[f64]) -> [f64; N_BASIS] {
        let mut out = [0.0; N_BASIS];
        for (c, &yt) in self.columns.iter().zip(y) {
            for k in 0..N_BASIS {
                out[k] += c[k] * yt;
            }
        }
        out
    }

    /// `Hᵀ β`.
    pub fn fitted(&self, beta: &[f64; N_BASIS]) -> Vec<f64> {
        self.columns.iter().map(|c| dot5(c, beta)).collect()
    }
}

#[inline]
fn dot5(a: &[f64; N_BASIS], b: &[f64; N_BASIS]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2] + a[3] * b[3] + a[4] * b[4]
}

/// Evaluates the basis at every (already standardized) factor value.
pub fn build_design(factor: &[f64]) -> HermiteDesign {
    HermiteDesign {
        columns: factor.iter().map(|&x| hermite_all(x)).collect(),
    }
}

/// Total, explained and residual sums of squares.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SumsOfSquares {
    pub tss: f64,
    pub ess: f64,
    pub rss: f64,
}

/// A fitted Hermite ridge regression for one (target, factor, window).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyFit {
    pub beta: [f64; N_BASIS],
    pub lambda: f64,
    pub r2: f64,
    pub adj_r2: f64,
    /// `RSS / (n - 5)`.
    pub residual_var: f64,
    pub n: usize,
    pub factor_affine: Affine,
    /// Set when the target window has zero variance; r2 and adj_r2 are then 0.
    pub degenerate: bool,
}

impl PolyFit {
    /// Fitted polynomial at a raw factor value.
    pub fn predict(&self, factor_raw: f64) -> f64 {
        self.predict_standardized(self.factor_affine.apply(factor_raw))
    }

    pub fn predict_standardized(&self, z: f64) -> f64 {
        dot5(&self.beta, &hermite_all(z))
    }
}

/// Cholesky factor of `H Hᵀ + λ I`, reusable across targets sharing a design.
#[derive(Debug, Clone)]
pub struct RidgeSystem {
    design: HermiteDesign,
    lambda: f64,
    chol: [[f64; N_BASIS]; N_BASIS],
}

impl RidgeSystem {
    pub fn new(design: HermiteDesign, lambda: f64) -> Result<Self, RidgeError> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(RidgeError::BadLambda(lambda));
        }
        if design.width() <= N_BASIS {
            return Err(RidgeError::TooFewObservations(design.width()));
        }
        if design.columns.iter().flatten().any(|v| !v.is_finite()) {
            return Err(RidgeError::NonFinite);
        }
        let mut a = design.gram();
        for (i, row) in a.iter_mut().enumerate() {
            row[i] += lambda;
        }
        let chol = cholesky(&a)?;
        Ok(Self {
            design,
            lambda,
            chol,
        })
    }

    pub fn design(&self) -> &HermiteDesign {
        &self.design
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Ridge coefficients for target `y`.
    pub fn solve(&self, y: &[f64]) -> [f64; N_BASIS] {
        let rhs = self.design.project(y);
        cholesky_solve(&self.chol, &rhs)
    }

    /// Coefficients plus the residual sum of squares.
    pub fn solve_rss(&self, y: &[f64]) -> ([f64; N_BASIS], f64) {
        let beta = self.solve(y);
        let rss = self
            .design
            .columns
            .iter()
            .zip(y)
            .map(|(c, &yt)| {
                let e = yt - dot5(c, &beta);
                e * e
            })
            .sum();
        (beta, rss)
    }

    pub fn fit(&self, y: &[f64]) -> Result<PolyFit, RidgeError> {
        let t = self.design.width();
        if y.len() != t {
            return Err(RidgeError::LengthMismatch { y: y.len(), t });
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(RidgeError::NonFinite);
        }
        let (beta, rss) = self.solve_rss(y);
        let tss = total_sum_of_squares(y);
        let degenerate = is_degenerate_tss(tss, y);
        let n = t as f64;
        let p = N_BASIS as f64;
        let (r2, adj_r2) = if degenerate {
            (0.0, 0.0)
        } else {
            (
                1.0 - rss / tss,
                1.0 - (rss / (n - p)) / (tss / (n - 1.0)),
            )
        };
        Ok(PolyFit {
            beta,
            lambda: self.lambda,
            r2,
            adj_r2,
            residual_var: rss / (n - p),
            n: t,
            factor_affine: Affine::IDENTITY,
            degenerate,
        })
    }
}

pub(crate) fn total_sum_of_squares(y: &[f64]) -> f64 {
    let m = panel::mean(y);
    y.iter().map(|v| (v - m) * (v - m)).sum()
}

/// TSS at the rounding floor of the target's magnitude counts as zero.
pub(crate) fn is_degenerate_tss(tss: f64, y: &[f64]) -> bool {
    let scale = y.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let floor = 64.0 * f64::EPSILON * scale;
    tss <= y.len() as f64 * floor * floor
}

fn cholesky(a: &[[f64; N_BASIS]; N_BASIS]) -> Result<[[f64; N_BASIS]; N_BASIS], RidgeError> {
    let mut l = [[0.0; N_BASIS]; N_BASIS];
    let max_diag = (0..N_BASIS).fold(0.0f64, |m, i| m.max(a[i][i]));
    let tol = max_diag * 1e-13;
    for j in 0..N_BASIS {
        let mut d = a[j][j];
        for k in 0..j {
            d -= l[j][k] * l[j][k];
        }
        if !(d > tol) {
            return Err(RidgeError::SingularDesign);
        }
        let djj = d.sqrt();
        l[j][j] = djj;
        for i in j + 1..N_BASIS {
            let mut s = a[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            l[i][j] = s / djj;
        }
    }
    Ok(l)
}

fn cholesky_solve(l: &[[f64; N_BASIS]; N_BASIS], b: &[f64; N_BASIS]) -> [f64; N_BASIS] {
    let mut z = [0.0; N_BASIS];
    for i in 0..N_BASIS {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i][k] * z[k];
        }
        z[i] = s / l[i][i];
    }
    let mut x = [0.0; N_BASIS];
    for i in (0..N_BASIS).rev() {
        let mut s = z[i];
        for k in i + 1..N_BASIS {
            s -= l[k][i] * x[k];
        }
        x[i] = s / l[i][i];
    }
    x
}

/// Fits `y` on a prebuilt design. The resulting fit assumes the design was
/// built from already-standardized values (identity affine).
pub fn fit_ridge(design: &HermiteDesign, y: &[f64], lambda: f64) -> Result<PolyFit, RidgeError> {
    if y.len() != design.width() {
        return Err(RidgeError::LengthMismatch {
            y: y.len(),
            t: design.width(),
        });
    }
    RidgeSystem::new(design.clone(), lambda)?.fit(y)
}

/// Standardizes the raw factor window, builds the design and fits.
pub fn fit_pair(factor_raw: &[f64], y: &[f64], lambda: f64) -> Result<PolyFit, RidgeError> {
    let (system, affine) = pair_system(factor_raw, lambda)?;
    let mut fit = system.fit(y)?;
    fit.factor_affine = affine;
    Ok(fit)
}

/// Ridge system for a raw factor window plus the affine used to standardize it.
pub fn pair_system(factor_raw: &[f64], lambda: f64) -> Result<(RidgeSystem, Affine), RidgeError> {
    if factor_raw.iter().any(|v| !v.is_finite()) {
        return Err(RidgeError::NonFinite);
    }
    let (z, affine) = panel::standardize(factor_raw)?;
    Ok((RidgeSystem::new(build_design(&z), lambda)?, affine))
}

/// Fitted polynomial at a raw factor value.
pub fn predict(fit: &PolyFit, factor_raw: f64) -> f64 {
    fit.predict(factor_raw)
}

/// Sums of squares of `fit` against the design and target it was fitted on.
pub fn decompose(fit: &PolyFit, design: &HermiteDesign, y: &[f64]) -> SumsOfSquares {
    let yhat = design.fitted(&fit.beta);
    let m = panel::mean(y);
    let mut ss = SumsOfSquares {
        tss: 0.0,
        ess: 0.0,
        rss: 0.0,
    };
    for (&yt, &ft) in y.iter().zip(&yhat) {
        ss.tss += (yt - m) * (yt - m);
        ss.ess += (ft - m) * (ft - m);
        ss.rss += (yt - ft) * (yt - ft);
    }
    ss
}
