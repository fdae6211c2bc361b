//! Redescending M-estimation of a scaling parameter.
//!
//! ## Purpose
//!
//! Given per-item contrasts `Y_i` that all equal a common scaling value
//! under no DIF, estimate that value while giving zero weight to items
//! whose contrast sits implausibly far from the consensus. With a
//! redescending psi function and a robust starting value, the estimator
//! tolerates DIF in up to half of the items.
//!
//! ## Conventions
//!
//! * Residuals are scaled by the item *variances*: `U_i = (Y_i - theta) / tau_i`,
//!   not by standard deviations. The tuning constants
//!   `k_i = Phi^{-1}(1 - alpha/2) * sqrt(omega_i)` are calibrated to that
//!   convention, so the pair must never be mixed with SD-scaled residuals.
//! * `tau_i` may depend on `theta`; solvers re-evaluate it at each
//!   iterate when `update_tau` is set, along with the tuning constants.
//!
//! ## Invariants
//!
//! * A fit with `converged = true` satisfies the estimating equation
//!   `|sum_i psi(U_i)| < 1e-8` at its final `theta`.
//! * `flagged_i` holds exactly when `weights[i] == 0`, which for the
//!   bisquare family is `|U_i| >= k_i`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::normal::normal_quantile;
use crate::scaling::{self, ScalingError};

/// Convergence tolerance on successive theta iterates.
pub const DEFAULT_TOL: f64 = 1e-5;
/// Iteration cap; exceeding it flags the fit as non-converged.
pub const DEFAULT_MAX_ITER: usize = 100;
/// A converged fit drives the estimating equation below this.
pub const ESTIMATING_EQ_TOL: f64 = 1e-8;
/// Grid resolution for the grid starting value.
pub const GRID_STEP: f64 = 0.05;
/// Newton refuses to start where the estimating function is this flat.
pub const STATIONARY_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("contrast list is empty")]
    Empty,
    #[error("contrast[{index}] is not finite")]
    BadContrast { index: usize },
    #[error("tau list has length {taus}, contrasts have length {ys}")]
    LengthMismatch { ys: usize, taus: usize },
    #[error(transparent)]
    Scaling(#[from] ScalingError),
    #[error("alpha must be in (0, 1), got {0}")]
    BadAlpha(f64),
    #[error("downtune_alpha must be in (0, 1)")]
    BadDowntune,
    #[error("explicit tuning constants: expected {expected}, got {got}")]
    BadTuningLen { expected: usize, got: usize },
    #[error("tuning constant k[{index}] must be nonnegative and finite")]
    BadTuning { index: usize },
    #[error("start value is not finite")]
    BadStart,
    #[error("all weights are zero at theta = {theta}; no item is within its tuning window")]
    AllWeightsZero { theta: f64 },
    #[error("estimating function is stationary at the start value (|slope| <= {STATIONARY_TOL})")]
    StationaryStart,
}

// ==== Tau functions =======================================================

/// Source of the per-item residual variances at a given scaling value.
pub trait TauFn {
    fn taus(&self, theta: f64) -> Result<Vec<f64>, ScalingError>;

    /// True when `taus` does not depend on `theta`; lets the grid search
    /// skip re-evaluation and prune flat stretches exactly.
    fn is_constant(&self) -> bool {
        false
    }
}

/// Fixed variances, independent of the scaling value.
#[derive(Debug, Clone)]
pub struct ConstTaus(pub Vec<f64>);

impl TauFn for ConstTaus {
    fn taus(&self, _theta: f64) -> Result<Vec<f64>, ScalingError> {
        Ok(self.0.clone())
    }
    fn is_constant(&self) -> bool {
        true
    }
}

impl<F> TauFn for F
where
    F: Fn(f64) -> Result<Vec<f64>, ScalingError>,
{
    fn taus(&self, theta: f64) -> Result<Vec<f64>, ScalingError> {
        self(theta)
    }
}

// ==== Bisquare family =====================================================

/// Bisquare psi: `u (1 - (u/k)^2)^2` inside `|u| <= k`, zero outside.
#[inline]
pub fn bisquare_psi(u: f64, k: f64) -> f64 {
    if k <= 0.0 {
        return 0.0;
    }
    let t = u / k;
    let s = 1.0 - t * t;
    if s <= 0.0 {
        0.0
    } else {
        u * s * s
    }
}

/// Bisquare weight: `psi(u) / u`, i.e. `(1 - (u/k)^2)^2` inside the window.
#[inline]
pub fn bisquare_weight(u: f64, k: f64) -> f64 {
    if k <= 0.0 {
        return 0.0;
    }
    let t = u / k;
    let s = 1.0 - t * t;
    if s <= 0.0 {
        0.0
    } else {
        s * s
    }
}

/// Bisquare rho (integral of psi): `(k^2/6)(1 - (1 - (u/k)^2)^3)` inside
/// the window, capped at `k^2/6` outside.
#[inline]
pub fn bisquare_rho(u: f64, k: f64) -> f64 {
    if k <= 0.0 {
        return 0.0;
    }
    let t = u / k;
    let s = 1.0 - t * t;
    let cap = k * k / 6.0;
    if s <= 0.0 {
        cap
    } else {
        cap * (1.0 - s * s * s)
    }
}

/// Derivative of bisquare psi: `(1 - t^2)(1 - 5 t^2)` with `t = u/k`
/// inside the window, zero outside.
#[inline]
pub fn bisquare_psi_prime(u: f64, k: f64) -> f64 {
    if k <= 0.0 {
        return 0.0;
    }
    let t2 = (u / k) * (u / k);
    if t2 >= 1.0 {
        0.0
    } else {
        (1.0 - t2) * (1.0 - 5.0 * t2)
    }
}

// ==== Psi specification ===================================================

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsiFamily {
    Bisquare,
}

/// Psi family plus its tuning policy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PsiSpec {
    pub family: PsiFamily,
    /// Target per-item false flagging rate; tuning constants are the
    /// `1 - alpha/2` normal quantile times `sqrt(omega_i)`.
    pub alpha: f64,
    /// Explicit per-item tuning constants. When `None`, constants are
    /// derived from the current taus at every (re)tuning point.
    pub k: Option<Vec<f64>>,
    /// Optional separate rate used while *estimating*: a smaller alpha
    /// widens the tuning windows, smoothing away spurious local
    /// solutions; a larger one tightens them. Final tests still run at
    /// `alpha`.
    pub downtune_alpha: Option<f64>,
}

impl PsiSpec {
    pub fn bisquare(alpha: f64) -> Self {
        PsiSpec {
            family: PsiFamily::Bisquare,
            alpha,
            k: None,
            downtune_alpha: None,
        }
    }

    /// The alpha used to derive tuning constants during estimation.
    pub fn estimation_alpha(&self) -> f64 {
        self.downtune_alpha.unwrap_or(self.alpha)
    }

    pub fn validate(&self, m: usize) -> Result<(), SolveError> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(SolveError::BadAlpha(self.alpha));
        }
        if let Some(d) = self.downtune_alpha {
            if !(d > 0.0 && d < 1.0) {
                return Err(SolveError::BadDowntune);
            }
        }
        if let Some(ks) = &self.k {
            if ks.len() != m {
                return Err(SolveError::BadTuningLen {
                    expected: m,
                    got: ks.len(),
                });
            }
            for (index, &k) in ks.iter().enumerate() {
                if !(k.is_finite() && k >= 0.0) {
                    return Err(SolveError::BadTuning { index });
                }
            }
        }
        Ok(())
    }
}

/// Per-item tuning constants `k_i = Phi^{-1}(1 - alpha/2) sqrt(omega_i)`,
/// calibrated for residuals scaled by variances.
pub fn tune_k(taus: &[f64], alpha: f64) -> Result<Vec<f64>, SolveError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(SolveError::BadAlpha(alpha));
    }
    let q = normal_quantile(1.0 - alpha / 2.0);
    (0..taus.len())
        .map(|i| Ok(q * scaling::omega(taus, i)?.max(0.0).sqrt()))
        .collect()
}

// ==== Fit result ==========================================================

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    Intercept,
    Slope,
}

/// Result of one robust scaling fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdifFit {
    pub kind: ProblemKind,
    /// Estimated scaling value.
    pub theta: f64,
    /// Variance of the efficient no-DIF estimator at `theta`
    /// (`1 / sum 1/tau_i`); the asymptotic variance of `theta` itself.
    pub var_theta: f64,
    /// Starting value the solver was given.
    pub start: f64,
    /// Per-item variances at the final `theta`.
    pub taus: Vec<f64>,
    /// Tuning constants in force at the final `theta`.
    pub k: Vec<f64>,
    /// Scaled residuals `U_i = (Y_i - theta) / tau_i`.
    pub residuals: Vec<f64>,
    /// Bisquare weights `W(U_i)` in [0, 1].
    pub weights: Vec<f64>,
    /// `weights[i] == 0`, i.e. `|U_i| >= k_i`: the item lies outside its
    /// tuning window and contributed nothing at convergence.
    pub flagged: Vec<bool>,
    pub iterations: usize,
    pub converged: bool,
    /// Objective `R(theta) = sum_i rho(U_i)` at the final `theta`.
    pub objective: f64,
}

// ==== Solver options ======================================================

#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    /// Re-evaluate taus (and derived tuning constants) at each iterate.
    pub update_tau: bool,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            update_tau: true,
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
        }
    }
}

fn validate_ys(ys: &[f64]) -> Result<(), SolveError> {
    if ys.is_empty() {
        return Err(SolveError::Empty);
    }
    for (index, y) in ys.iter().enumerate() {
        if !y.is_finite() {
            return Err(SolveError::BadContrast { index });
        }
    }
    Ok(())
}

/// Taus and tuning constants at a given theta.
fn state_at<T: TauFn + ?Sized>(
    tau_fn: &T,
    spec: &PsiSpec,
    m: usize,
    theta: f64,
) -> Result<(Vec<f64>, Vec<f64>), SolveError> {
    let taus = tau_fn.taus(theta)?;
    if taus.len() != m {
        return Err(SolveError::LengthMismatch {
            ys: m,
            taus: taus.len(),
        });
    }
    for (index, &t) in taus.iter().enumerate() {
        if !(t.is_finite() && t > 0.0) {
            return Err(SolveError::Scaling(ScalingError::BadTau {
                index,
                value: t,
            }));
        }
    }
    let ks = match &spec.k {
        Some(ks) => ks.clone(),
        None => tune_k(&taus, spec.estimation_alpha())?,
    };
    Ok((taus, ks))
}

/// Estimating function `Psi(theta) = sum_i psi((y_i - theta)/tau_i)`.
fn estimating_fn(ys: &[f64], taus: &[f64], ks: &[f64], theta: f64) -> f64 {
    ys.iter()
        .zip(taus)
        .zip(ks)
        .map(|((y, tau), k)| bisquare_psi((y - theta) / tau, *k))
        .sum()
}

/// Slope of the estimating function with taus held fixed:
/// `sum_i psi'((y_i - theta)/tau_i) / tau_i` (note: this is -dPsi/dtheta).
fn estimating_slope(ys: &[f64], taus: &[f64], ks: &[f64], theta: f64) -> f64 {
    ys.iter()
        .zip(taus)
        .zip(ks)
        .map(|((y, tau), k)| bisquare_psi_prime((y - theta) / tau, *k) / tau)
        .sum()
}

/// Assembles the fit from the tau state actually in force at `theta`;
/// `converged_hint` lets a solver veto convergence (an exhausted plain
/// Newton run) while the estimating-equation check applies always.
fn finish_fit(
    kind: ProblemKind,
    ys: &[f64],
    taus: Vec<f64>,
    ks: Vec<f64>,
    theta: f64,
    start: f64,
    iterations: usize,
    converged_hint: bool,
) -> Result<RdifFit, SolveError> {
    let residuals: Vec<f64> = ys
        .iter()
        .zip(&taus)
        .map(|(y, tau)| (y - theta) / tau)
        .collect();
    let weights: Vec<f64> = residuals
        .iter()
        .zip(&ks)
        .map(|(u, k)| bisquare_weight(*u, *k))
        .collect();
    let flagged: Vec<bool> = weights.iter().map(|w| *w == 0.0).collect();
    let objective = residuals
        .iter()
        .zip(&ks)
        .map(|(u, k)| bisquare_rho(*u, *k))
        .sum();
    let psi_sum = estimating_fn(ys, &taus, &ks, theta);
    Ok(RdifFit {
        kind,
        theta,
        var_theta: scaling::var_estimator(&taus)?,
        start,
        taus,
        k: ks,
        residuals,
        weights,
        flagged,
        iterations,
        converged: converged_hint && psi_sum.abs() < ESTIMATING_EQ_TOL,
        objective,
    })
}

/// Evaluates the estimating function at `theta`, first refreshing the
/// tau state when the solve updates taus per iterate.
fn eval_psi<T: TauFn + ?Sized>(
    ys: &[f64],
    tau_fn: &T,
    spec: &PsiSpec,
    update_tau: bool,
    taus: &mut Vec<f64>,
    ks: &mut Vec<f64>,
    theta: f64,
) -> Result<f64, SolveError> {
    if update_tau {
        let (t, k) = state_at(tau_fn, spec, ys.len(), theta)?;
        *taus = t;
        *ks = k;
    }
    Ok(estimating_fn(ys, taus, ks, theta))
}

/// Drives the estimating equation to a root near `theta`.
///
/// The weighted-mean recursion contracts arbitrarily slowly when items
/// sit near their tuning boundary, so neither the step-tolerance exit
/// nor an exhausted iteration cap says anything about `Psi` itself.
/// This finisher brackets the nearby sign change (a stable root has
/// `Psi` falling through zero) and closes in with Newton steps that
/// fall back to bisection whenever they leave the bracket. Without a
/// bracket it returns the probed point with the smallest `|Psi|`; the
/// caller's convergence check then reports the failure.
fn polish_root<T: TauFn + ?Sized>(
    ys: &[f64],
    tau_fn: &T,
    spec: &PsiSpec,
    opts: &SolveOptions,
    theta: f64,
    taus: &mut Vec<f64>,
    ks: &mut Vec<f64>,
) -> Result<f64, SolveError> {
    const TARGET: f64 = 0.5 * ESTIMATING_EQ_TOL;
    let f0 = eval_psi(ys, tau_fn, spec, opts.update_tau, taus, ks, theta)?;
    if f0.abs() < TARGET {
        return Ok(theta);
    }
    let span = {
        let (lo, hi) = ys
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &y| {
                (lo.min(y), hi.max(y))
            });
        (hi - lo).max(1.0)
    };
    let mut best = (theta, f0.abs());
    // Outward probes with doubling radius on both sides, likely side
    // first, until the sign flips.
    let mut bracket = None;
    let mut h = opts.tol.max(1e-12);
    'probe: while h <= 2.0 * span {
        for dir in [f0.signum(), -f0.signum()] {
            let cand = theta + dir * h;
            let fc = eval_psi(ys, tau_fn, spec, opts.update_tau, taus, ks, cand)?;
            if fc == 0.0 {
                return Ok(cand);
            }
            if fc.abs() < best.1 {
                best = (cand, fc.abs());
            }
            if fc.signum() != f0.signum() {
                bracket = Some(if cand < theta {
                    (cand, fc, theta, f0)
                } else {
                    (theta, f0, cand, fc)
                });
                break 'probe;
            }
        }
        h *= 2.0;
    }
    let Some((mut a, mut fa, mut b, fb)) = bracket else {
        eval_psi(ys, tau_fn, spec, opts.update_tau, taus, ks, best.0)?;
        return Ok(best.0);
    };
    let mut x = if fa.abs() <= fb.abs() { a } else { b };
    // Re-sync the tau state to the working point before using slopes.
    let mut fx = eval_psi(ys, tau_fn, spec, opts.update_tau, taus, ks, x)?;
    for _ in 0..80 {
        if fx.abs() < TARGET {
            return Ok(x);
        }
        if fx.abs() < best.1 {
            best = (x, fx.abs());
        }
        let slope = estimating_slope(ys, taus, ks, x);
        let mut c = if slope > STATIONARY_TOL {
            x + fx / slope
        } else {
            f64::NAN
        };
        if !c.is_finite() || c <= a || c >= b {
            c = 0.5 * (a + b);
        }
        if c == a || c == b || (b - a) < 1e-15 * (1.0 + x.abs()) {
            break;
        }
        let fc = eval_psi(ys, tau_fn, spec, opts.update_tau, taus, ks, c)?;
        if fc == 0.0 {
            return Ok(c);
        }
        if fc.signum() == fa.signum() {
            (a, fa) = (c, fc);
        } else {
            b = c;
        }
        (x, fx) = (c, fc);
    }
    let ret = if fx.abs() <= best.1 { x } else { best.0 };
    eval_psi(ys, tau_fn, spec, opts.update_tau, taus, ks, ret)?;
    Ok(ret)
}

// ==== IRLS ================================================================

/// Iteratively reweighted least squares: repeats
/// `theta <- sum w_i y_i / sum w_i` with `w_i = W(U_i) / tau_i` until the
/// iterates stabilize or the iteration cap is hit, then finishes with a
/// safeguarded root search so a converged fit satisfies the estimating
/// equation to within [`ESTIMATING_EQ_TOL`].
pub fn irls_solve<T: TauFn + ?Sized>(
    kind: ProblemKind,
    ys: &[f64],
    tau_fn: &T,
    spec: &PsiSpec,
    theta0: f64,
    opts: &SolveOptions,
) -> Result<RdifFit, SolveError> {
    validate_ys(ys)?;
    spec.validate(ys.len())?;
    if !theta0.is_finite() {
        return Err(SolveError::BadStart);
    }
    let (mut taus, mut ks) = state_at(tau_fn, spec, ys.len(), theta0)?;
    let mut theta = theta0;
    let mut iterations = 0;
    for _ in 0..opts.max_iter {
        iterations += 1;
        let theta_new = weighted_mean_step(ys, &taus, &ks, theta)?;
        let delta = (theta_new - theta).abs();
        theta = theta_new;
        if opts.update_tau {
            (taus, ks) = state_at(tau_fn, spec, ys.len(), theta)?;
        }
        if delta < opts.tol {
            break;
        }
    }
    theta = polish_root(ys, tau_fn, spec, opts, theta, &mut taus, &mut ks)?;
    finish_fit(kind, ys, taus, ks, theta, theta0, iterations, true)
}

fn weighted_mean_step(
    ys: &[f64],
    taus: &[f64],
    ks: &[f64],
    theta: f64,
) -> Result<f64, SolveError> {
    let mut sw = 0.0;
    let mut swy = 0.0;
    for ((y, tau), k) in ys.iter().zip(taus).zip(ks) {
        let w = bisquare_weight((y - theta) / tau, *k) / tau;
        sw += w;
        swy += w * y;
    }
    if sw <= 0.0 {
        return Err(SolveError::AllWeightsZero { theta });
    }
    Ok(swy / sw)
}

// ==== Newton ==============================================================

/// Full Newton iteration on the estimating function, with taus held
/// fixed within each step: `theta <- theta + Psi / (sum psi'(U_i)/tau_i)`.
pub fn newton_solve<T: TauFn + ?Sized>(
    kind: ProblemKind,
    ys: &[f64],
    tau_fn: &T,
    spec: &PsiSpec,
    theta0: f64,
    opts: &SolveOptions,
) -> Result<RdifFit, SolveError> {
    validate_ys(ys)?;
    spec.validate(ys.len())?;
    if !theta0.is_finite() {
        return Err(SolveError::BadStart);
    }
    let (mut taus, mut ks) = state_at(tau_fn, spec, ys.len(), theta0)?;
    if estimating_slope(ys, &taus, &ks, theta0).abs() <= STATIONARY_TOL {
        return Err(SolveError::StationaryStart);
    }
    let mut theta = theta0;
    let mut iterations = 0;
    let mut step_converged = false;
    for _ in 0..opts.max_iter {
        iterations += 1;
        let psi = estimating_fn(ys, &taus, &ks, theta);
        let slope = estimating_slope(ys, &taus, &ks, theta);
        if slope.abs() <= STATIONARY_TOL {
            // Landed on a flat stretch away from the start; cannot step.
            break;
        }
        let step = psi / slope;
        theta += step;
        if !theta.is_finite() {
            return Err(SolveError::BadStart);
        }
        if opts.update_tau {
            (taus, ks) = state_at(tau_fn, spec, ys.len(), theta)?;
        }
        if step.abs() < opts.tol && estimating_fn(ys, &taus, &ks, theta).abs() < ESTIMATING_EQ_TOL
        {
            step_converged = true;
            break;
        }
    }
    finish_fit(kind, ys, taus, ks, theta, theta0, iterations, step_converged)
}

/// Exactly one Newton update from `theta0`. The result is asymptotically
/// equivalent to the fully iterated estimator when the start is itself
/// consistent; `converged` reports whether the single step already
/// satisfies the estimating equation.
pub fn one_step<T: TauFn + ?Sized>(
    kind: ProblemKind,
    ys: &[f64],
    tau_fn: &T,
    spec: &PsiSpec,
    theta0: f64,
) -> Result<RdifFit, SolveError> {
    validate_ys(ys)?;
    spec.validate(ys.len())?;
    if !theta0.is_finite() {
        return Err(SolveError::BadStart);
    }
    let (taus, ks) = state_at(tau_fn, spec, ys.len(), theta0)?;
    let slope = estimating_slope(ys, &taus, &ks, theta0);
    if slope.abs() <= STATIONARY_TOL {
        return Err(SolveError::StationaryStart);
    }
    let psi = estimating_fn(ys, &taus, &ks, theta0);
    let theta = theta0 + psi / slope;
    if !theta.is_finite() {
        return Err(SolveError::BadStart);
    }
    finish_fit(kind, ys, taus, ks, theta, theta0, 1, true)
}

// ==== Starting values =====================================================

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartStrategy {
    /// Sample median of the contrasts.
    Median,
    /// Least trimmed squares over the best half of the sample.
    Lts,
    /// Grid minimization of the robust objective over the contrast range.
    Grid,
    /// Median of the three estimates above.
    Med3,
}

/// Sample median (mean of the two central order statistics for even n).
pub fn median(xs: &[f64]) -> Result<f64, SolveError> {
    validate_ys(xs)?;
    let mut sorted = xs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("values checked finite"));
    let n = sorted.len();
    Ok(if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    })
}

/// Least trimmed squares location with coverage `h = floor(m/2) + 1`: the
/// mean of the contiguous sorted window of size `h` with the smallest
/// within-window sum of squares. Ties go to the smaller window index, so
/// the result is deterministic.
pub fn lts_half(ys: &[f64]) -> Result<f64, SolveError> {
    validate_ys(ys)?;
    let mut sorted = ys.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("values checked finite"));
    let m = sorted.len();
    let h = m / 2 + 1;
    if h >= m {
        let mean = sorted.iter().sum::<f64>() / m as f64;
        return Ok(mean);
    }
    let mut best_ss = f64::INFINITY;
    let mut best_mean = sorted[0];
    for start in 0..=(m - h) {
        let window = &sorted[start..start + h];
        let mean = window.iter().sum::<f64>() / h as f64;
        let ss: f64 = window.iter().map(|y| (y - mean) * (y - mean)).sum();
        if ss < best_ss {
            best_ss = ss;
            best_mean = mean;
        }
    }
    Ok(best_mean)
}

/// Grid minimizer of `R(theta) = sum_i rho(U_i(theta))` over the grid
/// `{min Y, min Y + r, ..., max Y}` with `r = `[`GRID_STEP`], evaluating
/// taus and tuning constants at each grid point. Ties go to the smaller
/// theta.
pub fn grid_start<T: TauFn + ?Sized>(
    ys: &[f64],
    tau_fn: &T,
    spec: &PsiSpec,
) -> Result<f64, SolveError> {
    validate_ys(ys)?;
    spec.validate(ys.len())?;
    let lo = ys.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return Ok(lo);
    }
    let r = GRID_STEP;
    let steps = ((hi - lo) / r).floor() as u64;
    let point = |j: u64| -> f64 {
        let theta = lo + j as f64 * r;
        if theta > hi {
            hi
        } else {
            theta
        }
    };
    // The grid always ends exactly at hi: append it when the uniform
    // steps stop short.
    let last = if point(steps) < hi { steps + 1 } else { steps };

    let objective_at = |theta: f64, taus: &[f64], ks: &[f64]| -> f64 {
        ys.iter()
            .zip(taus)
            .zip(ks)
            .map(|((y, tau), k)| bisquare_rho((y - theta) / tau, *k))
            .sum()
    };

    // For constant taus the objective is exactly flat (every rho at its
    // cap) outside the union of item windows |y_i - theta| < k_i tau_i,
    // so only grid points near some item can beat the plateau. Huge
    // ranges produced by contaminated samples then cost almost nothing.
    if tau_fn.is_constant() && last > 100_000 {
        let (taus, ks) = state_at(tau_fn, spec, ys.len(), lo)?;
        let plateau: f64 = ks.iter().map(|k| k * k / 6.0).sum();
        let mut candidate: Vec<u64> = Vec::new();
        for ((y, tau), k) in ys.iter().zip(&taus).zip(&ks) {
            let half = k * tau + r;
            let from = (((y - half) - lo) / r).floor().max(0.0) as u64;
            let to = ((((y + half) - lo) / r).ceil() as u64).min(last);
            candidate.extend(from..=to);
        }
        candidate.sort_unstable();
        candidate.dedup();
        // Smallest grid index not near any item represents the plateau.
        let mut plateau_j = None;
        let mut expect = 0u64;
        for &j in &candidate {
            if j > expect {
                plateau_j = Some(expect);
                break;
            }
            expect = j + 1;
        }
        if plateau_j.is_none() && expect <= last {
            plateau_j = Some(expect);
        }
        let mut best = f64::INFINITY;
        let mut best_j = 0u64;
        let mut consider = |j: u64, value: f64| {
            if value < best || (value == best && j < best_j) {
                best = value;
                best_j = j;
            }
        };
        for &j in &candidate {
            consider(j, objective_at(point(j), &taus, &ks));
        }
        if let Some(j) = plateau_j {
            consider(j, plateau);
        }
        return Ok(point(best_j));
    }

    let mut best = f64::INFINITY;
    let mut best_theta = lo;
    let mut state: Option<(Vec<f64>, Vec<f64>)> = if tau_fn.is_constant() {
        Some(state_at(tau_fn, spec, ys.len(), lo)?)
    } else {
        None
    };
    for j in 0..=last {
        let theta = point(j);
        if state.is_none() {
            state = Some(state_at(tau_fn, spec, ys.len(), theta)?);
        }
        let (taus, ks) = state.as_ref().expect("state just set");
        let value = objective_at(theta, taus, ks);
        if value < best {
            best = value;
            best_theta = theta;
        }
        if !tau_fn.is_constant() {
            state = None;
        }
    }
    Ok(best_theta)
}

/// Starting value for the robust solvers. `Med3` combines the three
/// robust candidates and is the default used by analyses.
pub fn start_value<T: TauFn + ?Sized>(
    ys: &[f64],
    tau_fn: &T,
    spec: &PsiSpec,
    strategy: StartStrategy,
) -> Result<f64, SolveError> {
    match strategy {
        StartStrategy::Median => median(ys),
        StartStrategy::Lts => lts_half(ys),
        StartStrategy::Grid => grid_start(ys, tau_fn, spec),
        StartStrategy::Med3 => {
            let three = [
                median(ys)?,
                lts_half(ys)?,
                grid_start(ys, tau_fn, spec)?,
            ];
            median(&three)
        }
    }
}
