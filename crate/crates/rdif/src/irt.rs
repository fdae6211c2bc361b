//! Two-parameter logistic IRT engine: simulation, fitting, covariance.
//!
//! ## Purpose
//!
//! Everything the scaling analysis needs from the measurement model in
//! one place: simulate binary responses from a 2PL in slope/intercept
//! form (`logit P(y=1 | eta) = a*eta + d`), fit the 2PL by marginal
//! maximum likelihood with a fixed latent `N(0,1)` density, and produce
//! the sampling covariance of the estimates. Two independent fits
//! assemble into a [`CalibrationPair`] for the robust scaling step.
//!
//! ## Design notes
//!
//! * Fitting is plain Bock-Aitkin EM over a fixed rectangular quadrature
//!   grid: nodes equally spaced on `[-range, range]`, weights
//!   proportional to the standard normal density, normalized to one.
//! * The M-step is a per-item two-parameter Newton iteration on the
//!   expected complete-data log-likelihood with step halving, so the
//!   marginal log-likelihood never decreases (generalized EM).
//! * The latent density stays `N(0,1)` in every fit; group differences
//!   in the latent distribution are recovered later by the scaling step,
//!   not by the fitter.
//! * Slopes are clamped to `[SLOPE_MIN, SLOPE_MAX]` during EM; a fit
//!   that ends on the clamp is reported as non-converged rather than
//!   trusted.
//! * The covariance is the inverse observed information of the marginal
//!   log-likelihood, formed by central finite differences of the
//!   analytic score, with a cross-product-of-scores fallback when the
//!   differenced matrix is not positive definite.
//!
//! ## Invariants
//!
//! * Simulation is bit-reproducible for a given `(spec, n, seed)`.
//! * The EM log-likelihood trace is non-decreasing up to a `1e-10`
//!   relative float tolerance.
//! * `converged` implies the last EM parameter change was below `tol`
//!   and no slope sits on the clamp; only then is a covariance attached.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use std::path::Path;

use crate::calib::{write_atomic, CalibrationPair, ItemCalibration};
use crate::linalg;

/// Default number of quadrature nodes.
pub const DEFAULT_QUAD_POINTS: usize = 61;
/// Default half-width of the quadrature grid.
pub const DEFAULT_QUAD_RANGE: f64 = 5.0;
/// EM stops when the largest absolute parameter change drops below this.
pub const DEFAULT_EM_TOL: f64 = 1e-5;
/// EM iteration cap; exceeding it flags the fit as non-converged.
pub const DEFAULT_EM_MAX_ITER: usize = 500;
/// Fewest quadrature nodes accepted.
pub const MIN_QUAD_POINTS: usize = 3;
/// Slope clamp during EM; landing on it marks the fit non-converged.
pub const SLOPE_MIN: f64 = 0.05;
pub const SLOPE_MAX: f64 = 20.0;
/// Relative step for finite differences of the score.
const FD_STEP: f64 = 1e-4;
/// Inner Newton iteration cap per item and M-step.
const MSTEP_MAX_ITER: usize = 20;
/// Inner Newton stops when the step is below this.
const MSTEP_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum IrtError {
    #[error("slope and intercept lists differ in length: {a} vs {d}")]
    LengthMismatch { a: usize, d: usize },
    #[error("spec has no items")]
    Empty,
    #[error("slope a[{index}] must be positive and finite")]
    BadSlope { index: usize },
    #[error("intercept d[{index}] must be finite")]
    BadIntercept { index: usize },
    #[error("latent mean must be finite, got {0}")]
    BadMean(f64),
    #[error("latent sd must be positive and finite, got {0}")]
    BadSd(f64),
    #[error("need at least one respondent")]
    NoRespondents,
    #[error("item {index} shows a single response category; its parameters are not identified")]
    DegenerateItem { index: usize },
    #[error("quadrature needs at least {MIN_QUAD_POINTS} points, got {got}")]
    TooFewQuadPoints { got: usize },
    #[error("quadrature range must be positive and finite, got {0}")]
    BadQuadRange(f64),
    #[error("parameter list has {params} items, data has {data}")]
    DimensionMismatch { params: usize, data: usize },
    #[error("fit is not converged; covariance requires a converged fit")]
    NotConverged,
    #[error("observed information matrix is singular")]
    SingularInformation,
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("csv parse error: {0}")]
    Csv(String),
}

// ==== Model ===============================================================

/// Logistic function, stable on both tails.
#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
fn ln1pexp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `ln logistic(x)`, stable on both tails.
#[inline]
fn ln_logistic(x: f64) -> f64 {
    -ln1pexp(-x)
}

/// Generating parameters of a 2PL instrument plus the latent trait
/// distribution of the population answering it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoPlSpec {
    /// Item slopes, all positive.
    pub a: Vec<f64>,
    /// Item intercepts.
    pub d: Vec<f64>,
    /// Latent trait mean.
    pub mean: f64,
    /// Latent trait standard deviation.
    pub sd: f64,
}

impl TwoPlSpec {
    pub fn new(a: Vec<f64>, d: Vec<f64>, mean: f64, sd: f64) -> Result<Self, IrtError> {
        let spec = TwoPlSpec { a, d, mean, sd };
        spec.validate()?;
        Ok(spec)
    }

    /// Spec over a standard normal population.
    pub fn standard(a: Vec<f64>, d: Vec<f64>) -> Result<Self, IrtError> {
        Self::new(a, d, 0.0, 1.0)
    }

    pub fn m(&self) -> usize {
        self.a.len()
    }

    pub fn validate(&self) -> Result<(), IrtError> {
        if self.a.len() != self.d.len() {
            return Err(IrtError::LengthMismatch {
                a: self.a.len(),
                d: self.d.len(),
            });
        }
        if self.a.is_empty() {
            return Err(IrtError::Empty);
        }
        for (i, &a) in self.a.iter().enumerate() {
            if !(a > 0.0 && a.is_finite()) {
                return Err(IrtError::BadSlope { index: i });
            }
        }
        for (i, &d) in self.d.iter().enumerate() {
            if !d.is_finite() {
                return Err(IrtError::BadIntercept { index: i });
            }
        }
        if !self.mean.is_finite() {
            return Err(IrtError::BadMean(self.mean));
        }
        if !(self.sd > 0.0 && self.sd.is_finite()) {
            return Err(IrtError::BadSd(self.sd));
        }
        Ok(())
    }

    /// Correct-response probability of item `i` at latent value `eta`.
    #[inline]
    pub fn prob(&self, i: usize, eta: f64) -> f64 {
        logistic(self.a[i] * eta + self.d[i])
    }
}

// ==== Response data =======================================================

/// Complete binary response matrix, respondents by items, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseMatrix {
    n: usize,
    m: usize,
    data: Vec<u8>,
    /// Seed used to simulate the matrix; zero for data read from disk.
    pub seed: u64,
}

impl ResponseMatrix {
    /// Build a matrix from row-major `0`/`1` entries; the length must be
    /// a positive multiple of `m`.
    pub fn from_vec(m: usize, data: Vec<u8>) -> Result<Self, IrtError> {
        if m == 0 {
            return Err(IrtError::Empty);
        }
        if data.is_empty() || data.len() % m != 0 {
            return Err(IrtError::Csv(format!(
                "{} entries do not fill rows of {m}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|&v| v > 1) {
            return Err(IrtError::Csv(format!("entry {pos} is not 0/1")));
        }
        let n = data.len() / m;
        Ok(ResponseMatrix { n, m, data, seed: 0 })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Response of respondent `row` to item `item`.
    #[inline]
    pub fn get(&self, row: usize, item: usize) -> u8 {
        self.data[row * self.m + item]
    }

    /// One respondent's full response row.
    #[inline]
    pub fn row(&self, row: usize) -> &[u8] {
        &self.data[row * self.m..(row + 1) * self.m]
    }

    /// Proportion correct on item `i`.
    pub fn item_mean(&self, i: usize) -> f64 {
        let hits: u32 = (0..self.n).map(|j| u32::from(self.get(j, i))).sum();
        f64::from(hits) / self.n as f64
    }

    /// Write as CSV: header row of item ids, then one `0`/`1` row per
    /// respondent.
    pub fn to_csv(&self, path: &Path) -> Result<(), IrtError> {
        let mut out = String::with_capacity(self.n * (2 * self.m + 1) + 8 * self.m);
        for i in 0..self.m {
            if i > 0 {
                out.push(',');
            }
            out.push_str(&format!("item_{i}"));
        }
        out.push('\n');
        for j in 0..self.n {
            for i in 0..self.m {
                if i > 0 {
                    out.push(',');
                }
                out.push(if self.get(j, i) == 1 { '1' } else { '0' });
            }
            out.push('\n');
        }
        write_atomic(path, out.as_bytes()).map_err(|source| IrtError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Read a matrix written by [`ResponseMatrix::to_csv`]: any header
    /// row is accepted, entries must be `0` or `1`.
    pub fn from_csv(path: &Path) -> Result<Self, IrtError> {
        let text = std::fs::read_to_string(path).map_err(|source| IrtError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| IrtError::Csv("empty file".into()))?;
        let m = header.split(',').count();
        let mut data = Vec::new();
        let mut n = 0usize;
        for (lineno, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut cols = 0usize;
            for field in line.split(',') {
                let v = match field.trim() {
                    "0" => 0u8,
                    "1" => 1u8,
                    other => {
                        return Err(IrtError::Csv(format!(
                            "row {}: entry {other:?} is not 0/1",
                            lineno + 2
                        )))
                    }
                };
                data.push(v);
                cols += 1;
            }
            if cols != m {
                return Err(IrtError::Csv(format!(
                    "row {}: {cols} columns, header has {m}",
                    lineno + 2
                )));
            }
            n += 1;
        }
        if n == 0 {
            return Err(IrtError::NoRespondents);
        }
        Ok(ResponseMatrix { n, m, data, seed: 0 })
    }
}

/// Draw `n` respondents from a 2PL: each samples a latent value from the
/// spec's normal population and answers every item independently.
/// Bit-reproducible for a given seed.
pub fn simulate_2pl(spec: &TwoPlSpec, n: usize, seed: u64) -> Result<ResponseMatrix, IrtError> {
    spec.validate()?;
    if n == 0 {
        return Err(IrtError::NoRespondents);
    }
    let m = spec.m();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * m);
    for _ in 0..n {
        let eta = spec.mean + spec.sd * rng.sample::<f64, _>(StandardNormal);
        for i in 0..m {
            let p = spec.prob(i, eta);
            data.push(u8::from(rng.gen::<f64>() < p));
        }
    }
    Ok(ResponseMatrix { n, m, data, seed })
}

// ==== Quadrature ==========================================================

/// Fixed rectangular quadrature against the standard normal density:
/// equally spaced nodes, density weights normalized to one.
struct Quadrature {
    x: Vec<f64>,
    ln_w: Vec<f64>,
}

impl Quadrature {
    fn new(points: usize, range: f64) -> Result<Self, IrtError> {
        if points < MIN_QUAD_POINTS {
            return Err(IrtError::TooFewQuadPoints { got: points });
        }
        if !(range > 0.0 && range.is_finite()) {
            return Err(IrtError::BadQuadRange(range));
        }
        let step = 2.0 * range / (points - 1) as f64;
        let x: Vec<f64> = (0..points).map(|q| -range + step * q as f64).collect();
        let raw: Vec<f64> = x.iter().map(|&v| (-0.5 * v * v).exp()).collect();
        let total: f64 = raw.iter().sum();
        let ln_w = raw.iter().map(|r| (r / total).ln()).collect();
        Ok(Quadrature { x, ln_w })
    }

    fn len(&self) -> usize {
        self.x.len()
    }
}

// ==== Fitting =============================================================

/// Knobs for [`fit_2pl`]; defaults match the documented engine setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    /// Number of quadrature nodes.
    pub quad_points: usize,
    /// Quadrature half-width.
    pub quad_range: f64,
    /// EM convergence tolerance on the largest parameter change.
    pub tol: f64,
    /// EM iteration cap.
    pub max_iter: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            quad_points: DEFAULT_QUAD_POINTS,
            quad_range: DEFAULT_QUAD_RANGE,
            tol: DEFAULT_EM_TOL,
            max_iter: DEFAULT_EM_MAX_ITER,
        }
    }
}

/// Marginal maximum likelihood estimates of a 2PL fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mle2pl {
    /// Estimated slopes.
    pub a_hat: Vec<f64>,
    /// Estimated intercepts.
    pub d_hat: Vec<f64>,
    /// Row-major `2m x 2m` covariance of `(a_1, d_1, ..., a_m, d_m)`;
    /// empty when the fit did not converge.
    pub cov: Vec<f64>,
    /// Marginal log-likelihood at the final parameters.
    pub loglik: f64,
    /// Marginal log-likelihood before each EM update plus the final
    /// value; non-decreasing up to float tolerance.
    pub loglik_trace: Vec<f64>,
    pub em_iterations: usize,
    /// Step criterion met and no slope on the clamp.
    pub converged: bool,
    /// Respondent count behind the fit.
    pub n: u32,
}

impl Mle2pl {
    pub fn m(&self) -> usize {
        self.a_hat.len()
    }

    /// Covariance entry for parameter rows in `(a_1, d_1, ...)` order.
    #[inline]
    pub fn cov_at(&self, r: usize, c: usize) -> f64 {
        self.cov[r * 2 * self.m() + c]
    }
}

/// Expected counts from one E-step pass.
struct EStep {
    /// Expected respondents at each node.
    nq: Vec<f64>,
    /// Expected correct responses per item and node, row-major `m x Q`.
    riq: Vec<f64>,
    /// Marginal log-likelihood at the pass's parameters.
    loglik: f64,
}

/// One E-step: posterior node masses per respondent, accumulated into
/// expected counts, plus the marginal log-likelihood.
fn e_step(a: &[f64], d: &[f64], data: &ResponseMatrix, quad: &Quadrature) -> EStep {
    let m = data.m();
    let nq_len = quad.len();
    // Log item response curves at every node, both categories.
    let mut lp = vec![0.0f64; m * nq_len];
    let mut lq = vec![0.0f64; m * nq_len];
    for i in 0..m {
        for q in 0..nq_len {
            let t = a[i] * quad.x[q] + d[i];
            lp[i * nq_len + q] = ln_logistic(t);
            lq[i * nq_len + q] = ln_logistic(-t);
        }
    }
    let mut nq = vec![0.0f64; nq_len];
    let mut riq = vec![0.0f64; m * nq_len];
    let mut loglik = 0.0f64;
    let mut s = vec![0.0f64; nq_len];
    for j in 0..data.n() {
        let row = data.row(j);
        s.copy_from_slice(&quad.ln_w);
        for (i, &y) in row.iter().enumerate() {
            let curve = if y == 1 {
                &lp[i * nq_len..(i + 1) * nq_len]
            } else {
                &lq[i * nq_len..(i + 1) * nq_len]
            };
            for q in 0..nq_len {
                s[q] += curve[q];
            }
        }
        let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for q in 0..nq_len {
            s[q] = (s[q] - max).exp();
            total += s[q];
        }
        loglik += max + total.ln();
        let inv = 1.0 / total;
        for q in 0..nq_len {
            let post = s[q] * inv;
            nq[q] += post;
            s[q] = post;
        }
        for (i, &y) in row.iter().enumerate() {
            if y == 1 {
                let dst = &mut riq[i * nq_len..(i + 1) * nq_len];
                for q in 0..nq_len {
                    dst[q] += s[q];
                }
            }
        }
    }
    EStep { nq, riq, loglik }
}

/// Expected complete-data log-likelihood of one item at `(a, d)`.
fn item_objective(a: f64, d: f64, quad: &Quadrature, nq: &[f64], riq: &[f64]) -> f64 {
    let mut f = 0.0;
    for q in 0..quad.len() {
        let t = a * quad.x[q] + d;
        f += riq[q] * ln_logistic(t) + (nq[q] - riq[q]) * ln_logistic(-t);
    }
    f
}

/// Per-item M-step: two-parameter Newton with step halving on the
/// expected complete-data log-likelihood; slope clamped to the bounds.
fn m_step_item(a0: f64, d0: f64, quad: &Quadrature, nq: &[f64], riq: &[f64]) -> (f64, f64) {
    let mut a = a0;
    let mut d = d0;
    let mut f = item_objective(a, d, quad, nq, riq);
    for _ in 0..MSTEP_MAX_ITER {
        let mut ga = 0.0;
        let mut gd = 0.0;
        let mut hxx = 0.0;
        let mut hxd = 0.0;
        let mut hdd = 0.0;
        for q in 0..quad.len() {
            let x = quad.x[q];
            let p = logistic(a * x + d);
            let resid = riq[q] - nq[q] * p;
            ga += resid * x;
            gd += resid;
            let info = nq[q] * p * (1.0 - p);
            hxx += info * x * x;
            hxd += info * x;
            hdd += info;
        }
        // Solve (negative Hessian) * delta = gradient.
        let det = hxx * hdd - hxd * hxd;
        if det <= 0.0 || !det.is_finite() {
            break;
        }
        let da = (gd.mul_add(-hxd, ga * hdd)) / det;
        let dd = (ga.mul_add(-hxd, gd * hxx)) / det;
        let mut scale = 1.0;
        let mut stepped = false;
        for _ in 0..30 {
            let na = (a + scale * da).clamp(SLOPE_MIN, SLOPE_MAX);
            let nd = d + scale * dd;
            let nf = item_objective(na, nd, quad, nq, riq);
            if nf >= f {
                a = na;
                d = nd;
                f = nf;
                stepped = true;
                break;
            }
            scale *= 0.5;
        }
        if !stepped || (scale * da).abs().max((scale * dd).abs()) < MSTEP_TOL {
            break;
        }
    }
    (a, d)
}

/// Fit the 2PL by marginal maximum likelihood with a fixed `N(0,1)`
/// latent density. The covariance block is attached only to converged
/// fits; see [`mle_covariance`].
pub fn fit_2pl(data: &ResponseMatrix, opts: &FitOptions) -> Result<Mle2pl, IrtError> {
    let quad = Quadrature::new(opts.quad_points, opts.quad_range)?;
    let m = data.m();
    if m == 0 {
        return Err(IrtError::Empty);
    }
    if data.n() == 0 {
        return Err(IrtError::NoRespondents);
    }
    for i in 0..m {
        let mean = data.item_mean(i);
        if mean <= 0.0 || mean >= 1.0 {
            return Err(IrtError::DegenerateItem { index: i });
        }
    }
    // Classical starts: unit slope, logit of the proportion correct.
    let mut a: Vec<f64> = vec![1.0; m];
    let mut d: Vec<f64> = (0..m)
        .map(|i| {
            let p = data.item_mean(i).clamp(0.02, 0.98);
            (p / (1.0 - p)).ln()
        })
        .collect();
    let mut trace = Vec::new();
    let mut iterations = 0usize;
    let mut step_converged = false;
    for _ in 0..opts.max_iter {
        let counts = e_step(&a, &d, data, &quad);
        trace.push(counts.loglik);
        iterations += 1;
        let mut delta = 0.0f64;
        for i in 0..m {
            let riq = &counts.riq[i * quad.len()..(i + 1) * quad.len()];
            let (na, nd) = m_step_item(a[i], d[i], &quad, &counts.nq, riq);
            delta = delta.max((na - a[i]).abs()).max((nd - d[i]).abs());
            a[i] = na;
            d[i] = nd;
        }
        if delta < opts.tol {
            step_converged = true;
            break;
        }
    }
    let final_ll = e_step(&a, &d, data, &quad).loglik;
    trace.push(final_ll);
    let at_bound = a.iter().any(|&v| v == SLOPE_MIN || v == SLOPE_MAX);
    let converged = step_converged && !at_bound;
    let mut fit = Mle2pl {
        a_hat: a,
        d_hat: d,
        cov: Vec::new(),
        loglik: final_ll,
        loglik_trace: trace,
        em_iterations: iterations,
        converged,
        n: data.n() as u32,
    };
    if converged {
        fit.cov = mle_covariance(&fit, data, opts)?;
    }
    Ok(fit)
}

// ==== Likelihood, score, covariance =======================================

fn check_dims(a: &[f64], d: &[f64], data: &ResponseMatrix) -> Result<(), IrtError> {
    if a.len() != d.len() {
        return Err(IrtError::LengthMismatch {
            a: a.len(),
            d: d.len(),
        });
    }
    if a.len() != data.m() {
        return Err(IrtError::DimensionMismatch {
            params: a.len(),
            data: data.m(),
        });
    }
    Ok(())
}

/// Marginal log-likelihood of the data at the given item parameters.
pub fn marginal_loglik(
    a: &[f64],
    d: &[f64],
    data: &ResponseMatrix,
    opts: &FitOptions,
) -> Result<f64, IrtError> {
    check_dims(a, d, data)?;
    let quad = Quadrature::new(opts.quad_points, opts.quad_range)?;
    Ok(e_step(a, d, data, &quad).loglik)
}

/// Analytic score of the marginal log-likelihood, parameter order
/// `(a_1, d_1, ..., a_m, d_m)`. Uses the posterior-expected counts, so
/// one pass over the data suffices.
pub fn marginal_score(
    a: &[f64],
    d: &[f64],
    data: &ResponseMatrix,
    opts: &FitOptions,
) -> Result<Vec<f64>, IrtError> {
    check_dims(a, d, data)?;
    let quad = Quadrature::new(opts.quad_points, opts.quad_range)?;
    let counts = e_step(a, d, data, &quad);
    let mut score = vec![0.0f64; 2 * a.len()];
    for i in 0..a.len() {
        let riq = &counts.riq[i * quad.len()..(i + 1) * quad.len()];
        let mut sa = 0.0;
        let mut sd = 0.0;
        for q in 0..quad.len() {
            let resid = riq[q] - counts.nq[q] * logistic(a[i] * quad.x[q] + d[i]);
            sa += resid * quad.x[q];
            sd += resid;
        }
        score[2 * i] = sa;
        score[2 * i + 1] = sd;
    }
    Ok(score)
}

/// Per-respondent scores at the given parameters, one `2m` row each;
/// cross-product fallback for the information matrix.
fn respondent_scores(
    a: &[f64],
    d: &[f64],
    data: &ResponseMatrix,
    quad: &Quadrature,
) -> Vec<Vec<f64>> {
    let m = data.m();
    let nq_len = quad.len();
    let mut lp = vec![0.0f64; m * nq_len];
    let mut lq = vec![0.0f64; m * nq_len];
    let mut pq = vec![0.0f64; m * nq_len];
    for i in 0..m {
        for q in 0..nq_len {
            let t = a[i] * quad.x[q] + d[i];
            lp[i * nq_len + q] = ln_logistic(t);
            lq[i * nq_len + q] = ln_logistic(-t);
            pq[i * nq_len + q] = logistic(t);
        }
    }
    let mut out = Vec::with_capacity(data.n());
    let mut s = vec![0.0f64; nq_len];
    for j in 0..data.n() {
        let row = data.row(j);
        s.copy_from_slice(&quad.ln_w);
        for (i, &y) in row.iter().enumerate() {
            let curve = if y == 1 {
                &lp[i * nq_len..(i + 1) * nq_len]
            } else {
                &lq[i * nq_len..(i + 1) * nq_len]
            };
            for q in 0..nq_len {
                s[q] += curve[q];
            }
        }
        let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for q in 0..nq_len {
            s[q] = (s[q] - max).exp();
            total += s[q];
        }
        let inv = 1.0 / total;
        let mut sj = vec![0.0f64; 2 * m];
        for (i, &y) in row.iter().enumerate() {
            let mut sa = 0.0;
            let mut sd = 0.0;
            for q in 0..nq_len {
                let post = s[q] * inv;
                let resid = f64::from(y) - pq[i * nq_len + q];
                sa += post * resid * quad.x[q];
                sd += post * resid;
            }
            sj[2 * i] = sa;
            sj[2 * i + 1] = sd;
        }
        out.push(sj);
    }
    out
}

/// Observed-information covariance of a converged fit: central finite
/// differences of the analytic score, symmetrized and inverted by
/// Cholesky; falls back to the cross-product of per-respondent scores
/// when the differenced matrix is not positive definite.
pub fn mle_covariance(
    fit: &Mle2pl,
    data: &ResponseMatrix,
    opts: &FitOptions,
) -> Result<Vec<f64>, IrtError> {
    if !fit.converged {
        return Err(IrtError::NotConverged);
    }
    check_dims(&fit.a_hat, &fit.d_hat, data)?;
    let m = fit.m();
    let p = 2 * m;
    let mut info = vec![0.0f64; p * p];
    let mut a = fit.a_hat.clone();
    let mut d = fit.d_hat.clone();
    for c in 0..p {
        let (vec_ref, idx): (&mut Vec<f64>, usize) = if c % 2 == 0 {
            (&mut a, c / 2)
        } else {
            (&mut d, c / 2)
        };
        let base = vec_ref[idx];
        let h = FD_STEP * base.abs().max(1.0);
        vec_ref[idx] = base + h;
        let plus = marginal_score(&a, &d, data, opts)?;
        let (vec_ref, _) = if c % 2 == 0 {
            (&mut a, c / 2)
        } else {
            (&mut d, c / 2)
        };
        vec_ref[idx] = base - h;
        let minus = marginal_score(&a, &d, data, opts)?;
        let (vec_ref, _) = if c % 2 == 0 {
            (&mut a, c / 2)
        } else {
            (&mut d, c / 2)
        };
        vec_ref[idx] = base;
        for r in 0..p {
            // Observed information is the negative Hessian.
            info[r * p + c] = -(plus[r] - minus[r]) / (2.0 * h);
        }
    }
    for r in 0..p {
        for c in 0..r {
            let avg = 0.5 * (info[r * p + c] + info[c * p + r]);
            info[r * p + c] = avg;
            info[c * p + r] = avg;
        }
    }
    let chol = match linalg::cholesky(&info, p) {
        Some(l) => l,
        None => {
            // Cross-product (outer-product-of-scores) fallback.
            let quad = Quadrature::new(opts.quad_points, opts.quad_range)?;
            let scores = respondent_scores(&fit.a_hat, &fit.d_hat, data, &quad);
            let mut xprod = vec![0.0f64; p * p];
            for sj in &scores {
                for r in 0..p {
                    for c in 0..=r {
                        xprod[r * p + c] += sj[r] * sj[c];
                    }
                }
            }
            for r in 0..p {
                for c in r + 1..p {
                    xprod[r * p + c] = xprod[c * p + r];
                }
            }
            linalg::cholesky(&xprod, p).ok_or(IrtError::SingularInformation)?
        }
    };
    Ok(linalg::chol_inverse(&chol, p))
}

/// Assemble two independent single-group fits into a calibration pair:
/// per-item `4x4` blocks in `(a0, d0, a1, d1)` order with the two `2x2`
/// group blocks on the diagonal and zero cross-group covariance.
pub fn make_pair(fit0: &Mle2pl, fit1: &Mle2pl) -> Result<CalibrationPair, IrtError> {
    if fit0.m() != fit1.m() {
        return Err(IrtError::DimensionMismatch {
            params: fit0.m(),
            data: fit1.m(),
        });
    }
    if !(fit0.converged && fit1.converged) {
        return Err(IrtError::NotConverged);
    }
    let mut items = Vec::with_capacity(fit0.m());
    for i in 0..fit0.m() {
        let mut cov = [[0.0f64; 4]; 4];
        for r in 0..2 {
            for c in 0..2 {
                cov[r][c] = fit0.cov_at(2 * i + r, 2 * i + c);
                cov[2 + r][2 + c] = fit1.cov_at(2 * i + r, 2 * i + c);
            }
        }
        items.push(ItemCalibration {
            index: i as u32,
            a0: fit0.a_hat[i],
            d0: fit0.d_hat[i],
            a1: fit1.a_hat[i],
            d1: fit1.d_hat[i],
            cov,
        });
    }
    Ok(CalibrationPair {
        n0: fit0.n,
        n1: fit1.n,
        items,
    })
}

// ==== Tests ===============================================================
