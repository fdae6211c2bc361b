//! Simulation harness for the breakdown and power studies.
//!
//! ## Purpose
//!
//! Generates two-group 2PL data with configurable DIF, runs the robust
//! scaling analysis and the Mantel-Haenszel baseline on every
//! replication, and aggregates per-item flags into false-positive and
//! true-positive rates. Two stock designs are provided: [`run_sim1`]
//! sweeps the number of DIF items from 0 to half the test at a fixed
//! worst-case bias (breakdown study), and [`run_sim2`] crosses group
//! size with the type of DIF for a single biased item (power study).
//!
//! ## Design notes
//!
//! * Worst-case DIF: every biased item is shifted in the same direction
//!   by the same amount, the configuration that maximizes scaling bias.
//!   Biased items are re-drawn uniformly at random each replication.
//! * Intercept DIF moves the difficulty: `b + delta`, hence intercept
//!   `-a1 (b + delta)`. Slope DIF multiplies the slope by `gamma` and
//!   leaves the intercept alone. Combined DIF does both.
//! * The robust analysis estimates at the test level itself (no
//!   down-tuning). Down-tuned estimation widens the tuning windows to
//!   the point where noisy biased items keep weight and drag the center
//!   once many items are biased; the price of nominal tuning is a
//!   slightly inefficient center that inflates rejections by a few
//!   percent of the level, well inside the tolerances used here.
//! * A replication that fails (degenerate item, non-convergence) counts
//!   its items as unflagged rather than vanishing from the denominator;
//!   the failure text is kept per condition and the usable fraction is
//!   reported as `convergence_rate`.
//!
//! ## Invariants
//!
//! * Same config and seed give byte-identical CSV output.
//! * Per condition and cell, `false_pos + true_neg = (m - dif_count) *
//!   reps` and `true_pos + false_neg = dif_count * reps`.
//! * `theta` holds exactly one entry per replication; a replication
//!   without a converged scaling fit is coded `None`.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dif::{analyze, AnalyzeOptions};
use crate::irt::{fit_2pl, make_pair, simulate_2pl, FitOptions, IrtError, ResponseMatrix, TwoPlSpec};
use crate::mh::mantel_haenszel;

// ==== Constants ===========================================================

/// Column order of the aggregate results CSV.
pub const RESULTS_CSV_HEADER: &str = "m,n0,n1,dif_count,dif_type,delta,gamma,impact_mean,impact_sd,reps,seed,alpha,method,test,fpr,power,mean_theta,sd_theta,convergence_rate";

/// Column order of the raw per-replication scaling-estimate CSV.
pub const THETA_CSV_HEADER: &str = "m,n0,n1,dif_count,dif_type,delta,gamma,rep,theta";

/// The (method, test) cells aggregated for every condition.
const CELLS: [(&str, &str); 4] = [
    ("rdif", "intercept"),
    ("rdif", "slope"),
    ("rdif", "joint"),
    ("mh", "mh"),
];

// ==== Errors ==============================================================

#[derive(Debug, Error)]
pub enum SimError {
    #[error("dif_count {dif_count} exceeds item count {m}")]
    TooManyDifItems { dif_count: usize, m: usize },
    #[error("need at least 3 items, got {0}")]
    TooFewItems(usize),
    #[error("group sizes must be positive, got {n0} and {n1}")]
    BadGroupSize { n0: usize, n1: usize },
    #[error("reps must be at least 1")]
    NoReps,
    #[error("alpha must be in (0, 1), got {0}")]
    BadAlpha(f64),
    #[error("delta must be finite, got {0}")]
    BadDelta(f64),
    #[error("gamma must be positive and finite, got {0}")]
    BadGamma(f64),
    #[error("sampler invalid: {0}")]
    BadSampler(String),
    #[error("grid holds no group sizes")]
    EmptyGrid,
    #[error("generating data: {0}")]
    Irt(#[from] IrtError),
}

// ==== Condition configuration =============================================

/// Scalar-or-random design value: `fixed` returns the constant,
/// `uniform` draws from `[lo, hi]`, and `sqrt_uniform` draws from
/// `[lo, hi]` and returns the square root (for standard deviations
/// sampled on the variance scale).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    Fixed(f64),
    Uniform(f64, f64),
    SqrtUniform(f64, f64),
}

impl Sampler {
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Sampler::Fixed(v) => v,
            Sampler::Uniform(lo, hi) => {
                if lo == hi {
                    lo
                } else {
                    rng.gen_range(lo..hi)
                }
            }
            Sampler::SqrtUniform(lo, hi) => {
                let v = if lo == hi { lo } else { rng.gen_range(lo..hi) };
                v.sqrt()
            }
        }
    }

    /// Smallest value the sampler can produce.
    fn min_value(&self) -> f64 {
        match *self {
            Sampler::Fixed(v) => v,
            Sampler::Uniform(lo, _) => lo,
            Sampler::SqrtUniform(lo, _) => lo.sqrt(),
        }
    }

    fn validate(&self, what: &str) -> Result<(), SimError> {
        let bad = |msg: String| Err(SimError::BadSampler(msg));
        match *self {
            Sampler::Fixed(v) if !v.is_finite() => bad(format!("{what}: fixed value {v}")),
            Sampler::Uniform(lo, hi) if !(lo.is_finite() && hi.is_finite() && lo <= hi) => {
                bad(format!("{what}: uniform bounds {lo}..{hi}"))
            }
            Sampler::SqrtUniform(lo, hi)
                if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi) =>
            {
                bad(format!("{what}: sqrt_uniform bounds {lo}..{hi}"))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Sampler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Sampler::Fixed(v) => write!(f, "fixed({v:?})"),
            Sampler::Uniform(lo, hi) => write!(f, "uniform({lo:?}..{hi:?})"),
            Sampler::SqrtUniform(lo, hi) => write!(f, "sqrt_uniform({lo:?}..{hi:?})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DifType {
    Intercept,
    Slope,
    Both,
}

impl fmt::Display for DifType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DifType::Intercept => "intercept",
            DifType::Slope => "slope",
            DifType::Both => "both",
        })
    }
}

/// One simulation condition: item bank size, group sizes, the DIF
/// configuration, the focal-group latent distribution, and the
/// replication budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimCondition {
    pub m: usize,
    pub n0: usize,
    pub n1: usize,
    pub dif_count: usize,
    pub dif_type: DifType,
    /// Additive shift applied to the difficulty of biased items.
    pub delta: f64,
    /// Multiplicative factor applied to the slope of biased items.
    pub gamma: f64,
    pub impact_mean: Sampler,
    pub impact_sd: Sampler,
    pub reps: usize,
    pub seed: u64,
    pub alpha: f64,
}

impl Default for SimCondition {
    fn default() -> Self {
        SimCondition {
            m: 15,
            n0: 500,
            n1: 500,
            dif_count: 0,
            dif_type: DifType::Intercept,
            delta: 0.5,
            gamma: 1.0,
            impact_mean: Sampler::Fixed(0.5),
            impact_sd: Sampler::Fixed(1.0),
            reps: 100,
            seed: 1,
            alpha: 0.05,
        }
    }
}

impl SimCondition {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.m < 3 {
            return Err(SimError::TooFewItems(self.m));
        }
        if self.dif_count > self.m {
            return Err(SimError::TooManyDifItems {
                dif_count: self.dif_count,
                m: self.m,
            });
        }
        if self.n0 == 0 || self.n1 == 0 {
            return Err(SimError::BadGroupSize {
                n0: self.n0,
                n1: self.n1,
            });
        }
        if self.reps == 0 {
            return Err(SimError::NoReps);
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(SimError::BadAlpha(self.alpha));
        }
        if !self.delta.is_finite() {
            return Err(SimError::BadDelta(self.delta));
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(SimError::BadGamma(self.gamma));
        }
        self.impact_mean.validate("impact_mean")?;
        self.impact_sd.validate("impact_sd")?;
        if self.impact_sd.min_value() <= 0.0 {
            return Err(SimError::BadSampler(
                "impact_sd must produce positive values".into(),
            ));
        }
        Ok(())
    }
}

// ==== Data generation =====================================================

/// Splitmix finisher over the pair. For a fixed seed, every step is a
/// bijection in `rep`, so distinct replications get distinct streams.
#[inline]
fn mix_seed(seed: u64, rep: u64) -> u64 {
    let mut z = seed ^ rep.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform random subset of `{0, .., m-1}` of size `dif_count`, sorted.
fn draw_dif_items<R: Rng + ?Sized>(m: usize, dif_count: usize, rng: &mut R) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..m).collect();
    for j in 0..dif_count {
        let k = rng.gen_range(j..m);
        idx.swap(j, k);
    }
    let mut chosen = idx[..dif_count].to_vec();
    chosen.sort_unstable();
    chosen
}

/// Focal-group parameters of a biased item with base slope `a0` and
/// difficulty `b`.
#[inline]
fn apply_dif(dif_type: DifType, delta: f64, gamma: f64, a0: f64, b: f64) -> (f64, f64) {
    match dif_type {
        DifType::Intercept => (a0, -a0 * (b + delta)),
        DifType::Slope => (gamma * a0, -a0 * b),
        DifType::Both => (gamma * a0, -(gamma * a0) * (b + delta)),
    }
}

/// Draws one replication's generating parameters: reference slopes
/// `U(.9, 2.5)` and difficulties `U(-1.5, 1.5)`, a fresh uniform DIF
/// subset, and the focal latent distribution.
fn gen_params<R: Rng + ?Sized>(
    cond: &SimCondition,
    rng: &mut R,
) -> Result<(TwoPlSpec, TwoPlSpec, Vec<usize>), SimError> {
    let a0: Vec<f64> = (0..cond.m).map(|_| rng.gen_range(0.9..2.5)).collect();
    let b: Vec<f64> = (0..cond.m).map(|_| rng.gen_range(-1.5..1.5)).collect();
    let d0: Vec<f64> = a0.iter().zip(&b).map(|(a, b)| -a * b).collect();

    let dif_items = draw_dif_items(cond.m, cond.dif_count, rng);
    let mut a1 = a0.clone();
    let mut d1 = d0.clone();
    for &i in &dif_items {
        let (ai, di) = apply_dif(cond.dif_type, cond.delta, cond.gamma, a0[i], b[i]);
        a1[i] = ai;
        d1[i] = di;
    }

    let mean1 = cond.impact_mean.draw(rng);
    let sd1 = cond.impact_sd.draw(rng);
    let spec0 = TwoPlSpec::standard(a0, d0)?;
    let spec1 = TwoPlSpec::new(a1, d1, mean1, sd1)?;
    Ok((spec0, spec1, dif_items))
}

/// Generates one replication's response matrices and the indices of the
/// biased items. Deterministic in `(cond.seed, rep)`.
pub fn gen_condition_data(
    cond: &SimCondition,
    rep: usize,
) -> Result<(ResponseMatrix, ResponseMatrix, Vec<usize>), SimError> {
    cond.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cond.seed, rep as u64));
    let (spec0, spec1, dif_items) = gen_params(cond, &mut rng)?;
    let s0: u64 = rng.gen();
    let s1: u64 = rng.gen();
    let data0 = simulate_2pl(&spec0, cond.n0, s0)?;
    let data1 = simulate_2pl(&spec1, cond.n1, s1)?;
    Ok((data0, data1, dif_items))
}

// ==== Aggregation =========================================================

/// Per-item flag tallies for one (condition, method, test) cell.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Counts {
    pub false_pos: usize,
    pub true_neg: usize,
    pub true_pos: usize,
    pub false_neg: usize,
}

impl Counts {
    #[inline]
    fn record(&mut self, flagged: bool, is_dif: bool) {
        match (is_dif, flagged) {
            (false, true) => self.false_pos += 1,
            (false, false) => self.true_neg += 1,
            (true, true) => self.true_pos += 1,
            (true, false) => self.false_neg += 1,
        }
    }

    /// Flag rate among clean items; `None` when the condition has none.
    pub fn fpr(&self) -> Option<f64> {
        let n = self.false_pos + self.true_neg;
        (n > 0).then(|| self.false_pos as f64 / n as f64)
    }

    /// Flag rate among biased items; `None` when the condition has none.
    pub fn power(&self) -> Option<f64> {
        let n = self.true_pos + self.false_neg;
        (n > 0).then(|| self.true_pos as f64 / n as f64)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CellResult {
    pub method: &'static str,
    pub test: &'static str,
    pub counts: Counts,
    /// Fraction of replications in which this cell's statistic was
    /// computable; the remainder counted every item as unflagged.
    pub convergence_rate: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConditionResult {
    pub cond: SimCondition,
    /// One entry per `CELLS` row.
    pub cells: Vec<CellResult>,
    /// Robust scaling estimate per replication; `None` when the
    /// intercept fit was unusable.
    pub theta: Vec<Option<f64>>,
    /// Human-readable notes for every failed replication.
    pub failures: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimResult {
    pub conditions: Vec<ConditionResult>,
}

struct CellOutcome {
    usable: bool,
    flags: Vec<bool>,
}

struct RepOutcome {
    theta: Option<f64>,
    cells: [CellOutcome; 4],
    dif_mask: Vec<bool>,
    failure: Option<String>,
}

/// Runs both methods on one replication. Never fails: any error becomes
/// an unusable cell with all items unflagged plus a failure note.
fn run_one_rep(cond: &SimCondition, rep: usize) -> RepOutcome {
    let m = cond.m;
    let unusable = || CellOutcome {
        usable: false,
        flags: vec![false; m],
    };
    let mut out = RepOutcome {
        theta: None,
        cells: [unusable(), unusable(), unusable(), unusable()],
        dif_mask: vec![false; m],
        failure: None,
    };
    let mut notes: Vec<String> = Vec::new();

    let (data0, data1, dif_items) = match gen_condition_data(cond, rep) {
        Ok(g) => g,
        Err(e) => {
            out.failure = Some(format!("rep {rep}: data generation: {e}"));
            return out;
        }
    };
    for &i in &dif_items {
        out.dif_mask[i] = true;
    }

    // Robust scaling arm: calibrate both groups, then analyze the pair
    // at the condition's level.
    let fit_opts = FitOptions::default();
    let pair = fit_2pl(&data0, &fit_opts)
        .and_then(|f0| fit_2pl(&data1, &fit_opts).map(|f1| (f0, f1)))
        .and_then(|(f0, f1)| make_pair(&f0, &f1));
    match pair {
        Ok(pair) => {
            let opts = AnalyzeOptions::default();
            match analyze(&pair, cond.alpha, &opts) {
                Ok(report) => {
                    let t_ok = report.theta_fit.converged;
                    let s_ok = report.sigma_fit.converged;
                    if t_ok {
                        out.theta = Some(report.theta_fit.theta);
                    } else {
                        notes.push("intercept scaling fit did not converge".into());
                    }
                    if !s_ok {
                        notes.push("slope scaling fit did not converge".into());
                    }
                    let flags = |f: &dyn Fn(&crate::calib::ItemTests) -> bool| {
                        report.items.iter().map(f).collect::<Vec<bool>>()
                    };
                    out.cells[0] = CellOutcome {
                        usable: t_ok,
                        flags: flags(&|it| it.flag_intercept),
                    };
                    out.cells[1] = CellOutcome {
                        usable: s_ok,
                        flags: flags(&|it| it.flag_slope),
                    };
                    out.cells[2] = CellOutcome {
                        usable: t_ok && s_ok,
                        flags: flags(&|it| it.flag_joint),
                    };
                }
                Err(e) => notes.push(format!("analysis: {e}")),
            }
        }
        Err(e) => notes.push(format!("calibration: {e}")),
    }

    // Observed-score arm: needs only the raw matrices.
    match mantel_haenszel(&data0, &data1, cond.alpha) {
        Ok(tests) => {
            out.cells[3] = CellOutcome {
                usable: true,
                flags: tests.iter().map(|t| t.flag).collect(),
            };
        }
        Err(e) => notes.push(format!("mh: {e}")),
    }

    if !notes.is_empty() {
        out.failure = Some(format!("rep {rep}: {}", notes.join("; ")));
    }
    out
}

/// Runs every replication of one condition (concurrently when a thread
/// pool is available) and aggregates the cells. Aggregation is keyed by
/// replication index, so the result does not depend on scheduling.
pub fn run_condition(cond: &SimCondition) -> Result<ConditionResult, SimError> {
    cond.validate()?;
    let outcomes: Vec<RepOutcome> = (0..cond.reps)
        .into_par_iter()
        .map(|rep| run_one_rep(cond, rep))
        .collect();

    let mut cells: Vec<CellResult> = CELLS
        .iter()
        .map(|&(method, test)| CellResult {
            method,
            test,
            counts: Counts::default(),
            convergence_rate: 0.0,
        })
        .collect();
    let mut usable = [0usize; 4];
    let mut theta = Vec::with_capacity(cond.reps);
    let mut failures = Vec::new();

    for rep_out in &outcomes {
        theta.push(rep_out.theta);
        if let Some(f) = &rep_out.failure {
            failures.push(f.clone());
        }
        for (c, cell) in rep_out.cells.iter().enumerate() {
            usable[c] += usize::from(cell.usable);
            for i in 0..cond.m {
                cells[c].counts.record(cell.flags[i], rep_out.dif_mask[i]);
            }
        }
    }
    for (c, cell) in cells.iter_mut().enumerate() {
        cell.convergence_rate = usable[c] as f64 / cond.reps as f64;
    }

    Ok(ConditionResult {
        cond: cond.clone(),
        cells,
        theta,
        failures,
    })
}

// ==== Stock designs =======================================================

/// Breakdown study: worst-case intercept DIF, `dif_count` swept from 0
/// to half the test length, fixed impact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Sim1Config {
    pub m: usize,
    /// Respondents per group (both groups).
    pub n: usize,
    pub delta: f64,
    pub impact_mean: f64,
    pub impact_sd: f64,
    pub reps: usize,
    pub seed: u64,
    pub alpha: f64,
}

impl Default for Sim1Config {
    fn default() -> Self {
        Sim1Config {
            m: 15,
            n: 500,
            delta: 0.5,
            impact_mean: 0.5,
            impact_sd: 1.0,
            reps: 100,
            seed: 1,
            alpha: 0.05,
        }
    }
}

pub fn run_sim1(cfg: &Sim1Config) -> Result<SimResult, SimError> {
    let mut conditions = Vec::new();
    for (idx, dif_count) in (0..=cfg.m.div_ceil(2)).enumerate() {
        let cond = SimCondition {
            m: cfg.m,
            n0: cfg.n,
            n1: cfg.n,
            dif_count,
            dif_type: DifType::Intercept,
            delta: cfg.delta,
            gamma: 1.0,
            impact_mean: Sampler::Fixed(cfg.impact_mean),
            impact_sd: Sampler::Fixed(cfg.impact_sd),
            reps: cfg.reps,
            seed: mix_seed(cfg.seed, idx as u64),
            alpha: cfg.alpha,
        };
        conditions.push(run_condition(&cond)?);
    }
    Ok(SimResult { conditions })
}

/// Power study: one biased item, group size crossed with the type of
/// DIF, impact re-drawn every replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Sim2Config {
    pub m: usize,
    /// Respondents per group (both groups), one condition per entry.
    pub ns: Vec<usize>,
    pub delta_intercept: f64,
    pub gamma_slope: f64,
    pub delta_both: f64,
    pub gamma_both: f64,
    pub impact_mean: Sampler,
    pub impact_sd: Sampler,
    pub reps: usize,
    pub seed: u64,
    pub alpha: f64,
}

impl Default for Sim2Config {
    fn default() -> Self {
        Sim2Config {
            m: 10,
            ns: vec![200, 350, 500],
            delta_intercept: 0.5,
            gamma_slope: 2.0,
            delta_both: 0.35,
            gamma_both: 1.5,
            impact_mean: Sampler::Uniform(-0.5, 0.5),
            impact_sd: Sampler::SqrtUniform(0.5, 2.0),
            reps: 100,
            seed: 1,
            alpha: 0.05,
        }
    }
}

pub fn run_sim2(cfg: &Sim2Config) -> Result<SimResult, SimError> {
    if cfg.ns.is_empty() {
        return Err(SimError::EmptyGrid);
    }
    let mut conditions = Vec::new();
    let mut idx = 0u64;
    for &n in &cfg.ns {
        for dif_type in [DifType::Intercept, DifType::Slope, DifType::Both] {
            let (delta, gamma) = match dif_type {
                DifType::Intercept => (cfg.delta_intercept, 1.0),
                DifType::Slope => (0.0, cfg.gamma_slope),
                DifType::Both => (cfg.delta_both, cfg.gamma_both),
            };
            let cond = SimCondition {
                m: cfg.m,
                n0: n,
                n1: n,
                dif_count: 1,
                dif_type,
                delta,
                gamma,
                impact_mean: cfg.impact_mean,
                impact_sd: cfg.impact_sd,
                reps: cfg.reps,
                seed: mix_seed(cfg.seed, idx),
                alpha: cfg.alpha,
            };
            idx += 1;
            conditions.push(run_condition(&cond)?);
        }
    }
    Ok(SimResult { conditions })
}

// ==== CSV output ==========================================================

fn push_opt(out: &mut String, v: Option<f64>) {
    match v {
        Some(v) => out.push_str(&format!(",{v:?}")),
        None => out.push(','),
    }
}

/// Mean and (n-1)-denominator standard deviation of the present values.
fn moments(theta: &[Option<f64>]) -> (Option<f64>, Option<f64>) {
    let vals: Vec<f64> = theta.iter().filter_map(|t| *t).collect();
    if vals.is_empty() {
        return (None, None);
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    if vals.len() < 2 {
        return (Some(mean), None);
    }
    let ss = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
    (Some(mean), Some((ss / (n - 1.0)).sqrt()))
}

impl SimResult {
    /// Aggregate table: one row per (condition, method, test). Rates
    /// without trials (no clean or no biased items) are empty cells.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(RESULTS_CSV_HEADER);
        out.push('\n');
        for cr in &self.conditions {
            let c = &cr.cond;
            let prefix = format!(
                "{},{},{},{},{},{:?},{:?},{},{},{},{},{:?}",
                c.m,
                c.n0,
                c.n1,
                c.dif_count,
                c.dif_type,
                c.delta,
                c.gamma,
                c.impact_mean,
                c.impact_sd,
                c.reps,
                c.seed,
                c.alpha
            );
            let (mean, sd) = moments(&cr.theta);
            for cell in &cr.cells {
                out.push_str(&prefix);
                out.push_str(&format!(",{},{}", cell.method, cell.test));
                push_opt(&mut out, cell.counts.fpr());
                push_opt(&mut out, cell.counts.power());
                push_opt(&mut out, mean);
                push_opt(&mut out, sd);
                out.push_str(&format!(",{:?}\n", cell.convergence_rate));
            }
        }
        out
    }

    /// Raw per-replication scaling estimates; missing fits are empty
    /// cells.
    pub fn theta_csv(&self) -> String {
        let mut out = String::from(THETA_CSV_HEADER);
        out.push('\n');
        for cr in &self.conditions {
            let c = &cr.cond;
            for (rep, th) in cr.theta.iter().enumerate() {
                out.push_str(&format!(
                    "{},{},{},{},{},{:?},{:?},{rep}",
                    c.m, c.n0, c.n1, c.dif_count, c.dif_type, c.delta, c.gamma
                ));
                push_opt(&mut out, *th);
                out.push('\n');
            }
        }
        out
    }
}

// ==== Tests ===============================================================

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn condition_validation_rejects_bad_fields() {
        let base = SimCondition::default();
        let cases: Vec<(SimCondition, &str)> = vec![
            (
                SimCondition {
                    dif_count: 16,
                    ..base.clone()
                },
                "dif_count",
            ),
            (
                SimCondition {
                    m: 2,
                    dif_count: 0,
                    ..base.clone()
                },
                "items",
            ),
            (
                SimCondition {
                    n0: 0,
                    ..base.clone()
                },
                "group sizes",
            ),
            (
                SimCondition {
                    reps: 0,
                    ..base.clone()
                },
                "reps",
            ),
            (
                SimCondition {
                    alpha: 1.0,
                    ..base.clone()
                },
                "alpha",
            ),
            (
                SimCondition {
                    gamma: -1.0,
                    ..base.clone()
                },
                "gamma",
            ),
            (
                SimCondition {
                    delta: f64::NAN,
                    ..base.clone()
                },
                "delta",
            ),
            (
                SimCondition {
                    impact_sd: Sampler::Fixed(0.0),
                    ..base.clone()
                },
                "sampler",
            ),
            (
                SimCondition {
                    impact_mean: Sampler::Uniform(1.0, -1.0),
                    ..base.clone()
                },
                "sampler",
            ),
        ];
        for (cond, hint) in cases {
            let err = cond.validate().unwrap_err().to_string();
            assert!(
                err.contains(hint),
                "expected '{hint}' in error, got: {err}"
            );
        }
        base.validate().unwrap();
    }

    #[test]
    fn samplers_draw_within_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        assert_eq!(Sampler::Fixed(0.3).draw(&mut rng), 0.3);

        let u = Sampler::Uniform(-0.5, 0.5);
        let mut sum = 0.0;
        for _ in 0..10_000 {
            let v = u.draw(&mut rng);
            assert!((-0.5..=0.5).contains(&v));
            sum += v;
        }
        // Mean 0, sd of the mean = (1/sqrt(12)) / 100.
        assert!((sum / 1e4).abs() < 4.0 * 0.29 / 100.0);

        let s = Sampler::SqrtUniform(0.5, 2.0);
        let mut sumsq = 0.0;
        for _ in 0..10_000 {
            let v = s.draw(&mut rng);
            assert!((0.5f64.sqrt()..=2.0f64.sqrt()).contains(&v));
            sumsq += v * v;
        }
        // Squares are uniform on [.5, 2]: mean 1.25, sd 1.5/sqrt(12).
        assert!((sumsq / 1e4 - 1.25).abs() < 4.0 * 0.433 / 100.0);

        assert_eq!(Sampler::Uniform(2.0, 2.0).draw(&mut rng), 2.0);
    }

    #[test]
    fn dif_arithmetic_matches_hand_values() {
        // Intercept shift with a1 = 2, b = 0, delta = .5.
        let (a1, d1) = apply_dif(DifType::Intercept, 0.5, 1.0, 2.0, 0.0);
        assert_eq!((a1, d1), (2.0, -1.0));
        // Slope DIF leaves the intercept alone.
        let (a1, d1) = apply_dif(DifType::Slope, 0.0, 2.0, 1.5, -1.0);
        assert_eq!((a1, d1), (3.0, 1.5));
        // Combined DIF recomputes the intercept from the biased slope.
        let (a1, d1) = apply_dif(DifType::Both, 0.35, 1.5, 2.0, 1.0);
        assert_eq!(a1, 3.0);
        assert!((d1 - (-3.0 * 1.35)).abs() < 1e-15);
    }

    #[test]
    fn dif_subset_is_uniform_over_items() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let (m, dif_count, reps) = (15usize, 3usize, 10_000usize);
        let mut hits = vec![0usize; m];
        for _ in 0..reps {
            let items = draw_dif_items(m, dif_count, &mut rng);
            assert_eq!(items.len(), dif_count);
            assert!(items.windows(2).all(|w| w[0] < w[1]));
            for i in items {
                hits[i] += 1;
            }
        }
        let p = dif_count as f64 / m as f64;
        let se = (p * (1.0 - p) / reps as f64).sqrt();
        for (i, &h) in hits.iter().enumerate() {
            let freq = h as f64 / reps as f64;
            assert!(
                (freq - p).abs() <= 3.0 * se,
                "item {i}: selection frequency {freq} vs {p}"
            );
        }
    }

    #[test]
    fn dif_set_matches_parameter_differences() {
        let cond = SimCondition {
            m: 8,
            dif_count: 3,
            dif_type: DifType::Both,
            delta: 0.4,
            gamma: 1.5,
            ..SimCondition::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (s0, s1, dif) = gen_params(&cond, &mut rng).unwrap();
        for i in 0..cond.m {
            let b = -s0.d[i] / s0.a[i];
            if dif.contains(&i) {
                let (ea, ed) = apply_dif(cond.dif_type, cond.delta, cond.gamma, s0.a[i], b);
                assert_eq!(s1.a[i], ea);
                assert_eq!(s1.d[i], ed);
            } else {
                assert_eq!(s1.a[i], s0.a[i]);
                assert_eq!(s1.d[i], s0.d[i]);
            }
        }

        // Null condition: focal parameters are bit-identical.
        let null = SimCondition {
            dif_count: 0,
            ..cond
        };
        let (s0, s1, dif) = gen_params(&null, &mut ChaCha8Rng::seed_from_u64(12)).unwrap();
        assert!(dif.is_empty());
        assert_eq!(s0.a, s1.a);
        assert_eq!(s0.d, s1.d);
    }

    #[test]
    fn generated_data_is_deterministic_in_seed_and_rep() {
        let cond = SimCondition {
            m: 5,
            n0: 40,
            n1: 40,
            dif_count: 1,
            ..SimCondition::default()
        };
        let (a0, a1, ad) = gen_condition_data(&cond, 3).unwrap();
        let (b0, b1, bd) = gen_condition_data(&cond, 3).unwrap();
        assert_eq!(ad, bd);
        assert_eq!(a0.row(0), b0.row(0));
        assert_eq!(a1.row(39), b1.row(39));

        let (c0, ..) = gen_condition_data(&cond, 4).unwrap();
        assert_ne!(
            (0..40).map(|j| a0.row(j).to_vec()).collect::<Vec<_>>(),
            (0..40).map(|j| c0.row(j).to_vec()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn breakdown_sweep_shape_accounting_and_determinism() {
        let cfg = Sim1Config {
            m: 5,
            n: 120,
            reps: 2,
            seed: 42,
            ..Sim1Config::default()
        };
        let res = run_sim1(&cfg).unwrap();

        // dif_count 0..=3 at m = 5.
        assert_eq!(res.conditions.len(), 4);
        for (k, cr) in res.conditions.iter().enumerate() {
            assert_eq!(cr.cond.dif_count, k);
            assert_eq!(cr.cells.len(), 4);
            assert_eq!(cr.theta.len(), cfg.reps);
            for cell in &cr.cells {
                let c = &cell.counts;
                assert_eq!(c.false_pos + c.true_neg, (5 - k) * cfg.reps);
                assert_eq!(c.true_pos + c.false_neg, k * cfg.reps);
                if k == 0 {
                    assert!(c.power().is_none());
                    assert!(c.fpr().is_some());
                }
            }
        }

        // One row per (condition, method, test) plus the header.
        let csv = res.to_csv();
        assert_eq!(csv.lines().count(), 1 + 4 * 4);
        assert!(csv.starts_with(RESULTS_CSV_HEADER));
        let theta = res.theta_csv();
        assert_eq!(theta.lines().count(), 1 + 4 * cfg.reps);
        assert!(theta.starts_with(THETA_CSV_HEADER));

        // Byte-level determinism; a different seed changes the data.
        let again = run_sim1(&cfg).unwrap();
        assert_eq!(csv, again.to_csv());
        assert_eq!(theta, again.theta_csv());
        let other = run_sim1(&Sim1Config {
            seed: 43,
            ..cfg.clone()
        })
        .unwrap();
        assert_ne!(theta, other.theta_csv());
    }

    #[test]
    fn power_grid_covers_all_cells() {
        let cfg = Sim2Config {
            m: 5,
            ns: vec![80],
            reps: 1,
            seed: 3,
            ..Sim2Config::default()
        };
        let res = run_sim2(&cfg).unwrap();
        assert_eq!(res.conditions.len(), 3);
        let types: Vec<DifType> = res.conditions.iter().map(|c| c.cond.dif_type).collect();
        assert_eq!(types, vec![DifType::Intercept, DifType::Slope, DifType::Both]);
        for cr in &res.conditions {
            assert_eq!(cr.cond.dif_count, 1);
            assert_eq!(cr.cond.n0, 80);
            assert_eq!(cr.cond.n1, 80);
            match cr.cond.dif_type {
                DifType::Intercept => {
                    assert_eq!((cr.cond.delta, cr.cond.gamma), (0.5, 1.0));
                }
                DifType::Slope => {
                    assert_eq!((cr.cond.delta, cr.cond.gamma), (0.0, 2.0));
                }
                DifType::Both => {
                    assert_eq!((cr.cond.delta, cr.cond.gamma), (0.35, 1.5));
                }
            }
        }

        assert!(matches!(
            run_sim2(&Sim2Config {
                ns: vec![],
                ..cfg
            }),
            Err(SimError::EmptyGrid)
        ));
    }

    #[test]
    fn failed_replications_are_counted_not_dropped() {
        // Six respondents per group: degenerate columns and unusable
        // fits are near-certain, yet the sweep must finish with the
        // accounting intact.
        let cond = SimCondition {
            m: 4,
            n0: 6,
            n1: 6,
            dif_count: 1,
            reps: 4,
            seed: 8,
            ..SimCondition::default()
        };
        let res = run_condition(&cond).unwrap();
        assert!(!res.failures.is_empty());
        assert!(res.cells[0].convergence_rate < 1.0);
        for cell in &res.cells {
            let c = &cell.counts;
            assert_eq!(c.false_pos + c.true_neg, 3 * cond.reps);
            assert_eq!(c.true_pos + c.false_neg, cond.reps);
        }
        let missing = res.theta.iter().filter(|t| t.is_none()).count();
        let usable = cond.reps - missing;
        assert_eq!(
            res.cells[0].convergence_rate,
            usable as f64 / cond.reps as f64
        );
    }

    #[test]
    fn configs_parse_with_defaults_and_reject_unknown_keys() {
        let c: Sim1Config = serde_json::from_str("{}").unwrap();
        assert_eq!(c, Sim1Config::default());
        let c: Sim1Config = serde_json::from_str(r#"{"reps": 7, "seed": 2}"#).unwrap();
        assert_eq!((c.reps, c.seed, c.m), (7, 2, 15));
        assert!(serde_json::from_str::<Sim1Config>(r#"{"bogus": 1}"#).is_err());

        let c: Sim2Config = serde_json::from_str(r#"{"ns": [100], "reps": 3}"#).unwrap();
        assert_eq!((c.ns.clone(), c.reps, c.m), (vec![100], 3, 10));

        let s: Sampler = serde_json::from_str(r#"{"fixed": 0.25}"#).unwrap();
        assert_eq!(s, Sampler::Fixed(0.25));
        let s: Sampler = serde_json::from_str(r#"{"uniform": [-0.5, 0.5]}"#).unwrap();
        assert_eq!(s, Sampler::Uniform(-0.5, 0.5));
        let s: Sampler = serde_json::from_str(r#"{"sqrt_uniform": [0.5, 2.0]}"#).unwrap();
        assert_eq!(s, Sampler::SqrtUniform(0.5, 2.0));

        let cond = SimCondition {
            impact_mean: Sampler::Uniform(-0.5, 0.5),
            ..SimCondition::default()
        };
        let back: SimCondition =
            serde_json::from_str(&serde_json::to_string(&cond).unwrap()).unwrap();
        assert_eq!(cond, back);
    }
}
