//! Item-level scaling functions and their sampling variances.
//!
//! ## Purpose
//!
//! In the common-item nonequivalent-groups design, each anchor item gives
//! one estimate of the latent scaling parameters: the intercept contrast
//! `Y_i = (d1_i - d0_i) / a1_i` estimates `theta = mu / sigma`, and the
//! slope ratio `Z_i = a1_i / a0_i` estimates `sigma`. Items whose `Y_i`
//! (or `Z_i`) departs from the common value are exhibiting DIF, so the
//! scaling step doubles as outlier detection.
//!
//! ## Design notes
//!
//! * All variances come from the delta method applied to the stored
//!   finite-sample covariance blocks, evaluated at the *null* value of
//!   the scaling parameter rather than at the item's own estimate.
//! * `tau_intercept` is quadratic in `theta`; positive definiteness of
//!   the calibration block makes it strictly positive for every `theta`.
//! * Residuals downstream divide by these variances directly (not their
//!   square roots); the tuning constants in [`crate::robust`] are
//!   calibrated to that convention.

use thiserror::Error;

use crate::calib::ItemCalibration;

/// Slopes smaller than this are treated as degenerate rather than
/// producing astronomically scaled contrasts.
pub const DEGENERATE_SLOPE: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum ScalingError {
    #[error("item {index}: slope {field} is degenerate (|a| < {DEGENERATE_SLOPE})")]
    DegenerateSlope { index: u32, field: &'static str },
    #[error("item {index}: computed variance is not positive ({value})")]
    NonPositiveVariance { index: u32, value: f64 },
    #[error("scale parameter must be positive, got {0}")]
    NonPositiveScale(f64),
    #[error("tau list is empty")]
    EmptyTaus,
    #[error("tau[{index}] must be positive and finite, got {value}")]
    BadTau { index: usize, value: f64 },
}

/// Intercept contrast `Y_i = (d1 - d0) / a1`.
pub fn y_intercept(item: &ItemCalibration) -> Result<f64, ScalingError> {
    if item.a1.abs() < DEGENERATE_SLOPE {
        return Err(ScalingError::DegenerateSlope {
            index: item.index,
            field: "a1",
        });
    }
    Ok((item.d1 - item.d0) / item.a1)
}

/// Slope ratio `Z_i = a1 / a0`, optionally on the log scale.
pub fn z_slope(item: &ItemCalibration, log_scale: bool) -> Result<f64, ScalingError> {
    if item.a0.abs() < DEGENERATE_SLOPE {
        return Err(ScalingError::DegenerateSlope {
            index: item.index,
            field: "a0",
        });
    }
    let ratio = item.a1 / item.a0;
    if log_scale {
        if ratio <= 0.0 {
            return Err(ScalingError::NonPositiveScale(ratio));
        }
        Ok(ratio.ln())
    } else {
        Ok(ratio)
    }
}

/// Delta-method variance of `Y_i` under the null `Y_i = theta`:
/// `a1^-2 (theta^2 var(a1) - 2 theta cov(a1, d1) + var(d1) + var(d0))`.
pub fn tau_intercept(item: &ItemCalibration, theta: f64) -> Result<f64, ScalingError> {
    if item.a1.abs() < DEGENERATE_SLOPE {
        return Err(ScalingError::DegenerateSlope {
            index: item.index,
            field: "a1",
        });
    }
    let quad = theta * theta * item.var_a1() - 2.0 * theta * item.cov_a1_d1()
        + item.var_d1()
        + item.var_d0();
    let tau = quad / (item.a1 * item.a1);
    if tau <= 0.0 || !tau.is_finite() {
        return Err(ScalingError::NonPositiveVariance {
            index: item.index,
            value: tau,
        });
    }
    Ok(tau)
}

/// Delta-method variance of `Z_i` under the null `Z_i = sigma`:
/// `a0^-2 (sigma^2 var(a0) + var(a1))`, divided by `sigma^2` on the log
/// scale.
pub fn var_slope(
    item: &ItemCalibration,
    sigma: f64,
    log_scale: bool,
) -> Result<f64, ScalingError> {
    if item.a0.abs() < DEGENERATE_SLOPE {
        return Err(ScalingError::DegenerateSlope {
            index: item.index,
            field: "a0",
        });
    }
    if sigma <= 0.0 || !sigma.is_finite() {
        return Err(ScalingError::NonPositiveScale(sigma));
    }
    let raw = (sigma * sigma * item.var_a0() + item.var_a1()) / (item.a0 * item.a0);
    let var = if log_scale { raw / (sigma * sigma) } else { raw };
    if var <= 0.0 || !var.is_finite() {
        return Err(ScalingError::NonPositiveVariance {
            index: item.index,
            value: var,
        });
    }
    Ok(var)
}

/// Delta-method covariance of `(Y_i, Z_i)` under the joint null, at the
/// scaling values `(theta, sigma)`:
/// `(a0 a1)^-1 (sigma cov(a0, d0) + cov(a1, d1) - theta var(a1))`.
/// On the log slope scale the covariance of `(Y_i, log Z_i)` is this
/// value divided by `sigma`.
pub fn cov_yz(
    item: &ItemCalibration,
    theta: f64,
    sigma: f64,
    log_scale: bool,
) -> Result<f64, ScalingError> {
    if item.a0.abs() < DEGENERATE_SLOPE {
        return Err(ScalingError::DegenerateSlope {
            index: item.index,
            field: "a0",
        });
    }
    if item.a1.abs() < DEGENERATE_SLOPE {
        return Err(ScalingError::DegenerateSlope {
            index: item.index,
            field: "a1",
        });
    }
    if sigma <= 0.0 || !sigma.is_finite() {
        return Err(ScalingError::NonPositiveScale(sigma));
    }
    let raw =
        (sigma * item.cov_a0_d0() + item.cov_a1_d1() - theta * item.var_a1()) / (item.a0 * item.a1);
    Ok(if log_scale { raw / sigma } else { raw })
}

fn check_taus(taus: &[f64]) -> Result<(), ScalingError> {
    if taus.is_empty() {
        return Err(ScalingError::EmptyTaus);
    }
    for (index, &t) in taus.iter().enumerate() {
        if t <= 0.0 || !t.is_finite() {
            return Err(ScalingError::BadTau { index, value: t });
        }
    }
    Ok(())
}

/// Inverse-variance weights `(1/tau_i) / sum_j (1/tau_j)`; these are the
/// weights of the efficient linear combination under no DIF.
pub fn null_weights(taus: &[f64]) -> Result<Vec<f64>, ScalingError> {
    check_taus(taus)?;
    let inv_sum: f64 = taus.iter().map(|t| 1.0 / t).sum();
    Ok(taus.iter().map(|t| 1.0 / (t * inv_sum)).collect())
}

/// Variance of the inverse-variance-weighted estimator: `1 / sum_i (1/tau_i)`.
pub fn var_estimator(taus: &[f64]) -> Result<f64, ScalingError> {
    check_taus(taus)?;
    let inv_sum: f64 = taus.iter().map(|t| 1.0 / t).sum();
    Ok(1.0 / inv_sum)
}

/// Asymptotic variance of the scaled residual `(Y_i - theta_hat) / tau_i`:
/// `omega_i = (tau_i - var_estimator) / tau_i^2`.
pub fn omega(taus: &[f64], i: usize) -> Result<f64, ScalingError> {
    check_taus(taus)?;
    let v = var_estimator(taus)?;
    let tau = taus[i];
    Ok((tau - v) / (tau * tau))
}
