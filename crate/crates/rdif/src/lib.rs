//! Robust scaling and DIF detection for two-group 2PL calibrations.
//!
//! | Module | Contents |
//! |--------|----------|
//! | [`calib`] | Calibration data model, validation, JSON/CSV I/O |
//! | [`scaling`] | Item-level scaling functions and delta-method variances |
//! | [`robust`] | Redescending M-estimation of the scaling parameters |
//! | [`dif`] | Per-item DIF test statistics and the full analysis |
//! | [`irt`] | 2PL simulation, marginal ML estimation, covariance |
//! | [`mh`] | Mantel-Haenszel baseline DIF test |
//! | [`sim`] | Simulation harness for breakdown and power studies |
//! | [`normal`] | Standard normal CDF and quantile |
//! | [`linalg`] | Small symmetric-matrix helpers |

pub mod calib;
pub mod dif;
pub mod irt;
pub mod linalg;
pub mod mh;
pub mod normal;
pub mod robust;
pub mod scaling;
pub mod sim;
