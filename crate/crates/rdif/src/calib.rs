//! Calibration data model and I/O.
//!
//! A [`CalibrationPair`] holds the separately estimated 2PL parameters of
//! one instrument in two groups, on the slope/intercept scale, together
//! with a per-item 4x4 sampling covariance block in the parameter order
//! `(a0, d0, a1, d1)`. Blocks are finite-sample covariances: they already
//! carry the 1/n scaling from estimation, so downstream formulas never
//! multiply or divide by sample size.
//!
//! Groups are calibrated independently, so the cross-group corner of each
//! block is identically zero, and cross-item covariances are not stored
//! at all: analyses treat items as independent blocks.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;
use crate::robust::RdifFit;

/// Tolerance for symmetry of stored covariance blocks.
const SYMMETRY_TOL: f64 = 1e-10;

/// Minimum number of items for a meaningful scaling problem.
pub const MIN_ITEMS: usize = 3;

#[derive(Debug, Error)]
pub enum CalibError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("json parse error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv parse error: {0}")]
    Csv(String),
    #[error("validation error: {0}")]
    Invalid(String),
}

/// One item's two-group 2PL parameters and sampling covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemCalibration {
    pub index: u32,
    /// Group-0 slope.
    pub a0: f64,
    /// Group-0 intercept.
    pub d0: f64,
    /// Group-1 slope.
    pub a1: f64,
    /// Group-1 intercept.
    pub d1: f64,
    /// Sampling covariance of `(a0, d0, a1, d1)`, finite-sample scale.
    pub cov: [[f64; 4]; 4],
}

impl ItemCalibration {
    pub fn var_a0(&self) -> f64 {
        self.cov[0][0]
    }
    pub fn var_d0(&self) -> f64 {
        self.cov[1][1]
    }
    pub fn var_a1(&self) -> f64 {
        self.cov[2][2]
    }
    pub fn var_d1(&self) -> f64 {
        self.cov[3][3]
    }
    pub fn cov_a0_d0(&self) -> f64 {
        self.cov[0][1]
    }
    pub fn cov_a1_d1(&self) -> f64 {
        self.cov[2][3]
    }

    fn validate(&self) -> Result<(), CalibError> {
        let idx = self.index;
        for (name, v) in [
            ("a0", self.a0),
            ("d0", self.d0),
            ("a1", self.a1),
            ("d1", self.d1),
        ] {
            if !v.is_finite() {
                return Err(CalibError::Invalid(format!(
                    "item {idx}: field {name} is not finite"
                )));
            }
        }
        if self.a0 <= 0.0 {
            return Err(CalibError::Invalid(format!(
                "item {idx}: slope a0 must be positive, got {}",
                self.a0
            )));
        }
        if self.a1 <= 0.0 {
            return Err(CalibError::Invalid(format!(
                "item {idx}: slope a1 must be positive, got {}",
                self.a1
            )));
        }
        for r in 0..4 {
            for c in 0..4 {
                if !self.cov[r][c].is_finite() {
                    return Err(CalibError::Invalid(format!(
                        "item {idx}: cov[{r}][{c}] is not finite"
                    )));
                }
            }
        }
        for r in 0..4 {
            for c in r + 1..4 {
                if (self.cov[r][c] - self.cov[c][r]).abs() > SYMMETRY_TOL {
                    return Err(CalibError::Invalid(format!(
                        "item {idx}: cov not symmetric at ({r},{c})"
                    )));
                }
            }
        }
        // Groups are estimated independently; the cross-group corner must
        // be exactly zero, not merely small.
        for r in 0..2 {
            for c in 2..4 {
                if self.cov[r][c] != 0.0 || self.cov[c][r] != 0.0 {
                    return Err(CalibError::Invalid(format!(
                        "item {idx}: cross-group covariance cov[{r}][{c}] must be exactly 0"
                    )));
                }
            }
        }
        let flat: Vec<f64> = self.cov.iter().flatten().copied().collect();
        if !linalg::is_positive_definite(&flat, 4) {
            return Err(CalibError::Invalid(format!(
                "item {idx}: cov block is not positive definite"
            )));
        }
        Ok(())
    }
}

/// Two-group calibration of one instrument.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPair {
    /// Group-0 sample size.
    pub n0: u32,
    /// Group-1 sample size.
    pub n1: u32,
    pub items: Vec<ItemCalibration>,
}

impl CalibrationPair {
    pub fn m(&self) -> usize {
        self.items.len()
    }

    pub fn validate(&self) -> Result<(), CalibError> {
        if self.n0 == 0 || self.n1 == 0 {
            return Err(CalibError::Invalid(
                "sample sizes n0 and n1 must be positive".into(),
            ));
        }
        if self.items.len() < MIN_ITEMS {
            return Err(CalibError::Invalid(format!(
                "m >= {MIN_ITEMS} required, got {}",
                self.items.len()
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for item in &self.items {
            item.validate()?;
            if !seen.insert(item.index) {
                return Err(CalibError::Invalid(format!(
                    "item index {} appears more than once",
                    item.index
                )));
            }
        }
        Ok(())
    }
}

// ==== JSON ================================================================

/// Parses a calibration pair from a JSON or CSV string (sniffed by the
/// first non-whitespace byte) and validates it.
pub fn parse_calibration(text: &str) -> Result<CalibrationPair, CalibError> {
    let trimmed = text.trim_start();
    let pair = if trimmed.starts_with('{') {
        serde_json::from_str::<CalibrationPair>(text)?
    } else {
        parse_calibration_csv(text)?
    };
    pair.validate()?;
    Ok(pair)
}

/// Loads and validates a calibration pair from a `.json` or `.csv` file.
pub fn load_calibration(path: &Path) -> Result<CalibrationPair, CalibError> {
    let text = fs::read_to_string(path).map_err(|source| CalibError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_calibration(&text)
}

/// Serializes a pair to canonical JSON (stable field order, shortest
/// round-trip floats).
pub fn calibration_to_json(pair: &CalibrationPair) -> String {
    serde_json::to_string_pretty(pair).expect("calibration serialization cannot fail")
}

// ==== CSV =================================================================

/// Upper-triangle covariance column order used by the CSV format.
const COV_COLS: [(usize, usize); 10] = [
    (0, 0),
    (0, 1),
    (0, 2),
    (0, 3),
    (1, 1),
    (1, 2),
    (1, 3),
    (2, 2),
    (2, 3),
    (3, 3),
];

const CSV_HEADER: &str = "index,a0,d0,a1,d1,cov00,cov01,cov02,cov03,cov11,cov12,cov13,cov22,cov23,cov33,n0,n1";

/// Serializes a pair to CSV: one row per item, covariance stored as its
/// row-major upper triangle, sample sizes repeated on every row.
pub fn calibration_to_csv(pair: &CalibrationPair) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for item in &pair.items {
        out.push_str(&format!(
            "{},{:?},{:?},{:?},{:?}",
            item.index, item.a0, item.d0, item.a1, item.d1
        ));
        for &(r, c) in &COV_COLS {
            out.push_str(&format!(",{:?}", item.cov[r][c]));
        }
        out.push_str(&format!(",{},{}\n", pair.n0, pair.n1));
    }
    out
}

fn parse_calibration_csv(text: &str) -> Result<CalibrationPair, CalibError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| CalibError::Csv(e.to_string()))?
        .clone();
    let want: Vec<&str> = CSV_HEADER.split(',').collect();
    let got: Vec<&str> = headers.iter().collect();
    if got != want {
        return Err(CalibError::Csv(format!(
            "unexpected header: got {:?}",
            got.join(",")
        )));
    }
    let mut items = Vec::new();
    let mut sizes: Option<(u32, u32)> = None;
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CalibError::Csv(e.to_string()))?;
        let field = |i: usize| -> Result<f64, CalibError> {
            record[i]
                .parse::<f64>()
                .map_err(|e| CalibError::Csv(format!("row {}: column {}: {e}", line + 1, want[i])))
        };
        let index = record[0]
            .parse::<u32>()
            .map_err(|e| CalibError::Csv(format!("row {}: column index: {e}", line + 1)))?;
        let mut cov = [[0.0; 4]; 4];
        for (k, &(r, c)) in COV_COLS.iter().enumerate() {
            let v = field(5 + k)?;
            cov[r][c] = v;
            cov[c][r] = v;
        }
        let n0 = record[15]
            .parse::<u32>()
            .map_err(|e| CalibError::Csv(format!("row {}: column n0: {e}", line + 1)))?;
        let n1 = record[16]
            .parse::<u32>()
            .map_err(|e| CalibError::Csv(format!("row {}: column n1: {e}", line + 1)))?;
        match sizes {
            None => sizes = Some((n0, n1)),
            Some(s) if s != (n0, n1) => {
                return Err(CalibError::Csv(format!(
                    "row {}: sample sizes differ between rows",
                    line + 1
                )))
            }
            _ => {}
        }
        items.push(ItemCalibration {
            index,
            a0: field(1)?,
            d0: field(2)?,
            a1: field(3)?,
            d1: field(4)?,
            cov,
        });
    }
    let (n0, n1) = sizes.ok_or_else(|| CalibError::Csv("no item rows".into()))?;
    Ok(CalibrationPair { n0, n1, items })
}

/// Writes a pair to disk as JSON or CSV depending on the file extension
/// (default JSON), atomically via a temp file in the same directory.
pub fn save_calibration(pair: &CalibrationPair, path: &Path) -> Result<(), CalibError> {
    let body = match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => calibration_to_csv(pair),
        _ => calibration_to_json(pair),
    };
    write_atomic(path, body.as_bytes()).map_err(|source| CalibError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Writes bytes to `path` through a uniquely named temp file in the same
/// directory followed by a rename, so readers never observe a truncated
/// file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let file_name = path
        .file_name()
        .ok_or_else(|| std::io::Error::other("output path has no file name"))?;
    let tmp_name = format!(
        ".{}.tmp.{}",
        file_name.to_string_lossy(),
        std::process::id()
    );
    let tmp_path = match dir {
        Some(d) => d.join(&tmp_name),
        None => Path::new(&tmp_name).to_path_buf(),
    };
    let mut f = fs::File::create(&tmp_path)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    drop(f);
    match fs::rename(&tmp_path, path) {
        Ok(()) => Ok(()),
        Err(e) => {
            let _ = fs::remove_file(&tmp_path);
            Err(e)
        }
    }
}

// ==== DIF report ==========================================================

/// All test results for one item. Statistics that could not be computed
/// (a sub-fit did not converge) are `None`; their flags are then false.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemTests {
    pub index: u32,
    /// Intercept contrast `(d1 - d0) / a1`.
    pub y: f64,
    /// Slope contrast `a1 / a0`, possibly on the log scale.
    pub z: f64,
    pub t_intercept: Option<f64>,
    pub p_intercept: Option<f64>,
    pub flag_intercept: bool,
    pub t_slope: Option<f64>,
    pub p_slope: Option<f64>,
    pub flag_slope: bool,
    pub q_joint: Option<f64>,
    pub p_joint: Option<f64>,
    pub flag_joint: bool,
}

/// Full output of a DIF analysis: both robust scaling fits plus the
/// per-item statistics, flagged at level `alpha`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifReport {
    pub alpha: f64,
    /// Whether the slope problem was estimated on the log scale; the
    /// `z` contrasts and slope statistics are on that scale too.
    pub log_slope: bool,
    pub theta_fit: RdifFit,
    pub sigma_fit: RdifFit,
    pub items: Vec<ItemTests>,
}

/// Column order of the report CSV.
pub const REPORT_CSV_HEADER: &str = "index,y,z,t_intercept,p_intercept,flag_intercept,t_slope,p_slope,flag_slope,q_joint,p_joint,flag_joint";

fn push_opt(out: &mut String, v: Option<f64>) {
    match v {
        Some(v) => out.push_str(&format!(",{v:?}")),
        None => out.push(','),
    }
}

/// Serializes the per-item table to CSV; missing statistics become empty
/// cells. Errors if the report holds no items.
pub fn report_to_csv(report: &DifReport) -> Result<String, CalibError> {
    if report.items.is_empty() {
        return Err(CalibError::Invalid("report not populated".into()));
    }
    let mut out = String::from(REPORT_CSV_HEADER);
    out.push('\n');
    for it in &report.items {
        out.push_str(&format!("{},{:?},{:?}", it.index, it.y, it.z));
        push_opt(&mut out, it.t_intercept);
        push_opt(&mut out, it.p_intercept);
        out.push_str(&format!(",{}", it.flag_intercept));
        push_opt(&mut out, it.t_slope);
        push_opt(&mut out, it.p_slope);
        out.push_str(&format!(",{}", it.flag_slope));
        push_opt(&mut out, it.q_joint);
        push_opt(&mut out, it.p_joint);
        out.push_str(&format!(",{}\n", it.flag_joint));
    }
    Ok(out)
}

/// Serializes a full report, fits included, to canonical JSON.
pub fn report_to_json(report: &DifReport) -> Result<String, CalibError> {
    if report.items.is_empty() {
        return Err(CalibError::Invalid("report not populated".into()));
    }
    Ok(serde_json::to_string_pretty(report).expect("report serialization cannot fail"))
}

/// Parses a report previously produced by [`report_to_json`].
pub fn report_from_json(text: &str) -> Result<DifReport, CalibError> {
    Ok(serde_json::from_str(text)?)
}

/// Writes a report to disk as JSON or CSV depending on the file
/// extension (default JSON), atomically.
pub fn save_report(report: &DifReport, path: &Path) -> Result<(), CalibError> {
    let body = match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => report_to_csv(report)?,
        _ => report_to_json(report)?,
    };
    write_atomic(path, body.as_bytes()).map_err(|source| CalibError::Io {
        path: path.display().to_string(),
        source,
    })
}
