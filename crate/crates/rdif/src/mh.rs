//! Mantel-Haenszel DIF baseline.
//!
//! ## Purpose
//!
//! The classical observed-score DIF test used as the comparison method in
//! the simulation studies: per item, respondents are stratified by total
//! raw score and the conditional association between group membership and
//! the item response is pooled across strata into a single chi-square
//! statistic with one degree of freedom.
//!
//! ## Design notes
//!
//! * Thin matching: the stratifying total *includes* the studied item.
//! * Continuity correction of 0.5 on the pooled deviation, floored at
//!   zero so exact null tables yield a statistic of zero.
//! * Strata with a zero margin (one group absent, or an all-correct or
//!   all-wrong score level) have zero hypergeometric variance and drop
//!   out of every sum, so removing them changes nothing.
//!
//! ## Invariants
//!
//! * Respondent order never matters: all inputs enter through per-stratum
//!   counts.
//! * `flag` holds exactly when `p < alpha`.

use thiserror::Error;

use crate::irt::ResponseMatrix;
use crate::normal::chi2_1_sf;

#[derive(Debug, Error)]
pub enum MhError {
    #[error("group matrices have {m0} and {m1} items")]
    DimensionMismatch { m0: usize, m1: usize },
    #[error("alpha must be in (0, 1), got {0}")]
    BadAlpha(f64),
    #[error("item {index}: every stratum is degenerate; no usable 2x2 table")]
    NoUsableStrata { index: usize },
}

/// One stratum's 2x2 table: reference group in the first row, focal in
/// the second; correct responses in the first column.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StratumTable {
    /// Reference-group correct count.
    pub a: f64,
    /// Reference-group incorrect count.
    pub b: f64,
    /// Focal-group correct count.
    pub c: f64,
    /// Focal-group incorrect count.
    pub d: f64,
}

impl StratumTable {
    #[inline]
    fn total(&self) -> f64 {
        self.a + self.b + self.c + self.d
    }
}

/// Result of the Mantel-Haenszel test for one item.
#[derive(Debug, Clone, PartialEq)]
pub struct MhItemTest {
    pub index: u32,
    pub chi2: f64,
    pub p: f64,
    pub flag: bool,
}

/// Pooled Mantel-Haenszel chi-square over a set of 2x2 strata, with the
/// 0.5 continuity correction floored at zero. Strata with fewer than two
/// respondents or a zero margin contribute nothing; if every stratum is
/// like that, there is no usable information and the caller's item index
/// surfaces in the error.
pub fn mh_from_tables(tables: &[StratumTable], index: usize) -> Result<f64, MhError> {
    let mut dev = 0.0f64;
    let mut var = 0.0f64;
    for t in tables {
        let n = t.total();
        if n < 2.0 {
            continue;
        }
        let row0 = t.a + t.b;
        let row1 = t.c + t.d;
        let col_correct = t.a + t.c;
        let col_wrong = t.b + t.d;
        let v = row0 * row1 * col_correct * col_wrong / (n * n * (n - 1.0));
        if v == 0.0 {
            continue;
        }
        let expected = row0 * col_correct / n;
        dev += t.a - expected;
        var += v;
    }
    if var == 0.0 {
        return Err(MhError::NoUsableStrata { index });
    }
    let corrected = (dev.abs() - 0.5).max(0.0);
    Ok(corrected * corrected / var)
}

/// Mantel-Haenszel DIF test of every item: stratify both groups by total
/// raw score (studied item included), pool the per-stratum tables, and
/// flag items whose p-value falls below `alpha`.
pub fn mantel_haenszel(
    data0: &ResponseMatrix,
    data1: &ResponseMatrix,
    alpha: f64,
) -> Result<Vec<MhItemTest>, MhError> {
    if data0.m() != data1.m() {
        return Err(MhError::DimensionMismatch {
            m0: data0.m(),
            m1: data1.m(),
        });
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(MhError::BadAlpha(alpha));
    }
    let m = data0.m();
    let totals = |data: &ResponseMatrix| -> Vec<usize> {
        (0..data.n())
            .map(|j| data.row(j).iter().map(|&y| y as usize).sum())
            .collect()
    };
    let t0 = totals(data0);
    let t1 = totals(data1);
    let mut out = Vec::with_capacity(m);
    for i in 0..m {
        // One 2x2 table per attainable score level 0..=m.
        let mut tables = vec![
            StratumTable {
                a: 0.0,
                b: 0.0,
                c: 0.0,
                d: 0.0
            };
            m + 1
        ];
        for (j, &score) in t0.iter().enumerate() {
            if data0.get(j, i) == 1 {
                tables[score].a += 1.0;
            } else {
                tables[score].b += 1.0;
            }
        }
        for (j, &score) in t1.iter().enumerate() {
            if data1.get(j, i) == 1 {
                tables[score].c += 1.0;
            } else {
                tables[score].d += 1.0;
            }
        }
        let chi2 = mh_from_tables(&tables, i)?;
        let p = chi2_1_sf(chi2);
        out.push(MhItemTest {
            index: i as u32,
            chi2,
            p,
            flag: p < alpha,
        });
    }
    Ok(out)
}

// ==== Tests ===============================================================
