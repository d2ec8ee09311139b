//! Central finite-difference gradient checking.
//!
//! The numerical side only ever evaluates the scalar function, so it is
//! independent of the reverse pass it is compared against.

use crate::engine::Tensor;
use crate::error::Result;

/// Default finite-difference step.
pub const STEP: f64 = 1e-4;
/// Default relative tolerance per coordinate.
pub const REL_TOL: f64 = 1e-3;
/// Absolute slack below which a coordinate counts as matching regardless of
/// the relative error (both gradients are numerically zero).
pub const ABS_FLOOR: f64 = 1e-7;

#[derive(Clone, Debug)]
pub struct CoordResult {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub coords: Vec<CoordResult>,
}

impl GradCheckReport {
    pub fn checked(&self) -> usize {
        self.coords.len()
    }

    pub fn passed(&self) -> usize {
        self.coords.iter().filter(|c| c.passed).count()
    }

    pub fn pass_fraction(&self) -> f64 {
        if self.coords.is_empty() {
            return 1.0;
        }
        self.passed() as f64 / self.coords.len() as f64
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.coords.extend(other.coords);
    }

    pub fn worst(&self) -> Option<&CoordResult> {
        self.coords
            .iter()
            .filter(|c| !c.passed)
            .max_by(|a, b| relative_error(a.analytic, a.numeric).total_cmp(&relative_error(b.analytic, b.numeric)))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

pub fn coordinate_matches(analytic: f64, numeric: f64, rel_tol: f64) -> bool {
    (analytic - numeric).abs() <= ABS_FLOOR || relative_error(analytic, numeric) <= rel_tol
}

/// Compare `analytic` (the claimed gradient of `f` at `x`) with central
/// differences at the given flat coordinates.
pub fn check<F>(
    mut f: F,
    x: &Tensor,
    analytic: &Tensor,
    coords: &[usize],
    step: f64,
    rel_tol: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let mut report = GradCheckReport::default();
    let mut probe = x.clone();
    for &index in coords {
        let original = probe.data()[index];
        probe.data_mut()[index] = original + step;
        let plus = f(&probe)?;
        probe.data_mut()[index] = original - step;
        let minus = f(&probe)?;
        probe.data_mut()[index] = original;
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic.data()[index];
        report.coords.push(CoordResult {
            index,
            analytic: a,
            numeric,
            passed: coordinate_matches(a, numeric, rel_tol),
        });
    }
    Ok(report)
}

/// Up to `limit` coordinates spread evenly over `numel` (all when smaller).
pub fn spread_coords(numel: usize, limit: usize) -> Vec<usize> {
    if numel <= limit {
        return (0..numel).collect();
    }
    (0..limit)
        .map(|i| i * numel / limit + (i * 7919) % (numel / limit).max(1))
        .collect()
}
