//! Central finite-difference gradient checking.

use super::rng::RngStream;

#[derive(Clone, Copy, Debug)]
pub struct CheckConfig {
    pub step: f64,
    pub rel_tol: f64,
    /// Absolute floor added to the denominator of the relative error, so
    /// coordinates with vanishing gradients do not divide by zero.
    pub abs_floor: f64,
}

impl CheckConfig {
    /// Raises `abs_floor` to the round-off level of central differences on
    /// a loss of magnitude `loss`: each evaluation carries about one ulp,
    /// `ε·|L|`, so the difference quotient is uncertain by `u = ε·|L|/h`.
    /// With the floor at `ROUNDOFF_UNITS·u/rel_tol`, a coordinate whose
    /// gradient is below the floor passes iff its absolute error is within
    /// a few units of `u`; larger gradients are still judged purely
    /// relatively.
    pub fn with_roundoff_floor(self, loss: f64) -> Self {
        let u = f64::EPSILON * loss.abs().max(1.0) / self.step;
        CheckConfig {
            abs_floor: self.abs_floor.max(ROUNDOFF_UNITS * u / self.rel_tol),
            ..self
        }
    }
}

/// Round-off units tolerated on vanishing gradients by
/// [`CheckConfig::with_roundoff_floor`].
pub const ROUNDOFF_UNITS: f64 = 4.0;

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig {
            step: 1e-6,
            rel_tol: 1e-4,
            abs_floor: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CoordinateCheck {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct CheckReport {
    pub checks: Vec<CoordinateCheck>,
    pub max_rel_error: f64,
}

impl CheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / (a.abs().max(b.abs()) + floor)
}

/// Central difference `(f(x+h) - f(x-h)) / 2h` at coordinate `i`.
pub fn central_difference(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &mut [f64],
    i: usize,
    step: f64,
) -> f64 {
    let orig = x[i];
    x[i] = orig + step;
    let plus = f(x);
    x[i] = orig - step;
    let minus = f(x);
    x[i] = orig;
    (plus - minus) / (2.0 * step)
}

/// Compares `analytic` against central differences of `f` on up to `count`
/// coordinates chosen by `rng` (all coordinates when `count >= x.len()`).
pub fn check_coordinates(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    count: usize,
    rng: &mut RngStream,
    cfg: CheckConfig,
) -> CheckReport {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    if count < x.len() {
        rng.shuffle(&mut idx);
        idx.truncate(count);
    }
    let mut point = x.to_vec();
    let mut report = CheckReport::default();
    for i in idx {
        let numeric = central_difference(f, &mut point, i, cfg.step);
        let rel_error = relative_error(analytic[i], numeric, cfg.abs_floor);
        report.max_rel_error = report.max_rel_error.max(rel_error);
        report.checks.push(CoordinateCheck {
            index: i,
            analytic: analytic[i],
            numeric,
            rel_error,
        });
    }
    report
}
