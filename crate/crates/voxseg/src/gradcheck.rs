//! Central finite-difference gradient checking.
//!
//! The verification suites compare every analytic gradient against
//! `(f(x+h) - f(x-h)) / 2h` evaluated at f64. These helpers only ever call
//! the forward path, so they stay independent of the backward implementation
//! they are judging.

/// Relative error with an absolute floor: |a-n| / max(floor, |a|, |n|).
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = floor.max(analytic.abs()).max(numeric.abs());
    (analytic - numeric).abs() / denom
}

/// Worst relative error over the checked components.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_component: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

/// Checks `analytic` against central differences of `eval` at `x0`,
/// perturbing only the listed components. `eval` must be a pure function of
/// the flattened input vector.
pub fn check_components(
    mut eval: impl FnMut(&[f64]) -> f64,
    x0: &[f64],
    analytic: &[f64],
    components: &[usize],
    h: f64,
    floor: f64,
) -> GradCheckReport {
    assert_eq!(x0.len(), analytic.len());
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_component: 0,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
    };
    let mut x = x0.to_vec();
    for &i in components {
        let orig = x[i];
        x[i] = orig + h;
        let fp = eval(&x);
        x[i] = orig - h;
        let fm = eval(&x);
        x[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let err = rel_err(analytic[i], numeric, floor);
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst_component = i;
            report.analytic_at_worst = analytic[i];
            report.numeric_at_worst = numeric;
        }
    }
    report
}

/// Checks every component.
pub fn check_all(
    eval: impl FnMut(&[f64]) -> f64,
    x0: &[f64],
    analytic: &[f64],
    h: f64,
    floor: f64,
) -> GradCheckReport {
    let components: Vec<usize> = (0..x0.len()).collect();
    check_components(eval, x0, analytic, &components, h, floor)
}
