//! Finite-difference verification of analytic gradients (64-bit only).

use rand::seq::index::sample;
use rand::seq::SliceRandom;

use crate::rng::rng_for;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// How many coordinates to probe; all of them when the input is smaller.
    pub coordinates: usize,
    pub seed: u64,
    /// Smallest denominator in the relative error, so gradients that are
    /// zero up to evaluation noise are not judged relatively.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-5, coordinates: 100, seed: 0, floor: 1e-8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Probe {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub checked: usize,
    pub worst: Option<Probe>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error < tolerance
    }

    /// Combine reports from several checks, keeping the worst probe.
    pub fn merge(mut self, other: GradCheckReport) -> GradCheckReport {
        self.checked += other.checked;
        if other.max_relative_error > self.max_relative_error {
            self.max_relative_error = other.max_relative_error;
            self.worst = other.worst;
        }
        self
    }
}

/// `|a − n| / max(|a|, |n|, floor)`
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compare `analytic` (the gradient of `loss` at `point`) against central
/// differences at randomly chosen coordinates.
pub fn gradient_check<F>(mut loss: F, point: &[f64], analytic: &[f64], cfg: &GradCheckConfig) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(point.len(), analytic.len(), "gradient length must match the point");
    let indices: Vec<usize> = if point.len() <= cfg.coordinates {
        (0..point.len()).collect()
    } else {
        let mut rng = rng_for(cfg.seed, &[0x9c]);
        let mut v = sample(&mut rng, point.len(), cfg.coordinates).into_vec();
        v.sort_unstable();
        v
    };
    let mut x = point.to_vec();
    let mut report = GradCheckReport { max_relative_error: 0.0, checked: 0, worst: None };
    for &i in &indices {
        let orig = x[i];
        x[i] = orig + cfg.step;
        let up = loss(&x);
        x[i] = orig - cfg.step;
        let down = loss(&x);
        x[i] = orig;
        let numeric = (up - down) / (2.0 * cfg.step);
        let err = relative_error(analytic[i], numeric, cfg.floor);
        report.checked += 1;
        if report.worst.is_none() || err > report.max_relative_error {
            report.max_relative_error = err;
            report.worst = Some(Probe { index: i, analytic: analytic[i], numeric, relative_error: err });
        }
    }
    report
}

/// Central differences for a piecewise-smooth function. `eval` returns the
/// value and an identifier of the smooth piece containing the point. When
/// the stencil straddles a piece boundary the step is shrunk tenfold, up to
/// `max_shrinks` times; coordinates that still straddle one are replaced by
/// fresh ones. `checked` counts only coordinates actually compared.
pub fn gradient_check_piecewise<F>(
    mut eval: F,
    point: &[f64],
    analytic: &[f64],
    cfg: &GradCheckConfig,
    max_shrinks: usize,
) -> PiecewiseReport
where
    F: FnMut(&[f64]) -> (f64, u64),
{
    assert_eq!(point.len(), analytic.len(), "gradient length must match the point");
    let mut order: Vec<usize> = (0..point.len()).collect();
    order.shuffle(&mut rng_for(cfg.seed, &[0x9c]));
    let mut x = point.to_vec();
    let (_, base) = eval(&x);
    let mut out = PiecewiseReport {
        report: GradCheckReport { max_relative_error: 0.0, checked: 0, worst: None },
        straddling: 0,
    };
    for &i in &order {
        if out.report.checked == cfg.coordinates {
            break;
        }
        let orig = x[i];
        let mut step = cfg.step;
        let mut numeric = None;
        for _ in 0..=max_shrinks {
            x[i] = orig + step;
            let (up, pu) = eval(&x);
            x[i] = orig - step;
            let (down, pd) = eval(&x);
            x[i] = orig;
            if pu == base && pd == base {
                numeric = Some((up - down) / (2.0 * step));
                break;
            }
            step /= 10.0;
        }
        let Some(numeric) = numeric else {
            out.straddling += 1;
            continue;
        };
        let err = relative_error(analytic[i], numeric, cfg.floor);
        let r = &mut out.report;
        r.checked += 1;
        if r.worst.is_none() || err > r.max_relative_error {
            r.max_relative_error = err;
            r.worst = Some(Probe { index: i, analytic: analytic[i], numeric, relative_error: err });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseReport {
    pub report: GradCheckReport,
    /// Coordinates skipped because every step crossed a piece boundary.
    pub straddling: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_gradient_of_a_quadratic_passes() {
        let point = [0.3, -1.2, 2.0];
        let loss = |x: &[f64]| x.iter().map(|v| v * v * v).sum::<f64>();
        let grad: Vec<f64> = point.iter().map(|v| 3.0 * v * v).collect();
        let r = gradient_check(loss, &point, &grad, &GradCheckConfig::default());
        assert_eq!(r.checked, 3);
        assert!(r.passes(1e-6), "{r:?}");
    }

    #[test]
    fn wrong_gradient_is_reported() {
        let point = [1.0, 2.0];
        let r = gradient_check(|x: &[f64]| x[0] * x[1], &point, &[2.0, 2.0], &GradCheckConfig::default());
        assert!(!r.passes(1e-4));
        assert_eq!(r.worst.unwrap().index, 1);
    }

    #[test]
    fn subsamples_large_inputs() {
        let point = vec![0.5; 1000];
        let r = gradient_check(|x: &[f64]| x.iter().sum(), &point, &vec![1.0; 1000], &GradCheckConfig::default());
        assert_eq!(r.checked, 100);
    }
}

#[cfg(test)]
mod piecewise_tests {
    use super::*;

    #[test]
    fn kinked_coordinate_is_skipped_or_shrunk() {
        // |x0| at x0 = 3e-6 straddles the kink for the default step only.
        let f = |x: &[f64]| (x[0].abs() + x[1] * x[1], u64::from(x[0] > 0.0));
        let point = [3e-6, 0.5];
        let r = gradient_check_piecewise(f, &point, &[1.0, 1.0], &GradCheckConfig::default(), 3);
        assert_eq!(r.report.checked, 2);
        assert!(r.report.passes(1e-8), "{r:?}");
        let r = gradient_check_piecewise(f, &[0.0, 0.5], &[1.0, 1.0], &GradCheckConfig::default(), 3);
        assert_eq!((r.report.checked, r.straddling), (1, 1));
    }
}
