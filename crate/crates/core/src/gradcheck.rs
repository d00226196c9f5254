//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Coordinate with the largest relative error.
    pub worst_coordinate: Option<usize>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn into_result(self) -> Result<Self, String> {
        if self.passed {
            Ok(self)
        } else {
            Err(format!(
                "gradient check failed at coordinate {:?}: analytic {} vs numeric {} (rel {:.3e} > {:.1e})",
                self.worst_coordinate,
                self.worst_analytic,
                self.worst_numeric,
                self.max_rel_error,
                self.tolerance
            ))
        }
    }
}

/// Compares the analytic gradient returned by `f` at `x0` against central
/// differences. With `sample = Some(n)` only `n` coordinates drawn with
/// `seed` are checked. Error is `|a − n| / max(1, |a|)`.
pub fn grad_check<F>(
    mut f: F,
    x0: &[f64],
    eps: f64,
    tolerance: f64,
    sample_size: Option<usize>,
    seed: u64,
) -> GradCheckReport
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = f(x0);
    let coords: Vec<usize> = match sample_size {
        Some(n) if n < x0.len() => {
            let mut idx = sample(&mut ChaCha8Rng::seed_from_u64(seed), x0.len(), n).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..x0.len()).collect(),
    };
    let mut x = x0.to_vec();
    let mut report = GradCheckReport {
        checked: coords.len(),
        max_rel_error: 0.0,
        worst_coordinate: None,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        tolerance,
        passed: true,
    };
    for i in coords {
        let orig = x[i];
        x[i] = orig + eps;
        let (plus, _) = f(&x);
        x[i] = orig - eps;
        let (minus, _) = f(&x);
        x[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        if report.worst_coordinate.is_none() || rel > report.max_rel_error || rel.is_nan() {
            report.max_rel_error = rel;
            report.worst_coordinate = Some(i);
            report.worst_analytic = analytic[i];
            report.worst_numeric = numeric;
        }
    }
    report.passed = report.max_rel_error <= tolerance;
    report
}
