//! Central-difference gradient checking.

use super::{NnError, Result};

/// One evaluation of the function under test.
///
/// `branch` fingerprints the piecewise-linear branch taken (for example a
/// hash of the ReLU sign pattern); smooth functions return 0. A finite
/// difference whose endpoints land on different branches straddles a kink
/// and is retried with a smaller step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Probe {
    pub loss: f64,
    pub branch: u64,
}

impl Probe {
    pub fn smooth(loss: f64) -> Self {
        Self { loss, branch: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub checked: usize,
    /// Coordinates whose step had to shrink to stay off a kink.
    pub refined: usize,
}

const MIN_EPS: f64 = 1e-9;

fn eval<F: FnMut(&[f64]) -> Probe>(f: &mut F, theta: &[f64]) -> Result<Probe> {
    let p = f(theta);
    if !p.loss.is_finite() {
        return Err(NnError::NonFiniteValue("grad_check loss".into()));
    }
    Ok(p)
}

/// `(f(θ+εeᵢ) − f(θ−εeᵢ)) / 2ε` for a single coordinate.
pub fn central_difference<F: FnMut(&[f64]) -> Probe>(
    f: &mut F,
    theta: &[f64],
    i: usize,
    eps: f64,
) -> Result<f64> {
    let mut t = theta.to_vec();
    t[i] = theta[i] + eps;
    let plus = eval(f, &t)?.loss;
    t[i] = theta[i] - eps;
    let minus = eval(f, &t)?.loss;
    Ok((plus - minus) / (2.0 * eps))
}

/// Compares `analytic` with central differences at every coordinate and
/// returns the largest relative error, measured against
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(mut f: F, theta: &[f64], analytic: &[f64], eps: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Probe,
{
    if theta.len() != analytic.len() {
        return Err(NnError::ShapeMismatch(format!(
            "{} parameters, {} gradient entries",
            theta.len(),
            analytic.len()
        )));
    }
    if let Some(i) = analytic.iter().position(|g| !g.is_finite()) {
        return Err(NnError::NonFiniteValue(format!("analytic gradient [{i}]")));
    }
    let base = eval(&mut f, theta)?.branch;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        checked: 0,
        refined: 0,
    };
    let mut t = theta.to_vec();
    for i in 0..theta.len() {
        let mut h = eps;
        let mut shrunk = false;
        let numeric = loop {
            t[i] = theta[i] + h;
            let plus = eval(&mut f, &t)?;
            t[i] = theta[i] - h;
            let minus = eval(&mut f, &t)?;
            let same_branch = plus.branch == base && minus.branch == base;
            if same_branch || h / 10.0 < MIN_EPS {
                break (plus.loss - minus.loss) / (2.0 * h);
            }
            h /= 10.0;
            shrunk = true;
        };
        t[i] = theta[i];
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
        report.checked += 1;
        report.refined += usize::from(shrunk);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_is_exact() {
        let r = grad_check(|t: &[f64]| Probe::smooth(3.0 * t[0]), &[0.7], &[3.0], 1e-3).unwrap();
        assert!(r.max_rel_error <= 1e-9, "{}", r.max_rel_error);
    }

    #[test]
    fn quadratic_is_exact() {
        let mut f = |t: &[f64]| Probe::smooth(t[0] * t[0]);
        let n = central_difference(&mut f, &[2.0], 0, 1e-3).unwrap();
        assert!((n - 4.0).abs() < 1e-12, "{n}");
        assert_eq!(central_difference(&mut f, &[2.0], 0, 0.5).unwrap(), 4.0);
    }

    #[test]
    fn wrong_gradient_detected() {
        let r = grad_check(
            |t: &[f64]| Probe::smooth(t[0] * t[1]),
            &[1.0, 2.0],
            &[2.0, 1.5],
            1e-4,
        )
        .unwrap();
        assert!(r.max_rel_error > 0.1);
        assert_eq!(r.worst_index, 1);
    }

    #[test]
    fn kink_triggers_refinement() {
        // |x| near 0 with the branch reported
        let f = |t: &[f64]| Probe {
            loss: t[0].abs(),
            branch: u64::from(t[0] > 0.0),
        };
        let r = grad_check(f, &[5e-4], &[1.0], 1e-3).unwrap();
        assert_eq!(r.refined, 1);
        assert!(r.max_rel_error < 1e-9);
    }

    #[test]
    fn non_finite_loss_is_error() {
        let r = grad_check(|_: &[f64]| Probe::smooth(f64::NAN), &[1.0], &[0.0], 1e-3);
        assert!(matches!(r, Err(NnError::NonFiniteValue(_))));
    }
}
