//! Central-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::stack::NetworkStack;

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// (parameter name, flat coordinate, analytic, numeric) of the worst case.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Scaled error between an analytic and a numeric derivative. The floor on
/// the denominator sits above the f64 central-difference cancellation noise
/// (~1e-10 for unit-scale losses at eps = 1e-5), so coordinates whose true
/// gradient is zero compare as noise over the floor rather than blowing up.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-5);
    (analytic - numeric).abs() / denom
}

/// Compares the gradients currently stored in `stack` against central
/// differences of `loss_fn`. Every `stride`-th coordinate of every parameter
/// is probed; `stride = 1` checks them all.
///
/// A coordinate whose error at `eps` exceeds 1e-5 is re-probed at eps/8 and
/// eps/64 and keeps its best error. A ReLU pre-activation that crosses zero
/// inside the probe window biases the central difference by O(eps), so the
/// artifact shrinks with the window; a wrong analytic gradient keeps its
/// error at every eps and still fails.
///
/// `loss_fn` must be a pure re-evaluation: same batch, same mode, no
/// optimizer side effects.
pub fn grad_check<F: Scalar>(
    stack: &mut NetworkStack<F>,
    loss_fn: &mut dyn FnMut(&mut NetworkStack<F>) -> Result<F>,
    eps: f64,
    stride: usize,
) -> Result<GradCheckReport> {
    if eps <= 0.0 {
        return Err(Error::Parameter(format!("grad_check eps {eps} must be > 0")));
    }
    const RETRY_ABOVE: f64 = 1e-5;
    let stride = stride.max(1);
    let base = loss_fn(stack)?;
    if !base.as_f64().is_finite() {
        return Err(Error::Numerical(format!(
            "loss is not finite at the linearization point: {base}"
        )));
    }
    // Snapshot names and analytic grads up front; loss_fn only runs forwards.
    let (names, grads): (Vec<String>, Vec<Vec<f64>>) = {
        let params = stack.params();
        (
            params.iter().map(|p| p.name.clone()).collect(),
            params
                .iter()
                .map(|p| p.grad.iter().map(|g| g.as_f64()).collect())
                .collect(),
        )
    };
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    for pi in 0..names.len() {
        let len = grads[pi].len();
        let mut ci = 0;
        while ci < len {
            let analytic = grads[pi][ci];
            let mut best_err = f64::INFINITY;
            let mut best_numeric = 0.0;
            for &e in &[eps, eps / 8.0, eps / 64.0] {
                let numeric = central_difference(stack, loss_fn, pi, ci, e, &names)?;
                let err = relative_error(analytic, numeric);
                if err < best_err {
                    best_err = err;
                    best_numeric = numeric;
                }
                if best_err < RETRY_ABOVE {
                    break;
                }
            }
            report.checked += 1;
            if best_err > report.max_rel_err {
                report.max_rel_err = best_err;
                report.worst = Some((names[pi].clone(), ci, analytic, best_numeric));
            }
            ci += stride;
        }
    }
    Ok(report)
}

fn central_difference<F: Scalar>(
    stack: &mut NetworkStack<F>,
    loss_fn: &mut dyn FnMut(&mut NetworkStack<F>) -> Result<F>,
    pi: usize,
    ci: usize,
    eps: f64,
    names: &[String],
) -> Result<f64> {
    let heps = F::from_f64(eps);
    let orig = {
        let mut ps = stack.params_mut();
        let slot = ps[pi].value.as_slice_mut().expect("params are contiguous");
        let orig = slot[ci];
        slot[ci] = orig + heps;
        orig
    };
    let lp = loss_fn(stack)?;
    {
        let mut ps = stack.params_mut();
        ps[pi].value.as_slice_mut().unwrap()[ci] = orig - heps;
    }
    let lm = loss_fn(stack)?;
    {
        let mut ps = stack.params_mut();
        ps[pi].value.as_slice_mut().unwrap()[ci] = orig;
    }
    if !lp.as_f64().is_finite() || !lm.as_f64().is_finite() {
        return Err(Error::Numerical(format!(
            "loss not finite while perturbing {}[{ci}]",
            names[pi]
        )));
    }
    Ok((lp.as_f64() - lm.as_f64()) / (2.0 * eps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::stack::ArchConfig;
    use crate::rng::Rng;
    use ndarray::Array4;

    fn micro() -> NetworkStack<f64> {
        let mut rng = Rng::new(21);
        NetworkStack::build_online(ArchConfig::micro(), &mut rng)
    }

    #[test]
    fn quadratic_loss_through_full_stack_checks_out() {
        let mut stack = micro();
        let x = Array4::from_shape_fn((3, 3, 8, 8), |(n, c, y, xx)| {
            ((n * 193 + c * 71 + y * 11 + xx * 3) as f64 * 0.23).sin()
        });
        // analytic pass: loss = sum(p^2)/2, dL/dp = p
        stack.zero_grads();
        let (_, p, cache) = stack.forward_backprop(&x).unwrap();
        stack.backward_from_dp(&cache, &p.clone());
        let mut loss_fn = |s: &mut NetworkStack<f64>| {
            let (_, p, _) = s.forward_backprop(&x)?;
            Ok(p.iter().map(|v| v * v).sum::<f64>() / 2.0)
        };
        let report = grad_check(&mut stack, &mut loss_fn, 1e-5, 7).unwrap();
        assert!(report.checked > 100);
        assert!(
            report.max_rel_err < 1e-4,
            "max rel err {} at {:?}",
            report.max_rel_err,
            report.worst
        );
    }

    #[test]
    fn tiny_mlp_quadratic_loss_is_clean_to_1e6() {
        // Only the predictor (linear -> BN -> relu -> linear) sees the loss;
        // every other coordinate leaves the loss bit-identical, so its
        // central difference is exactly zero, matching the zero analytic grad.
        let mut stack = micro();
        let x0 = ndarray::Array2::from_shape_fn((6, 16), |(i, j)| {
            ((i * 16 + j) as f64 * 0.193).sin()
        });
        stack.zero_grads();
        {
            let pred = stack.predictor.as_mut().unwrap();
            let (y, cache) = pred
                .forward(&x0, crate::nn::BnMode::Train { update_running: false })
                .unwrap();
            pred.backward(&cache, &y.clone());
        }
        let x0c = x0.clone();
        let mut loss_fn = move |s: &mut NetworkStack<f64>| {
            let pred = s.predictor.as_mut().unwrap();
            let (y, _) = pred
                .forward(&x0c, crate::nn::BnMode::Train { update_running: false })
                .unwrap();
            Ok(y.iter().map(|v| v * v).sum::<f64>() / 2.0)
        };
        let report = grad_check(&mut stack, &mut loss_fn, 1e-5, 1).unwrap();
        assert!(
            report.max_rel_err < 1e-6,
            "max rel err {} at {:?}",
            report.max_rel_err,
            report.worst
        );
    }

    #[test]
    fn constant_loss_reports_zero_error() {
        let mut stack = micro();
        stack.zero_grads();
        let mut loss_fn = |_: &mut NetworkStack<f64>| Ok(3.25f64);
        let report = grad_check(&mut stack, &mut loss_fn, 1e-4, 11).unwrap();
        assert_eq!(report.max_rel_err, 0.0);
    }

    #[test]
    fn zero_eps_is_a_parameter_error() {
        let mut stack = micro();
        let mut loss_fn = |_: &mut NetworkStack<f64>| Ok(0.0f64);
        assert!(matches!(
            grad_check(&mut stack, &mut loss_fn, 0.0, 1),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn non_finite_loss_is_a_numerical_error() {
        let mut stack = micro();
        let mut loss_fn = |_: &mut NetworkStack<f64>| Ok(f64::NAN);
        assert!(matches!(
            grad_check(&mut stack, &mut loss_fn, 1e-4, 1),
            Err(Error::Numerical(_))
        ));
    }
}
