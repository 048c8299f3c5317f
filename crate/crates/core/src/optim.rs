//! Optimizers and the learning-rate schedule.

use ndarray::ArrayD;

use crate::error::{Error, Result};
use crate::nn::{Param, ParamKind};
use crate::scalar::Scalar;

/// Cosine decay from `lr0` to `lr_final` over `total_steps`; steps past the
/// end clamp to `lr_final`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64, lr_final: f64) -> f64 {
    if total_steps == 0 || step >= total_steps {
        return lr_final;
    }
    let frac = step as f64 / total_steps as f64;
    lr_final + 0.5 * (lr0 - lr_final) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// SGD with momentum; weight decay enters the gradient as an L2 term.
/// Batch-norm affine parameters are excluded from decay unless
/// `decay_bn_affine` is set.
#[derive(Debug, Clone)]
pub struct SgdMomentum<F> {
    pub momentum: f64,
    pub weight_decay: f64,
    pub decay_bn_affine: bool,
    buffers: Vec<ArrayD<F>>,
}

impl<F: Scalar> SgdMomentum<F> {
    pub fn new(momentum: f64, weight_decay: f64, decay_bn_affine: bool) -> Self {
        SgdMomentum {
            momentum,
            weight_decay,
            decay_bn_affine,
            buffers: Vec::new(),
        }
    }

    pub fn buffers(&self) -> &[ArrayD<F>] {
        &self.buffers
    }

    pub fn restore_buffers(&mut self, buffers: Vec<ArrayD<F>>) {
        self.buffers = buffers;
    }

    pub fn step(&mut self, params: &mut [&mut Param<F>], lr: f64) -> Result<()> {
        if self.buffers.is_empty() {
            self.buffers = params
                .iter()
                .map(|p| ArrayD::zeros(p.value.raw_dim()))
                .collect();
        }
        if self.buffers.len() != params.len() {
            return Err(Error::Structure(format!(
                "optimizer state holds {} buffers for {} params",
                self.buffers.len(),
                params.len()
            )));
        }
        let m = F::from_f64(self.momentum);
        let lr_f = F::from_f64(lr);
        for (p, buf) in params.iter_mut().zip(self.buffers.iter_mut()) {
            let decays = match p.kind {
                ParamKind::BnGamma | ParamKind::BnBeta => self.decay_bn_affine,
                _ => true,
            };
            let wd = F::from_f64(if decays { self.weight_decay } else { 0.0 });
            ndarray::Zip::from(buf)
                .and(&p.grad)
                .and(&p.value)
                .for_each(|b, &g, &v| {
                    *b = *b * m + g + wd * v;
                });
        }
        for (p, buf) in params.iter_mut().zip(self.buffers.iter()) {
            ndarray::Zip::from(&mut p.value).and(buf).for_each(|v, &b| {
                *v = *v - lr_f * b;
            });
        }
        Ok(())
    }
}

/// Layer-wise adaptive rate scaling. The local rate multiplies the global
/// one by `trust_coeff * ||w|| / (||g|| + eps)`; a zero weight or gradient
/// norm falls back to ratio 1 so zero-initialized layers can still move.
#[derive(Debug, Clone)]
pub struct Lars<F> {
    pub momentum: f64,
    pub weight_decay: f64,
    pub trust_coeff: f64,
    pub eps: f64,
    buffers: Vec<ArrayD<F>>,
}

impl<F: Scalar> Lars<F> {
    pub fn new(momentum: f64, weight_decay: f64, trust_coeff: f64, eps: f64) -> Self {
        Lars {
            momentum,
            weight_decay,
            trust_coeff,
            eps,
            buffers: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Param<F>], lr: f64) -> Result<()> {
        if self.buffers.is_empty() {
            self.buffers = params
                .iter()
                .map(|p| ArrayD::zeros(p.value.raw_dim()))
                .collect();
        }
        if self.buffers.len() != params.len() {
            return Err(Error::Structure(format!(
                "optimizer state holds {} buffers for {} params",
                self.buffers.len(),
                params.len()
            )));
        }
        let m = F::from_f64(self.momentum);
        for (p, buf) in params.iter_mut().zip(self.buffers.iter_mut()) {
            let wd = F::from_f64(self.weight_decay);
            let mut w_norm = 0.0f64;
            let mut g_norm = 0.0f64;
            // effective gradient with decay folded in
            let mut eff = p.grad.clone();
            ndarray::Zip::from(&mut eff).and(&p.value).for_each(|g, &v| {
                *g = *g + wd * v;
            });
            for v in p.value.iter() {
                let f = v.as_f64();
                w_norm += f * f;
            }
            for g in eff.iter() {
                let f = g.as_f64();
                g_norm += f * f;
            }
            if !w_norm.is_finite() || !g_norm.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite norm in LARS step for {}",
                    p.name
                )));
            }
            let (w_norm, g_norm) = (w_norm.sqrt(), g_norm.sqrt());
            let ratio = if w_norm > 0.0 && g_norm > 0.0 {
                self.trust_coeff * w_norm / (g_norm + self.eps)
            } else {
                1.0
            };
            let local_lr = F::from_f64(lr * ratio);
            ndarray::Zip::from(&mut *buf).and(&eff).for_each(|b, &g| {
                *b = *b * m + local_lr * g;
            });
            ndarray::Zip::from(&mut p.value).and(&*buf).for_each(|v, &b| {
                *v = *v - b;
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    fn scalar_param(name: &str, v: f64) -> Param<f64> {
        Param::new(
            name.into(),
            ArrayD::from_elem(IxDyn(&[1]), v),
            ParamKind::Weight,
        )
    }

    #[test]
    fn cosine_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 100, 0.1, 0.0), 0.1);
        assert_eq!(cosine_lr(100, 100, 0.1, 0.0), 0.0);
        assert!((cosine_lr(50, 100, 0.1, 0.0) - 0.05).abs() < 1e-12);
        // clamp past the end
        assert_eq!(cosine_lr(150, 100, 0.1, 0.0), 0.0);
        assert_eq!(cosine_lr(5, 0, 0.1, 0.0), 0.0);
    }

    #[test]
    fn sgd_matches_hand_trace_on_quadratic() {
        // loss = 0.5 * c * theta^2, grad = c * theta, with weight decay
        let c = 3.0;
        let (m, wd, lr) = (0.9, 0.01, 0.1);
        let mut p = scalar_param("w", 1.0);
        let mut opt = SgdMomentum::<f64>::new(m, wd, true);
        let mut theta_ref = 1.0f64;
        let mut buf_ref = 0.0f64;
        for _ in 0..6 {
            p.zero_grad();
            p.grad[0] = c * p.value[0];
            let mut params = vec![&mut p];
            opt.step(&mut params, lr).unwrap();
            // scalar reference
            let g = c * theta_ref + wd * theta_ref;
            buf_ref = m * buf_ref + g;
            theta_ref -= lr * buf_ref;
            assert!(
                (p.value[0] - theta_ref).abs() < 1e-15,
                "{} vs {theta_ref}",
                p.value[0]
            );
        }
    }

    #[test]
    fn sgd_skips_decay_on_bn_affine_by_default() {
        let mut gamma = Param::new(
            "bn.gamma".into(),
            ArrayD::from_elem(IxDyn(&[1]), 2.0f64),
            ParamKind::BnGamma,
        );
        let mut opt = SgdMomentum::<f64>::new(0.0, 0.5, false);
        gamma.zero_grad(); // zero gradient; decay would still move the value
        let mut params = vec![&mut gamma];
        opt.step(&mut params, 1.0).unwrap();
        assert_eq!(gamma.value[0], 2.0);
        let mut opt = SgdMomentum::<f64>::new(0.0, 0.5, true);
        let mut params = vec![&mut gamma];
        opt.step(&mut params, 1.0).unwrap();
        assert!((gamma.value[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lars_zero_gradient_leaves_params() {
        let mut p = scalar_param("w", 0.7);
        let mut opt = Lars::<f64>::new(0.9, 0.0, 0.001, 1e-8);
        p.zero_grad();
        let mut params = vec![&mut p];
        opt.step(&mut params, 0.8).unwrap();
        assert_eq!(p.value[0], 0.7);
    }

    #[test]
    fn lars_unit_norms_reduce_to_momentum_sgd() {
        let mut p = scalar_param("w", 1.0);
        let mut opt = Lars::<f64>::new(0.0, 0.0, 1.0, 0.0);
        p.grad[0] = 1.0; // ||w|| = ||g|| = 1 -> ratio 1
        let mut params = vec![&mut p];
        opt.step(&mut params, 0.1).unwrap();
        assert!((p.value[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn lars_two_param_hand_trace() {
        let (m, trust, eps, lr) = (0.9, 0.001, 1e-8, 0.8);
        let mut a = scalar_param("a", 2.0);
        let mut b = scalar_param("b", -1.0);
        let mut opt = Lars::<f64>::new(m, 0.0, trust, eps);
        let (mut ar, mut br) = (2.0f64, -1.0f64);
        let (mut abuf, mut bbuf) = (0.0f64, 0.0f64);
        for step in 0..3 {
            let ga = 0.5 * ar + step as f64 * 0.1;
            let gb = -0.25 * br;
            a.zero_grad();
            b.zero_grad();
            a.grad[0] = ga;
            b.grad[0] = gb;
            let mut params = vec![&mut a, &mut b];
            opt.step(&mut params, lr).unwrap();
            // scalar reference, one tensor = one layer
            let ratio_a = if ar.abs() > 0.0 && ga.abs() > 0.0 {
                trust * ar.abs() / (ga.abs() + eps)
            } else {
                1.0
            };
            abuf = m * abuf + lr * ratio_a * ga;
            ar -= abuf;
            let ratio_b = if br.abs() > 0.0 && gb.abs() > 0.0 {
                trust * br.abs() / (gb.abs() + eps)
            } else {
                1.0
            };
            bbuf = m * bbuf + lr * ratio_b * gb;
            br -= bbuf;
            assert!((a.value[0] - ar).abs() < 1e-15, "step {step}");
            assert!((b.value[0] - br).abs() < 1e-15, "step {step}");
        }
    }

    #[test]
    fn lars_zero_weight_norm_still_moves() {
        let mut p = scalar_param("w", 0.0);
        let mut opt = Lars::<f64>::new(0.0, 0.0, 0.001, 1e-8);
        p.grad[0] = 1.0;
        let mut params = vec![&mut p];
        opt.step(&mut params, 0.5).unwrap();
        assert!((p.value[0] + 0.5).abs() < 1e-15); // ratio falls back to 1
    }
}
