//! Contrastive objective.
//!
//! `contrastive_loss(h, p, tau)`: both inputs are row-normalized; `h` (s*N
//! rows) splits into `s` blocks of `N`; each block forms an `N x N` cosine
//! logit matrix against `p`, scored by softmax cross-entropy with diagonal
//! labels and mean reduction; the block losses are averaged.
//!
//! The total objective couples the three branches:
//! `loss_s = (L(c1, p3) + L(c3, p1)) / 2` over the patch-combination
//! projections, `loss_m = (L(z1n, p2) + L(z2n, p1)) / 2` over the
//! nearest-neighbor-substituted momentum embeddings, and
//! `loss_total = loss_s + lambda * loss_m`.
//!
//! The first argument of every call is a gradient-free target (it comes
//! from the momentum or stop-gradient branch), so gradients reach only the
//! predictor outputs `p1, p2, p3`. This subsumes the explicit-negative
//! formulation of InfoNCE: here the other rows of `p` inside the batch act
//! as the negatives, while the queue supplies positives, not negatives.

use ndarray::{s, Array1, Array2, Axis};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::EmbeddingBatch;

const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub temperature: f64,
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            temperature: 1.0,
            lambda: 6.0,
        }
    }
}

impl LossConfig {
    /// Config-file validation; tests may bypass it to probe the lambda = 0
    /// limit directly.
    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(Error::Parameter(format!(
                "temperature {} must be > 0",
                self.temperature
            )));
        }
        if self.lambda <= 0.0 {
            return Err(Error::Parameter(format!("lambda {} must be > 0", self.lambda)));
        }
        Ok(())
    }
}

/// Loss of one `L(h, p)` call plus its per-block values.
#[derive(Debug, Clone)]
pub struct ContrastiveOut<F> {
    pub loss: F,
    pub per_split: Vec<F>,
}

#[derive(Debug, Clone)]
pub struct LossReport<F> {
    pub loss_s: F,
    pub loss_m: F,
    pub loss_total: F,
    /// Block losses of the four calls, in order
    /// [L(c1,p3) blocks.., L(c3,p1).., L(z1n,p2).., L(z2n,p1)..].
    pub per_split: Vec<F>,
}

fn row_normalize<F: Scalar>(x: &EmbeddingBatch<F>) -> (Array2<F>, Array1<F>) {
    let mut out = x.clone();
    let mut norms = Array1::<F>::zeros(x.nrows());
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let n: f64 = row.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
        let n = n.max(NORM_EPS);
        norms[i] = F::from_f64(n);
        let inv = F::from_f64(1.0 / n);
        row.mapv_inplace(|v| v * inv);
    }
    (out, norms)
}

fn check_inputs<F: Scalar>(h: &EmbeddingBatch<F>, p: &EmbeddingBatch<F>, tau: f64) -> Result<usize> {
    if tau <= 0.0 {
        return Err(Error::Parameter(format!("temperature {tau} must be > 0")));
    }
    if p.nrows() == 0 {
        return Err(Error::Dimension("contrastive loss: empty p".into()));
    }
    if h.ncols() != p.ncols() {
        return Err(Error::Dimension(format!(
            "contrastive loss: dim mismatch {} vs {}",
            h.ncols(),
            p.ncols()
        )));
    }
    if h.nrows() == 0 || h.nrows() % p.nrows() != 0 {
        return Err(Error::Dimension(format!(
            "contrastive loss: {} target rows not a multiple of {} rows",
            h.nrows(),
            p.nrows()
        )));
    }
    Ok(h.nrows() / p.nrows())
}

/// Forward-only evaluation.
pub fn contrastive_loss<F: Scalar>(
    h: &EmbeddingBatch<F>,
    p: &EmbeddingBatch<F>,
    tau: f64,
) -> Result<ContrastiveOut<F>> {
    let (out, _) = contrastive_impl(h, p, tau, false)?;
    Ok(out)
}

/// Evaluation plus the gradient with respect to `p` (`h` is a constant).
pub fn contrastive_loss_with_grad<F: Scalar>(
    h: &EmbeddingBatch<F>,
    p: &EmbeddingBatch<F>,
    tau: f64,
) -> Result<(ContrastiveOut<F>, Array2<F>)> {
    let (out, grad) = contrastive_impl(h, p, tau, true)?;
    Ok((out, grad.expect("grad requested")))
}

fn contrastive_impl<F: Scalar>(
    h: &EmbeddingBatch<F>,
    p: &EmbeddingBatch<F>,
    tau: f64,
    want_grad: bool,
) -> Result<(ContrastiveOut<F>, Option<Array2<F>>)> {
    let splits = check_inputs(h, p, tau)?;
    let n = p.nrows();
    let (h_hat, _) = row_normalize(h);
    let (p_hat, p_norms) = row_normalize(p);
    let inv_tau = F::from_f64(1.0 / tau);
    let inv_n = F::from_f64(1.0 / n as f64);
    let inv_s = F::from_f64(1.0 / splits as f64);

    let mut per_split = Vec::with_capacity(splits);
    let mut total = F::zero();
    let mut d_p_hat = want_grad.then(|| Array2::<F>::zeros((n, p.ncols())));

    for b in 0..splits {
        let block = h_hat.slice(s![b * n..(b + 1) * n, ..]);
        let mut logits = block.dot(&p_hat.t());
        logits.mapv_inplace(|v| v * inv_tau);
        // row-wise softmax cross-entropy against the diagonal
        let mut block_loss = F::zero();
        let mut soft = logits.clone();
        for i in 0..n {
            let mut row = soft.index_axis_mut(Axis(0), i);
            let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let mut denom = F::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                denom += *v;
            }
            let inv_denom = F::one() / denom;
            for v in row.iter_mut() {
                *v *= inv_denom;
            }
            // ce_i = lse - logit_ii = -ln(softmax_ii)
            block_loss += -(row[i].ln());
        }
        block_loss *= inv_n;
        per_split.push(block_loss);
        total += block_loss;
        if let Some(dph) = d_p_hat.as_mut() {
            // d block / d logits = (softmax - I) / n; d block / d p_hat = G^T . h_block / tau
            for i in 0..n {
                soft[[i, i]] -= F::one();
            }
            soft.mapv_inplace(|v| v * inv_n);
            let add = soft.t().dot(&block); // [n, d]
            dph.scaled_add(inv_tau * inv_s, &add);
        }
    }
    total *= inv_s;

    let grad = d_p_hat.map(|dph| {
        // back through row normalization: dp = (dp_hat - (dp_hat . p_hat) p_hat) / norm
        let mut dp = Array2::<F>::zeros(dph.raw_dim());
        for i in 0..n {
            let g = dph.index_axis(Axis(0), i);
            let ph = p_hat.index_axis(Axis(0), i);
            let dot = g.iter().zip(ph.iter()).fold(F::zero(), |acc, (a, b)| acc + *a * *b);
            let inv_norm = F::one() / p_norms[i];
            let mut out = dp.index_axis_mut(Axis(0), i);
            for (o, (gv, pv)) in out.iter_mut().zip(g.iter().zip(ph.iter())) {
                *o = (*gv - dot * *pv) * inv_norm;
            }
        }
        dp
    });

    Ok((
        ContrastiveOut {
            loss: total,
            per_split,
        },
        grad,
    ))
}

/// Inputs to the total objective. `c1`/`c3` come from the stop-gradient
/// patch path of views 1 and 3; `z1n`/`z2n` are the nearest-neighbor
/// substitutes of the momentum embeddings; `p1, p2, p3` are predictor
/// outputs of the back-propagation branch.
pub struct TotalLossInputs<'a, F> {
    pub c1: &'a EmbeddingBatch<F>,
    pub c3: &'a EmbeddingBatch<F>,
    pub z1n: &'a EmbeddingBatch<F>,
    pub z2n: &'a EmbeddingBatch<F>,
    pub p1: &'a EmbeddingBatch<F>,
    pub p2: &'a EmbeddingBatch<F>,
    pub p3: &'a EmbeddingBatch<F>,
}

pub fn total_loss<F: Scalar>(inputs: &TotalLossInputs<'_, F>, cfg: &LossConfig) -> Result<LossReport<F>> {
    let (report, _) = total_loss_impl(inputs, cfg, false)?;
    Ok(report)
}

/// Report plus gradients with respect to `p1, p2, p3`.
pub fn total_loss_with_grads<F: Scalar>(
    inputs: &TotalLossInputs<'_, F>,
    cfg: &LossConfig,
) -> Result<(LossReport<F>, Array2<F>, Array2<F>, Array2<F>)> {
    let (report, grads) = total_loss_impl(inputs, cfg, true)?;
    let (dp1, dp2, dp3) = grads.expect("grads requested");
    Ok((report, dp1, dp2, dp3))
}

type Grads<F> = (Array2<F>, Array2<F>, Array2<F>);

fn total_loss_impl<F: Scalar>(
    inputs: &TotalLossInputs<'_, F>,
    cfg: &LossConfig,
    want_grads: bool,
) -> Result<(LossReport<F>, Option<Grads<F>>)> {
    let tau = cfg.temperature;
    let half = F::from_f64(0.5);
    let lambda = F::from_f64(cfg.lambda);
    let half_lambda = F::from_f64(0.5 * cfg.lambda);

    let mut per_split = Vec::new();
    let (s1, g_p3) = contrastive_impl(inputs.c1, inputs.p3, tau, want_grads)?;
    per_split.extend(s1.per_split.iter().cloned());
    let (s2, g_p1_s) = contrastive_impl(inputs.c3, inputs.p1, tau, want_grads)?;
    per_split.extend(s2.per_split.iter().cloned());
    let (m1, g_p2) = contrastive_impl(inputs.z1n, inputs.p2, tau, want_grads)?;
    per_split.extend(m1.per_split.iter().cloned());
    let (m2, g_p1_m) = contrastive_impl(inputs.z2n, inputs.p1, tau, want_grads)?;
    per_split.extend(m2.per_split.iter().cloned());

    let loss_s = (s1.loss + s2.loss) * half;
    let loss_m = (m1.loss + m2.loss) * half;
    let loss_total = loss_s + lambda * loss_m;

    let grads = if want_grads {
        let mut dp1 = g_p1_s.expect("grad");
        dp1.mapv_inplace(|v| v * half);
        dp1.scaled_add(half_lambda, &g_p1_m.expect("grad"));
        let mut dp2 = g_p2.expect("grad");
        dp2.mapv_inplace(|v| v * half_lambda);
        let mut dp3 = g_p3.expect("grad");
        dp3.mapv_inplace(|v| v * half);
        Some((dp1, dp2, dp3))
    } else {
        None
    };

    Ok((
        LossReport {
            loss_s,
            loss_m,
            loss_total,
            per_split,
        },
        grads,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_rows(rng: &mut Rng, n: usize, d: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, d), |_| rng.normal())
    }

    /// Independent scalar-loop reference: termwise softmax cross-entropy
    /// over cosine logits, no matrix ops, no shared code with the
    /// implementation above.
    fn reference_loss(h: &Array2<f64>, p: &Array2<f64>, tau: f64) -> f64 {
        let n = p.nrows();
        let s = h.nrows() / n;
        let d = p.ncols();
        let norm = |row: &[f64]| -> Vec<f64> {
            let n2: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.iter().map(|v| v / n2).collect()
        };
        let mut total = 0.0;
        for b in 0..s {
            let mut block_loss = 0.0;
            for i in 0..n {
                let hi: Vec<f64> = (0..d).map(|c| h[[b * n + i, c]]).collect();
                let hi = norm(&hi);
                let mut logits = Vec::with_capacity(n);
                for j in 0..n {
                    let pj: Vec<f64> = (0..d).map(|c| p[[j, c]]).collect();
                    let pj = norm(&pj);
                    let dot: f64 = hi.iter().zip(pj.iter()).map(|(a, b)| a * b).sum();
                    logits.push(dot / tau);
                }
                let denom: f64 = logits.iter().map(|l| l.exp()).sum();
                block_loss += -(logits[i].exp() / denom).ln();
            }
            total += block_loss / n as f64;
        }
        total / s as f64
    }

    #[test]
    fn orthonormal_two_rows_unit_temperature() {
        let h = Array2::from_shape_vec((2, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let out = contrastive_loss(&h, &h, 1.0).unwrap();
        let expected = (1.0 + (-1.0f64).exp()).ln(); // 0.31326168751822286
        assert!((out.loss - expected).abs() < 1e-12, "{} vs {expected}", out.loss);
    }

    #[test]
    fn single_row_loss_is_zero() {
        let h = Array2::from_shape_vec((1, 3), vec![0.3, -0.5, 0.7]).unwrap();
        let p = Array2::from_shape_vec((1, 3), vec![-0.9, 0.1, 0.4]).unwrap();
        let out = contrastive_loss(&h, &p, 0.7).unwrap();
        assert!(f64::abs(out.loss) < 1e-15);
    }

    #[test]
    fn matches_scalar_reference_on_random_inputs() {
        let mut rng = Rng::new(41);
        for &(s, n, d) in &[(1usize, 4usize, 8usize), (4, 3, 5), (6, 4, 16)] {
            for &tau in &[1.0, 0.5] {
                let h = random_rows(&mut rng, s * n, d);
                let p = random_rows(&mut rng, n, d);
                let got = contrastive_loss(&h, &p, tau).unwrap().loss;
                let want = reference_loss(&h, &p, tau);
                assert!(
                    (got - want).abs() < 1e-9,
                    "s={s} n={n} d={d} tau={tau}: {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn scale_invariance_of_rows() {
        let mut rng = Rng::new(42);
        let h = random_rows(&mut rng, 8, 6);
        let p = random_rows(&mut rng, 4, 6);
        let base = contrastive_loss(&h, &p, 1.0).unwrap().loss;
        let mut h2 = h.clone();
        for v in h2.index_axis_mut(Axis(0), 3).iter_mut() {
            *v *= 17.0;
        }
        let mut p2 = p.clone();
        for v in p2.index_axis_mut(Axis(0), 1).iter_mut() {
            *v *= 0.003;
        }
        let scaled = contrastive_loss(&h2, &p2, 1.0).unwrap().loss;
        assert!((base - scaled).abs() < 1e-6);
    }

    #[test]
    fn per_split_losses_nonnegative_and_equal_logits_hit_ln_n() {
        let n = 5;
        let h = Array2::from_elem((n, 3), 0.5f64);
        let p = Array2::from_elem((n, 3), 0.5f64);
        let out = contrastive_loss(&h, &p, 1.0).unwrap();
        assert!((out.loss - (n as f64).ln()).abs() < 1e-12);
        let mut rng = Rng::new(43);
        let h = random_rows(&mut rng, 12, 7);
        let p = random_rows(&mut rng, 4, 7);
        let out = contrastive_loss(&h, &p, 1.0).unwrap();
        for l in out.per_split {
            assert!(l >= 0.0);
        }
    }

    #[test]
    fn reduction_mean_over_splits() {
        let mut rng = Rng::new(44);
        let n = 4;
        let s = 3;
        let h = random_rows(&mut rng, s * n, 5);
        let p = random_rows(&mut rng, n, 5);
        let whole = contrastive_loss(&h, &p, 1.0).unwrap();
        let mut acc = 0.0;
        for b in 0..s {
            let block = h.slice(s![b * n..(b + 1) * n, ..]).to_owned();
            acc += contrastive_loss(&block, &p, 1.0).unwrap().loss;
        }
        assert!((whole.loss - acc / s as f64).abs() < 1e-12);
    }

    #[test]
    fn shape_and_temperature_errors() {
        let h = Array2::<f64>::zeros((5, 3));
        let p = Array2::<f64>::zeros((2, 3));
        assert!(matches!(contrastive_loss(&h, &p, 1.0), Err(Error::Dimension(_))));
        let h = Array2::<f64>::zeros((4, 3));
        assert!(matches!(contrastive_loss(&h, &p, 0.0), Err(Error::Parameter(_))));
        let p4 = Array2::<f64>::zeros((2, 4));
        assert!(matches!(contrastive_loss(&h, &p4, 1.0), Err(Error::Dimension(_))));
    }

    #[test]
    fn gradient_matches_finite_difference() {
        let mut rng = Rng::new(45);
        let h = random_rows(&mut rng, 6, 4); // s=3 blocks of 2
        let p = random_rows(&mut rng, 2, 4);
        let tau = 0.8;
        let (_, grad) = contrastive_loss_with_grad(&h, &p, tau).unwrap();
        let eps = 1e-6;
        let mut p2 = p.clone();
        for i in 0..p.nrows() {
            for j in 0..p.ncols() {
                let orig = p2[[i, j]];
                p2[[i, j]] = orig + eps;
                let lp = contrastive_loss(&h, &p2, tau).unwrap().loss;
                p2[[i, j]] = orig - eps;
                let lm = contrastive_loss(&h, &p2, tau).unwrap().loss;
                p2[[i, j]] = orig;
                let num = (lp - lm) / (2.0 * eps);
                assert!(
                    (num - grad[[i, j]]).abs() < 1e-8 + 1e-5 * num.abs(),
                    "grad[{i},{j}]: num {num} vs ana {}",
                    grad[[i, j]]
                );
            }
        }
    }

    fn total_inputs(rng: &mut Rng, s: usize, n: usize, d: usize) -> Vec<Array2<f64>> {
        vec![
            random_rows(rng, s * n, d), // c1
            random_rows(rng, s * n, d), // c3
            random_rows(rng, n, d),     // z1n
            random_rows(rng, n, d),     // z2n
            random_rows(rng, n, d),     // p1
            random_rows(rng, n, d),     // p2
            random_rows(rng, n, d),     // p3
        ]
    }

    #[test]
    fn total_loss_composition_and_lambda_zero_limit() {
        let mut rng = Rng::new(46);
        let v = total_inputs(&mut rng, 6, 4, 8);
        let inputs = TotalLossInputs {
            c1: &v[0],
            c3: &v[1],
            z1n: &v[2],
            z2n: &v[3],
            p1: &v[4],
            p2: &v[5],
            p3: &v[6],
        };
        let cfg = LossConfig {
            temperature: 1.0,
            lambda: 6.0,
        };
        let report = total_loss(&inputs, &cfg).unwrap();
        let s1 = contrastive_loss(&v[0], &v[6], 1.0).unwrap().loss;
        let s2 = contrastive_loss(&v[1], &v[4], 1.0).unwrap().loss;
        let m1 = contrastive_loss(&v[2], &v[5], 1.0).unwrap().loss;
        let m2 = contrastive_loss(&v[3], &v[4], 1.0).unwrap().loss;
        assert!((report.loss_s - (s1 + s2) / 2.0).abs() < 1e-12);
        assert!((report.loss_m - (m1 + m2) / 2.0).abs() < 1e-12);
        assert!((report.loss_total - (report.loss_s + 6.0 * report.loss_m)).abs() < 1e-12);
        assert_eq!(report.per_split.len(), 6 + 6 + 1 + 1);

        // lambda = 0 limit (direct struct construction bypasses validate)
        let cfg0 = LossConfig {
            temperature: 1.0,
            lambda: 0.0,
        };
        let report0 = total_loss(&inputs, &cfg0).unwrap();
        assert!((report0.loss_total - report0.loss_s).abs() < 1e-15);
    }

    #[test]
    fn loss_s_symmetric_under_pair_swap() {
        let mut rng = Rng::new(47);
        let v = total_inputs(&mut rng, 4, 3, 6);
        let cfg = LossConfig::default();
        let a = total_loss(
            &TotalLossInputs {
                c1: &v[0],
                c3: &v[1],
                z1n: &v[2],
                z2n: &v[3],
                p1: &v[4],
                p2: &v[5],
                p3: &v[6],
            },
            &cfg,
        )
        .unwrap();
        // swapping (c1, p3) with (c3, p1) leaves loss_s unchanged
        let b = total_loss(
            &TotalLossInputs {
                c1: &v[1],
                c3: &v[0],
                z1n: &v[2],
                z2n: &v[3],
                p1: &v[6],
                p2: &v[5],
                p3: &v[4],
            },
            &cfg,
        )
        .unwrap();
        assert!((a.loss_s - b.loss_s).abs() < 1e-12);
    }

    #[test]
    fn total_grads_match_finite_difference() {
        let mut rng = Rng::new(48);
        let v = total_inputs(&mut rng, 6, 3, 5);
        let cfg = LossConfig {
            temperature: 1.0,
            lambda: 6.0,
        };
        let inputs = TotalLossInputs {
            c1: &v[0],
            c3: &v[1],
            z1n: &v[2],
            z2n: &v[3],
            p1: &v[4],
            p2: &v[5],
            p3: &v[6],
        };
        let (_, dp1, dp2, dp3) = total_loss_with_grads(&inputs, &cfg).unwrap();
        let eps = 1e-6;
        for (which, grad) in [(4usize, &dp1), (5, &dp2), (6, &dp3)] {
            let mut vv = v.clone();
            for i in 0..vv[which].nrows() {
                for j in 0..vv[which].ncols() {
                    let orig = vv[which][[i, j]];
                    vv[which][[i, j]] = orig + eps;
                    let lp = total_loss(
                        &TotalLossInputs {
                            c1: &vv[0],
                            c3: &vv[1],
                            z1n: &vv[2],
                            z2n: &vv[3],
                            p1: &vv[4],
                            p2: &vv[5],
                            p3: &vv[6],
                        },
                        &cfg,
                    )
                    .unwrap()
                    .loss_total;
                    vv[which][[i, j]] = orig - eps;
                    let lm = total_loss(
                        &TotalLossInputs {
                            c1: &vv[0],
                            c3: &vv[1],
                            z1n: &vv[2],
                            z2n: &vv[3],
                            p1: &vv[4],
                            p2: &vv[5],
                            p3: &vv[6],
                        },
                        &cfg,
                    )
                    .unwrap()
                    .loss_total;
                    vv[which][[i, j]] = orig;
                    let num = (lp - lm) / (2.0 * eps);
                    let ana = grad[[i, j]];
                    assert!(
                        (num - ana).abs() < 1e-8 + 1e-5 * num.abs(),
                        "input {which} grad[{i},{j}]: num {num} vs ana {ana}"
                    );
                }
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig {
            temperature: 0.0,
            lambda: 6.0
        }
        .validate()
        .is_err());
        assert!(LossConfig {
            temperature: 1.0,
            lambda: 0.0
        }
        .validate()
        .is_err());
    }
}
