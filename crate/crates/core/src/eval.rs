//! Frozen-encoder linear evaluation.
//!
//! Backbone features are extracted in eval mode (running batch-norm
//! statistics, normalization only); a zero-initialized linear classifier is
//! trained on them with LARS under a cosine schedule, then top-1/top-5
//! accuracy is reported on the held-out split. Probe training re-extracts
//! features each epoch from randomly cropped and flipped inputs; test
//! features are never augmented.

use ndarray::{Array2, Axis};

use crate::augment::{augment_view, normalize_batch, AugmentPolicy};
use crate::config::EvalConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::stack::NetworkStack;
use crate::nn::{Param, ParamKind};
use crate::optim::{cosine_lr, Lars};
use crate::rng::{substream, Rng};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOutcome {
    pub top1: f64,
    pub top5: f64,
}

/// Crop + flip + normalization; photometric ops off.
pub fn probe_policy(base: &AugmentPolicy) -> AugmentPolicy {
    AugmentPolicy {
        flip_prob: 0.5,
        jitter: (0.0, 0.0, 0.0, 0.0),
        color_jitter_prob: 0.0,
        grayscale_prob: 0.0,
        blur_prob: 0.0,
        ..base.clone()
    }
}

/// Eval-mode backbone features of the whole dataset, normalize-only inputs.
pub fn extract_features<F: Scalar>(
    stack: &mut NetworkStack<F>,
    ds: &Dataset,
    policy: &AugmentPolicy,
    batch_size: usize,
) -> Result<Array2<F>> {
    let n = ds.len();
    let dim = stack.feature_dim();
    let mut out = Array2::<F>::zeros((n, dim));
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let batch = normalize_batch(&ds.gather::<F>(&idx), policy);
        let feat = stack.extract_features(&batch.data)?;
        out.slice_mut(ndarray::s![start..end, ..]).assign(&feat);
        start = end;
    }
    Ok(out)
}

/// Features of augmented inputs, one fresh draw per call.
fn extract_features_augmented<F: Scalar>(
    stack: &mut NetworkStack<F>,
    ds: &Dataset,
    policy: &AugmentPolicy,
    batch_size: usize,
    seed: u64,
) -> Result<Array2<F>> {
    let n = ds.len();
    let dim = stack.feature_dim();
    let mut out = Array2::<F>::zeros((n, dim));
    let mut start = 0;
    let mut batch_idx = 0u64;
    while start < n {
        let end = (start + batch_size).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let raw = ds.gather::<F>(&idx);
        let batch = augment_view(&raw, policy, substream(seed, "probe-batch", &[batch_idx]))?;
        let feat = stack.extract_features(&batch.data)?;
        out.slice_mut(ndarray::s![start..end, ..]).assign(&feat);
        start = end;
        batch_idx += 1;
    }
    Ok(out)
}

/// Rank of the true label among the logits: the number of strictly larger
/// entries plus earlier-indexed ties. Deterministic under ties.
fn label_rank<F: Scalar>(logits: &ndarray::ArrayView1<'_, F>, label: usize) -> usize {
    let target = logits[label];
    let mut rank = 0;
    for (j, &v) in logits.iter().enumerate() {
        if v > target || (v == target && j < label) {
            rank += 1;
        }
    }
    rank
}

/// Trains the probe and scores the held-out split.
pub fn evaluate<F: Scalar>(
    stack: &mut NetworkStack<F>,
    train: &Dataset,
    test: &Dataset,
    cfg: &EvalConfig,
    base_policy: &AugmentPolicy,
) -> Result<EvalOutcome> {
    cfg.validate()?;
    if train.class_count != test.class_count {
        return Err(Error::Validation(format!(
            "class_count mismatch: train {} vs test {}",
            train.class_count, test.class_count
        )));
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::Validation("probe needs non-empty splits".into()));
    }
    let classes = train.class_count;
    let dim = stack.feature_dim();
    let policy = probe_policy(base_policy);

    let mut weight = Param::<F>::new(
        "probe.weight".into(),
        ndarray::ArrayD::zeros(ndarray::IxDyn(&[classes, dim])),
        ParamKind::Weight,
    );
    let mut bias = Param::<F>::new(
        "probe.bias".into(),
        ndarray::ArrayD::zeros(ndarray::IxDyn(&[classes])),
        ParamKind::Bias,
    );
    let mut opt = Lars::<F>::new(cfg.momentum, cfg.weight_decay, cfg.trust_coeff, cfg.eps);

    let n = train.len();
    let batches_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let clean_features = if cfg.probe_augment {
        None
    } else {
        Some(extract_features(stack, train, base_policy, cfg.batch_size)?)
    };

    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let features = match &clean_features {
            Some(f) => f.clone(),
            None => extract_features_augmented(
                stack,
                train,
                &policy,
                cfg.batch_size,
                substream(cfg.seed, "probe-augment", &[epoch as u64]),
            )?,
        };
        let order = Rng::for_stream(cfg.seed, "probe-shuffle", &[epoch as u64]).permutation(n);
        for chunk in order.chunks(cfg.batch_size) {
            let b = chunk.len();
            let mut fb = Array2::<F>::zeros((b, dim));
            for (row, &i) in chunk.iter().enumerate() {
                fb.index_axis_mut(Axis(0), row)
                    .assign(&features.index_axis(Axis(0), i));
            }
            let w2 = weight
                .value
                .view()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            let b1 = bias
                .value
                .view()
                .into_dimensionality::<ndarray::Ix1>()
                .unwrap();
            let mut logits = fb.dot(&w2.t());
            logits += &b1;
            // softmax cross-entropy, mean over the batch
            let mut dlogits = logits;
            let inv_b = F::from_f64(1.0 / b as f64);
            for (row, &i) in chunk.iter().enumerate() {
                let mut r = dlogits.index_axis_mut(Axis(0), row);
                let max = r.iter().cloned().fold(F::neg_infinity(), F::max);
                let mut denom = F::zero();
                for v in r.iter_mut() {
                    *v = (*v - max).exp();
                    denom += *v;
                }
                let inv = F::one() / denom;
                for v in r.iter_mut() {
                    *v *= inv;
                }
                r[train.labels[i] as usize] -= F::one();
            }
            dlogits.mapv_inplace(|v| v * inv_b);
            let dw = dlogits.t().dot(&fb);
            let db = dlogits.sum_axis(Axis(0));
            weight.zero_grad();
            bias.zero_grad();
            weight
                .grad
                .view_mut()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap()
                .assign(&dw);
            bias.grad
                .view_mut()
                .into_dimensionality::<ndarray::Ix1>()
                .unwrap()
                .assign(&db);
            let lr = cosine_lr(step, total_steps, cfg.lr_initial, cfg.lr_final);
            let mut params = vec![&mut weight, &mut bias];
            opt.step(&mut params, lr)?;
            step += 1;
        }
    }

    // score on clean test features
    let test_features = extract_features(stack, test, base_policy, cfg.batch_size)?;
    let w2 = weight
        .value
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap();
    let b1 = bias
        .value
        .view()
        .into_dimensionality::<ndarray::Ix1>()
        .unwrap();
    let mut logits = test_features.dot(&w2.t());
    logits += &b1;
    let k = classes.min(5);
    let mut hit1 = 0usize;
    let mut hit5 = 0usize;
    for (i, row) in logits.axis_iter(Axis(0)).enumerate() {
        let rank = label_rank(&row, test.labels[i] as usize);
        if rank == 0 {
            hit1 += 1;
        }
        if rank < k {
            hit5 += 1;
        }
    }
    Ok(EvalOutcome {
        top1: hit1 as f64 / test.len() as f64,
        top5: hit5 as f64 / test.len() as f64,
    })
}

/// FNV-1a over the exact bit patterns of every parameter and buffer;
/// used to assert the encoder stayed frozen.
pub fn stack_fingerprint<F: Scalar>(stack: &NetworkStack<F>) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    let mut eat = |bits: u64| {
        h ^= bits;
        h = h.wrapping_mul(0x100000001b3);
    };
    for p in stack.params() {
        for v in p.value.iter() {
            eat(v.as_f64().to_bits());
        }
    }
    for b in stack.buffers() {
        for v in b.value.iter() {
            eat(v.as_f64().to_bits());
        }
    }
    h
}

/// Synthetic feature probe used by tests: trains the same probe directly on
/// given feature rows (no encoder involved).
pub fn probe_features_direct<F: Scalar>(
    features: &Array2<F>,
    labels: &[u8],
    classes: usize,
    test_features: &Array2<F>,
    test_labels: &[u8],
    cfg: &EvalConfig,
) -> Result<EvalOutcome> {
    let dim = features.ncols();
    let mut weight = Param::<F>::new(
        "probe.weight".into(),
        ndarray::ArrayD::zeros(ndarray::IxDyn(&[classes, dim])),
        ParamKind::Weight,
    );
    let mut bias = Param::<F>::new(
        "probe.bias".into(),
        ndarray::ArrayD::zeros(ndarray::IxDyn(&[classes])),
        ParamKind::Bias,
    );
    let mut opt = Lars::<F>::new(cfg.momentum, cfg.weight_decay, cfg.trust_coeff, cfg.eps);
    let n = features.nrows();
    let total_steps = cfg.epochs * n.div_ceil(cfg.batch_size);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let order = Rng::for_stream(cfg.seed, "probe-shuffle", &[epoch as u64]).permutation(n);
        for chunk in order.chunks(cfg.batch_size) {
            let b = chunk.len();
            let mut fb = Array2::<F>::zeros((b, dim));
            for (row, &i) in chunk.iter().enumerate() {
                fb.index_axis_mut(Axis(0), row)
                    .assign(&features.index_axis(Axis(0), i));
            }
            let w2 = weight
                .value
                .view()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            let b1 = bias
                .value
                .view()
                .into_dimensionality::<ndarray::Ix1>()
                .unwrap();
            let mut dlogits = fb.dot(&w2.t());
            dlogits += &b1;
            let inv_b = F::from_f64(1.0 / b as f64);
            for (row, &i) in chunk.iter().enumerate() {
                let mut r = dlogits.index_axis_mut(Axis(0), row);
                let max = r.iter().cloned().fold(F::neg_infinity(), F::max);
                let mut denom = F::zero();
                for v in r.iter_mut() {
                    *v = (*v - max).exp();
                    denom += *v;
                }
                let inv = F::one() / denom;
                for v in r.iter_mut() {
                    *v *= inv;
                }
                r[labels[i] as usize] -= F::one();
            }
            dlogits.mapv_inplace(|v| v * inv_b);
            let dw = dlogits.t().dot(&fb);
            let db = dlogits.sum_axis(Axis(0));
            weight.zero_grad();
            bias.zero_grad();
            weight
                .grad
                .view_mut()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap()
                .assign(&dw);
            bias.grad
                .view_mut()
                .into_dimensionality::<ndarray::Ix1>()
                .unwrap()
                .assign(&db);
            let lr = cosine_lr(step, total_steps, cfg.lr_initial, cfg.lr_final);
            let mut params = vec![&mut weight, &mut bias];
            opt.step(&mut params, lr)?;
            step += 1;
        }
    }
    let w2 = weight
        .value
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap();
    let b1 = bias
        .value
        .view()
        .into_dimensionality::<ndarray::Ix1>()
        .unwrap();
    let mut logits = test_features.dot(&w2.t());
    logits += &b1;
    let k = classes.min(5);
    let (mut hit1, mut hit5) = (0usize, 0usize);
    for (i, row) in logits.axis_iter(Axis(0)).enumerate() {
        let rank = label_rank(&row, test_labels[i] as usize);
        if rank == 0 {
            hit1 += 1;
        }
        if rank < k {
            hit5 += 1;
        }
    }
    Ok(EvalOutcome {
        top1: hit1 as f64 / test_labels.len() as f64,
        top5: hit5 as f64 / test_labels.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::stack::ArchConfig;
    use crate::synth::{generate, SynthSpec};

    fn one_hot_features(n: usize, classes: usize, noise: f64, seed: u64) -> (Array2<f32>, Vec<u8>) {
        let mut rng = Rng::new(seed);
        let mut f = Array2::<f32>::zeros((n, classes + 2));
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % classes;
            labels.push(c as u8);
            f[[i, c]] = 1.0;
            for j in 0..classes + 2 {
                f[[i, j]] += (rng.normal() * noise) as f32;
            }
        }
        (f, labels)
    }

    fn quick_cfg() -> EvalConfig {
        EvalConfig {
            epochs: 20,
            batch_size: 64,
            ..EvalConfig::default()
        }
    }

    #[test]
    fn separable_features_reach_high_accuracy() {
        let (f, l) = one_hot_features(400, 10, 0.05, 1);
        let (ft, lt) = one_hot_features(200, 10, 0.05, 2);
        let out = probe_features_direct(&f, &l, 10, &ft, &lt, &quick_cfg()).unwrap();
        assert!(out.top1 >= 0.99, "top1 {}", out.top1);
        assert!(out.top5 >= out.top1);
    }

    #[test]
    fn random_features_sit_at_chance() {
        let mut rng = Rng::new(3);
        let f = Array2::<f32>::from_shape_fn((500, 16), |_| rng.normal() as f32);
        let labels: Vec<u8> = (0..500).map(|i| (i % 10) as u8).collect();
        let ft = Array2::<f32>::from_shape_fn((500, 16), |_| rng.normal() as f32);
        let labels_t: Vec<u8> = (0..500).map(|i| (i % 10) as u8).collect();
        let out = probe_features_direct(&f, &labels, 10, &ft, &labels_t, &quick_cfg()).unwrap();
        assert!(
            (out.top1 - 0.10).abs() <= 0.05,
            "top1 {} not near chance",
            out.top1
        );
        assert!(out.top5 >= out.top1 && out.top1 >= 0.0 && out.top5 <= 1.0);
    }

    #[test]
    fn evaluate_freezes_backbone_and_reports_valid_accuracies() {
        let spec = SynthSpec {
            train: 60,
            test: 30,
            classes: 6,
            side: 16,
            seed: 3,
        };
        let (train, test) = generate(&spec);
        let mut rng = Rng::new(5);
        let mut stack = NetworkStack::<f32>::build_online(ArchConfig::micro(), &mut rng);
        let policy = AugmentPolicy::standard(16);
        let before = stack_fingerprint(&stack);
        let cfg = EvalConfig {
            epochs: 3,
            batch_size: 32,
            ..EvalConfig::default()
        };
        let out = evaluate(&mut stack, &train, &test, &cfg, &policy).unwrap();
        assert_eq!(stack_fingerprint(&stack), before, "backbone changed");
        assert!(out.top5 >= out.top1);
        assert!((0.0..=1.0).contains(&out.top1));
    }

    #[test]
    fn feature_extraction_is_deterministic_and_fixed_dim() {
        let spec = SynthSpec {
            train: 20,
            test: 0,
            classes: 4,
            side: 16,
            seed: 4,
        };
        let (train, _) = generate(&spec);
        let mut rng = Rng::new(6);
        let mut stack = NetworkStack::<f32>::build_online(ArchConfig::micro(), &mut rng);
        let policy = AugmentPolicy::identity(3, 16);
        let a = extract_features(&mut stack, &train, &policy, 8).unwrap();
        let b = extract_features(&mut stack, &train, &policy, 8).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.ncols(), stack.feature_dim());
    }

    #[test]
    fn class_count_mismatch_rejected() {
        let (train, _) = generate(&SynthSpec {
            train: 10,
            test: 0,
            classes: 5,
            side: 16,
            seed: 1,
        });
        let (_, test) = generate(&SynthSpec {
            train: 0,
            test: 10,
            classes: 4,
            side: 16,
            seed: 1,
        });
        let mut rng = Rng::new(7);
        let mut stack = NetworkStack::<f32>::build_online(ArchConfig::micro(), &mut rng);
        let policy = AugmentPolicy::identity(3, 16);
        assert!(matches!(
            evaluate(&mut stack, &train, &test, &EvalConfig::default(), &policy),
            Err(Error::Validation(_))
        ));
    }
}
