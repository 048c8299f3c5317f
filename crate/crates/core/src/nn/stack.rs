//! The three-role network stack.
//!
//! One architecture, three parameter roles:
//! - `Backprop`: backbone + projector + predictor, updated by gradient
//!   descent. The only stack that ever runs a backward pass.
//! - `Momentum`: backbone + projector, an exponential moving average of the
//!   back-propagation stack. Forward-only.
//! - `TiedStopGrad`: backbone + projector with values copied from the
//!   back-propagation stack after every optimizer step. Forward-only, so no
//!   gradient can reach the shared values through this branch.
//!
//! Batch-norm policy during pretraining: every branch normalizes with its
//! own batch statistics; only the back-propagation stack folds them into
//! running statistics. Running statistics ride along with the EMA and the
//! weight tie, keeping the other two stacks usable standalone in eval mode.

use ndarray::{Array2, Array4, ArrayD};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;

use super::backbone::{Backbone, BackboneCache, BackboneKind};
use super::mlp::{Predictor, PredictorCache, Projector, ProjectorCache};
use super::{BnMode, Buffer, Param};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StackRole {
    Backprop,
    Momentum,
    TiedStopGrad,
}

/// Architecture hyperparameters shared by all three stacks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArchConfig {
    pub backbone: BackboneKind,
    pub in_channels: usize,
    pub proj_hidden: usize,
    pub proj_out: usize,
    pub pred_hidden: usize,
}

impl ArchConfig {
    /// Reference dimensions: 512-dim features, 2048-wide projector, 512-wide
    /// predictor bottleneck.
    pub fn resnet18() -> Self {
        ArchConfig {
            backbone: BackboneKind::Resnet18Cifar,
            in_channels: 3,
            proj_hidden: 2048,
            proj_out: 2048,
            pred_hidden: 512,
        }
    }

    pub fn toy() -> Self {
        ArchConfig {
            backbone: BackboneKind::ToyCnn,
            in_channels: 3,
            proj_hidden: 256,
            proj_out: 256,
            pred_hidden: 64,
        }
    }

    pub fn micro() -> Self {
        ArchConfig {
            backbone: BackboneKind::MicroCnn,
            in_channels: 3,
            proj_hidden: 16,
            proj_out: 16,
            pred_hidden: 8,
        }
    }

    pub fn for_kind(kind: BackboneKind) -> Self {
        match kind {
            BackboneKind::Resnet18Cifar => Self::resnet18(),
            BackboneKind::ToyCnn => Self::toy(),
            BackboneKind::MicroCnn => Self::micro(),
        }
    }
}

pub struct NetworkStack<F> {
    pub role: StackRole,
    pub arch: ArchConfig,
    pub backbone: Backbone<F>,
    pub projector: Projector<F>,
    pub predictor: Option<Predictor<F>>,
}

/// Caches from one back-propagation forward, consumed by `backward_from_dp`.
pub struct BackpropCache<F> {
    backbone: BackboneCache<F>,
    projector: ProjectorCache<F>,
    predictor: PredictorCache<F>,
}

impl<F: Scalar> NetworkStack<F> {
    /// Builds the back-propagation stack. The other two roles are derived
    /// with [`NetworkStack::clone_as`] so all three share one initialization.
    pub fn build_online(arch: ArchConfig, rng: &mut Rng) -> Self {
        let backbone = Backbone::build(arch.backbone, "backbone", arch.in_channels, rng);
        let feat = backbone.out_dim();
        let projector = Projector::new("projector", feat, arch.proj_hidden, arch.proj_out, rng);
        let predictor = Some(Predictor::new(
            "predictor",
            arch.proj_out,
            arch.pred_hidden,
            rng,
        ));
        NetworkStack {
            role: StackRole::Backprop,
            arch,
            backbone,
            projector,
            predictor,
        }
    }

    /// Value-identical copy with a different role. Non-backprop roles carry
    /// no predictor.
    pub fn clone_as(&self, role: StackRole) -> Self {
        NetworkStack {
            role,
            arch: self.arch,
            backbone: self.backbone.clone(),
            projector: self.projector.clone(),
            predictor: if role == StackRole::Backprop {
                self.predictor.clone()
            } else {
                None
            },
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone.out_dim()
    }

    pub fn embed_dim(&self) -> usize {
        self.projector.out_dim
    }

    fn bn_mode(&self) -> BnMode {
        BnMode::Train {
            update_running: self.role == StackRole::Backprop,
        }
    }

    /// Back-propagation forward: `z = projector(backbone(x))`, `p = predictor(z)`.
    pub fn forward_backprop(
        &mut self,
        view: &Array4<F>,
    ) -> Result<(Array2<F>, Array2<F>, BackpropCache<F>)> {
        if self.role != StackRole::Backprop {
            return Err(Error::Structure(
                "forward_backprop on a non-backprop stack".into(),
            ));
        }
        let mode = self.bn_mode();
        let (feat, backbone) = self.backbone.forward(view, mode)?;
        let (z, projector) = self.projector.forward(&feat, mode)?;
        let (p, predictor) = self
            .predictor
            .as_mut()
            .expect("backprop stack owns a predictor")
            .forward(&z, mode)?;
        Ok((
            z,
            p,
            BackpropCache {
                backbone,
                projector,
                predictor,
            },
        ))
    }

    /// Accumulates parameter gradients from the loss gradient at `p`.
    pub fn backward_from_dp(&mut self, cache: &BackpropCache<F>, dp: &Array2<F>) {
        let dz = self
            .predictor
            .as_mut()
            .expect("backprop stack owns a predictor")
            .backward(&cache.predictor, dp);
        let dfeat = self.projector.backward(&cache.projector, &dz);
        self.backbone.backward(&cache.backbone, &dfeat);
    }

    /// Momentum forward: projector(backbone(x)). Returns a plain value array;
    /// no backward pass exists for this path.
    pub fn forward_momentum(&mut self, view: &Array4<F>) -> Result<Array2<F>> {
        if self.role != StackRole::Momentum {
            return Err(Error::Structure(
                "forward_momentum on a non-momentum stack".into(),
            ));
        }
        let mode = self.bn_mode();
        let (feat, _) = self.backbone.forward(view, mode)?;
        let (z, _) = self.projector.forward(&feat, mode)?;
        Ok(z)
    }

    /// Stop-gradient backbone encoding (patches). Forward-only.
    pub fn encode_stopgrad(&mut self, x: &Array4<F>) -> Result<Array2<F>> {
        if self.role != StackRole::TiedStopGrad {
            return Err(Error::Structure(
                "encode_stopgrad on a non-stop-gradient stack".into(),
            ));
        }
        let mode = self.bn_mode();
        let (feat, _) = self.backbone.forward(x, mode)?;
        Ok(feat)
    }

    /// Stop-gradient projector on already-encoded rows. Forward-only.
    pub fn project_stopgrad(&mut self, rows: &Array2<F>) -> Result<Array2<F>> {
        if self.role != StackRole::TiedStopGrad {
            return Err(Error::Structure(
                "project_stopgrad on a non-stop-gradient stack".into(),
            ));
        }
        let mode = self.bn_mode();
        let (z, _) = self.projector.forward(rows, mode)?;
        Ok(z)
    }

    /// Eval-mode backbone features (running statistics, no augmentation).
    pub fn extract_features(&mut self, x: &Array4<F>) -> Result<Array2<F>> {
        let (feat, _) = self.backbone.forward(x, BnMode::Eval)?;
        Ok(feat)
    }

    /// Eval-mode projector output, used to compare momentum vs online paths.
    pub fn forward_eval_embedding(&mut self, x: &Array4<F>) -> Result<Array2<F>> {
        let (feat, _) = self.backbone.forward(x, BnMode::Eval)?;
        let (z, _) = self.projector.forward(&feat, BnMode::Eval)?;
        Ok(z)
    }

    /// Trainable parameters of backbone + projector (+ predictor when
    /// present), in stable construction order.
    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut out = Vec::new();
        self.backbone.collect_params(&mut out);
        self.projector.collect_params(&mut out);
        if let Some(p) = &mut self.predictor {
            p.collect_params(&mut out);
        }
        out
    }

    pub fn params(&self) -> Vec<&Param<F>> {
        let mut out = Vec::new();
        self.backbone.visit_params(&mut out);
        self.projector.visit_params(&mut out);
        if let Some(p) = &self.predictor {
            p.visit_params(&mut out);
        }
        out
    }

    /// Parameters of the shared part only (backbone + projector).
    pub fn shared_params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut out = Vec::new();
        self.backbone.collect_params(&mut out);
        self.projector.collect_params(&mut out);
        out
    }

    pub fn shared_params(&self) -> Vec<&Param<F>> {
        let mut out = Vec::new();
        self.backbone.visit_params(&mut out);
        self.projector.visit_params(&mut out);
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Buffer<F>> {
        let mut out = Vec::new();
        self.backbone.collect_buffers(&mut out);
        self.projector.collect_buffers(&mut out);
        if let Some(p) = &mut self.predictor {
            p.collect_buffers(&mut out);
        }
        out
    }

    pub fn buffers(&self) -> Vec<&Buffer<F>> {
        let mut out = Vec::new();
        self.backbone.visit_buffers(&mut out);
        self.projector.visit_buffers(&mut out);
        if let Some(p) = &self.predictor {
            p.visit_buffers(&mut out);
        }
        out
    }

    pub fn shared_buffers_mut(&mut self) -> Vec<&mut Buffer<F>> {
        let mut out = Vec::new();
        self.backbone.collect_buffers(&mut out);
        self.projector.collect_buffers(&mut out);
        out
    }

    pub fn shared_buffers(&self) -> Vec<&Buffer<F>> {
        let mut out = Vec::new();
        self.backbone.visit_buffers(&mut out);
        self.projector.visit_buffers(&mut out);
        out
    }

    /// Flat ordered (name, tensor) snapshot of backbone + projector
    /// (+ predictor when present).
    pub fn snapshot(&self) -> Vec<(String, ArrayD<F>)> {
        self.params()
            .into_iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }
}

fn check_aligned<F: Scalar>(a: &Param<F>, b: &Param<F>) -> Result<()> {
    if a.name != b.name || a.value.shape() != b.value.shape() {
        return Err(Error::Structure(format!(
            "parameter mismatch: {} {:?} vs {} {:?}",
            a.name,
            a.value.shape(),
            b.name,
            b.value.shape()
        )));
    }
    Ok(())
}

/// EMA update of the momentum stack from the back-propagation stack:
/// every shared parameter and running statistic moves to
/// `m * old + (1 - m) * online`.
pub fn momentum_update<F: Scalar>(
    momentum: &mut NetworkStack<F>,
    online: &NetworkStack<F>,
    m: f64,
) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::Parameter(format!("momentum coefficient {m} outside [0,1]")));
    }
    if momentum.role != StackRole::Momentum {
        return Err(Error::Structure("momentum_update target must be the momentum stack".into()));
    }
    let mf = F::from_f64(m);
    let one_m = F::from_f64(1.0 - m);
    let online_params = online.shared_params();
    let mut mom_params = momentum.shared_params_mut();
    if online_params.len() != mom_params.len() {
        return Err(Error::Structure(format!(
            "shared parameter count differs: {} vs {}",
            mom_params.len(),
            online_params.len()
        )));
    }
    for (mp, op) in mom_params.iter_mut().zip(online_params.iter()) {
        check_aligned(mp, op)?;
        ndarray::Zip::from(&mut mp.value)
            .and(&op.value)
            .for_each(|t, &o| *t = *t * mf + o * one_m);
    }
    let online_bufs = online.shared_buffers();
    let mut mom_bufs = momentum.shared_buffers_mut();
    for (mb, ob) in mom_bufs.iter_mut().zip(online_bufs.iter()) {
        ndarray::Zip::from(&mut mb.value)
            .and(&ob.value)
            .for_each(|t, &o| *t = *t * mf + o * one_m);
    }
    Ok(())
}

/// Copies backbone + projector values (parameters and running statistics)
/// from the back-propagation stack into the stop-gradient stack, bit-exactly.
pub fn tie_weights<F: Scalar>(
    stopgrad: &mut NetworkStack<F>,
    online: &NetworkStack<F>,
) -> Result<()> {
    if stopgrad.role != StackRole::TiedStopGrad {
        return Err(Error::Structure("tie_weights target must be the stop-gradient stack".into()));
    }
    let online_params = online.shared_params();
    let mut sg_params = stopgrad.shared_params_mut();
    if online_params.len() != sg_params.len() {
        return Err(Error::Structure(format!(
            "shared parameter count differs: {} vs {}",
            sg_params.len(),
            online_params.len()
        )));
    }
    for (sp, op) in sg_params.iter_mut().zip(online_params.iter()) {
        check_aligned(sp, op)?;
        sp.value.assign(&op.value);
    }
    let online_bufs = online.shared_buffers();
    let mut sg_bufs = stopgrad.shared_buffers_mut();
    for (sb, ob) in sg_bufs.iter_mut().zip(online_bufs.iter()) {
        sb.value.assign(&ob.value);
    }
    Ok(())
}

/// Max absolute difference over shared parameters; zero iff tied.
pub fn max_shared_param_diff<F: Scalar>(a: &NetworkStack<F>, b: &NetworkStack<F>) -> f64 {
    let pa = a.shared_params();
    let pb = b.shared_params();
    let mut max = 0.0f64;
    for (x, y) in pa.iter().zip(pb.iter()) {
        for (u, v) in x.value.iter().zip(y.value.iter()) {
            max = max.max((u.as_f64() - v.as_f64()).abs());
        }
    }
    max
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn micro_online(seed: u64) -> NetworkStack<f64> {
        let mut rng = Rng::new(seed);
        NetworkStack::build_online(ArchConfig::micro(), &mut rng)
    }

    fn image(n: usize, side: usize) -> Array4<f64> {
        Array4::from_shape_fn((n, 3, side, side), |(i, c, y, x)| {
            ((i * 311 + c * 97 + y * 13 + x * 7) as f64 * 0.11).sin()
        })
    }

    #[test]
    fn backprop_forward_shapes() {
        let mut online = micro_online(1);
        let x = image(2, 8);
        let (z, p, _) = online.forward_backprop(&x).unwrap();
        assert_eq!(z.shape(), &[2, 16]);
        assert_eq!(p.shape(), &[2, 16]);
    }

    #[test]
    fn roles_are_enforced() {
        let mut online = micro_online(2);
        let momentum = online.clone_as(StackRole::Momentum);
        assert!(momentum.predictor.is_none());
        let x = image(1, 8);
        let mut momentum = momentum;
        assert!(momentum.forward_backprop(&x).is_err());
        assert!(online.forward_momentum(&x).is_err());
    }

    #[test]
    fn momentum_update_arithmetic() {
        let mut online = micro_online(3);
        let mut momentum = online.clone_as(StackRole::Momentum);
        for p in momentum.shared_params_mut() {
            p.value.fill(1.0);
        }
        for p in online.shared_params_mut() {
            p.value.fill(0.0);
        }
        momentum_update(&mut momentum, &online, 0.99).unwrap();
        for p in momentum.shared_params() {
            for &v in p.value.iter() {
                assert!((v - 0.99).abs() < 1e-15);
            }
        }
        // m = 0 copies the online values exactly
        momentum_update(&mut momentum, &online, 0.0).unwrap();
        for p in momentum.shared_params() {
            assert!(p.value.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn momentum_update_geometric_decay() {
        let mut online = micro_online(4);
        let mut momentum = online.clone_as(StackRole::Momentum);
        for p in momentum.shared_params_mut() {
            p.value.fill(1.0);
        }
        for p in online.shared_params_mut() {
            p.value.fill(0.0);
        }
        let m = 0.9;
        let mut expected_gap = 1.0;
        for _ in 0..5 {
            momentum_update(&mut momentum, &online, m).unwrap();
            expected_gap *= m;
            let gap = max_shared_param_diff(&momentum, &online);
            assert!((gap - expected_gap).abs() < 1e-12, "gap {gap} expected {expected_gap}");
        }
    }

    #[test]
    fn momentum_update_rejects_bad_coefficient() {
        let online = micro_online(5);
        let mut momentum = online.clone_as(StackRole::Momentum);
        assert!(momentum_update(&mut momentum, &online, 1.5).is_err());
    }

    #[test]
    fn tie_weights_is_bit_exact() {
        let online = micro_online(6);
        let other = micro_online(7);
        let mut stopgrad = other.clone_as(StackRole::TiedStopGrad);
        assert!(max_shared_param_diff(&stopgrad, &online) > 0.0);
        tie_weights(&mut stopgrad, &online).unwrap();
        assert_eq!(max_shared_param_diff(&stopgrad, &online), 0.0);
        for (sb, ob) in stopgrad.shared_buffers().iter().zip(online.shared_buffers()) {
            assert_eq!(sb.value, ob.value);
        }
    }

    #[test]
    fn momentum_copy_matches_online_in_eval_mode() {
        let mut online = micro_online(8);
        let mut momentum = online.clone_as(StackRole::Momentum);
        let x = image(3, 8);
        let a = online.forward_eval_embedding(&x).unwrap();
        let b = momentum.forward_eval_embedding(&x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn forward_only_paths_leave_grads_zero() {
        let online = micro_online(9);
        let mut momentum = online.clone_as(StackRole::Momentum);
        let mut stopgrad = online.clone_as(StackRole::TiedStopGrad);
        let x = image(2, 8);
        momentum.forward_momentum(&x).unwrap();
        let enc = stopgrad.encode_stopgrad(&x).unwrap();
        stopgrad.project_stopgrad(&enc).unwrap();
        for p in momentum.params().iter().chain(stopgrad.params().iter()) {
            assert!(p.grad.iter().all(|&g| g == 0.0));
        }
        // and the online stack's grads are untouched by those forwards
        for p in online.params() {
            assert!(p.grad.iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn batch_of_one_forward_works() {
        let mut online = micro_online(10);
        let x = image(1, 8);
        let (z, p, _) = online.forward_backprop(&x).unwrap();
        assert!(z.iter().all(|v| v.is_finite()));
        assert!(p.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn structural_mismatch_is_reported_by_name() {
        let online = micro_online(11);
        let mut rng = Rng::new(12);
        let other = NetworkStack::<f64>::build_online(ArchConfig::toy(), &mut rng);
        let mut momentum = other.clone_as(StackRole::Momentum);
        let err = momentum_update(&mut momentum, &online, 0.5).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("mismatch") || msg.contains("differs"), "{msg}");
    }

    #[test]
    fn snapshot_order_matches_across_roles() {
        let online = micro_online(13);
        let momentum = online.clone_as(StackRole::Momentum);
        let on: Vec<String> = online
            .shared_params()
            .iter()
            .map(|p| p.name.clone())
            .collect();
        let mo: Vec<String> = momentum
            .shared_params()
            .iter()
            .map(|p| p.name.clone())
            .collect();
        assert_eq!(on, mo);
    }
}
