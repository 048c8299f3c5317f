//! Backbone encoders: image batch -> feature vector.
//!
//! Two families: a CIFAR-style ResNet-18 (3x3 stem, no initial max-pool,
//! feature dim 512) for full-configuration runs, and a 4-layer conv net in
//! two sizes (`toy`, `micro`) for desk-scale training and gradient oracles.

use ndarray::{Array2, Array4};

use crate::error::Result;
use crate::rng::Rng;
use crate::scalar::Scalar;

use super::{
    global_avg_pool, global_avg_pool_backward, relu4, relu4_backward, BatchNorm2d, BnCache,
    BnMode, Buffer, Conv2d, ConvCache, Param,
};

/// Conv -> BN -> ReLU.
#[derive(Debug, Clone)]
pub struct ConvBnRelu<F> {
    pub conv: Conv2d<F>,
    pub bn: BatchNorm2d<F>,
}

pub struct ConvBnReluCache<F> {
    conv: ConvCache<F>,
    bn: BnCache<F>,
    y: Array4<F>,
}

impl<F: Scalar> ConvBnRelu<F> {
    fn new(
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut Rng,
    ) -> Self {
        ConvBnRelu {
            conv: Conv2d::new(&format!("{name}.conv"), c_in, c_out, kernel, stride, pad, rng),
            bn: BatchNorm2d::new(&format!("{name}.bn"), c_out),
        }
    }

    fn forward(&mut self, x: &Array4<F>, mode: BnMode) -> Result<(Array4<F>, ConvBnReluCache<F>)> {
        let (h, conv) = self.conv.forward(x)?;
        let (hb, bn) = self.bn.forward(&h, mode)?;
        let y = relu4(&hb);
        Ok((y.clone(), ConvBnReluCache { conv, bn, y }))
    }

    fn backward(&mut self, cache: &ConvBnReluCache<F>, gy: &Array4<F>, need_dx: bool) -> Option<Array4<F>> {
        let g = relu4_backward(&cache.y, gy);
        let g = self.bn.backward(&cache.bn, &g);
        self.conv.backward(&cache.conv, &g, need_dx)
    }

    fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut Param<F>>) {
        self.conv.collect_params(out);
        self.bn.collect_params(out);
    }

    fn visit_params<'a>(&'a self, out: &mut Vec<&'a Param<F>>) {
        self.conv.visit_params(out);
        self.bn.visit_params(out);
    }

    fn collect_buffers<'a>(&'a mut self, out: &mut Vec<&'a mut Buffer<F>>) {
        self.bn.collect_buffers(out);
    }

    fn visit_buffers<'a>(&'a self, out: &mut Vec<&'a Buffer<F>>) {
        self.bn.visit_buffers(out);
    }
}

// ---------------------------------------------------------------------------
// 4-layer conv net (toy / micro presets)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Conv4<F> {
    blocks: Vec<ConvBnRelu<F>>,
    pub out_dim: usize,
}

pub struct Conv4Cache<F> {
    blocks: Vec<ConvBnReluCache<F>>,
    pool_hw: (usize, usize),
}

impl<F: Scalar> Conv4<F> {
    pub fn new(name: &str, channels: [usize; 4], in_channels: usize, rng: &mut Rng) -> Self {
        let strides = [1usize, 2, 2, 2];
        let mut blocks = Vec::with_capacity(4);
        let mut c_in = in_channels;
        for (i, (&c_out, &s)) in channels.iter().zip(strides.iter()).enumerate() {
            blocks.push(ConvBnRelu::new(
                &format!("{name}.block{}", i + 1),
                c_in,
                c_out,
                3,
                s,
                1,
                rng,
            ));
            c_in = c_out;
        }
        Conv4 {
            blocks,
            out_dim: channels[3],
        }
    }

    pub fn forward(&mut self, x: &Array4<F>, mode: BnMode) -> Result<(Array2<F>, Conv4Cache<F>)> {
        let mut caches = Vec::with_capacity(4);
        let mut cur = x.clone();
        for b in &mut self.blocks {
            let (y, cache) = b.forward(&cur, mode)?;
            caches.push(cache);
            cur = y;
        }
        let (feat, pool_hw) = global_avg_pool(&cur);
        Ok((
            feat,
            Conv4Cache {
                blocks: caches,
                pool_hw,
            },
        ))
    }

    pub fn backward(&mut self, cache: &Conv4Cache<F>, dfeat: &Array2<F>) {
        let mut g = global_avg_pool_backward(dfeat, cache.pool_hw);
        for (i, b) in self.blocks.iter_mut().enumerate().rev() {
            match b.backward(&cache.blocks[i], &g, i > 0) {
                Some(dx) => g = dx,
                None => break,
            }
        }
    }

    pub fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut Param<F>>) {
        for b in &mut self.blocks {
            b.collect_params(out);
        }
    }

    pub fn visit_params<'a>(&'a self, out: &mut Vec<&'a Param<F>>) {
        for b in &self.blocks {
            b.visit_params(out);
        }
    }

    pub fn collect_buffers<'a>(&'a mut self, out: &mut Vec<&'a mut Buffer<F>>) {
        for b in &mut self.blocks {
            b.collect_buffers(out);
        }
    }

    pub fn visit_buffers<'a>(&'a self, out: &mut Vec<&'a Buffer<F>>) {
        for b in &self.blocks {
            b.visit_buffers(out);
        }
    }
}

// ---------------------------------------------------------------------------
// ResNet-18, CIFAR stem
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct BasicBlock<F> {
    conv1: Conv2d<F>,
    bn1: BatchNorm2d<F>,
    conv2: Conv2d<F>,
    bn2: BatchNorm2d<F>,
    down: Option<(Conv2d<F>, BatchNorm2d<F>)>,
}

struct BasicBlockCache<F> {
    conv1: ConvCache<F>,
    bn1: BnCache<F>,
    h1: Array4<F>, // relu output inside the block
    conv2: ConvCache<F>,
    bn2: BnCache<F>,
    down: Option<(ConvCache<F>, BnCache<F>)>,
    y: Array4<F>, // block output (post final relu)
}

impl<F: Scalar> BasicBlock<F> {
    fn new(name: &str, c_in: usize, c_out: usize, stride: usize, rng: &mut Rng) -> Self {
        let down = (stride != 1 || c_in != c_out).then(|| {
            (
                Conv2d::new(&format!("{name}.down.conv"), c_in, c_out, 1, stride, 0, rng),
                BatchNorm2d::new(&format!("{name}.down.bn"), c_out),
            )
        });
        BasicBlock {
            conv1: Conv2d::new(&format!("{name}.conv1"), c_in, c_out, 3, stride, 1, rng),
            bn1: BatchNorm2d::new(&format!("{name}.bn1"), c_out),
            conv2: Conv2d::new(&format!("{name}.conv2"), c_out, c_out, 3, 1, 1, rng),
            bn2: BatchNorm2d::new(&format!("{name}.bn2"), c_out),
            down,
        }
    }

    fn forward(&mut self, x: &Array4<F>, mode: BnMode) -> Result<(Array4<F>, BasicBlockCache<F>)> {
        let (h, conv1) = self.conv1.forward(x)?;
        let (h, bn1) = self.bn1.forward(&h, mode)?;
        let h1 = relu4(&h);
        let (h2, conv2) = self.conv2.forward(&h1)?;
        let (mut h2, bn2) = self.bn2.forward(&h2, mode)?;
        let down = match &mut self.down {
            Some((dc, dbn)) => {
                let (idn, dconv) = dc.forward(x)?;
                let (idn, dbn_cache) = dbn.forward(&idn, mode)?;
                h2 += &idn;
                Some((dconv, dbn_cache))
            }
            None => {
                h2 += x;
                None
            }
        };
        let y = relu4(&h2);
        Ok((
            y.clone(),
            BasicBlockCache {
                conv1,
                bn1,
                h1,
                conv2,
                bn2,
                down,
                y,
            },
        ))
    }

    fn backward(&mut self, cache: &BasicBlockCache<F>, gy: &Array4<F>, need_dx: bool) -> Option<Array4<F>> {
        let g = relu4_backward(&cache.y, gy); // gradient at (main + shortcut)
        // main path
        let gm = self.bn2.backward(&cache.bn2, &g);
        let gm = self
            .conv2
            .backward(&cache.conv2, &gm, true)
            .expect("inner conv always needs dx");
        let gm = relu4_backward(&cache.h1, &gm);
        let gm = self.bn1.backward(&cache.bn1, &gm);
        let dx_main = self.conv1.backward(&cache.conv1, &gm, need_dx);
        // shortcut path
        let dx_short = match (&mut self.down, &cache.down) {
            (Some((dc, dbn)), Some((dconv, dbn_cache))) => {
                let gd = dbn.backward(dbn_cache, &g);
                dc.backward(dconv, &gd, need_dx)
            }
            (None, None) => need_dx.then(|| g.clone()),
            _ => unreachable!("cache/structure mismatch"),
        };
        match (dx_main, dx_short) {
            (Some(mut a), Some(b)) => {
                a += &b;
                Some(a)
            }
            _ => None,
        }
    }

    fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut Param<F>>) {
        self.conv1.collect_params(out);
        self.bn1.collect_params(out);
        self.conv2.collect_params(out);
        self.bn2.collect_params(out);
        if let Some((dc, dbn)) = &mut self.down {
            dc.collect_params(out);
            dbn.collect_params(out);
        }
    }

    fn visit_params<'a>(&'a self, out: &mut Vec<&'a Param<F>>) {
        self.conv1.visit_params(out);
        self.bn1.visit_params(out);
        self.conv2.visit_params(out);
        self.bn2.visit_params(out);
        if let Some((dc, dbn)) = &self.down {
            dc.visit_params(out);
            dbn.visit_params(out);
        }
    }

    fn collect_buffers<'a>(&'a mut self, out: &mut Vec<&'a mut Buffer<F>>) {
        self.bn1.collect_buffers(out);
        self.bn2.collect_buffers(out);
        if let Some((_, dbn)) = &mut self.down {
            dbn.collect_buffers(out);
        }
    }

    fn visit_buffers<'a>(&'a self, out: &mut Vec<&'a Buffer<F>>) {
        self.bn1.visit_buffers(out);
        self.bn2.visit_buffers(out);
        if let Some((_, dbn)) = &self.down {
            dbn.visit_buffers(out);
        }
    }
}

#[derive(Debug, Clone)]
pub struct ResNet18<F> {
    stem: ConvBnRelu<F>,
    blocks: Vec<BasicBlock<F>>,
    pub out_dim: usize,
}

pub struct ResNet18Cache<F> {
    stem: ConvBnReluCache<F>,
    blocks: Vec<BasicBlockCache<F>>,
    pool_hw: (usize, usize),
}

impl<F: Scalar> ResNet18<F> {
    pub fn new(name: &str, in_channels: usize, rng: &mut Rng) -> Self {
        let stem = ConvBnRelu::new(&format!("{name}.stem"), in_channels, 64, 3, 1, 1, rng);
        let plan: [(usize, usize, usize); 4] =
            [(64, 64, 1), (64, 128, 2), (128, 256, 2), (256, 512, 2)];
        let mut blocks = Vec::with_capacity(8);
        for (stage, &(c_in, c_out, stride)) in plan.iter().enumerate() {
            blocks.push(BasicBlock::new(
                &format!("{name}.layer{}.0", stage + 1),
                c_in,
                c_out,
                stride,
                rng,
            ));
            blocks.push(BasicBlock::new(
                &format!("{name}.layer{}.1", stage + 1),
                c_out,
                c_out,
                1,
                rng,
            ));
        }
        ResNet18 {
            stem,
            blocks,
            out_dim: 512,
        }
    }

    pub fn forward(&mut self, x: &Array4<F>, mode: BnMode) -> Result<(Array2<F>, ResNet18Cache<F>)> {
        let (mut cur, stem) = self.stem.forward(x, mode)?;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &mut self.blocks {
            let (y, c) = b.forward(&cur, mode)?;
            caches.push(c);
            cur = y;
        }
        let (feat, pool_hw) = global_avg_pool(&cur);
        Ok((
            feat,
            ResNet18Cache {
                stem,
                blocks: caches,
                pool_hw,
            },
        ))
    }

    pub fn backward(&mut self, cache: &ResNet18Cache<F>, dfeat: &Array2<F>) {
        let mut g = global_avg_pool_backward(dfeat, cache.pool_hw);
        for (i, b) in self.blocks.iter_mut().enumerate().rev() {
            g = b
                .backward(&cache.blocks[i], &g, true)
                .expect("block backward with need_dx");
        }
        self.stem.backward(&cache.stem, &g, false);
    }

    pub fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut Param<F>>) {
        self.stem.collect_params(out);
        for b in &mut self.blocks {
            b.collect_params(out);
        }
    }

    pub fn visit_params<'a>(&'a self, out: &mut Vec<&'a Param<F>>) {
        self.stem.visit_params(out);
        for b in &self.blocks {
            b.visit_params(out);
        }
    }

    pub fn collect_buffers<'a>(&'a mut self, out: &mut Vec<&'a mut Buffer<F>>) {
        self.stem.collect_buffers(out);
        for b in &mut self.blocks {
            b.collect_buffers(out);
        }
    }

    pub fn visit_buffers<'a>(&'a self, out: &mut Vec<&'a Buffer<F>>) {
        self.stem.visit_buffers(out);
        for b in &self.blocks {
            b.visit_buffers(out);
        }
    }
}

// ---------------------------------------------------------------------------
// Backbone selection
// ---------------------------------------------------------------------------

/// Named backbone presets. `ToyCnn` is sized for desk-scale training runs;
/// `MicroCnn` keeps a full stack under 5k parameters for gradient oracles.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackboneKind {
    Resnet18Cifar,
    ToyCnn,
    MicroCnn,
}

impl BackboneKind {
    pub fn feature_dim(&self) -> usize {
        match self {
            BackboneKind::Resnet18Cifar => 512,
            BackboneKind::ToyCnn => 128,
            BackboneKind::MicroCnn => 8,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            BackboneKind::Resnet18Cifar => "resnet18-cifar",
            BackboneKind::ToyCnn => "toy-cnn",
            BackboneKind::MicroCnn => "micro-cnn",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "resnet18-cifar" => Some(BackboneKind::Resnet18Cifar),
            "toy-cnn" => Some(BackboneKind::ToyCnn),
            "micro-cnn" => Some(BackboneKind::MicroCnn),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub enum Backbone<F> {
    Conv4(Conv4<F>),
    Resnet(ResNet18<F>),
}

pub enum BackboneCache<F> {
    Conv4(Conv4Cache<F>),
    Resnet(ResNet18Cache<F>),
}

impl<F: Scalar> Backbone<F> {
    pub fn build(kind: BackboneKind, name: &str, in_channels: usize, rng: &mut Rng) -> Self {
        match kind {
            BackboneKind::Resnet18Cifar => Backbone::Resnet(ResNet18::new(name, in_channels, rng)),
            BackboneKind::ToyCnn => {
                Backbone::Conv4(Conv4::new(name, [16, 32, 64, 128], in_channels, rng))
            }
            BackboneKind::MicroCnn => {
                Backbone::Conv4(Conv4::new(name, [4, 8, 8, 8], in_channels, rng))
            }
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Backbone::Conv4(b) => b.out_dim,
            Backbone::Resnet(b) => b.out_dim,
        }
    }

    pub fn forward(&mut self, x: &Array4<F>, mode: BnMode) -> Result<(Array2<F>, BackboneCache<F>)> {
        match self {
            Backbone::Conv4(b) => {
                let (y, c) = b.forward(x, mode)?;
                Ok((y, BackboneCache::Conv4(c)))
            }
            Backbone::Resnet(b) => {
                let (y, c) = b.forward(x, mode)?;
                Ok((y, BackboneCache::Resnet(c)))
            }
        }
    }

    pub fn backward(&mut self, cache: &BackboneCache<F>, dfeat: &Array2<F>) {
        match (self, cache) {
            (Backbone::Conv4(b), BackboneCache::Conv4(c)) => b.backward(c, dfeat),
            (Backbone::Resnet(b), BackboneCache::Resnet(c)) => b.backward(c, dfeat),
            _ => unreachable!("cache built by a different backbone"),
        }
    }

    pub fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut Param<F>>) {
        match self {
            Backbone::Conv4(b) => b.collect_params(out),
            Backbone::Resnet(b) => b.collect_params(out),
        }
    }

    pub fn visit_params<'a>(&'a self, out: &mut Vec<&'a Param<F>>) {
        match self {
            Backbone::Conv4(b) => b.visit_params(out),
            Backbone::Resnet(b) => b.visit_params(out),
        }
    }

    pub fn collect_buffers<'a>(&'a mut self, out: &mut Vec<&'a mut Buffer<F>>) {
        match self {
            Backbone::Conv4(b) => b.collect_buffers(out),
            Backbone::Resnet(b) => b.collect_buffers(out),
        }
    }

    pub fn visit_buffers<'a>(&'a self, out: &mut Vec<&'a Buffer<F>>) {
        match self {
            Backbone::Conv4(b) => b.visit_buffers(out),
            Backbone::Resnet(b) => b.visit_buffers(out),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_feature_shape() {
        let mut rng = Rng::new(1);
        let mut bb = Backbone::<f32>::build(BackboneKind::ToyCnn, "backbone", 3, &mut rng);
        let x = Array4::<f32>::zeros((2, 3, 32, 32));
        let (feat, _) = bb.forward(&x, BnMode::Train { update_running: false }).unwrap();
        assert_eq!(feat.shape(), &[2, 128]);
        // half-size patches work too
        let p = Array4::<f32>::zeros((2, 3, 16, 16));
        let (feat, _) = bb.forward(&p, BnMode::Train { update_running: false }).unwrap();
        assert_eq!(feat.shape(), &[2, 128]);
    }

    #[test]
    fn resnet_feature_dim_is_512() {
        let mut rng = Rng::new(2);
        let mut bb = Backbone::<f32>::build(BackboneKind::Resnet18Cifar, "backbone", 3, &mut rng);
        let x = Array4::<f32>::from_elem((1, 3, 32, 32), 0.1);
        let (feat, _) = bb.forward(&x, BnMode::Eval).unwrap();
        assert_eq!(feat.shape(), &[1, 512]);
        assert!(feat.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn micro_is_small_enough_for_grad_oracles() {
        let mut rng = Rng::new(3);
        let mut bb = Backbone::<f64>::build(BackboneKind::MicroCnn, "backbone", 3, &mut rng);
        let mut params = Vec::new();
        bb.collect_params(&mut params);
        let total: usize = params.iter().map(|p| p.value.len()).sum();
        assert!(total < 2500, "micro backbone has {total} params");
    }

    #[test]
    fn conv4_backward_runs_and_touches_all_grads() {
        let mut rng = Rng::new(4);
        let mut bb = Conv4::<f64>::new("bb", [4, 8, 8, 8], 3, &mut rng);
        let x = Array4::from_shape_fn((2, 3, 8, 8), |(n, c, y, x)| {
            ((n * 100 + c * 10 + y * 3 + x) as f64 * 0.17).sin()
        });
        let (feat, cache) = bb.forward(&x, BnMode::Train { update_running: false }).unwrap();
        bb.backward(&cache, &feat.clone());
        let mut params = Vec::new();
        bb.collect_params(&mut params);
        let any_nonzero = params
            .iter()
            .any(|p| p.grad.iter().any(|&g| g != 0.0));
        assert!(any_nonzero);
    }

    #[test]
    fn param_order_is_stable_across_builds() {
        let mut r1 = Rng::new(5);
        let mut r2 = Rng::new(6);
        let b1 = Backbone::<f32>::build(BackboneKind::ToyCnn, "backbone", 3, &mut r1);
        let b2 = Backbone::<f32>::build(BackboneKind::ToyCnn, "backbone", 3, &mut r2);
        let mut p1 = Vec::new();
        let mut p2 = Vec::new();
        b1.visit_params(&mut p1);
        b2.visit_params(&mut p2);
        let names1: Vec<&str> = p1.iter().map(|p| p.name.as_str()).collect();
        let names2: Vec<&str> = p2.iter().map(|p| p.name.as_str()).collect();
        assert_eq!(names1, names2);
    }
}
