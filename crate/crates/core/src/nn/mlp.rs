//! Projection and prediction heads.
//!
//! Projector: three linear layers, each followed by batch norm, with ReLU
//! after the first and second norms only. Predictor: linear -> BN -> ReLU
//! -> linear. Linear layers feeding a batch norm carry no bias; the
//! predictor's output layer does.

use ndarray::Array2;

use crate::error::Result;
use crate::rng::Rng;
use crate::scalar::Scalar;

use super::{relu2, relu2_backward, BatchNorm1d, BnCache, BnMode, Buffer, Linear, LinearCache, Param};

#[derive(Debug, Clone)]
pub struct Projector<F> {
    pub l1: Linear<F>,
    pub bn1: BatchNorm1d<F>,
    pub l2: Linear<F>,
    pub bn2: BatchNorm1d<F>,
    pub l3: Linear<F>,
    pub bn3: BatchNorm1d<F>,
    pub in_dim: usize,
    pub out_dim: usize,
}

pub struct ProjectorCache<F> {
    l1: LinearCache<F>,
    bn1: BnCache<F>,
    r1: Array2<F>,
    l2: LinearCache<F>,
    bn2: BnCache<F>,
    r2: Array2<F>,
    l3: LinearCache<F>,
    bn3: BnCache<F>,
}

impl<F: Scalar> Projector<F> {
    pub fn new(name: &str, in_dim: usize, hidden: usize, out_dim: usize, rng: &mut Rng) -> Self {
        Projector {
            l1: Linear::new(&format!("{name}.l1"), in_dim, hidden, false, rng),
            bn1: BatchNorm1d::new(&format!("{name}.bn1"), hidden),
            l2: Linear::new(&format!("{name}.l2"), hidden, hidden, false, rng),
            bn2: BatchNorm1d::new(&format!("{name}.bn2"), hidden),
            l3: Linear::new(&format!("{name}.l3"), hidden, out_dim, false, rng),
            bn3: BatchNorm1d::new(&format!("{name}.bn3"), out_dim),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&mut self, x: &Array2<F>, mode: BnMode) -> Result<(Array2<F>, ProjectorCache<F>)> {
        let (h, l1) = self.l1.forward(x)?;
        let (h, bn1) = self.bn1.forward(&h, mode)?;
        let r1 = relu2(&h);
        let (h, l2) = self.l2.forward(&r1)?;
        let (h, bn2) = self.bn2.forward(&h, mode)?;
        let r2 = relu2(&h);
        let (h, l3) = self.l3.forward(&r2)?;
        let (y, bn3) = self.bn3.forward(&h, mode)?;
        Ok((
            y,
            ProjectorCache {
                l1,
                bn1,
                r1,
                l2,
                bn2,
                r2,
                l3,
                bn3,
            },
        ))
    }

    pub fn backward(&mut self, cache: &ProjectorCache<F>, gy: &Array2<F>) -> Array2<F> {
        let g = self.bn3.backward(&cache.bn3, gy);
        let g = self.l3.backward(&cache.l3, &g);
        let g = relu2_backward(&cache.r2, &g);
        let g = self.bn2.backward(&cache.bn2, &g);
        let g = self.l2.backward(&cache.l2, &g);
        let g = relu2_backward(&cache.r1, &g);
        let g = self.bn1.backward(&cache.bn1, &g);
        self.l1.backward(&cache.l1, &g)
    }

    pub fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut Param<F>>) {
        self.l1.collect_params(out);
        self.bn1.collect_params(out);
        self.l2.collect_params(out);
        self.bn2.collect_params(out);
        self.l3.collect_params(out);
        self.bn3.collect_params(out);
    }

    pub fn visit_params<'a>(&'a self, out: &mut Vec<&'a Param<F>>) {
        self.l1.visit_params(out);
        self.bn1.visit_params(out);
        self.l2.visit_params(out);
        self.bn2.visit_params(out);
        self.l3.visit_params(out);
        self.bn3.visit_params(out);
    }

    pub fn collect_buffers<'a>(&'a mut self, out: &mut Vec<&'a mut Buffer<F>>) {
        self.bn1.collect_buffers(out);
        self.bn2.collect_buffers(out);
        self.bn3.collect_buffers(out);
    }

    pub fn visit_buffers<'a>(&'a self, out: &mut Vec<&'a Buffer<F>>) {
        self.bn1.visit_buffers(out);
        self.bn2.visit_buffers(out);
        self.bn3.visit_buffers(out);
    }
}

#[derive(Debug, Clone)]
pub struct Predictor<F> {
    pub l1: Linear<F>,
    pub bn1: BatchNorm1d<F>,
    pub l2: Linear<F>,
    pub in_dim: usize,
    pub out_dim: usize,
}

pub struct PredictorCache<F> {
    l1: LinearCache<F>,
    bn1: BnCache<F>,
    r1: Array2<F>,
    l2: LinearCache<F>,
}

impl<F: Scalar> Predictor<F> {
    pub fn new(name: &str, dim: usize, hidden: usize, rng: &mut Rng) -> Self {
        Predictor {
            l1: Linear::new(&format!("{name}.l1"), dim, hidden, false, rng),
            bn1: BatchNorm1d::new(&format!("{name}.bn1"), hidden),
            l2: Linear::new(&format!("{name}.l2"), hidden, dim, true, rng),
            in_dim: dim,
            out_dim: dim,
        }
    }

    pub fn forward(&mut self, x: &Array2<F>, mode: BnMode) -> Result<(Array2<F>, PredictorCache<F>)> {
        let (h, l1) = self.l1.forward(x)?;
        let (h, bn1) = self.bn1.forward(&h, mode)?;
        let r1 = relu2(&h);
        let (y, l2) = self.l2.forward(&r1)?;
        Ok((y, PredictorCache { l1, bn1, r1, l2 }))
    }

    pub fn backward(&mut self, cache: &PredictorCache<F>, gy: &Array2<F>) -> Array2<F> {
        let g = self.l2.backward(&cache.l2, gy);
        let g = relu2_backward(&cache.r1, &g);
        let g = self.bn1.backward(&cache.bn1, &g);
        self.l1.backward(&cache.l1, &g)
    }

    pub fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut Param<F>>) {
        self.l1.collect_params(out);
        self.bn1.collect_params(out);
        self.l2.collect_params(out);
    }

    pub fn visit_params<'a>(&'a self, out: &mut Vec<&'a Param<F>>) {
        self.l1.visit_params(out);
        self.bn1.visit_params(out);
        self.l2.visit_params(out);
    }

    pub fn collect_buffers<'a>(&'a mut self, out: &mut Vec<&'a mut Buffer<F>>) {
        self.bn1.collect_buffers(out);
    }

    pub fn visit_buffers<'a>(&'a self, out: &mut Vec<&'a Buffer<F>>) {
        self.bn1.visit_buffers(out);
    }
}
