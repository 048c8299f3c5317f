//! Differentiable layers with explicit forward caches and hand-written
//! backward passes.
//!
//! Only the back-propagation branch ever runs a backward pass; the momentum
//! and tied stop-gradient branches are forward-only by construction, which
//! is what makes their no-gradient guarantee hard rather than conventional.

pub mod backbone;
pub mod gradcheck;
pub mod mlp;
pub mod stack;

use ndarray::{Array1, Array2, Array4, ArrayD, Axis, Ix2, Ix4};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;

/// Batch-norm execution mode. `Train` normalizes with batch statistics;
/// `update_running` folds them into the tracked running stats (only the
/// back-propagation stack does this). `Eval` normalizes with running stats.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train { update_running: bool },
    Eval,
}

/// Weight-decay / LARS grouping of a trainable tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    BnGamma,
    BnBeta,
}

/// A trainable tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param<F> {
    pub name: String,
    pub value: ArrayD<F>,
    pub grad: ArrayD<F>,
    pub kind: ParamKind,
}

impl<F: Scalar> Param<F> {
    pub fn new(name: String, value: ArrayD<F>, kind: ParamKind) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Param {
            name,
            value,
            grad,
            kind,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(F::zero());
    }
}

/// A non-trainable state tensor (batch-norm running statistics).
#[derive(Debug, Clone)]
pub struct Buffer<F> {
    pub name: String,
    pub value: ArrayD<F>,
}

/// Kaiming-uniform draw: U(-b, b) with b = sqrt(6 / fan_in).
fn kaiming_uniform<F: Scalar>(shape: &[usize], fan_in: usize, rng: &mut Rng) -> ArrayD<F> {
    let bound = (6.0 / fan_in as f64).sqrt();
    ArrayD::from_shape_fn(ndarray::IxDyn(shape), |_| {
        F::from_f64(rng.uniform_range(-bound, bound))
    })
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Linear<F> {
    pub name: String,
    pub weight: Param<F>, // [out, in]
    pub bias: Option<Param<F>>,
    pub in_dim: usize,
    pub out_dim: usize,
}

pub struct LinearCache<F> {
    x: Array2<F>,
}

impl<F: Scalar> Linear<F> {
    pub fn new(name: &str, in_dim: usize, out_dim: usize, bias: bool, rng: &mut Rng) -> Self {
        let weight = Param::new(
            format!("{name}.weight"),
            kaiming_uniform(&[out_dim, in_dim], in_dim, rng),
            ParamKind::Weight,
        );
        let bias = bias.then(|| {
            Param::new(
                format!("{name}.bias"),
                ArrayD::zeros(ndarray::IxDyn(&[out_dim])),
                ParamKind::Bias,
            )
        });
        Linear {
            name: name.to_string(),
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    fn weight2(&self) -> ndarray::ArrayView2<'_, F> {
        self.weight
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("linear weight is 2-d")
    }

    pub fn forward(&self, x: &Array2<F>) -> Result<(Array2<F>, LinearCache<F>)> {
        if x.ncols() != self.in_dim {
            return Err(Error::Dimension(format!(
                "{}: expected {} input features, got {}",
                self.name,
                self.in_dim,
                x.ncols()
            )));
        }
        let mut y = x.dot(&self.weight2().t());
        if let Some(b) = &self.bias {
            let b1 = b.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
            y += &b1;
        }
        Ok((y, LinearCache { x: x.clone() }))
    }

    pub fn backward(&mut self, cache: &LinearCache<F>, gy: &Array2<F>) -> Array2<F> {
        let dw = gy.t().dot(&cache.x);
        self.weight
            .grad
            .view_mut()
            .into_dimensionality::<Ix2>()
            .unwrap()
            .scaled_add(F::one(), &dw);
        if let Some(b) = &mut self.bias {
            let db = gy.sum_axis(Axis(0));
            b.grad
                .view_mut()
                .into_dimensionality::<ndarray::Ix1>()
                .unwrap()
                .scaled_add(F::one(), &db);
        }
        gy.dot(&self.weight2())
    }

    pub fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut Param<F>>) {
        out.push(&mut self.weight);
        if let Some(b) = &mut self.bias {
            out.push(b);
        }
    }

    pub fn visit_params<'a>(&'a self, out: &mut Vec<&'a Param<F>>) {
        out.push(&self.weight);
        if let Some(b) = &self.bias {
            out.push(b);
        }
    }
}

// ---------------------------------------------------------------------------
// Batch norm (1-d and 2-d share the per-channel math)
// ---------------------------------------------------------------------------

const BN_EPS: f64 = 1e-5;
/// Fraction of the batch statistic folded into the running statistic per
/// training-mode forward.
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct BatchNorm<F> {
    pub name: String,
    pub gamma: Param<F>,
    pub beta: Param<F>,
    pub running_mean: Buffer<F>,
    pub running_var: Buffer<F>,
    pub dim: usize,
}

pub struct BnCache<F> {
    x_hat: ArrayD<F>,
    inv_std: Array1<F>,
    train: bool,
}

impl<F: Scalar> BatchNorm<F> {
    pub fn new(name: &str, dim: usize) -> Self {
        BatchNorm {
            name: name.to_string(),
            gamma: Param::new(
                format!("{name}.gamma"),
                ArrayD::from_elem(ndarray::IxDyn(&[dim]), F::one()),
                ParamKind::BnGamma,
            ),
            beta: Param::new(
                format!("{name}.beta"),
                ArrayD::zeros(ndarray::IxDyn(&[dim])),
                ParamKind::BnBeta,
            ),
            running_mean: Buffer {
                name: format!("{name}.running_mean"),
                value: ArrayD::zeros(ndarray::IxDyn(&[dim])),
            },
            running_var: Buffer {
                name: format!("{name}.running_var"),
                value: ArrayD::from_elem(ndarray::IxDyn(&[dim]), F::one()),
            },
            dim,
        }
    }

    fn gamma1(&self) -> ndarray::ArrayView1<'_, F> {
        self.gamma.value.view().into_dimensionality().unwrap()
    }

    /// Normalizes `x` viewed as [channels][elements-per-channel] where
    /// `per_channel` maps flat element -> channel. Implemented concretely for
    /// the 2-d and 4-d wrappers below.
    fn stats<I: Iterator<Item = F> + Clone>(values: I, count: usize) -> (f64, f64) {
        let mut sum = 0.0f64;
        let mut sq = 0.0f64;
        for v in values {
            let f = v.as_f64();
            sum += f;
            sq += f * f;
        }
        let mean = sum / count as f64;
        let var = (sq / count as f64 - mean * mean).max(0.0);
        (mean, var)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm1d<F>(pub BatchNorm<F>);

impl<F: Scalar> BatchNorm1d<F> {
    pub fn new(name: &str, dim: usize) -> Self {
        BatchNorm1d(BatchNorm::new(name, dim))
    }

    pub fn forward(&mut self, x: &Array2<F>, mode: BnMode) -> Result<(Array2<F>, BnCache<F>)> {
        let bn = &mut self.0;
        if x.ncols() != bn.dim {
            return Err(Error::Dimension(format!(
                "{}: expected {} features, got {}",
                bn.name,
                bn.dim,
                x.ncols()
            )));
        }
        let n = x.nrows();
        let mut x_hat = x.clone();
        let mut inv_std = Array1::<F>::zeros(bn.dim);
        match mode {
            BnMode::Train { update_running } => {
                for d in 0..bn.dim {
                    let col = x.index_axis(Axis(1), d);
                    let (mean, var) = BatchNorm::<F>::stats(col.iter().cloned(), n);
                    let istd = 1.0 / (var + BN_EPS).sqrt();
                    inv_std[d] = F::from_f64(istd);
                    let m = F::from_f64(mean);
                    let s = F::from_f64(istd);
                    x_hat
                        .index_axis_mut(Axis(1), d)
                        .mapv_inplace(|v| (v - m) * s);
                    if update_running {
                        let rm = &mut bn.running_mean.value[d];
                        *rm = F::from_f64(rm.as_f64() * (1.0 - BN_MOMENTUM) + mean * BN_MOMENTUM);
                        let rv = &mut bn.running_var.value[d];
                        *rv = F::from_f64(rv.as_f64() * (1.0 - BN_MOMENTUM) + var * BN_MOMENTUM);
                    }
                }
            }
            BnMode::Eval => {
                for d in 0..bn.dim {
                    let mean = bn.running_mean.value[d].as_f64();
                    let var = bn.running_var.value[d].as_f64();
                    let istd = 1.0 / (var + BN_EPS).sqrt();
                    inv_std[d] = F::from_f64(istd);
                    let m = F::from_f64(mean);
                    let s = F::from_f64(istd);
                    x_hat
                        .index_axis_mut(Axis(1), d)
                        .mapv_inplace(|v| (v - m) * s);
                }
            }
        }
        let g = bn.gamma1().to_owned();
        let b1: ndarray::ArrayView1<'_, F> = bn.beta.value.view().into_dimensionality().unwrap();
        let mut y = x_hat.clone();
        for d in 0..bn.dim {
            let gd = g[d];
            let bd = b1[d];
            y.index_axis_mut(Axis(1), d).mapv_inplace(|v| v * gd + bd);
        }
        Ok((
            y,
            BnCache {
                x_hat: x_hat.into_dyn(),
                inv_std,
                train: matches!(mode, BnMode::Train { .. }),
            },
        ))
    }

    pub fn backward(&mut self, cache: &BnCache<F>, gy: &Array2<F>) -> Array2<F> {
        assert!(cache.train, "backward through eval-mode batch norm");
        let bn = &mut self.0;
        let n = gy.nrows();
        let x_hat = cache.x_hat.view().into_dimensionality::<Ix2>().unwrap();
        let mut dx = Array2::<F>::zeros(gy.raw_dim());
        let inv_n = F::from_f64(1.0 / n as f64);
        for d in 0..bn.dim {
            let g = bn.gamma.value[d];
            let mut sum_dy = F::zero();
            let mut sum_dy_xhat = F::zero();
            for i in 0..n {
                let dyv = gy[[i, d]];
                sum_dy += dyv;
                sum_dy_xhat += dyv * x_hat[[i, d]];
            }
            bn.beta.grad[d] += sum_dy;
            bn.gamma.grad[d] += sum_dy_xhat;
            let mean_dy = sum_dy * inv_n;
            let mean_dy_xhat = sum_dy_xhat * inv_n;
            let scale = g * cache.inv_std[d];
            for i in 0..n {
                dx[[i, d]] = scale * (gy[[i, d]] - mean_dy - x_hat[[i, d]] * mean_dy_xhat);
            }
        }
        dx
    }

    pub fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut Param<F>>) {
        out.push(&mut self.0.gamma);
        out.push(&mut self.0.beta);
    }

    pub fn visit_params<'a>(&'a self, out: &mut Vec<&'a Param<F>>) {
        out.push(&self.0.gamma);
        out.push(&self.0.beta);
    }

    pub fn collect_buffers<'a>(&'a mut self, out: &mut Vec<&'a mut Buffer<F>>) {
        out.push(&mut self.0.running_mean);
        out.push(&mut self.0.running_var);
    }

    pub fn visit_buffers<'a>(&'a self, out: &mut Vec<&'a Buffer<F>>) {
        out.push(&self.0.running_mean);
        out.push(&self.0.running_var);
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d<F>(pub BatchNorm<F>);

impl<F: Scalar> BatchNorm2d<F> {
    pub fn new(name: &str, dim: usize) -> Self {
        BatchNorm2d(BatchNorm::new(name, dim))
    }

    pub fn forward(&mut self, x: &Array4<F>, mode: BnMode) -> Result<(Array4<F>, BnCache<F>)> {
        let bn = &mut self.0;
        let (n, c, h, w) = dim4(x);
        if c != bn.dim {
            return Err(Error::Dimension(format!(
                "{}: expected {} channels, got {c}",
                bn.name, bn.dim
            )));
        }
        let count = n * h * w;
        let mut x_hat = x.clone();
        let mut inv_std = Array1::<F>::zeros(c);
        for d in 0..c {
            let (mean, var) = match mode {
                BnMode::Train { .. } => {
                    let ch = x.index_axis(Axis(1), d);
                    BatchNorm::<F>::stats(ch.iter().cloned(), count)
                }
                BnMode::Eval => (
                    bn.running_mean.value[d].as_f64(),
                    bn.running_var.value[d].as_f64(),
                ),
            };
            if let BnMode::Train {
                update_running: true,
            } = mode
            {
                let rm = &mut bn.running_mean.value[d];
                *rm = F::from_f64(rm.as_f64() * (1.0 - BN_MOMENTUM) + mean * BN_MOMENTUM);
                let rv = &mut bn.running_var.value[d];
                *rv = F::from_f64(rv.as_f64() * (1.0 - BN_MOMENTUM) + var * BN_MOMENTUM);
            }
            let istd = 1.0 / (var + BN_EPS).sqrt();
            inv_std[d] = F::from_f64(istd);
            let m = F::from_f64(mean);
            let s = F::from_f64(istd);
            x_hat
                .index_axis_mut(Axis(1), d)
                .mapv_inplace(|v| (v - m) * s);
        }
        let mut y = x_hat.clone();
        for d in 0..c {
            let g = bn.gamma.value[d];
            let b = bn.beta.value[d];
            y.index_axis_mut(Axis(1), d).mapv_inplace(|v| v * g + b);
        }
        Ok((
            y,
            BnCache {
                x_hat: y_into_dyn(x_hat),
                inv_std,
                train: matches!(mode, BnMode::Train { .. }),
            },
        ))
    }

    pub fn backward(&mut self, cache: &BnCache<F>, gy: &Array4<F>) -> Array4<F> {
        assert!(cache.train, "backward through eval-mode batch norm");
        let bn = &mut self.0;
        let (n, c, h, w) = dim4(gy);
        let count = n * h * w;
        let x_hat = cache.x_hat.view().into_dimensionality::<Ix4>().unwrap();
        let mut dx = Array4::<F>::zeros(gy.raw_dim());
        let inv_m = F::from_f64(1.0 / count as f64);
        for d in 0..c {
            let gyc = gy.index_axis(Axis(1), d);
            let xhc = x_hat.index_axis(Axis(1), d);
            let mut sum_dy = F::zero();
            let mut sum_dy_xhat = F::zero();
            ndarray::Zip::from(&gyc).and(&xhc).for_each(|&dy, &xh| {
                sum_dy += dy;
                sum_dy_xhat += dy * xh;
            });
            bn.beta.grad[d] += sum_dy;
            bn.gamma.grad[d] += sum_dy_xhat;
            let mean_dy = sum_dy * inv_m;
            let mean_dy_xhat = sum_dy_xhat * inv_m;
            let scale = bn.gamma.value[d] * cache.inv_std[d];
            let mut dxc = dx.index_axis_mut(Axis(1), d);
            ndarray::Zip::from(&mut dxc)
                .and(&gyc)
                .and(&xhc)
                .for_each(|o, &dy, &xh| {
                    *o = scale * (dy - mean_dy - xh * mean_dy_xhat);
                });
        }
        dx
    }

    pub fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut Param<F>>) {
        out.push(&mut self.0.gamma);
        out.push(&mut self.0.beta);
    }

    pub fn visit_params<'a>(&'a self, out: &mut Vec<&'a Param<F>>) {
        out.push(&self.0.gamma);
        out.push(&self.0.beta);
    }

    pub fn collect_buffers<'a>(&'a mut self, out: &mut Vec<&'a mut Buffer<F>>) {
        out.push(&mut self.0.running_mean);
        out.push(&mut self.0.running_var);
    }

    pub fn visit_buffers<'a>(&'a self, out: &mut Vec<&'a Buffer<F>>) {
        out.push(&self.0.running_mean);
        out.push(&self.0.running_var);
    }
}

fn dim4<F>(x: &Array4<F>) -> (usize, usize, usize, usize) {
    let s = x.shape();
    (s[0], s[1], s[2], s[3])
}

fn y_into_dyn<F>(a: Array4<F>) -> ArrayD<F> {
    a.into_dyn()
}

// ---------------------------------------------------------------------------
// ReLU
// ---------------------------------------------------------------------------

pub fn relu2<F: Scalar>(x: &Array2<F>) -> Array2<F> {
    x.mapv(|v| v.max(F::zero()))
}

pub fn relu2_backward<F: Scalar>(y: &Array2<F>, gy: &Array2<F>) -> Array2<F> {
    let mut dx = gy.clone();
    ndarray::Zip::from(&mut dx).and(y).for_each(|d, &yv| {
        if yv <= F::zero() {
            *d = F::zero();
        }
    });
    dx
}

pub fn relu4<F: Scalar>(x: &Array4<F>) -> Array4<F> {
    x.mapv(|v| v.max(F::zero()))
}

pub fn relu4_backward<F: Scalar>(y: &Array4<F>, gy: &Array4<F>) -> Array4<F> {
    let mut dx = gy.clone();
    ndarray::Zip::from(&mut dx).and(y).for_each(|d, &yv| {
        if yv <= F::zero() {
            *d = F::zero();
        }
    });
    dx
}

// ---------------------------------------------------------------------------
// Conv2d (im2col + GEMM)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Conv2d<F> {
    pub name: String,
    pub weight: Param<F>, // [out, in, k, k]
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

pub struct ConvCache<F> {
    x: Array4<F>,
}

impl<F: Scalar> Conv2d<F> {
    pub fn new(
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = c_in * kernel * kernel;
        Conv2d {
            name: name.to_string(),
            weight: Param::new(
                format!("{name}.weight"),
                kaiming_uniform(&[c_out, c_in, kernel, kernel], fan_in, rng),
                ParamKind::Weight,
            ),
            c_in,
            c_out,
            kernel,
            stride,
            pad,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let he = h + 2 * self.pad;
        let we = w + 2 * self.pad;
        if he < self.kernel || we < self.kernel {
            return Err(Error::Dimension(format!(
                "{}: input {h}x{w} too small for kernel {}",
                self.name, self.kernel
            )));
        }
        Ok(((he - self.kernel) / self.stride + 1, (we - self.kernel) / self.stride + 1))
    }

    pub fn forward(&self, x: &Array4<F>) -> Result<(Array4<F>, ConvCache<F>)> {
        let (n, c, h, w) = dim4(x);
        if c != self.c_in {
            return Err(Error::Dimension(format!(
                "{}: expected {} input channels, got {c}",
                self.name, self.c_in
            )));
        }
        let (oh, ow) = self.out_hw(h, w)?;
        let col = im2col(x, self.kernel, self.stride, self.pad, oh, ow);
        let w2 = self
            .weight
            .value
            .view()
            .into_shape_with_order((self.c_out, self.c_in * self.kernel * self.kernel))
            .expect("conv weight is contiguous");
        let y2 = col.dot(&w2.t()); // [n*oh*ow, c_out]
        let y = y2
            .into_shape_with_order((n, oh, ow, self.c_out))
            .unwrap()
            .permuted_axes([0, 3, 1, 2])
            .as_standard_layout()
            .to_owned();
        Ok((y, ConvCache { x: x.clone() }))
    }

    /// Accumulates the weight gradient; returns dx unless `need_dx` is false
    /// (the first layer of a backbone skips it).
    pub fn backward(
        &mut self,
        cache: &ConvCache<F>,
        gy: &Array4<F>,
        need_dx: bool,
    ) -> Option<Array4<F>> {
        let (n, _c, h, w) = dim4(&cache.x);
        let (_, _, oh, ow) = dim4(gy);
        let gy2 = gy
            .view()
            .permuted_axes([0, 2, 3, 1])
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order((n * oh * ow, self.c_out))
            .unwrap();
        let col = im2col(&cache.x, self.kernel, self.stride, self.pad, oh, ow);
        let dw2 = gy2.t().dot(&col); // [c_out, c_in*k*k]
        self.weight
            .grad
            .view_mut()
            .into_shape_with_order((self.c_out, self.c_in * self.kernel * self.kernel))
            .unwrap()
            .scaled_add(F::one(), &dw2);
        if !need_dx {
            return None;
        }
        let w2 = self
            .weight
            .value
            .view()
            .into_shape_with_order((self.c_out, self.c_in * self.kernel * self.kernel))
            .unwrap();
        let dcol = gy2.dot(&w2); // [n*oh*ow, c_in*k*k]
        Some(col2im(
            &dcol,
            n,
            self.c_in,
            h,
            w,
            self.kernel,
            self.stride,
            self.pad,
            oh,
            ow,
        ))
    }

    pub fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut Param<F>>) {
        out.push(&mut self.weight);
    }

    pub fn visit_params<'a>(&'a self, out: &mut Vec<&'a Param<F>>) {
        out.push(&self.weight);
    }
}

fn im2col<F: Scalar>(
    x: &Array4<F>,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<F> {
    let (n, c, h, w) = dim4(x);
    let row_len = c * k * k;
    let mut col = Array2::<F>::zeros((n * oh * ow, row_len));
    let xs = x.as_slice().expect("input is standard layout");
    let cs = col.as_slice_mut().unwrap();
    for ni in 0..n {
        let x_n = &xs[ni * c * h * w..(ni + 1) * c * h * w];
        for oy in 0..oh {
            let iy0 = (oy * stride) as isize - pad as isize;
            for ox in 0..ow {
                let ix0 = (ox * stride) as isize - pad as isize;
                let row_off = ((ni * oh + oy) * ow + ox) * row_len;
                for ci in 0..c {
                    let x_c = &x_n[ci * h * w..(ci + 1) * h * w];
                    let base = row_off + ci * k * k;
                    for ky in 0..k {
                        let iy = iy0 + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = iy as usize * w;
                        let dst = base + ky * k;
                        for kx in 0..k {
                            let ix = ix0 + kx as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            cs[dst + kx] = x_c[src_row + ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

#[allow(clippy::too_many_arguments)]
fn col2im<F: Scalar>(
    dcol: &Array2<F>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array4<F> {
    let row_len = c * k * k;
    let mut dx = Array4::<F>::zeros((n, c, h, w));
    let ds = dcol.as_slice().expect("dcol is standard layout");
    let xs = dx.as_slice_mut().unwrap();
    for ni in 0..n {
        let x_off = ni * c * h * w;
        for oy in 0..oh {
            let iy0 = (oy * stride) as isize - pad as isize;
            for ox in 0..ow {
                let ix0 = (ox * stride) as isize - pad as isize;
                let row_off = ((ni * oh + oy) * ow + ox) * row_len;
                for ci in 0..c {
                    let base = row_off + ci * k * k;
                    let x_c = x_off + ci * h * w;
                    for ky in 0..k {
                        let iy = iy0 + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst_row = x_c + iy as usize * w;
                        let src = base + ky * k;
                        for kx in 0..k {
                            let ix = ix0 + kx as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            xs[dst_row + ix as usize] += ds[src + kx];
                        }
                    }
                }
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Global average pooling
// ---------------------------------------------------------------------------

pub fn global_avg_pool<F: Scalar>(x: &Array4<F>) -> (Array2<F>, (usize, usize)) {
    let (n, c, h, w) = dim4(x);
    let inv = F::from_f64(1.0 / (h * w) as f64);
    let mut y = Array2::<F>::zeros((n, c));
    for ni in 0..n {
        for ci in 0..c {
            let mut acc = F::zero();
            for v in x.index_axis(Axis(0), ni).index_axis(Axis(0), ci).iter() {
                acc += *v;
            }
            y[[ni, ci]] = acc * inv;
        }
    }
    (y, (h, w))
}

pub fn global_avg_pool_backward<F: Scalar>(gy: &Array2<F>, hw: (usize, usize)) -> Array4<F> {
    let (n, c) = (gy.nrows(), gy.ncols());
    let (h, w) = hw;
    let inv = F::from_f64(1.0 / (h * w) as f64);
    let mut dx = Array4::<F>::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            let g = gy[[ni, ci]] * inv;
            dx.index_axis_mut(Axis(0), ni)
                .index_axis_mut(Axis(0), ci)
                .fill(g);
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng() -> Rng {
        Rng::new(7)
    }

    #[test]
    fn linear_forward_shape_and_bias() {
        let mut r = rng();
        let lin = Linear::<f64>::new("l", 4, 3, true, &mut r);
        let x = Array2::from_shape_fn((2, 4), |(i, j)| (i + j) as f64 * 0.1);
        let (y, _) = lin.forward(&x).unwrap();
        assert_eq!(y.shape(), &[2, 3]);
        let bad = Array2::<f64>::zeros((2, 5));
        assert!(lin.forward(&bad).is_err());
    }

    #[test]
    fn linear_grad_matches_finite_difference() {
        let mut r = rng();
        let mut lin = Linear::<f64>::new("l", 3, 2, true, &mut r);
        let x = Array2::from_shape_fn((4, 3), |(i, j)| ((i * 3 + j) as f64).sin());
        // loss = sum(y^2) / 2
        let (y, cache) = lin.forward(&x).unwrap();
        let gy = y.clone();
        lin.backward(&cache, &gy);
        let eps = 1e-6;
        let w0 = lin.weight.value.clone();
        for idx in 0..w0.len() {
            let flat = lin.weight.value.as_slice_mut().unwrap();
            let orig = flat[idx];
            flat[idx] = orig + eps;
            let (yp, _) = lin.forward(&x).unwrap();
            let lp: f64 = yp.iter().map(|v| v * v).sum::<f64>() / 2.0;
            lin.weight.value.as_slice_mut().unwrap()[idx] = orig - eps;
            let (ym, _) = lin.forward(&x).unwrap();
            let lm: f64 = ym.iter().map(|v| v * v).sum::<f64>() / 2.0;
            lin.weight.value.as_slice_mut().unwrap()[idx] = orig;
            let num = (lp - lm) / (2.0 * eps);
            let ana = lin.weight.grad.as_slice().unwrap()[idx];
            assert!(
                (num - ana).abs() <= 1e-6 * (1.0 + num.abs()),
                "w[{idx}] num {num} vs ana {ana}"
            );
        }
    }

    #[test]
    fn bn1d_normalizes_per_column() {
        let mut bn = BatchNorm1d::<f64>::new("bn", 3);
        let x = Array2::from_shape_fn((8, 3), |(i, j)| (i as f64) * (j as f64 + 1.0));
        let (y, _) = bn
            .forward(&x, BnMode::Train { update_running: true })
            .unwrap();
        for d in 0..3 {
            let col = y.index_axis(Axis(1), d);
            let mean: f64 = col.iter().sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-9, "col {d} mean {mean}");
        }
    }

    #[test]
    fn bn1d_batch_of_one_yields_beta() {
        let mut bn = BatchNorm1d::<f32>::new("bn", 2);
        let x = Array2::from_shape_fn((1, 2), |(_, j)| 5.0 + j as f32);
        let (y, _) = bn
            .forward(&x, BnMode::Train { update_running: false })
            .unwrap();
        for &v in y.iter() {
            assert!(v.is_finite());
            assert!(v.abs() < 1e-2);
        }
    }

    #[test]
    fn bn1d_grad_matches_finite_difference() {
        let mut bn = BatchNorm1d::<f64>::new("bn", 2);
        bn.0.gamma.value[0] = 1.3;
        bn.0.gamma.value[1] = 0.7;
        bn.0.beta.value[0] = 0.2;
        let x = Array2::from_shape_fn((5, 2), |(i, j)| ((i * 2 + j) as f64 * 0.7).cos());
        let loss = |bn: &mut BatchNorm1d<f64>, x: &Array2<f64>| {
            let (y, _) = bn
                .forward(x, BnMode::Train { update_running: false })
                .unwrap();
            y.iter().enumerate().map(|(i, v)| v * v * (i as f64 + 1.0)).sum::<f64>() / 2.0
        };
        let (y, cache) = bn
            .forward(&x, BnMode::Train { update_running: false })
            .unwrap();
        let mut gy = y.clone();
        for (i, v) in gy.iter_mut().enumerate() {
            *v *= i as f64 + 1.0;
        }
        let dx = bn.backward(&cache, &gy);
        let eps = 1e-6;
        // input gradient
        let mut x2 = x.clone();
        for idx in 0..x2.len() {
            let (r, c) = (idx / 2, idx % 2);
            let orig = x2[[r, c]];
            x2[[r, c]] = orig + eps;
            let lp = loss(&mut bn, &x2);
            x2[[r, c]] = orig - eps;
            let lm = loss(&mut bn, &x2);
            x2[[r, c]] = orig;
            let num = (lp - lm) / (2.0 * eps);
            assert!(
                (num - dx[[r, c]]).abs() <= 1e-5 * (1.0 + num.abs()),
                "dx[{r},{c}] num {num} vs ana {}",
                dx[[r, c]]
            );
        }
        // gamma gradient
        for d in 0..2 {
            let orig = bn.0.gamma.value[d];
            bn.0.gamma.value[d] = orig + eps;
            let lp = loss(&mut bn, &x);
            bn.0.gamma.value[d] = orig - eps;
            let lm = loss(&mut bn, &x);
            bn.0.gamma.value[d] = orig;
            let num = (lp - lm) / (2.0 * eps);
            let ana = bn.0.gamma.grad[d];
            assert!((num - ana).abs() <= 1e-6 * (1.0 + num.abs()));
        }
    }

    #[test]
    fn conv_identity_kernel_passes_input_through() {
        let mut r = rng();
        let mut conv = Conv2d::<f64>::new("c", 1, 1, 3, 1, 1, &mut r);
        conv.weight.value.fill(0.0);
        conv.weight.value[[0, 0, 1, 1]] = 1.0;
        let x = Array4::from_shape_fn((1, 1, 4, 4), |(_, _, y, x)| (y * 4 + x) as f64);
        let (y, _) = conv.forward(&x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_stride_two_shape() {
        let mut r = rng();
        let conv = Conv2d::<f32>::new("c", 3, 8, 3, 2, 1, &mut r);
        let x = Array4::<f32>::zeros((2, 3, 16, 16));
        let (y, _) = conv.forward(&x).unwrap();
        assert_eq!(y.shape(), &[2, 8, 8, 8]);
        let bad = Array4::<f32>::zeros((2, 4, 16, 16));
        assert!(conv.forward(&bad).is_err());
    }

    #[test]
    fn conv_grad_matches_finite_difference() {
        let mut r = rng();
        let mut conv = Conv2d::<f64>::new("c", 2, 3, 3, 2, 1, &mut r);
        let x = Array4::from_shape_fn((2, 2, 5, 5), |(n, c, y, x)| {
            ((n * 50 + c * 25 + y * 5 + x) as f64 * 0.31).sin()
        });
        let (y, cache) = conv.forward(&x).unwrap();
        let gy = y.clone(); // loss = sum(y^2)/2
        let dx = conv.backward(&cache, &gy, true).unwrap();
        let eps = 1e-6;
        let loss = |conv: &Conv2d<f64>, x: &Array4<f64>| {
            let (y, _) = conv.forward(x).unwrap();
            y.iter().map(|v| v * v).sum::<f64>() / 2.0
        };
        // a sample of weight coordinates
        for idx in [0usize, 5, 11, 17, 26, 35, 44, 53] {
            let orig = conv.weight.value.as_slice().unwrap()[idx];
            conv.weight.value.as_slice_mut().unwrap()[idx] = orig + eps;
            let lp = loss(&conv, &x);
            conv.weight.value.as_slice_mut().unwrap()[idx] = orig - eps;
            let lm = loss(&conv, &x);
            conv.weight.value.as_slice_mut().unwrap()[idx] = orig;
            let num = (lp - lm) / (2.0 * eps);
            let ana = conv.weight.grad.as_slice().unwrap()[idx];
            assert!(
                (num - ana).abs() <= 1e-5 * (1.0 + num.abs()),
                "w[{idx}] num {num} ana {ana}"
            );
        }
        // a sample of input coordinates
        let mut x2 = x.clone();
        for idx in [0usize, 7, 23, 49, 77, 99] {
            let orig = x2.as_slice().unwrap()[idx];
            x2.as_slice_mut().unwrap()[idx] = orig + eps;
            let lp = loss(&conv, &x2);
            x2.as_slice_mut().unwrap()[idx] = orig - eps;
            let lm = loss(&conv, &x2);
            x2.as_slice_mut().unwrap()[idx] = orig;
            let num = (lp - lm) / (2.0 * eps);
            let ana = dx.as_slice().unwrap()[idx];
            assert!(
                (num - ana).abs() <= 1e-5 * (1.0 + num.abs()),
                "x[{idx}] num {num} ana {ana}"
            );
        }
    }

    #[test]
    fn gap_mean_and_backward() {
        let x = Array4::from_shape_fn((1, 2, 2, 2), |(_, c, y, x)| (c * 4 + y * 2 + x) as f64);
        let (y, hw) = global_avg_pool(&x);
        assert_eq!(y[[0, 0]], 1.5);
        assert_eq!(y[[0, 1]], 5.5);
        let gy = Array2::from_elem((1, 2), 4.0);
        let dx = global_avg_pool_backward(&gy, hw);
        assert!(dx.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn relu_masks_negative() {
        let x = Array2::from_shape_vec((1, 4), vec![-1.0, 0.0, 0.5, 2.0]).unwrap();
        let y = relu2(&x);
        assert_eq!(y.as_slice().unwrap(), &[0.0, 0.0, 0.5, 2.0]);
        let gy = Array2::from_elem((1, 4), 1.0);
        let dx = relu2_backward(&y, &gy);
        assert_eq!(dx.as_slice().unwrap(), &[0.0, 0.0, 1.0, 1.0]);
    }
}
