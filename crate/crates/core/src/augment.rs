//! Stochastic view generation.
//!
//! One image batch becomes three independently augmented views drawn from
//! the same transform family: random resized crop, horizontal flip, color
//! jitter, random grayscale, Gaussian blur, then per-channel normalization.
//! The whole pipeline is a pure function of `(batch, policy, seed)`.

use ndarray::{Array3, Array4, ArrayView3, Axis};

use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::rng::{substream, Rng};
use crate::scalar::Scalar;

/// Transform family parameters. The same policy drives all three views;
/// each view takes independent random draws.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentPolicy {
    /// Area fraction range for the random resized crop, in (0, 1].
    pub crop_scale_range: (f64, f64),
    pub flip_prob: f64,
    /// Jitter strengths: brightness, contrast, saturation, hue.
    pub jitter: (f64, f64, f64, f64),
    pub color_jitter_prob: f64,
    pub grayscale_prob: f64,
    /// Odd Gaussian kernel width.
    pub blur_kernel: usize,
    pub blur_sigma_range: (f64, f64),
    pub blur_prob: f64,
    /// Output height and width; both must be even (the patch divide
    /// downstream splits views into a 2x2 grid).
    pub output_hw: (usize, usize),
    /// Per-channel normalization constants on the [0, 1] pixel scale.
    pub norm_mean: Vec<f64>,
    pub norm_std: Vec<f64>,
}

impl AugmentPolicy {
    /// Reference policy for 3-channel images of side `side`: crop scale
    /// [0.2, 1], flip 0.5, jitter (0.4, 0.4, 0.4, 0.1) at 0.8, grayscale 0.2,
    /// blur covering ~10% of the side at 0.5.
    pub fn standard(side: usize) -> Self {
        let k = ((side as f64 * 0.1).round() as usize).max(3) | 1;
        AugmentPolicy {
            crop_scale_range: (0.2, 1.0),
            flip_prob: 0.5,
            jitter: (0.4, 0.4, 0.4, 0.1),
            color_jitter_prob: 0.8,
            grayscale_prob: 0.2,
            blur_kernel: k,
            blur_sigma_range: (0.1, 2.0),
            blur_prob: 0.5,
            output_hw: (side, side),
            norm_mean: vec![0.4914, 0.4822, 0.4465],
            norm_std: vec![0.2470, 0.2435, 0.2616],
        }
    }

    /// Pass-through policy: no geometric or photometric change, unit
    /// normalization.
    pub fn identity(channels: usize, side: usize) -> Self {
        AugmentPolicy {
            crop_scale_range: (1.0, 1.0),
            flip_prob: 0.0,
            jitter: (0.0, 0.0, 0.0, 0.0),
            color_jitter_prob: 0.0,
            grayscale_prob: 0.0,
            blur_kernel: 3,
            blur_sigma_range: (0.1, 2.0),
            blur_prob: 0.0,
            output_hw: (side, side),
            norm_mean: vec![0.0; channels],
            norm_std: vec![1.0; channels],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("flip_prob", self.flip_prob),
            ("color_jitter_prob", self.color_jitter_prob),
            ("grayscale_prob", self.grayscale_prob),
            ("blur_prob", self.blur_prob),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Parameter(format!("{name} {p} outside [0,1]")));
            }
        }
        let (s0, s1) = self.crop_scale_range;
        if !(s0 > 0.0 && s0 <= s1 && s1 <= 1.0) {
            return Err(Error::Parameter(format!(
                "crop_scale_range ({s0}, {s1}) must satisfy 0 < lo <= hi <= 1"
            )));
        }
        if self.blur_kernel == 0 || self.blur_kernel % 2 == 0 {
            return Err(Error::Parameter(format!(
                "blur_kernel {} must be odd and >= 1",
                self.blur_kernel
            )));
        }
        if self.blur_sigma_range.0 <= 0.0 || self.blur_sigma_range.0 > self.blur_sigma_range.1 {
            return Err(Error::Parameter("invalid blur_sigma_range".into()));
        }
        let (h, w) = self.output_hw;
        if h == 0 || w == 0 || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Parameter(format!(
                "output_hw ({h}, {w}) must be positive and even"
            )));
        }
        if self.norm_mean.len() != self.norm_std.len() {
            return Err(Error::Parameter("norm_mean/norm_std length mismatch".into()));
        }
        if self.norm_std.iter().any(|&s| s <= 0.0) {
            return Err(Error::Parameter("norm_std entries must be positive".into()));
        }
        Ok(())
    }
}

/// Three views of one batch, same row order, independent draws.
#[derive(Debug, Clone)]
pub struct ViewTriple<F> {
    pub x1: ImageBatch<F>,
    pub x2: ImageBatch<F>,
    pub x3: ImageBatch<F>,
}

/// Applies one augmentation draw per image. Deterministic in `seed`.
pub fn augment_view<F: Scalar>(
    batch: &ImageBatch<F>,
    policy: &AugmentPolicy,
    seed: u64,
) -> Result<ImageBatch<F>> {
    policy.validate()?;
    if batch.is_empty() {
        return Err(Error::Parameter("augment_view: empty batch".into()));
    }
    let (n, c, h, w) = {
        let s = batch.data.shape();
        (s[0], s[1], s[2], s[3])
    };
    if policy.norm_mean.len() != c {
        return Err(Error::Dimension(format!(
            "normalization constants cover {} channels, batch has {c}",
            policy.norm_mean.len()
        )));
    }
    if (policy.crop_scale_range.0 * (h * w) as f64) < 1.0 {
        return Err(Error::Parameter(format!(
            "crop window degenerates below 1 pixel: scale {} on {h}x{w} input",
            policy.crop_scale_range.0
        )));
    }
    let (oh, ow) = policy.output_hw;
    let mut out = Array4::<F>::zeros((n, c, oh, ow));
    for i in 0..n {
        let mut rng = Rng::for_stream(seed, "augview", &[i as u64]);
        let img = batch.data.index_axis(Axis(0), i);
        let aug = augment_image(&img, policy, &mut rng);
        out.index_axis_mut(Axis(0), i).assign(&aug);
    }
    Ok(ImageBatch {
        data: out,
        indices: batch.indices.clone(),
    })
}

/// Draws the three views `x1, x2, x3` with seed-derived substreams.
pub fn make_triple<F: Scalar>(
    batch: &ImageBatch<F>,
    policy: &AugmentPolicy,
    seed: u64,
) -> Result<ViewTriple<F>> {
    let x1 = augment_view(batch, policy, substream(seed, "view", &[1]))?;
    let x2 = augment_view(batch, policy, substream(seed, "view", &[2]))?;
    let x3 = augment_view(batch, policy, substream(seed, "view", &[3]))?;
    Ok(ViewTriple { x1, x2, x3 })
}

/// Normalization only: the evaluation-time transform.
pub fn normalize_batch<F: Scalar>(batch: &ImageBatch<F>, policy: &AugmentPolicy) -> ImageBatch<F> {
    let mut data = batch.data.clone();
    apply_normalization(&mut data, policy);
    ImageBatch {
        data,
        indices: batch.indices.clone(),
    }
}

fn apply_normalization<F: Scalar>(data: &mut Array4<F>, policy: &AugmentPolicy) {
    for ch in 0..data.shape()[1] {
        let mean = F::from_f64(policy.norm_mean[ch]);
        let inv_std = F::from_f64(1.0 / policy.norm_std[ch]);
        data.index_axis_mut(Axis(1), ch)
            .mapv_inplace(|v| (v - mean) * inv_std);
    }
}

fn augment_image<F: Scalar>(
    img: &ArrayView3<F>,
    policy: &AugmentPolicy,
    rng: &mut Rng,
) -> Array3<F> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let (oh, ow) = policy.output_hw;

    let (cy, cx, ch, cw) = sample_crop(h, w, policy.crop_scale_range, rng);
    let mut out = crop_resize(img, cy, cx, ch, cw, oh, ow);

    if rng.chance(policy.flip_prob) {
        out.invert_axis(Axis(2));
    }
    if rng.chance(policy.color_jitter_prob) {
        color_jitter(&mut out, policy.jitter, rng);
    }
    if c == 3 && rng.chance(policy.grayscale_prob) {
        to_grayscale(&mut out);
    }
    if rng.chance(policy.blur_prob) {
        let sigma = rng.uniform_range(policy.blur_sigma_range.0, policy.blur_sigma_range.1);
        gaussian_blur(&mut out, policy.blur_kernel, sigma);
    }
    for ch_i in 0..c {
        let mean = F::from_f64(policy.norm_mean[ch_i]);
        let inv_std = F::from_f64(1.0 / policy.norm_std[ch_i]);
        out.index_axis_mut(Axis(0), ch_i)
            .mapv_inplace(|v| (v - mean) * inv_std);
    }
    out
}

/// Random resized crop window: samples an area fraction and an aspect ratio
/// in [3/4, 4/3]; falls back to the full frame after ten failed attempts,
/// which also makes a (1, 1) scale range an exact identity.
fn sample_crop(h: usize, w: usize, scale: (f64, f64), rng: &mut Rng) -> (usize, usize, usize, usize) {
    let area = (h * w) as f64;
    const LOG_RATIO: (f64, f64) = (-0.287_682_072_451_780_9, 0.287_682_072_451_780_9); // ln(3/4), ln(4/3)
    for _ in 0..10 {
        let target = area * rng.uniform_range(scale.0, scale.1);
        let aspect = rng.uniform_range(LOG_RATIO.0, LOG_RATIO.1).exp();
        let cw = (target * aspect).sqrt().round() as usize;
        let ch = (target / aspect).sqrt().round() as usize;
        if cw >= 1 && ch >= 1 && cw <= w && ch <= h {
            let cy = rng.below(h - ch + 1);
            let cx = rng.below(w - cw + 1);
            return (cy, cx, ch, cw);
        }
    }
    (0, 0, h, w)
}

/// Bilinear resize of the crop window to (oh, ow). A same-size window is a
/// plain copy so identity policies stay bit-exact.
fn crop_resize<F: Scalar>(
    img: &ArrayView3<F>,
    cy: usize,
    cx: usize,
    ch: usize,
    cw: usize,
    oh: usize,
    ow: usize,
) -> Array3<F> {
    let c = img.shape()[0];
    let mut out = Array3::<F>::zeros((c, oh, ow));
    if ch == oh && cw == ow {
        for ci in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    out[[ci, y, x]] = img[[ci, cy + y, cx + x]];
                }
            }
        }
        return out;
    }
    let sy = ch as f64 / oh as f64;
    let sx = cw as f64 / ow as f64;
    for y in 0..oh {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (ch - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(ch - 1);
        let wy = F::from_f64(fy - y0 as f64);
        for x in 0..ow {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (cw - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(cw - 1);
            let wx = F::from_f64(fx - x0 as f64);
            for ci in 0..c {
                let a = img[[ci, cy + y0, cx + x0]];
                let b = img[[ci, cy + y0, cx + x1]];
                let d = img[[ci, cy + y1, cx + x0]];
                let e = img[[ci, cy + y1, cx + x1]];
                let top = a + (b - a) * wx;
                let bot = d + (e - d) * wx;
                out[[ci, y, x]] = top + (bot - top) * wy;
            }
        }
    }
    out
}

fn luma<F: Scalar>(r: F, g: F, b: F) -> F {
    r * F::from_f64(0.299) + g * F::from_f64(0.587) + b * F::from_f64(0.114)
}

fn clamp01<F: Scalar>(v: F) -> F {
    v.max(F::zero()).min(F::one())
}

/// Brightness, contrast, saturation, hue in a random order; each factor is
/// drawn fresh. Values are clamped back to [0, 1] after every op.
fn color_jitter<F: Scalar>(img: &mut Array3<F>, strengths: (f64, f64, f64, f64), rng: &mut Rng) {
    let order = rng.permutation(4);
    let (b, c, s, h) = strengths;
    for op in order {
        match op {
            0 if b > 0.0 => {
                let f = F::from_f64(rng.uniform_range((1.0 - b).max(0.0), 1.0 + b));
                img.mapv_inplace(|v| clamp01(v * f));
            }
            1 if c > 0.0 => {
                let f = F::from_f64(rng.uniform_range((1.0 - c).max(0.0), 1.0 + c));
                let mean = F::from_f64(gray_mean(img));
                img.mapv_inplace(|v| clamp01((v - mean) * f + mean));
            }
            2 if s > 0.0 && img.shape()[0] == 3 => {
                let f = F::from_f64(rng.uniform_range((1.0 - s).max(0.0), 1.0 + s));
                per_pixel_rgb(img, |r, g, bch| {
                    let l = luma(r, g, bch);
                    (
                        clamp01((r - l) * f + l),
                        clamp01((g - l) * f + l),
                        clamp01((bch - l) * f + l),
                    )
                });
            }
            3 if h > 0.0 && img.shape()[0] == 3 => {
                let shift = rng.uniform_range(-h, h);
                per_pixel_rgb(img, |r, g, b_| hue_shift(r, g, b_, shift));
            }
            _ => {}
        }
    }
}

fn gray_mean<F: Scalar>(img: &Array3<F>) -> f64 {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let mut acc = 0.0f64;
    if c == 3 {
        for y in 0..h {
            for x in 0..w {
                acc += luma(img[[0, y, x]], img[[1, y, x]], img[[2, y, x]]).as_f64();
            }
        }
        acc / (h * w) as f64
    } else {
        img.iter().map(|v| v.as_f64()).sum::<f64>() / (c * h * w) as f64
    }
}

fn per_pixel_rgb<F: Scalar>(img: &mut Array3<F>, f: impl Fn(F, F, F) -> (F, F, F)) {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    for y in 0..h {
        for x in 0..w {
            let (r, g, b) = (img[[0, y, x]], img[[1, y, x]], img[[2, y, x]]);
            let (r2, g2, b2) = f(r, g, b);
            img[[0, y, x]] = r2;
            img[[1, y, x]] = g2;
            img[[2, y, x]] = b2;
        }
    }
}

/// Rotates hue by `shift` turns through HSV space.
fn hue_shift<F: Scalar>(r: F, g: F, b: F, shift: f64) -> (F, F, F) {
    let (rf, gf, bf) = (r.as_f64(), g.as_f64(), b.as_f64());
    let max = rf.max(gf).max(bf);
    let min = rf.min(gf).min(bf);
    let delta = max - min;
    let mut hue = if delta == 0.0 {
        0.0
    } else if max == rf {
        ((gf - bf) / delta).rem_euclid(6.0)
    } else if max == gf {
        (bf - rf) / delta + 2.0
    } else {
        (rf - gf) / delta + 4.0
    } / 6.0;
    let sat = if max == 0.0 { 0.0 } else { delta / max };
    let val = max;
    hue = (hue + shift).rem_euclid(1.0);
    let hh = hue * 6.0;
    let i = hh.floor() as i64 % 6;
    let f = hh - hh.floor();
    let p = val * (1.0 - sat);
    let q = val * (1.0 - sat * f);
    let t = val * (1.0 - sat * (1.0 - f));
    let (r2, g2, b2) = match i {
        0 => (val, t, p),
        1 => (q, val, p),
        2 => (p, val, t),
        3 => (p, q, val),
        4 => (t, p, val),
        _ => (val, p, q),
    };
    (
        clamp01(F::from_f64(r2)),
        clamp01(F::from_f64(g2)),
        clamp01(F::from_f64(b2)),
    )
}

fn to_grayscale<F: Scalar>(img: &mut Array3<F>) {
    per_pixel_rgb(img, |r, g, b| {
        let l = luma(r, g, b);
        (l, l, l)
    });
}

/// Separable Gaussian blur with clamp-to-edge padding.
fn gaussian_blur<F: Scalar>(img: &mut Array3<F>, kernel: usize, sigma: f64) {
    let r = kernel / 2;
    let mut weights = vec![0.0f64; kernel];
    let mut sum = 0.0;
    for (i, wgt) in weights.iter_mut().enumerate() {
        let d = i as f64 - r as f64;
        *wgt = (-d * d / (2.0 * sigma * sigma)).exp();
        sum += *wgt;
    }
    let weights: Vec<F> = weights.iter().map(|&w| F::from_f64(w / sum)).collect();
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let mut tmp = Array3::<F>::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = F::zero();
                for (k, &wgt) in weights.iter().enumerate() {
                    let yy = (y as isize + k as isize - r as isize).clamp(0, h as isize - 1);
                    acc += img[[ci, yy as usize, x]] * wgt;
                }
                tmp[[ci, y, x]] = acc;
            }
        }
    }
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = F::zero();
                for (k, &wgt) in weights.iter().enumerate() {
                    let xx = (x as isize + k as isize - r as isize).clamp(0, w as isize - 1);
                    acc += tmp[[ci, y, xx as usize]] * wgt;
                }
                img[[ci, y, x]] = acc;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn test_batch(n: usize, side: usize) -> ImageBatch<f32> {
        let data = Array4::from_shape_fn((n, 3, side, side), |(i, c, y, x)| {
            (((i * 31 + c * 17 + y * 5 + x * 3) % 97) as f32) / 96.0
        });
        ImageBatch {
            data,
            indices: (0..n).collect(),
        }
    }

    #[test]
    fn identity_policy_is_identity() {
        let batch = test_batch(3, 8);
        let policy = AugmentPolicy::identity(3, 8);
        let out = augment_view(&batch, &policy, 123).unwrap();
        assert_eq!(batch.data, out.data);
    }

    #[test]
    fn flip_only_is_a_mirror_and_an_involution() {
        let batch = test_batch(2, 8);
        let mut policy = AugmentPolicy::identity(3, 8);
        policy.flip_prob = 1.0;
        let once = augment_view(&batch, &policy, 7).unwrap();
        assert_eq!(once.data[[0, 0, 0, 0]], batch.data[[0, 0, 0, 7]]);
        let twice = augment_view(&once, &policy, 99).unwrap();
        assert_eq!(twice.data, batch.data);
    }

    #[test]
    fn deterministic_under_seed() {
        let batch = test_batch(4, 16);
        let policy = AugmentPolicy::standard(16);
        let a = augment_view(&batch, &policy, 42).unwrap();
        let b = augment_view(&batch, &policy, 42).unwrap();
        assert_eq!(a.data, b.data);
        let c = augment_view(&batch, &policy, 43).unwrap();
        assert_ne!(a.data, c.data);
    }

    #[test]
    fn output_shape_and_normalized_range() {
        let batch = test_batch(2, 16);
        let policy = AugmentPolicy::standard(16);
        let out = augment_view(&batch, &policy, 5).unwrap();
        assert_eq!(out.data.shape(), &[2, 3, 16, 16]);
        for ch in 0..3 {
            let lo = (0.0 - policy.norm_mean[ch]) / policy.norm_std[ch];
            let hi = (1.0 - policy.norm_mean[ch]) / policy.norm_std[ch];
            for &v in out.data.index_axis(Axis(1), ch).iter() {
                assert!(v.is_finite());
                assert!(v >= lo as f32 - 1e-4 && v <= hi as f32 + 1e-4, "v={v}");
            }
        }
    }

    #[test]
    fn triple_identity_policy_collapses_to_input() {
        let batch = test_batch(2, 8);
        let policy = AugmentPolicy::identity(3, 8);
        let t = make_triple(&batch, &policy, 11).unwrap();
        assert_eq!(t.x1.data, batch.data);
        assert_eq!(t.x2.data, batch.data);
        assert_eq!(t.x3.data, batch.data);
    }

    #[test]
    fn triple_nontrivial_policy_views_differ() {
        let batch = test_batch(2, 16);
        let policy = AugmentPolicy::standard(16);
        let t = make_triple(&batch, &policy, 3).unwrap();
        assert_ne!(t.x1.data, t.x2.data);
        assert_ne!(t.x1.data, t.x3.data);
    }

    #[test]
    fn empty_batch_rejected() {
        let batch = ImageBatch::<f32> {
            data: Array4::zeros((0, 3, 8, 8)),
            indices: vec![],
        };
        assert!(matches!(
            augment_view(&batch, &AugmentPolicy::identity(3, 8), 1),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn degenerate_crop_is_a_parameter_error() {
        let batch = test_batch(1, 2);
        let mut policy = AugmentPolicy::identity(3, 2);
        policy.crop_scale_range = (0.1, 0.1);
        assert!(matches!(
            augment_view(&batch, &policy, 1),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn odd_output_rejected() {
        let mut policy = AugmentPolicy::identity(3, 8);
        policy.output_hw = (7, 8);
        assert!(policy.validate().is_err());
    }

    #[test]
    fn blur_preserves_constant_images() {
        let mut img = Array3::<f32>::from_elem((3, 8, 8), 0.37);
        gaussian_blur(&mut img, 3, 1.0);
        for &v in img.iter() {
            assert!((v - 0.37).abs() < 1e-6);
        }
    }

    #[test]
    fn grayscale_makes_channels_equal() {
        let batch = test_batch(1, 8);
        let mut policy = AugmentPolicy::identity(3, 8);
        policy.grayscale_prob = 1.0;
        let out = augment_view(&batch, &policy, 2).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let r = out.data[[0, 0, y, x]];
                assert_eq!(r, out.data[[0, 1, y, x]]);
                assert_eq!(r, out.data[[0, 2, y, x]]);
            }
        }
    }

    #[test]
    fn hue_shift_of_zero_is_near_identity() {
        let (r, g, b) = hue_shift(0.2f64, 0.7, 0.4, 0.0);
        assert!((r - 0.2).abs() < 1e-9 && (g - 0.7).abs() < 1e-9 && (b - 0.4).abs() < 1e-9);
    }
}
