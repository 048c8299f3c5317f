//! Synthetic shape dataset in the CIFAR binary layout.
//!
//! Ten classes defined purely by shape (filled square, ring, X, plus,
//! diamond, horizontal stripes, vertical stripes, checker, T, L); color,
//! position, scale, background, distractor rectangles, and pixel noise are
//! all nuisance. Class identity survives cropping and color jitter, which
//! is exactly the invariance the contrastive pretraining rewards, while
//! color statistics carry no label information at all.

use ndarray::Array4;

use crate::data::{write_dataset, Dataset, Split};
use crate::error::Result;
use crate::rng::Rng;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy)]
pub struct SynthSpec {
    pub train: usize,
    pub test: usize,
    pub classes: usize,
    pub side: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            train: 2000,
            test: 1000,
            classes: 10,
            side: 32,
            seed: 7,
        }
    }
}

const TEMPLATE_SIDE: usize = 8;

fn template(class: usize) -> [[bool; TEMPLATE_SIDE]; TEMPLATE_SIDE] {
    let mut t = [[false; TEMPLATE_SIDE]; TEMPLATE_SIDE];
    for y in 0..TEMPLATE_SIDE {
        for x in 0..TEMPLATE_SIDE {
            let (yy, xx) = (y as i32, x as i32);
            t[y][x] = match class % 10 {
                0 => (1..7).contains(&yy) && (1..7).contains(&xx),
                1 => {
                    ((1..7).contains(&yy) && (1..7).contains(&xx))
                        && !((3..5).contains(&yy) && (3..5).contains(&xx))
                        && (yy == 1 || yy == 6 || xx == 1 || xx == 6)
                }
                2 => (yy - xx).abs() <= 1 || (yy + xx - 7).abs() <= 1,
                3 => (3..5).contains(&yy) || (3..5).contains(&xx),
                4 => (yy - 3).abs() + (xx - 3).abs() <= 3,
                5 => yy % 2 == 0,
                6 => xx % 2 == 0,
                7 => (yy / 2 + xx / 2) % 2 == 0,
                8 => yy <= 1 || (3..5).contains(&xx),
                _ => xx <= 1 || yy >= 6,
            };
        }
    }
    t
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let hh = (h.rem_euclid(1.0)) * 6.0;
    let i = hh.floor() as i64 % 6;
    let f = hh - hh.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Colors come from a small shared palette. With ~30 images per
/// (foreground, background) color pair in a 2000-image set, color cannot
/// identify an instance, so instance discrimination has to rely on shape --
/// mirroring how photographs work, where color alone rarely pins an image.
const PALETTE_HUES: usize = 8;

fn render(class: usize, side: usize, rng: &mut Rng) -> Vec<f64> {
    let mut img = vec![0.0f64; 3 * side * side];
    // background: palette hue, dim, with a mild linear gradient
    let bg_hue = rng.below(PALETTE_HUES) as f64 / PALETTE_HUES as f64;
    let bg_val = if rng.below(2) == 0 { 0.25 } else { 0.4 };
    let (br, bg_, bb) = hsv_to_rgb(bg_hue, 0.35, bg_val);
    let gdir = rng.below(2);
    let gmag = rng.uniform_range(-0.1, 0.1);
    for y in 0..side {
        for x in 0..side {
            let t = if gdir == 0 { y } else { x } as f64 / side as f64;
            let g = gmag * (t - 0.5);
            let px = y * side + x;
            img[px] = br + g;
            img[side * side + px] = bg_ + g;
            img[2 * side * side + px] = bb + g;
        }
    }
    // foreground shape: bright palette color, object-centric framing (the
    // shape fills most of the frame, so crops and patch quadrants all carry
    // object structure)
    let fg_hue = rng.below(PALETTE_HUES) as f64 / PALETTE_HUES as f64;
    let (fr, fg, fb) = hsv_to_rgb(fg_hue, 0.85, 0.95);
    let tpl = template(class);
    let scale = rng.uniform_range(0.75, 0.95);
    let ts = ((side as f64 * scale).round() as usize).max(TEMPLATE_SIDE / 2);
    let slack = side - ts;
    let y0 = rng.below(slack + 1);
    let x0 = rng.below(slack + 1);
    for y in 0..ts {
        for x in 0..ts {
            let ty = y * TEMPLATE_SIDE / ts;
            let tx = x * TEMPLATE_SIDE / ts;
            if tpl[ty][tx] {
                let px = (y0 + y) * side + (x0 + x);
                img[px] = fr;
                img[side * side + px] = fg;
                img[2 * side * side + px] = fb;
            }
        }
    }
    // pixel noise
    for v in img.iter_mut() {
        *v = (*v + rng.normal() * 0.02).clamp(0.0, 1.0);
    }
    img
}

fn build_split(n: usize, spec: &SynthSpec, split: Split, stream: &str) -> Dataset {
    let side = spec.side;
    let mut images = Array4::<u8>::zeros((n, 3, side, side));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % spec.classes;
        let mut rng = Rng::for_stream(spec.seed, stream, &[i as u64]);
        let img = render(class, side, &mut rng);
        let raw = images.as_slice_mut().unwrap();
        let base = i * 3 * side * side;
        for (j, &v) in img.iter().enumerate() {
            raw[base + j] = (v * 255.0).round() as u8;
        }
        labels.push(class as u8);
    }
    Dataset {
        images,
        labels,
        class_count: spec.classes,
        split,
    }
}

/// Generates (train, test) datasets.
pub fn generate(spec: &SynthSpec) -> (Dataset, Dataset) {
    (
        build_split(spec.train, spec, Split::Train, "synth-train"),
        build_split(spec.test, spec, Split::Eval, "synth-test"),
    )
}

/// Generates and writes `train.bin/.meta` and `test.bin/.meta` under `dir`.
pub fn generate_to_dir(spec: &SynthSpec, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let (train, test) = generate(spec);
    let (train_bin, _) = write_dataset(&train, dir, "train")?;
    let (test_bin, _) = write_dataset(&test, dir, "test")?;
    Ok((train_bin, test_bin))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_split;

    #[test]
    fn balanced_labels_and_shapes() {
        let spec = SynthSpec {
            train: 100,
            test: 50,
            classes: 10,
            side: 32,
            seed: 1,
        };
        let (train, test) = generate(&spec);
        assert_eq!(train.len(), 100);
        assert_eq!(test.len(), 50);
        assert_eq!(train.images.shape(), &[100, 3, 32, 32]);
        let mut counts = [0usize; 10];
        for &l in &train.labels {
            counts[l as usize] += 1;
        }
        assert!(counts.iter().all(|&c| c == 10));
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = SynthSpec {
            train: 8,
            test: 0,
            classes: 4,
            side: 16,
            seed: 5,
        };
        let (a, _) = generate(&spec);
        let (b, _) = generate(&spec);
        assert_eq!(a.images, b.images);
        let (c, _) = generate(&SynthSpec { seed: 6, ..spec });
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn writes_loadable_cifar_layout() {
        let spec = SynthSpec {
            train: 12,
            test: 6,
            classes: 3,
            side: 16,
            seed: 2,
        };
        let dir = std::env::temp_dir().join(format!("mnclglf-synth-{}", std::process::id()));
        generate_to_dir(&spec, &dir).unwrap();
        let train = load_split(&dir, "train", Split::Train).unwrap();
        let test = load_split(&dir, "test", Split::Eval).unwrap();
        assert_eq!(train.len(), 12);
        assert_eq!(test.len(), 6);
        assert_eq!(train.class_count, 3);
        std::fs::remove_dir_all(&dir).ok();
    }
}
