//! Patch divide and combine.
//!
//! A view is split into a 2x2 grid of quadrants (row-major y1..y4), each
//! quadrant is encoded by the stop-gradient backbone at its native size,
//! and every k-element subset of the four encodings is averaged into one
//! combined embedding. Subsets are enumerated lexicographically, so the
//! combination order is stable across runs and shared by both divided views.

use ndarray::{s, Array2, Array4};

use crate::error::{Error, Result};
use crate::nn::stack::NetworkStack;
use crate::scalar::Scalar;
use crate::EmbeddingBatch;

/// Four quadrants of a view batch, each `N x C x H/2 x W/2`.
#[derive(Debug, Clone)]
pub struct PatchGrid<F> {
    pub patches: [Array4<F>; 4],
}

/// Averaged k-subset combinations of the four patch encodings.
/// `combined` holds `s * n` rows grouped by combination: rows
/// `[j*n, (j+1)*n)` are combination `j` for the whole batch.
#[derive(Debug, Clone)]
pub struct CombinationSet<F> {
    pub k: usize,
    pub s: usize,
    pub batch: usize,
    pub combined: EmbeddingBatch<F>,
}

/// Lexicographic k-subsets of {0, 1, 2, 3}.
pub fn subsets_of_four(k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for mask in 0u32..16 {
        if mask.count_ones() as usize == k {
            let set: Vec<usize> = (0..4).filter(|i| mask & (1 << i) != 0).collect();
            out.push(set);
        }
    }
    // bitmask order equals lexicographic order after sorting by elements
    out.sort();
    out
}

pub fn combination_count(k: usize) -> Result<usize> {
    match k {
        1 | 3 => Ok(4),
        2 => Ok(6),
        4 => Ok(1),
        _ => Err(Error::Parameter(format!("combine k {k} outside 1..=4"))),
    }
}

/// Splits a view batch into its 2x2 grid of quadrants.
pub fn divide<F: Scalar>(view: &Array4<F>) -> Result<PatchGrid<F>> {
    let s_ = view.shape();
    let (h, w) = (s_[2], s_[3]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Dimension(format!(
            "divide: spatial dims {h}x{w} must be even"
        )));
    }
    let (hh, hw) = (h / 2, w / 2);
    let quad = |ys: usize, xs: usize| -> Array4<F> {
        view.slice(s![.., .., ys..ys + hh, xs..xs + hw]).to_owned()
    };
    Ok(PatchGrid {
        patches: [quad(0, 0), quad(0, hw), quad(hh, 0), quad(hh, hw)],
    })
}

/// Inverse of [`divide`]: stitches the quadrants back together.
pub fn reassemble<F: Scalar>(grid: &PatchGrid<F>) -> Array4<F> {
    let s_ = grid.patches[0].shape();
    let (n, c, hh, hw) = (s_[0], s_[1], s_[2], s_[3]);
    let mut out = Array4::<F>::zeros((n, c, hh * 2, hw * 2));
    out.slice_mut(s![.., .., ..hh, ..hw]).assign(&grid.patches[0]);
    out.slice_mut(s![.., .., ..hh, hw..]).assign(&grid.patches[1]);
    out.slice_mut(s![.., .., hh.., ..hw]).assign(&grid.patches[2]);
    out.slice_mut(s![.., .., hh.., hw..]).assign(&grid.patches[3]);
    out
}

/// Backbone-only encoding of all four patches through the stop-gradient
/// stack. Output rows `[p*n, (p+1)*n)` hold patch `p`; no gradient reaches
/// any parameter (the stop-gradient stack has no backward path).
pub fn encode_patches<F: Scalar>(
    grid: &PatchGrid<F>,
    stack: &mut NetworkStack<F>,
) -> Result<EmbeddingBatch<F>> {
    let n = grid.patches[0].shape()[0];
    let dim = stack.feature_dim();
    let mut out = Array2::<F>::zeros((4 * n, dim));
    for (p, patch) in grid.patches.iter().enumerate() {
        let enc = stack.encode_stopgrad(patch)?;
        out.slice_mut(s![p * n..(p + 1) * n, ..]).assign(&enc);
    }
    Ok(out)
}

/// Averages every k-subset of the four patch encodings.
/// `encodings` rows must be grouped patch-major as produced by
/// [`encode_patches`].
pub fn combine<F: Scalar>(encodings: &EmbeddingBatch<F>, k: usize) -> Result<CombinationSet<F>> {
    let s = combination_count(k)?;
    let rows = encodings.nrows();
    if rows % 4 != 0 {
        return Err(Error::Dimension(format!(
            "combine: row count {rows} not divisible by 4"
        )));
    }
    let n = rows / 4;
    let dim = encodings.ncols();
    let mut combined = Array2::<F>::zeros((s * n, dim));
    let inv_k = F::from_f64(1.0 / k as f64);
    for (j, subset) in subsets_of_four(k).into_iter().enumerate() {
        let mut block = combined.slice_mut(s![j * n..(j + 1) * n, ..]);
        for &p in &subset {
            let src = encodings.slice(s![p * n..(p + 1) * n, ..]);
            block.scaled_add(inv_k, &src);
        }
    }
    Ok(CombinationSet {
        k,
        s,
        batch: n,
        combined,
    })
}

/// Projects the combined embeddings through the stop-gradient projector.
pub fn project_combined<F: Scalar>(
    set: &CombinationSet<F>,
    stack: &mut NetworkStack<F>,
) -> Result<EmbeddingBatch<F>> {
    if set.combined.nrows() == 0 {
        return Err(Error::Parameter("project_combined: empty combination set".into()));
    }
    stack.project_stopgrad(&set.combined)
}

/// Full local-feature path for one view: divide, encode, combine, project.
/// Returns `s * n` projected rows.
pub fn local_path<F: Scalar>(
    view: &Array4<F>,
    stack: &mut NetworkStack<F>,
    k: usize,
) -> Result<EmbeddingBatch<F>> {
    let grid = divide(view)?;
    let enc = encode_patches(&grid, stack)?;
    let set = combine(&enc, k)?;
    project_combined(&set, stack)
}

/// One randomly chosen combination block instead of all of them.
pub fn local_path_single<F: Scalar>(
    view: &Array4<F>,
    stack: &mut NetworkStack<F>,
    k: usize,
    pick: usize,
) -> Result<EmbeddingBatch<F>> {
    let grid = divide(view)?;
    let enc = encode_patches(&grid, stack)?;
    let set = combine(&enc, k)?;
    let n = set.batch;
    let j = pick % set.s;
    let block = set.combined.slice(s![j * n..(j + 1) * n, ..]).to_owned();
    stack.project_stopgrad(&block)
}
