//! Fixed-capacity FIFO support queue with top-1 cosine nearest-neighbor
//! lookup.
//!
//! The queue retains past momentum embeddings as an approximation of the
//! dataset distribution. Lookup is a full scan: similarities are cosine
//! values accumulated in f64 in slot order, ties broken by the lowest slot
//! index, and the returned row is the L2-normalized stored embedding. At
//! the reference configuration (16384 slots x 2048 dims) one lookup costs
//! a 16384 x 2048 pass per query batch; that is the intended implementation,
//! no approximate index is used.

use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::EmbeddingBatch;

const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct SupportQueue<F> {
    storage: Array2<F>,
    cursor: usize,
    /// Per-slot flag: has this slot been overwritten with real data yet?
    filled: Vec<bool>,
    inserted_rows: u64,
}

/// Result of a top-1 lookup: one neighbor row per query.
#[derive(Debug, Clone)]
pub struct NnLookup<F> {
    /// L2-normalized stored embeddings, one per query row.
    pub neighbors: EmbeddingBatch<F>,
    pub indices: Vec<usize>,
    /// Cosine similarity of each query to its neighbor.
    pub similarities: Vec<f64>,
}

impl<F: Scalar> SupportQueue<F> {
    /// Queue of `capacity` unit-norm Gaussian rows; deterministic per seed.
    pub fn init_random(capacity: usize, dim: usize, seed: u64) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::Parameter(format!(
                "queue capacity {capacity} and dim {dim} must be >= 1"
            )));
        }
        let mut rng = Rng::for_stream(seed, "queue", &[]);
        let mut storage = Array2::<F>::zeros((capacity, dim));
        for mut row in storage.axis_iter_mut(Axis(0)) {
            let mut norm = 0.0f64;
            for v in row.iter_mut() {
                let z = rng.normal();
                *v = F::from_f64(z);
                norm += z * z;
            }
            let inv = F::from_f64(1.0 / norm.sqrt().max(NORM_EPS));
            row.mapv_inplace(|v| v * inv);
        }
        Ok(SupportQueue {
            storage,
            cursor: 0,
            filled: vec![false; capacity],
            inserted_rows: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.storage.nrows()
    }

    pub fn dim(&self) -> usize {
        self.storage.ncols()
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn inserted_rows(&self) -> u64 {
        self.inserted_rows
    }

    /// True once every slot has been overwritten with real data.
    pub fn fully_refreshed(&self) -> bool {
        self.filled.iter().all(|&f| f)
    }

    pub fn storage(&self) -> &Array2<F> {
        &self.storage
    }

    pub fn filled_flags(&self) -> &[bool] {
        &self.filled
    }

    /// Rebuilds queue state from checkpoint tensors.
    pub fn from_parts(
        storage: Array2<F>,
        cursor: usize,
        filled: Vec<bool>,
        inserted_rows: u64,
    ) -> Result<Self> {
        if filled.len() != storage.nrows() || cursor >= storage.nrows().max(1) {
            return Err(Error::Structure("queue checkpoint state inconsistent".into()));
        }
        Ok(SupportQueue {
            storage,
            cursor,
            filled,
            inserted_rows,
        })
    }

    /// Top-1 cosine neighbor for each query row. Read-only: queue contents
    /// are identical before and after. Similarities are computed in f64 in
    /// slot order so ties resolve to the lowest slot index exactly.
    pub fn nn_lookup(&self, queries: &EmbeddingBatch<F>) -> Result<NnLookup<F>> {
        if queries.ncols() != self.dim() {
            return Err(Error::Dimension(format!(
                "nn_lookup: query dim {} != queue dim {}",
                queries.ncols(),
                self.dim()
            )));
        }
        let cap = self.capacity();
        // Precompute stored-row norms once per lookup.
        let mut slot_inv_norm = vec![0.0f64; cap];
        for (s, row) in self.storage.axis_iter(Axis(0)).enumerate() {
            let norm: f64 = row.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
            slot_inv_norm[s] = 1.0 / norm.max(NORM_EPS);
        }
        let nq = queries.nrows();
        let mut neighbors = Array2::<F>::zeros((nq, self.dim()));
        let mut indices = Vec::with_capacity(nq);
        let mut sims = Vec::with_capacity(nq);
        for (qi, q) in queries.axis_iter(Axis(0)).enumerate() {
            let qnorm: f64 = q.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
            let q_inv = 1.0 / qnorm.max(NORM_EPS);
            let mut best = f64::NEG_INFINITY;
            let mut best_slot = 0usize;
            for (s, row) in self.storage.axis_iter(Axis(0)).enumerate() {
                let mut dot = 0.0f64;
                for (a, b) in q.iter().zip(row.iter()) {
                    dot += a.as_f64() * b.as_f64();
                }
                let sim = dot * q_inv * slot_inv_norm[s];
                if sim > best {
                    best = sim;
                    best_slot = s;
                }
            }
            let inv = F::from_f64(slot_inv_norm[best_slot]);
            let normalized: Array1<F> = self
                .storage
                .index_axis(Axis(0), best_slot)
                .mapv(|v| v * inv);
            neighbors.index_axis_mut(Axis(0), qi).assign(&normalized);
            indices.push(best_slot);
            sims.push(best);
        }
        Ok(NnLookup {
            neighbors,
            indices,
            similarities: sims,
        })
    }

    /// Overwrites the oldest rows with `batch`, ring order. Runs after the
    /// current step's lookup and loss.
    pub fn enqueue(&mut self, batch: &EmbeddingBatch<F>) -> Result<()> {
        if batch.ncols() != self.dim() {
            return Err(Error::Dimension(format!(
                "enqueue: batch dim {} != queue dim {}",
                batch.ncols(),
                self.dim()
            )));
        }
        if batch.nrows() > self.capacity() {
            return Err(Error::Parameter(format!(
                "enqueue: batch of {} rows exceeds capacity {}",
                batch.nrows(),
                self.capacity()
            )));
        }
        for row in batch.axis_iter(Axis(0)) {
            self.storage.index_axis_mut(Axis(0), self.cursor).assign(&row);
            self.filled[self.cursor] = true;
            self.cursor = (self.cursor + 1) % self.capacity();
            self.inserted_rows += 1;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_rows_are_unit_norm_and_deterministic() {
        let q = SupportQueue::<f32>::init_random(8, 4, 11).unwrap();
        for row in q.storage().axis_iter(Axis(0)) {
            let norm: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
        let q2 = SupportQueue::<f32>::init_random(8, 4, 11).unwrap();
        assert_eq!(q.storage(), q2.storage());
        let q3 = SupportQueue::<f32>::init_random(8, 4, 12).unwrap();
        assert_ne!(q.storage(), q3.storage());
    }

    #[test]
    fn zero_capacity_or_dim_rejected() {
        assert!(SupportQueue::<f32>::init_random(0, 4, 1).is_err());
        assert!(SupportQueue::<f32>::init_random(4, 0, 1).is_err());
    }

    #[test]
    fn reference_storage_budget_is_documented_scale() {
        // 16384 x 2048 f32 rows: 128 MiB.
        let bytes = 16384usize * 2048 * 4;
        assert_eq!(bytes, 128 * 1024 * 1024);
    }

    #[test]
    fn lookup_prefers_larger_cosine() {
        let mut q = SupportQueue::<f32>::init_random(2, 2, 1).unwrap();
        let e = Array2::from_shape_vec((2, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        q.enqueue(&e).unwrap();
        let z = Array2::from_shape_vec((1, 2), vec![0.1, 0.9]).unwrap();
        let hit = q.nn_lookup(&z).unwrap();
        assert_eq!(hit.indices, vec![1]);
        assert!((hit.neighbors[[0, 0]] - 0.0).abs() < 1e-6);
        assert!((hit.neighbors[[0, 1]] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn exact_row_matches_itself_with_unit_similarity() {
        let mut q = SupportQueue::<f32>::init_random(4, 3, 2).unwrap();
        let rows = Array2::from_shape_vec(
            (4, 3),
            vec![0.5, 0.1, 0.2, -0.3, 0.8, 0.1, 0.0, 0.1, 0.9, 0.7, -0.7, 0.0],
        )
        .unwrap();
        q.enqueue(&rows).unwrap();
        let z = rows.clone();
        let hit = q.nn_lookup(&z).unwrap();
        assert_eq!(hit.indices, vec![0, 1, 2, 3]);
        for s in hit.similarities {
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn duplicate_rows_tie_break_to_lowest_slot() {
        let mut q = SupportQueue::<f32>::init_random(4, 2, 3).unwrap();
        let rows =
            Array2::from_shape_vec((4, 2), vec![0.6, 0.8, 0.6, 0.8, 0.6, 0.8, 0.0, 1.0]).unwrap();
        q.enqueue(&rows).unwrap();
        let z = Array2::from_shape_vec((1, 2), vec![0.6, 0.8]).unwrap();
        let hit = q.nn_lookup(&z).unwrap();
        assert_eq!(hit.indices, vec![0]);
    }

    #[test]
    fn lookup_matches_bruteforce_oracle() {
        let q = {
            let mut q = SupportQueue::<f32>::init_random(64, 16, 5).unwrap();
            // overwrite with fresh random rows so norms differ from 1
            let mut rng = Rng::new(77);
            let rows = Array2::from_shape_fn((64, 16), |_| rng.normal() as f32 * 2.0);
            q.enqueue(&rows).unwrap();
            q
        };
        let mut rng = Rng::new(78);
        let queries = Array2::from_shape_fn((32, 16), |_| rng.normal() as f32);
        let hit = q.nn_lookup(&queries).unwrap();
        // independent scalar scan
        for (qi, qrow) in queries.axis_iter(Axis(0)).enumerate() {
            let mut best = f64::NEG_INFINITY;
            let mut best_slot = 0usize;
            for (s, srow) in q.storage().axis_iter(Axis(0)).enumerate() {
                let mut dot = 0.0;
                let mut qn = 0.0;
                let mut sn = 0.0;
                for (a, b) in qrow.iter().zip(srow.iter()) {
                    dot += (*a as f64) * (*b as f64);
                    qn += (*a as f64) * (*a as f64);
                    sn += (*b as f64) * (*b as f64);
                }
                let sim = dot / (qn.sqrt().max(1e-12) * sn.sqrt().max(1e-12));
                if sim > best {
                    best = sim;
                    best_slot = s;
                }
            }
            assert_eq!(hit.indices[qi], best_slot, "query {qi}");
        }
    }

    #[test]
    fn lookup_is_read_only() {
        let q = SupportQueue::<f32>::init_random(16, 8, 9).unwrap();
        let before = q.storage().clone();
        let z = Array2::from_elem((4, 8), 0.3f32);
        q.nn_lookup(&z).unwrap();
        assert_eq!(before, *q.storage());
    }

    #[test]
    fn ring_overwrite_order() {
        let mut q = SupportQueue::<f32>::init_random(4, 1, 1).unwrap();
        let abcd = Array2::from_shape_vec((4, 1), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        q.enqueue(&abcd).unwrap();
        let e = Array2::from_shape_vec((1, 1), vec![5.0]).unwrap();
        q.enqueue(&e).unwrap();
        let vals: Vec<f32> = q.storage().iter().cloned().collect();
        assert_eq!(vals, vec![5.0, 2.0, 3.0, 4.0]);
        assert_eq!(q.cursor(), 1);
    }

    #[test]
    fn full_batch_replaces_everything() {
        let mut q = SupportQueue::<f32>::init_random(4, 2, 2).unwrap();
        let batch = Array2::from_elem((4, 2), 9.0f32);
        q.enqueue(&batch).unwrap();
        assert!(q.storage().iter().all(|&v| v == 9.0));
        assert!(q.fully_refreshed());
        assert_eq!(q.cursor(), 0);
    }

    #[test]
    fn oversized_batch_rejected() {
        let mut q = SupportQueue::<f32>::init_random(4, 2, 2).unwrap();
        let batch = Array2::from_elem((5, 2), 1.0f32);
        assert!(q.enqueue(&batch).is_err());
    }

    #[test]
    fn first_batch_fully_evicted_after_capacity_cycles() {
        let mut q = SupportQueue::<f32>::init_random(512, 4, 3).unwrap();
        let marker = |tag: f32| Array2::from_elem((256, 4), tag);
        q.enqueue(&marker(1.0)).unwrap();
        q.enqueue(&marker(2.0)).unwrap();
        q.enqueue(&marker(3.0)).unwrap();
        // capacity 512 / batch 256 => first batch gone after 2 more batches
        assert!(q.storage().iter().all(|&v| v == 2.0 || v == 3.0));
    }

    #[test]
    fn dim_mismatch_rejected() {
        let q = SupportQueue::<f32>::init_random(4, 3, 1).unwrap();
        let z = Array2::<f32>::zeros((1, 5));
        assert!(q.nn_lookup(&z).is_err());
    }
}
