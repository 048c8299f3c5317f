//! Dataset loading and minibatch production.
//!
//! Datasets live on disk as flat binary record files in the CIFAR layout:
//! each record is one label byte followed by `channels` planes of
//! `height * width` pixel bytes. A text sidecar (`key=value`) carries the
//! record geometry. Minibatch order is a pure function of `(seed, epoch)`,
//! so runs are reproducible and resumable.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::sync::Arc;
use std::thread;

use ndarray::{Array4, Axis};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

/// Geometry of a binary record file, read from its sidecar.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetMeta {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub class_count: usize,
    pub record_count: usize,
}

impl DatasetMeta {
    pub fn record_size(&self) -> usize {
        1 + self.height * self.width * self.channels
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut fields = [None::<usize>; 5];
        const KEYS: [&str; 5] = ["height", "width", "channels", "class_count", "record_count"];
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("metadata line {}: expected key=value", lineno + 1))
            })?;
            let key = key.trim();
            let value: usize = value.trim().parse().map_err(|_| {
                Error::Config(format!("metadata key {key}: not an unsigned integer"))
            })?;
            match KEYS.iter().position(|&k| k == key) {
                Some(i) => fields[i] = Some(value),
                None => return Err(Error::Config(format!("unknown metadata key {key}"))),
            }
        }
        let mut vals = [0usize; 5];
        for (i, key) in KEYS.iter().enumerate() {
            vals[i] =
                fields[i].ok_or_else(|| Error::Config(format!("metadata missing key {key}")))?;
        }
        let meta = DatasetMeta {
            height: vals[0],
            width: vals[1],
            channels: vals[2],
            class_count: vals[3],
            record_count: vals[4],
        };
        if meta.height == 0 || meta.width == 0 || meta.channels == 0 {
            return Err(Error::Config("metadata dimensions must be positive".into()));
        }
        if meta.class_count == 0 || meta.class_count > 256 {
            return Err(Error::Config(
                "class_count must be in 1..=256 for the one-byte label layout".into(),
            ));
        }
        Ok(meta)
    }

    pub fn to_text(&self) -> String {
        format!(
            "height={}\nwidth={}\nchannels={}\nclass_count={}\nrecord_count={}\n",
            self.height, self.width, self.channels, self.class_count, self.record_count
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading metadata {}", path.display()), e))?;
        Self::parse(&text)
    }
}

/// An in-memory image dataset: `N x C x H x W` 8-bit pixels plus labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Array4<u8>,
    pub labels: Vec<u8>,
    pub class_count: usize,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.images.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.images.shape()[3]
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn meta(&self) -> DatasetMeta {
        DatasetMeta {
            height: self.height(),
            width: self.width(),
            channels: self.channels(),
            class_count: self.class_count,
            record_count: self.len(),
        }
    }

    /// Gathers `indices` into a float batch with pixels scaled to [0, 1].
    pub fn gather<F: Scalar>(&self, indices: &[usize]) -> ImageBatch<F> {
        let (c, h, w) = (self.channels(), self.height(), self.width());
        let mut data = Array4::<F>::zeros((indices.len(), c, h, w));
        let scale = F::from_f64(1.0 / 255.0);
        for (row, &idx) in indices.iter().enumerate() {
            let src = self.images.index_axis(Axis(0), idx);
            let mut dst = data.index_axis_mut(Axis(0), row);
            ndarray::Zip::from(&mut dst).and(&src).for_each(|d, &s| {
                *d = F::from_usize(s as usize) * scale;
            });
        }
        ImageBatch {
            data,
            indices: indices.to_vec(),
        }
    }

    /// Per-channel mean and standard deviation of the pixel values on the
    /// [0, 1] scale, computed over every pixel of every image.
    pub fn channel_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let c = self.channels();
        let count = (self.len() * self.height() * self.width()) as f64;
        let mut mean = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for img in self.images.axis_iter(Axis(0)) {
            for (ch, plane) in img.axis_iter(Axis(0)).enumerate() {
                for &p in plane.iter() {
                    let v = p as f64 / 255.0;
                    mean[ch] += v;
                    sq[ch] += v * v;
                }
            }
        }
        for ch in 0..c {
            mean[ch] /= count;
            sq[ch] = (sq[ch] / count - mean[ch] * mean[ch]).max(0.0).sqrt();
        }
        (mean, sq)
    }
}

/// A float minibatch, `N x C x H x W`, pixels in [0, 1] before normalization.
#[derive(Debug, Clone)]
pub struct ImageBatch<F> {
    pub data: Array4<F>,
    /// Dataset indices of the rows, for tracing.
    pub indices: Vec<usize>,
}

impl<F: Scalar> ImageBatch<F> {
    pub fn len(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Loads a flat binary record file. `meta` fixes the record geometry; the
/// file length must be an exact multiple of the record size and agree with
/// `meta.record_count`.
pub fn load_cifar_binary(path: &Path, meta: &DatasetMeta, split: Split) -> Result<Dataset> {
    let bytes = fs::read(path)
        .map_err(|e| Error::io(format!("reading dataset {}", path.display()), e))?;
    load_cifar_bytes(&bytes, meta, split)
}

/// Same as [`load_cifar_binary`] but from an in-memory byte slice.
pub fn load_cifar_bytes(bytes: &[u8], meta: &DatasetMeta, split: Split) -> Result<Dataset> {
    let rec = meta.record_size();
    let n = bytes.len() / rec;
    if bytes.len() % rec != 0 {
        return Err(Error::Format {
            offset: (n * rec) as u64,
            message: format!(
                "file length {} is not a multiple of the {}-byte record size",
                bytes.len(),
                rec
            ),
        });
    }
    if n != meta.record_count {
        return Err(Error::Validation(format!(
            "metadata declares {} records but the file holds {}",
            meta.record_count, n
        )));
    }
    let (c, h, w) = (meta.channels, meta.height, meta.width);
    let plane = h * w;
    let mut images = Array4::<u8>::zeros((n, c, h, w));
    let mut labels = Vec::with_capacity(n);
    {
        let raw = images
            .as_slice_mut()
            .expect("freshly allocated array is contiguous");
        for i in 0..n {
            let rec_bytes = &bytes[i * rec..(i + 1) * rec];
            let label = rec_bytes[0];
            if (label as usize) >= meta.class_count {
                return Err(Error::Validation(format!(
                    "record {i}: label {label} >= class_count {}",
                    meta.class_count
                )));
            }
            labels.push(label);
            raw[i * c * plane..(i + 1) * c * plane].copy_from_slice(&rec_bytes[1..]);
        }
    }
    Ok(Dataset {
        images,
        labels,
        class_count: meta.class_count,
        split,
    })
}

/// Serializes a dataset back to the flat binary record layout.
pub fn dataset_to_bytes(ds: &Dataset) -> Vec<u8> {
    let rec = ds.meta().record_size();
    let plane = ds.height() * ds.width();
    let c = ds.channels();
    let mut out = Vec::with_capacity(ds.len() * rec);
    let raw = ds.images.as_slice().expect("dataset array is contiguous");
    for i in 0..ds.len() {
        out.push(ds.labels[i]);
        out.extend_from_slice(&raw[i * c * plane..(i + 1) * c * plane]);
    }
    out
}

/// Writes `<stem>.bin` and `<stem>.meta` under `dir`.
pub fn write_dataset(ds: &Dataset, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let bin = dir.join(format!("{stem}.bin"));
    let meta = dir.join(format!("{stem}.meta"));
    fs::write(&bin, dataset_to_bytes(ds))
        .map_err(|e| Error::io(format!("writing {}", bin.display()), e))?;
    fs::write(&meta, ds.meta().to_text())
        .map_err(|e| Error::io(format!("writing {}", meta.display()), e))?;
    Ok((bin, meta))
}

/// Loads `<stem>.bin` + `<stem>.meta` from `dir`.
pub fn load_split(dir: &Path, stem: &str, split: Split) -> Result<Dataset> {
    let meta = DatasetMeta::load(&dir.join(format!("{stem}.meta")))?;
    load_cifar_binary(&dir.join(format!("{stem}.bin")), &meta, split)
}

/// Shuffled epoch order: a pure function of `(seed, epoch, n)`.
pub fn epoch_permutation(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    Rng::for_stream(seed, "shuffle", &[epoch as u64]).permutation(n)
}

/// Deterministic minibatch index planner.
#[derive(Debug, Clone)]
pub struct BatchIterator {
    n: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub drop_last: bool,
}

impl BatchIterator {
    pub fn new(dataset: &Dataset, batch_size: usize, seed: u64, drop_last: bool) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Parameter("batch_size must be >= 1".into()));
        }
        Ok(BatchIterator {
            n: dataset.len(),
            batch_size,
            seed,
            drop_last,
        })
    }

    /// Number of batches one epoch yields. Zero when `drop_last` and the
    /// dataset is smaller than one batch; callers should surface a warning.
    pub fn batches_per_epoch(&self) -> usize {
        if self.drop_last {
            self.n / self.batch_size
        } else {
            self.n.div_ceil(self.batch_size)
        }
    }

    /// Index batches for `epoch`, in order.
    pub fn epoch_batches(&self, epoch: usize) -> Vec<Vec<usize>> {
        let perm = epoch_permutation(self.seed, epoch, self.n);
        let mut out = Vec::with_capacity(self.batches_per_epoch());
        for chunk in perm.chunks(self.batch_size) {
            if self.drop_last && chunk.len() < self.batch_size {
                break;
            }
            out.push(chunk.to_vec());
        }
        out
    }
}

/// Single-producer bounded-buffer prefetcher. The producer thread runs at
/// most `depth` items ahead and blocks when the buffer is full; consumption
/// order equals production order, so batch order is independent of depth.
pub struct Prefetcher<T> {
    rx: mpsc::Receiver<T>,
    handle: Option<thread::JoinHandle<()>>,
}

impl<T: Send + 'static> Prefetcher<T> {
    pub fn spawn<I>(iter: I, depth: usize) -> Self
    where
        I: IntoIterator<Item = T> + Send + 'static,
        I::IntoIter: Send,
    {
        let (tx, rx) = mpsc::sync_channel(depth.max(1));
        let handle = thread::spawn(move || {
            for item in iter {
                if tx.send(item).is_err() {
                    break; // consumer hung up
                }
            }
        });
        Prefetcher {
            rx,
            handle: Some(handle),
        }
    }
}

impl<T> Iterator for Prefetcher<T> {
    type Item = T;

    fn next(&mut self) -> Option<T> {
        self.rx.recv().ok()
    }
}

impl<T> Drop for Prefetcher<T> {
    fn drop(&mut self) {
        // Unblock the producer, then reap it.
        while self.rx.try_recv().is_ok() {}
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

/// Gathered float batches for one epoch, optionally prefetched.
pub fn epoch_image_batches<F: Scalar>(
    dataset: &Arc<Dataset>,
    iter: &BatchIterator,
    epoch: usize,
    prefetch_depth: usize,
) -> Box<dyn Iterator<Item = ImageBatch<F>>> {
    let plans = iter.epoch_batches(epoch);
    let ds = Arc::clone(dataset);
    let produce = plans.into_iter().map(move |idx| ds.gather::<F>(&idx));
    if prefetch_depth == 0 {
        Box::new(produce.collect::<Vec<_>>().into_iter())
    } else {
        Box::new(Prefetcher::spawn(produce, prefetch_depth))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta10() -> DatasetMeta {
        DatasetMeta {
            height: 32,
            width: 32,
            channels: 3,
            class_count: 10,
            record_count: 10,
        }
    }

    fn synthetic_bytes(meta: &DatasetMeta) -> Vec<u8> {
        let rec = meta.record_size();
        let mut bytes = vec![0u8; meta.record_count * rec];
        for i in 0..meta.record_count {
            bytes[i * rec] = (i % meta.class_count) as u8;
            for j in 1..rec {
                bytes[i * rec + j] = ((i * 131 + j * 7) % 256) as u8;
            }
        }
        bytes
    }

    #[test]
    fn loads_cifar10_layout() {
        let meta = meta10();
        let bytes = synthetic_bytes(&meta);
        assert_eq!(bytes.len(), 30730);
        let ds = load_cifar_bytes(&bytes, &meta, Split::Train).unwrap();
        assert_eq!(ds.len(), 10);
        assert_eq!(ds.labels[3], 3);
        assert_eq!(ds.images.shape(), &[10, 3, 32, 32]);
    }

    #[test]
    fn empty_file_is_a_valid_empty_dataset() {
        let meta = DatasetMeta {
            record_count: 0,
            ..meta10()
        };
        let ds = load_cifar_bytes(&[], &meta, Split::Train).unwrap();
        assert_eq!(ds.len(), 0);
        assert!(ds.is_empty());
    }

    #[test]
    fn truncated_file_reports_offset() {
        let meta = DatasetMeta {
            record_count: 1,
            ..meta10()
        };
        let bytes = vec![0u8; 3074];
        match load_cifar_bytes(&bytes, &meta, Split::Train) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 3073),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn bad_label_is_a_validation_error() {
        let meta = DatasetMeta {
            height: 2,
            width: 2,
            channels: 1,
            class_count: 3,
            record_count: 1,
        };
        let bytes = vec![7, 0, 0, 0, 0];
        assert!(matches!(
            load_cifar_bytes(&bytes, &meta, Split::Train),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn roundtrip_preserves_pixels_and_labels() {
        let meta = meta10();
        let bytes = synthetic_bytes(&meta);
        let ds = load_cifar_bytes(&bytes, &meta, Split::Train).unwrap();
        let back = dataset_to_bytes(&ds);
        assert_eq!(bytes, back);
    }

    #[test]
    fn batch_plan_sizes() {
        let meta = meta10();
        let ds = load_cifar_bytes(&synthetic_bytes(&meta), &meta, Split::Train).unwrap();
        let it = BatchIterator::new(&ds, 4, 99, true).unwrap();
        let batches = it.epoch_batches(0);
        assert_eq!(batches.len(), 2);
        assert!(batches.iter().all(|b| b.len() == 4));

        let it = BatchIterator::new(&ds, 4, 99, false).unwrap();
        let sizes: Vec<usize> = it.epoch_batches(0).iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn same_seed_same_batches() {
        let meta = meta10();
        let ds = load_cifar_bytes(&synthetic_bytes(&meta), &meta, Split::Train).unwrap();
        let a = BatchIterator::new(&ds, 3, 7, false).unwrap().epoch_batches(5);
        let b = BatchIterator::new(&ds, 3, 7, false).unwrap().epoch_batches(5);
        assert_eq!(a, b);
    }

    #[test]
    fn epoch_covers_every_index_without_drop_last() {
        let meta = meta10();
        let ds = load_cifar_bytes(&synthetic_bytes(&meta), &meta, Split::Train).unwrap();
        let it = BatchIterator::new(&ds, 3, 11, false).unwrap();
        let mut seen: Vec<usize> = it.epoch_batches(2).concat();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn oversized_batch_with_drop_last_yields_no_batches() {
        let meta = meta10();
        let ds = load_cifar_bytes(&synthetic_bytes(&meta), &meta, Split::Train).unwrap();
        let it = BatchIterator::new(&ds, 64, 1, true).unwrap();
        assert_eq!(it.batches_per_epoch(), 0);
        assert!(it.epoch_batches(0).is_empty());
    }

    #[test]
    fn prefetch_depth_does_not_change_order() {
        let meta = meta10();
        let ds = Arc::new(load_cifar_bytes(&synthetic_bytes(&meta), &meta, Split::Train).unwrap());
        let it = BatchIterator::new(&ds, 3, 5, false).unwrap();
        let direct: Vec<Vec<usize>> = epoch_image_batches::<f32>(&ds, &it, 1, 0)
            .map(|b| b.indices)
            .collect();
        for depth in [1, 2, 8] {
            let fetched: Vec<Vec<usize>> = epoch_image_batches::<f32>(&ds, &it, 1, depth)
                .map(|b| b.indices)
                .collect();
            assert_eq!(direct, fetched, "depth {depth} changed batch order");
        }
    }

    #[test]
    fn gather_scales_to_unit_interval() {
        let meta = meta10();
        let ds = load_cifar_bytes(&synthetic_bytes(&meta), &meta, Split::Train).unwrap();
        let batch = ds.gather::<f32>(&[0, 5]);
        assert_eq!(batch.data.shape(), &[2, 3, 32, 32]);
        let max = batch.data.iter().cloned().fold(0.0f32, f32::max);
        assert!(max <= 1.0 && max > 0.5);
    }

    #[test]
    fn meta_text_roundtrip() {
        let meta = meta10();
        assert_eq!(DatasetMeta::parse(&meta.to_text()).unwrap(), meta);
        assert!(DatasetMeta::parse("height=1\nwidth=1\n").is_err());
    }
}
