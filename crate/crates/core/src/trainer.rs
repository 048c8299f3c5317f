//! Training orchestration.
//!
//! One step, in normative order: (1) draw the three views; (2) predictor
//! outputs p1, p2, p3 from the back-propagation stack; (3) momentum
//! embeddings of views 1 and 2; (4) nearest-neighbor substitution through
//! the support queue; (5) patch divide/encode/combine/project on views 1
//! and 3; (6) total loss; (7) backward and SGD step on the back-propagation
//! stack only; (8) EMA update of the momentum stack; (9) re-tie the
//! stop-gradient stack; (10) enqueue the raw momentum embeddings of view 1.
//!
//! All randomness is drawn from named substreams of the config seed keyed
//! by step or epoch indices, so a resumed run replays the identical stream.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use ndarray::ArrayD;

use crate::augment::make_triple;
use crate::checkpoint::Checkpoint;
use crate::config::{SampleMode, TrainConfig};
use crate::data::{BatchIterator, Dataset, ImageBatch};
use crate::error::{Error, Result};
use crate::loss::{total_loss_with_grads, LossReport, TotalLossInputs};
use crate::nn::stack::{momentum_update, tie_weights, NetworkStack, StackRole};
use crate::optim::{cosine_lr, SgdMomentum};
use crate::patching::{local_path, local_path_single};
use crate::queue::SupportQueue;
use crate::rng::{substream, Rng};
use crate::scalar::Scalar;

/// One row per optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    pub step: usize,
    pub lr: f64,
    pub loss_s: f64,
    pub loss_m: f64,
    pub loss_total: f64,
    /// Mean top-1 cosine similarity of the two queue lookups.
    pub queue_cos_mean: f64,
    pub wall_ms: f64,
}

impl StepTrace {
    pub const CSV_HEADER: &'static str = "step,lr,loss_s,loss_m,loss_total,queue_cos_mean,wall_ms";

    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e},{:.3}",
            self.step, self.lr, self.loss_s, self.loss_m, self.loss_total, self.queue_cos_mean, self.wall_ms
        )
    }

    /// The deterministic part of the CSV line: everything except wall time,
    /// which is a measurement rather than run state.
    pub fn deterministic_csv_prefix(line: &str) -> &str {
        match line.rfind(',') {
            Some(ix) => &line[..ix],
            None => line,
        }
    }
}

/// Mutable training state: the three stacks, the queue, the optimizer, and
/// the step/epoch counters.
pub struct TrainState<F> {
    pub online: NetworkStack<F>,
    pub momentum: NetworkStack<F>,
    pub stopgrad: NetworkStack<F>,
    pub queue: SupportQueue<F>,
    pub opt: SgdMomentum<F>,
    pub step: usize,
    pub epoch: usize,
}

impl<F: Scalar> TrainState<F> {
    /// Fresh state from the config seed: one initialization shared by all
    /// three stacks, a random unit-norm queue, zeroed optimizer buffers.
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::for_stream(cfg.seed, "init", &[]);
        let online = NetworkStack::build_online(cfg.arch(), &mut rng);
        let momentum = online.clone_as(StackRole::Momentum);
        let stopgrad = online.clone_as(StackRole::TiedStopGrad);
        let queue = SupportQueue::init_random(cfg.queue_capacity, online.embed_dim(), cfg.seed)?;
        let opt = SgdMomentum::new(cfg.opt_momentum, cfg.weight_decay, cfg.bn_weight_decay);
        Ok(TrainState {
            online,
            momentum,
            stopgrad,
            queue,
            opt,
            step: 0,
            epoch: 0,
        })
    }

    /// One optimizer step on one raw (pre-augmentation) batch.
    pub fn train_step(
        &mut self,
        batch: &ImageBatch<F>,
        cfg: &TrainConfig,
        total_steps: usize,
    ) -> Result<StepTrace> {
        let start = Instant::now();
        let step = self.step;

        // (1) three views
        let views = make_triple(batch, &cfg.augment, substream(cfg.seed, "augment", &[step as u64]))?;

        // (2) back-propagation forwards
        let (_z1, p1, cache1) = self.online.forward_backprop(&views.x1.data)?;
        let (_z2, p2, cache2) = self.online.forward_backprop(&views.x2.data)?;
        let (_z3, p3, cache3) = self.online.forward_backprop(&views.x3.data)?;

        // (3) momentum embeddings
        let z1_m = self.momentum.forward_momentum(&views.x1.data)?;
        let z2_m = self.momentum.forward_momentum(&views.x2.data)?;

        // (4) nearest-neighbor substitution
        let hit1 = self.queue.nn_lookup(&z1_m)?;
        let hit2 = self.queue.nn_lookup(&z2_m)?;

        // (5) local-feature path on views 1 and 3
        let (c1, c3) = match cfg.sample_mode {
            SampleMode::Full => (
                local_path(&views.x1.data, &mut self.stopgrad, cfg.combine_k)?,
                local_path(&views.x3.data, &mut self.stopgrad, cfg.combine_k)?,
            ),
            SampleMode::SingleEmbedding => {
                let pick = |view: u64| {
                    let mut r = Rng::for_stream(cfg.seed, "sample", &[step as u64, view]);
                    r.below(crate::patching::combination_count(cfg.combine_k).unwrap_or(1))
                };
                (
                    local_path_single(&views.x1.data, &mut self.stopgrad, cfg.combine_k, pick(1))?,
                    local_path_single(&views.x3.data, &mut self.stopgrad, cfg.combine_k, pick(3))?,
                )
            }
        };

        // (6) total loss and gradients at the predictor outputs
        let inputs = TotalLossInputs {
            c1: &c1,
            c3: &c3,
            z1n: &hit1.neighbors,
            z2n: &hit2.neighbors,
            p1: &p1,
            p2: &p2,
            p3: &p3,
        };
        let (report, dp1, dp2, dp3) = total_loss_with_grads(&inputs, &cfg.loss)?;
        if !report.loss_total.as_f64().is_finite() {
            return Err(Error::Numerical(loss_blowup_diagnostic(&report, &inputs)));
        }

        // (7) backward + SGD on the back-propagation stack only
        self.online.zero_grads();
        self.online.backward_from_dp(&cache1, &dp1);
        self.online.backward_from_dp(&cache2, &dp2);
        self.online.backward_from_dp(&cache3, &dp3);
        let lr = cosine_lr(step, total_steps, cfg.lr_initial, cfg.lr_final);
        let mut params = self.online.params_mut();
        self.opt.step(&mut params, lr)?;

        // (8) EMA update, (9) weight re-tie, (10) enqueue raw momentum rows
        momentum_update(&mut self.momentum, &self.online, cfg.ema_m)?;
        tie_weights(&mut self.stopgrad, &self.online)?;
        self.queue.enqueue(&z1_m)?;

        self.step += 1;
        let sim_sum: f64 = hit1.similarities.iter().chain(hit2.similarities.iter()).sum();
        let sim_count = (hit1.similarities.len() + hit2.similarities.len()).max(1);
        Ok(StepTrace {
            step,
            lr,
            loss_s: report.loss_s.as_f64(),
            loss_m: report.loss_m.as_f64(),
            loss_total: report.loss_total.as_f64(),
            queue_cos_mean: sim_sum / sim_count as f64,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    // -- checkpointing ------------------------------------------------------

    pub fn to_checkpoint(&self, cfg: &TrainConfig) -> Checkpoint<F> {
        let mut tensors: Vec<(String, ArrayD<F>)> = Vec::new();
        let mut push_stack = |prefix: &str, stack: &NetworkStack<F>| {
            for p in stack.params() {
                tensors.push((format!("{prefix}.{}", p.name), p.value.clone()));
            }
            for b in stack.buffers() {
                tensors.push((format!("{prefix}.{}", b.name), b.value.clone()));
            }
        };
        push_stack("online", &self.online);
        push_stack("momentum", &self.momentum);
        push_stack("stopgrad", &self.stopgrad);
        for (i, buf) in self.opt.buffers().iter().enumerate() {
            tensors.push((format!("opt.buf.{i}"), buf.clone()));
        }
        tensors.push((
            "queue.storage".to_string(),
            self.queue.storage().clone().into_dyn(),
        ));
        let flags: Vec<u8> = self.queue.filled_flags().iter().map(|&b| b as u8).collect();
        Checkpoint {
            tensors,
            byte_blobs: vec![("queue.filled".to_string(), flags)],
            scalars: vec![
                ("step".to_string(), self.step as u64),
                ("epoch".to_string(), self.epoch as u64),
                ("queue.cursor".to_string(), self.queue.cursor() as u64),
                ("queue.inserted_rows".to_string(), self.queue.inserted_rows()),
            ],
            config_text: cfg.to_text(),
        }
    }

    /// Rebuilds state from a checkpoint, validating structural identity
    /// against a freshly built model for `cfg`.
    pub fn from_checkpoint(ck: &Checkpoint<F>, cfg: &TrainConfig) -> Result<Self> {
        let mut state = TrainState::init(cfg)?;
        let map = ck.tensor_map();
        let restore_stack = |prefix: &str, stack: &mut NetworkStack<F>| -> Result<()> {
            for p in stack.params_mut() {
                let key = format!("{prefix}.{}", p.name);
                let t = map
                    .get(key.as_str())
                    .ok_or_else(|| Error::Structure(format!("checkpoint missing tensor {key}")))?;
                if t.shape() != p.value.shape() {
                    return Err(Error::Structure(format!(
                        "tensor {key}: shape {:?} != expected {:?}",
                        t.shape(),
                        p.value.shape()
                    )));
                }
                p.value.assign(t);
            }
            for b in stack.buffers_mut() {
                let key = format!("{prefix}.{}", b.name);
                let t = map
                    .get(key.as_str())
                    .ok_or_else(|| Error::Structure(format!("checkpoint missing tensor {key}")))?;
                if t.shape() != b.value.shape() {
                    return Err(Error::Structure(format!("tensor {key}: shape mismatch")));
                }
                b.value.assign(t);
            }
            Ok(())
        };
        restore_stack("online", &mut state.online)?;
        restore_stack("momentum", &mut state.momentum)?;
        restore_stack("stopgrad", &mut state.stopgrad)?;

        // optimizer buffers are lazily created at the first step, so a
        // step-zero checkpoint legitimately has none
        let expected = state.online.params().len();
        let mut opt_bufs = Vec::with_capacity(expected);
        for i in 0..expected {
            match map.get(format!("opt.buf.{i}").as_str()) {
                Some(t) => opt_bufs.push((*t).clone()),
                None => break,
            }
        }
        if !opt_bufs.is_empty() && opt_bufs.len() != expected {
            return Err(Error::Structure(format!(
                "checkpoint holds {} optimizer buffers for {} params",
                opt_bufs.len(),
                expected
            )));
        }
        state.opt.restore_buffers(opt_bufs);

        let storage = map
            .get("queue.storage")
            .ok_or_else(|| Error::Structure("checkpoint missing queue.storage".into()))?;
        let storage = (*storage)
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .map_err(|_| Error::Structure("queue.storage is not 2-d".into()))?;
        let flags_blob = ck
            .byte_blobs
            .iter()
            .find(|(n, _)| n == "queue.filled")
            .ok_or_else(|| Error::Structure("checkpoint missing queue.filled".into()))?;
        let filled: Vec<bool> = flags_blob.1.iter().map(|&b| b != 0).collect();
        state.queue = SupportQueue::from_parts(
            storage,
            ck.scalar("queue.cursor")? as usize,
            filled,
            ck.scalar("queue.inserted_rows")?,
        )?;
        state.step = ck.scalar("step")? as usize;
        state.epoch = ck.scalar("epoch")? as usize;
        Ok(state)
    }
}

fn loss_blowup_diagnostic<F: Scalar>(report: &LossReport<F>, inputs: &TotalLossInputs<'_, F>) -> String {
    let stat = |name: &str, m: &crate::EmbeddingBatch<F>| -> String {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let mut norm_acc = 0.0f64;
        for row in m.rows() {
            let mut n = 0.0f64;
            for v in row.iter() {
                let f = v.as_f64();
                lo = lo.min(f);
                hi = hi.max(f);
                n += f * f;
            }
            norm_acc += n.sqrt();
        }
        format!(
            "{name}: rows={} range=[{lo:.3e},{hi:.3e}] mean_row_norm={:.3e}",
            m.nrows(),
            norm_acc / m.nrows().max(1) as f64
        )
    };
    format!(
        "non-finite loss (loss_s={}, loss_m={}); {}; {}; {}; {}; {}; {}; {}",
        report.loss_s,
        report.loss_m,
        stat("c1", inputs.c1),
        stat("c3", inputs.c3),
        stat("z1n", inputs.z1n),
        stat("z2n", inputs.z2n),
        stat("p1", inputs.p1),
        stat("p2", inputs.p2),
        stat("p3", inputs.p3)
    )
}

/// Filesystem outputs of a fit run.
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub final_checkpoint: PathBuf,
    pub trace_path: PathBuf,
    /// (epoch, path) for every requested milestone.
    pub milestones: Vec<(usize, PathBuf)>,
    pub steps_run: usize,
}

#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    /// Continue from this checkpoint instead of initializing fresh.
    pub resume_from: Option<PathBuf>,
    /// Extra checkpoints after these epochs (1-based: epoch count completed).
    pub milestone_epochs: Vec<usize>,
    /// Print a progress line after each epoch.
    pub verbose: bool,
}

/// Runs `cfg.epochs` over the dataset, writing a trace CSV, periodic
/// checkpoints, and a final checkpoint under `out_dir`.
pub fn fit<F: Scalar>(
    dataset: &Arc<Dataset>,
    cfg: &TrainConfig,
    out_dir: &Path,
    opts: &FitOptions,
) -> Result<FitOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)
        .map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    let iter = BatchIterator::new(dataset, cfg.batch_size, cfg.seed, true)?;
    let spe = iter.batches_per_epoch();
    if spe == 0 && cfg.epochs > 0 {
        eprintln!(
            "warning: batch size {} exceeds dataset size {}; no training steps will run",
            cfg.batch_size,
            dataset.len()
        );
    }
    let total_steps = cfg.epochs * spe;

    let mut state = match &opts.resume_from {
        Some(path) => {
            let ck = Checkpoint::<F>::load(path)?;
            TrainState::from_checkpoint(&ck, cfg)?
        }
        None => TrainState::init(cfg)?,
    };

    let trace_path = out_dir.join("trace.csv");
    let mut trace = if state.step == 0 {
        let mut f = fs::File::create(&trace_path)
            .map_err(|e| Error::io(format!("creating {}", trace_path.display()), e))?;
        writeln!(f, "{}", StepTrace::CSV_HEADER)
            .map_err(|e| Error::io("writing trace header", e))?;
        f
    } else {
        fs::OpenOptions::new()
            .append(true)
            .create(true)
            .open(&trace_path)
            .map_err(|e| Error::io(format!("opening {}", trace_path.display()), e))?
    };

    let mut milestones = Vec::new();
    let mut steps_run = 0usize;
    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let epoch_start = Instant::now();
        for indices in iter.epoch_batches(epoch) {
            let batch = dataset.gather::<F>(&indices);
            let t = state.train_step(&batch, cfg, total_steps)?;
            writeln!(trace, "{}", t.to_csv_line())
                .map_err(|e| Error::io("writing trace line", e))?;
            steps_run += 1;
        }
        state.epoch += 1;
        if opts.verbose {
            eprintln!(
                "epoch {}/{} done in {:.1}s (step {})",
                state.epoch,
                cfg.epochs,
                epoch_start.elapsed().as_secs_f64(),
                state.step
            );
        }
        let completed = state.epoch;
        if cfg.checkpoint_every > 0 && completed % cfg.checkpoint_every == 0 && completed < cfg.epochs
        {
            let path = out_dir.join(format!("checkpoint_ep{completed}.ckpt"));
            state.to_checkpoint(cfg).save(&path)?;
        }
        if opts.milestone_epochs.contains(&completed) {
            let path = out_dir.join(format!("milestone_ep{completed}.ckpt"));
            state.to_checkpoint(cfg).save(&path)?;
            milestones.push((completed, path));
        }
    }
    trace
        .flush()
        .map_err(|e| Error::io("flushing trace", e))?;
    let final_path = out_dir.join("final.ckpt");
    state.to_checkpoint(cfg).save(&final_path)?;
    Ok(FitOutcome {
        final_checkpoint: final_path,
        trace_path,
        milestones,
        steps_run,
    })
}

/// Loads the back-propagation stack from a checkpoint for evaluation.
pub fn load_online_stack<F: Scalar>(path: &Path) -> Result<(NetworkStack<F>, TrainConfig)> {
    let ck = Checkpoint::<F>::load(path)?;
    let cfg = TrainConfig::parse(&ck.config_text)?;
    let state = TrainState::from_checkpoint(&ck, &cfg)?;
    Ok((state.online, cfg))
}
