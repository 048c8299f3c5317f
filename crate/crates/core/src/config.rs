//! Run configuration: defaults, validation, and the text config format.
//!
//! Config files are plain text with `[train]`, `[augment]`, and `[loss]`
//! sections of `key = value` lines. Every key has a default (the reference
//! pretraining configuration), and the writer always emits the full set, so
//! an emitted config is a complete echo of the run.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::augment::AugmentPolicy;
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::nn::backbone::BackboneKind;
use crate::nn::stack::ArchConfig;

/// Which stop-gradient combinations feed the loss each step: all of them,
/// or one randomly drawn block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    Full,
    SingleEmbedding,
}

impl SampleMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            SampleMode::Full => "full",
            SampleMode::SingleEmbedding => "single-embedding",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "full" => Some(SampleMode::Full),
            "single-embedding" => Some(SampleMode::SingleEmbedding),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub opt_momentum: f64,
    pub weight_decay: f64,
    pub bn_weight_decay: bool,
    pub lr_initial: f64,
    pub lr_final: f64,
    pub ema_m: f64,
    pub queue_capacity: usize,
    pub combine_k: usize,
    pub seed: u64,
    /// Checkpoint period in epochs; 0 keeps only the final checkpoint.
    pub checkpoint_every: usize,
    pub backbone: BackboneKind,
    pub proj_hidden: usize,
    pub proj_out: usize,
    pub pred_hidden: usize,
    pub sample_mode: SampleMode,
    pub prefetch_depth: usize,
    pub augment: AugmentPolicy,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    /// Reference pretraining configuration: 200 epochs of SGD (momentum 0.9,
    /// weight decay 1e-4), cosine learning rate 0.1 -> 0, batch 256,
    /// temperature 1.0, EMA coefficient 0.99, queue of 16384, lambda 6,
    /// combine k 2, ResNet-18 backbone.
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 256,
            opt_momentum: 0.9,
            weight_decay: 1e-4,
            bn_weight_decay: false,
            lr_initial: 0.1,
            lr_final: 0.0,
            ema_m: 0.99,
            queue_capacity: 16384,
            combine_k: 2,
            seed: 1,
            checkpoint_every: 50,
            backbone: BackboneKind::Resnet18Cifar,
            proj_hidden: 2048,
            proj_out: 2048,
            pred_hidden: 512,
            sample_mode: SampleMode::Full,
            prefetch_depth: 0,
            augment: AugmentPolicy::standard(32),
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Defaults with architecture dimensions sized for `kind`.
    pub fn preset(kind: BackboneKind) -> Self {
        let arch = ArchConfig::for_kind(kind);
        TrainConfig {
            backbone: kind,
            proj_hidden: arch.proj_hidden,
            proj_out: arch.proj_out,
            pred_hidden: arch.pred_hidden,
            ..TrainConfig::default()
        }
    }

    pub fn arch(&self) -> ArchConfig {
        ArchConfig {
            backbone: self.backbone,
            in_channels: 3,
            proj_hidden: self.proj_hidden,
            proj_out: self.proj_out,
            pred_hidden: self.pred_hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch_size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_m) {
            return Err(Error::Parameter(format!("ema_m {} outside [0,1]", self.ema_m)));
        }
        if self.queue_capacity == 0 {
            return Err(Error::Parameter("queue_capacity must be >= 1".into()));
        }
        if !(1..=4).contains(&self.combine_k) {
            return Err(Error::Parameter(format!(
                "combine_k {} outside 1..=4",
                self.combine_k
            )));
        }
        if self.lr_initial < 0.0 || self.lr_final < 0.0 {
            return Err(Error::Parameter("learning rates must be >= 0".into()));
        }
        if self.proj_hidden == 0 || self.proj_out == 0 || self.pred_hidden == 0 {
            return Err(Error::Parameter("mlp dims must be >= 1".into()));
        }
        self.augment.validate()?;
        self.loss.validate()?;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let a = &self.augment;
        let _ = write!(
            s,
            "[train]\n\
             epochs = {}\n\
             batch_size = {}\n\
             optimizer = sgd\n\
             opt_momentum = {}\n\
             weight_decay = {}\n\
             bn_weight_decay = {}\n\
             lr_initial = {}\n\
             lr_final = {}\n\
             ema_m = {}\n\
             queue_capacity = {}\n\
             combine_k = {}\n\
             seed = {}\n\
             checkpoint_every = {}\n\
             backbone = {}\n\
             proj_hidden = {}\n\
             proj_out = {}\n\
             pred_hidden = {}\n\
             sample_mode = {}\n\
             prefetch_depth = {}\n\
             \n\
             [augment]\n\
             crop_scale_min = {}\n\
             crop_scale_max = {}\n\
             flip_prob = {}\n\
             jitter_brightness = {}\n\
             jitter_contrast = {}\n\
             jitter_saturation = {}\n\
             jitter_hue = {}\n\
             color_jitter_prob = {}\n\
             grayscale_prob = {}\n\
             blur_kernel = {}\n\
             blur_sigma_min = {}\n\
             blur_sigma_max = {}\n\
             blur_prob = {}\n\
             output_h = {}\n\
             output_w = {}\n\
             mean = {}\n\
             std = {}\n\
             \n\
             [loss]\n\
             temperature = {}\n\
             lambda = {}\n",
            self.epochs,
            self.batch_size,
            self.opt_momentum,
            self.weight_decay,
            self.bn_weight_decay,
            self.lr_initial,
            self.lr_final,
            self.ema_m,
            self.queue_capacity,
            self.combine_k,
            self.seed,
            self.checkpoint_every,
            self.backbone.as_str(),
            self.proj_hidden,
            self.proj_out,
            self.pred_hidden,
            self.sample_mode.as_str(),
            self.prefetch_depth,
            a.crop_scale_range.0,
            a.crop_scale_range.1,
            a.flip_prob,
            a.jitter.0,
            a.jitter.1,
            a.jitter.2,
            a.jitter.3,
            a.color_jitter_prob,
            a.grayscale_prob,
            a.blur_kernel,
            a.blur_sigma_range.0,
            a.blur_sigma_range.1,
            a.blur_prob,
            a.output_hw.0,
            a.output_hw.1,
            join_f64(&a.norm_mean),
            join_f64(&a.norm_std),
            self.loss.temperature,
            self.loss.lambda,
        );
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let sections = parse_sections(text)?;
        let mut cfg = TrainConfig::default();
        let empty = BTreeMap::new();
        let train = sections.get("train").unwrap_or(&empty);
        for (key, value) in train {
            match key.as_str() {
                "epochs" => cfg.epochs = parse_num(key, value)?,
                "batch_size" => cfg.batch_size = parse_num(key, value)?,
                "optimizer" => {
                    if value != "sgd" {
                        return Err(Error::Config(format!("unsupported optimizer {value}")));
                    }
                }
                "opt_momentum" => cfg.opt_momentum = parse_f64(key, value)?,
                "weight_decay" => cfg.weight_decay = parse_f64(key, value)?,
                "bn_weight_decay" => cfg.bn_weight_decay = parse_bool(key, value)?,
                "lr_initial" => cfg.lr_initial = parse_f64(key, value)?,
                "lr_final" => cfg.lr_final = parse_f64(key, value)?,
                "ema_m" => cfg.ema_m = parse_f64(key, value)?,
                "queue_capacity" => cfg.queue_capacity = parse_num(key, value)?,
                "combine_k" => cfg.combine_k = parse_num(key, value)?,
                "seed" => cfg.seed = parse_num::<u64>(key, value)?,
                "checkpoint_every" => cfg.checkpoint_every = parse_num(key, value)?,
                "backbone" => {
                    cfg.backbone = BackboneKind::parse(value)
                        .ok_or_else(|| Error::Config(format!("unknown backbone {value}")))?;
                    let arch = ArchConfig::for_kind(cfg.backbone);
                    if !train.contains_key("proj_hidden") {
                        cfg.proj_hidden = arch.proj_hidden;
                    }
                    if !train.contains_key("proj_out") {
                        cfg.proj_out = arch.proj_out;
                    }
                    if !train.contains_key("pred_hidden") {
                        cfg.pred_hidden = arch.pred_hidden;
                    }
                }
                "proj_hidden" => cfg.proj_hidden = parse_num(key, value)?,
                "proj_out" => cfg.proj_out = parse_num(key, value)?,
                "pred_hidden" => cfg.pred_hidden = parse_num(key, value)?,
                "sample_mode" => {
                    cfg.sample_mode = SampleMode::parse(value)
                        .ok_or_else(|| Error::Config(format!("unknown sample_mode {value}")))?
                }
                "prefetch_depth" => cfg.prefetch_depth = parse_num(key, value)?,
                _ => return Err(Error::Config(format!("unknown key {key} in [train]"))),
            }
        }
        let aug = sections.get("augment").unwrap_or(&empty);
        let a = &mut cfg.augment;
        for (key, value) in aug {
            match key.as_str() {
                "crop_scale_min" => a.crop_scale_range.0 = parse_f64(key, value)?,
                "crop_scale_max" => a.crop_scale_range.1 = parse_f64(key, value)?,
                "flip_prob" => a.flip_prob = parse_f64(key, value)?,
                "jitter_brightness" => a.jitter.0 = parse_f64(key, value)?,
                "jitter_contrast" => a.jitter.1 = parse_f64(key, value)?,
                "jitter_saturation" => a.jitter.2 = parse_f64(key, value)?,
                "jitter_hue" => a.jitter.3 = parse_f64(key, value)?,
                "color_jitter_prob" => a.color_jitter_prob = parse_f64(key, value)?,
                "grayscale_prob" => a.grayscale_prob = parse_f64(key, value)?,
                "blur_kernel" => a.blur_kernel = parse_num(key, value)?,
                "blur_sigma_min" => a.blur_sigma_range.0 = parse_f64(key, value)?,
                "blur_sigma_max" => a.blur_sigma_range.1 = parse_f64(key, value)?,
                "blur_prob" => a.blur_prob = parse_f64(key, value)?,
                "output_h" => a.output_hw.0 = parse_num(key, value)?,
                "output_w" => a.output_hw.1 = parse_num(key, value)?,
                "mean" => a.norm_mean = parse_f64_list(key, value)?,
                "std" => a.norm_std = parse_f64_list(key, value)?,
                _ => return Err(Error::Config(format!("unknown key {key} in [augment]"))),
            }
        }
        let loss = sections.get("loss").unwrap_or(&empty);
        for (key, value) in loss {
            match key.as_str() {
                "temperature" => cfg.loss.temperature = parse_f64(key, value)?,
                "lambda" => cfg.loss.lambda = parse_f64(key, value)?,
                _ => return Err(Error::Config(format!("unknown key {key} in [loss]"))),
            }
        }
        for name in sections.keys() {
            if !matches!(name.as_str(), "train" | "augment" | "loss") {
                return Err(Error::Config(format!("unknown section [{name}]")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Frozen-encoder linear-probe protocol parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_final: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub trust_coeff: f64,
    pub eps: f64,
    /// Random crop + flip on probe-training inputs; test inputs are
    /// normalize-only either way.
    pub probe_augment: bool,
    pub seed: u64,
}

impl Default for EvalConfig {
    /// Reference protocol: LARS (momentum 0.9, weight decay 0), cosine
    /// learning rate 0.8 -> 0, 90 epochs, batch 256.
    fn default() -> Self {
        EvalConfig {
            epochs: 90,
            batch_size: 256,
            lr_initial: 0.8,
            lr_final: 0.0,
            momentum: 0.9,
            weight_decay: 0.0,
            trust_coeff: 0.001,
            eps: 1e-8,
            probe_augment: true,
            seed: 1,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Parameter("eval epochs/batch_size must be >= 1".into()));
        }
        if self.lr_initial < 0.0 || self.trust_coeff <= 0.0 || self.eps <= 0.0 {
            return Err(Error::Parameter("invalid eval optimizer constants".into()));
        }
        Ok(())
    }
}

fn join_f64(v: &[f64]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

type Sections = BTreeMap<String, BTreeMap<String, String>>;

fn parse_sections(text: &str) -> Result<Sections> {
    let mut sections: Sections = BTreeMap::new();
    let mut current: Option<String> = None;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = Some(name.trim().to_string());
            sections.entry(name.trim().to_string()).or_default();
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected key = value", lineno + 1))
        })?;
        let section = current
            .clone()
            .ok_or_else(|| Error::Config(format!("line {}: key outside a section", lineno + 1)))?;
        sections
            .get_mut(&section)
            .unwrap()
            .insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(sections)
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| Error::Config(format!("key {key}: cannot parse integer from {value:?}")))
}

fn parse_f64(key: &str, value: &str) -> Result<f64> {
    value
        .parse::<f64>()
        .map_err(|_| Error::Config(format!("key {key}: cannot parse number from {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!(
            "key {key}: expected true/false, got {value:?}"
        ))),
    }
}

fn parse_f64_list(key: &str, value: &str) -> Result<Vec<f64>> {
    value.split(',').map(|s| parse_f64(key, s.trim())).collect()
}
