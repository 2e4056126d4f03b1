//! Optimizer, learning-rate schedule, the training loop and checkpoints.

mod adam;
pub mod checkpoint;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use adam::{AdamConfig, AdamState};

use crate::data::{Dataset, DatasetSplit};
use crate::error::{Error, Result};
use crate::losses::{self, LossBreakdown, LossWeights, LEVELS};
use crate::models::{Model, Variant};
use crate::nn::ParamStore;
use crate::tensor::{Tape, Tensor};

/// How the decay factor is applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecayMode {
    /// Multiply by the factor once per `decay_every` epochs, compounding.
    Compound,
    /// Apply the factor a single time, from epoch `decay_every` on.
    Single,
}

/// When a run counts as converged for the speed comparison.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Threshold {
    /// Validation total loss at or below `ratio ×` the lowest validation
    /// total loss the run reached.
    FloorRatio(f64),
    /// Validation total loss at or below a fixed value.
    Absolute(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub decay_mode: DecayMode,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    /// Improvement in validation total loss needed to reset the patience counter.
    pub min_delta: f64,
    pub batch_size: usize,
    /// Seeds the per-epoch shuffle of the training indices.
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub adam: AdamConfig,
    pub threshold: Threshold,
    /// Stop as soon as an epoch's mean training total loss drops below this.
    pub stop_below: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 3e-4,
            decay_factor: 0.9,
            decay_every: 3,
            decay_mode: DecayMode::Compound,
            max_epochs: 200,
            early_stop_patience: 10,
            min_delta: 1e-5,
            batch_size: 4,
            seed: 0,
            loss_weights: LossWeights::default(),
            adam: AdamConfig::default(),
            threshold: Threshold::FloorRatio(1.5),
            stop_below: None,
        }
    }
}

impl TrainConfig {
    /// Defaults with the reconstruction weight switched off for variants
    /// that have no tied decoder.
    pub fn for_variant(variant: Variant) -> Self {
        let mut cfg = Self::default();
        if !variant.has_tied_decoder() {
            cfg.loss_weights.beta = 0.0;
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config(format!("decay_factor must be in (0, 1], got {}", self.decay_factor)));
        }
        if self.decay_every == 0 {
            return Err(Error::Config("decay_every must be at least 1".into()));
        }
        if self.early_stop_patience == 0 {
            return Err(Error::Config("early_stop_patience must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        self.loss_weights.validate()
    }
}

/// Learning rate for a zero-based epoch.
pub fn lr_at_epoch(epoch: usize, cfg: &TrainConfig) -> f64 {
    let steps = epoch / cfg.decay_every.max(1);
    match cfg.decay_mode {
        DecayMode::Compound => cfg.lr0 * cfg.decay_factor.powi(steps as i32),
        DecayMode::Single if steps >= 1 => cfg.lr0 * cfg.decay_factor,
        DecayMode::Single => cfg.lr0,
    }
}

/// Reject weight settings the variant cannot honour.
pub fn check_compatibility(variant: Variant, w: &LossWeights) -> Result<()> {
    if w.beta > 0.0 && !variant.has_tied_decoder() {
        return Err(Error::Config(format!(
            "beta = {} weights the reconstruction term, but {variant} has no tied decoder to reconstruct the image; use twi or twae, or set beta to 0",
            w.beta
        )));
    }
    Ok(())
}

/// Record the variant's objective for one batch and return it with its terms.
pub fn batch_loss(
    model: &Model,
    tape: &mut Tape<'_, f32>,
    x: &Tensor<f32>,
    m: &Tensor<f32>,
    w: &LossWeights,
) -> Result<(crate::Var, LossBreakdown)> {
    let out = model.forward(tape, x, Some(m))?;
    let mv = tape.leaf(m.clone(), false);
    let detach = model.config().detach_mask_branch;
    match model.variant() {
        Variant::Unet => losses::image_only(tape, &out, mv, w),
        Variant::Inter | Variant::Ae | Variant::Sae => losses::hybrid_h1(tape, &out, mv, w, detach),
        Variant::Twi | Variant::Twae => {
            // reconstruction target: the image stretched to the full [0, 1] range
            let xv = tape.leaf(x.minmax_per_sample()?, false);
            losses::total_h(tape, &out, xv, mv, w, detach)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train: LossBreakdown,
    pub val: LossBreakdown,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub variant: Variant,
    /// Validation losses before any update.
    pub initial_val: LossBreakdown,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose weights were kept (lowest validation total loss).
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
    pub wall_time_s: f64,
    pub threshold: Threshold,
}

impl TrainReport {
    /// Lowest validation total loss over the trained epochs.
    pub fn val_floor(&self) -> Option<f64> {
        self.epochs.iter().map(|e| e.val.l_h).reduce(f64::min)
    }

    /// Number of epochs until validation total loss first met the threshold,
    /// or `None` when it never did.
    pub fn epochs_to_threshold(&self) -> Option<usize> {
        let limit = match self.threshold {
            Threshold::FloorRatio(r) => r * self.val_floor()?,
            Threshold::Absolute(t) => t,
        };
        self.epochs.iter().position(|e| e.val.l_h <= limit).map(|i| i + 1)
    }

    pub fn epochs_csv(&self) -> String {
        let mut s = String::from("epoch,lr,l_image,l_mask");
        for j in 0..LEVELS {
            let _ = write!(s, ",l_j{j}");
        }
        s.push_str(",l_t,l_h1,l_h,split\n");
        for e in &self.epochs {
            for (name, b) in [("train", &e.train), ("val", &e.val)] {
                let _ = write!(s, "{},{},{},{}", e.epoch, e.lr, b.l_image, b.l_mask);
                for v in b.l_j {
                    let _ = write!(s, ",{v}");
                }
                let _ = writeln!(s, ",{},{},{},{name}", b.l_t, b.l_h1, b.l_h);
            }
        }
        s
    }

    pub fn write_epochs_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.epochs_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Mean loss terms over `indices`, without updating anything.
pub fn evaluate_loss(
    model: &Model,
    store: &ParamStore<f32>,
    data: &Dataset,
    indices: &[usize],
    w: &LossWeights,
    batch_size: usize,
) -> Result<LossBreakdown> {
    let mut total = LossBreakdown::default();
    if indices.is_empty() {
        return Ok(total);
    }
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, m) = data.batch(chunk)?;
        let mut tape = Tape::with_params(store);
        let (_, b) = batch_loss(model, &mut tape, &x, &m, w)?;
        total.add_scaled(&b, chunk.len() as f64 / indices.len() as f64);
    }
    Ok(total)
}

/// Train `model` on the split's training part, validating every epoch.
///
/// Parameters end at the best validation epoch. With `max_epochs = 0` only
/// the initial validation loss is measured.
pub fn train(
    model: &Model,
    store: &mut ParamStore<f32>,
    data: &Dataset,
    split: &DatasetSplit,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    check_compatibility(model.variant(), &cfg.loss_weights)?;
    split.check_disjoint()?;
    if split.train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let start = Instant::now();
    let w = &cfg.loss_weights;
    let handles = model.handles();
    let mut adam = AdamState::new(cfg.adam);
    let val_or_train = if split.val.is_empty() { &split.train } else { &split.val };

    let initial_val = evaluate_loss(model, store, data, val_or_train, w, cfg.batch_size)?;
    let mut report = TrainReport {
        variant: model.variant(),
        initial_val: initial_val.clone(),
        epochs: Vec::new(),
        best_epoch: None,
        stopped_early: false,
        wall_time_s: 0.0,
        threshold: cfg.threshold,
    };
    let mut best = (initial_val.l_h, store.snapshot());
    let mut stale = 0;
    let mut order = split.train.clone();
    for epoch in 0..cfg.max_epochs {
        let lr = lr_at_epoch(epoch, cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.clone_from(&split.train);
        order.shuffle(&mut rng);

        let mut train_loss = LossBreakdown::default();
        for chunk in order.chunks(cfg.batch_size) {
            let (x, m) = data.batch(chunk)?;
            let b = {
                let mut tape = Tape::with_params(&*store);
                let (loss, b) = batch_loss(model, &mut tape, &x, &m, w)?;
                tape.backward(loss)?;
                b
            };
            // a non-finite loss shows up here as the first parameter with a bad gradient
            adam.step(store, &handles, lr)?;
            if !b.l_h.is_finite() {
                return Err(Error::Invalid { op: "train", detail: format!("loss became non-finite at epoch {epoch}") });
            }
            store.zero_grad();
            train_loss.add_scaled(&b, chunk.len() as f64 / order.len() as f64);
        }
        let val = evaluate_loss(model, store, data, val_or_train, w, cfg.batch_size)?;
        log::info!("{} epoch {epoch}: lr {lr:.3e} train {:.5} val {:.5}", model.variant(), train_loss.l_h, val.l_h);
        let train_total = train_loss.l_h;
        let val_total = val.l_h;
        report.epochs.push(EpochRecord { epoch, lr, train: train_loss, val });
        if val_total < best.0 - cfg.min_delta {
            best = (val_total, store.snapshot());
            report.best_epoch = Some(epoch);
            stale = 0;
        } else {
            stale += 1;
        }
        if cfg.stop_below.is_some_and(|t| train_total < t) {
            break;
        }
        if stale >= cfg.early_stop_patience {
            report.stopped_early = true;
            break;
        }
    }
    if cfg.stop_below.is_none() && report.best_epoch.is_some() {
        store.restore(&best.1)?;
    }
    report.wall_time_s = start.elapsed().as_secs_f64();
    Ok(report)
}
