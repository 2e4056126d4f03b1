//! Segmentation metrics, per-run convergence records and their CSV files.

mod metrics;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

pub use metrics::{
    binarize, bucket_dice, components, dice_score, iou, small_object_dice, Bucket, BINARIZE_AT, BUCKET_DILATION,
    SMALL_AREA_PX,
};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{Model, Variant};
use crate::nn::ParamStore;
use crate::tensor::Tape;

pub const EVAL_HEADER: &str = "sample_id,dice,iou,dice_small,dice_large";
pub const CONVERGENCE_HEADER: &str = "variant,seed,epochs_to_threshold,wall_time_s,final_val_dice";

#[derive(Clone, Debug, PartialEq)]
pub struct SampleMetrics {
    pub sample_id: usize,
    pub dice: f64,
    pub iou: f64,
    pub dice_small: Option<f64>,
    pub dice_large: Option<f64>,
}

impl SampleMetrics {
    /// Metrics of one binary prediction against its mask.
    pub fn compute(
        sample_id: usize,
        pred_bin: &crate::Tensor<f32>,
        m: &crate::Tensor<f32>,
        areas: &[usize],
        threshold_px: usize,
    ) -> Result<Self> {
        let (h, w) = metrics::plane(m)?;
        let dice_large = if areas.iter().any(|&a| a > threshold_px) {
            bucket_dice(pred_bin.data(), m.data(), h, w, threshold_px, Bucket::Large)
        } else {
            None
        };
        Ok(Self {
            sample_id,
            dice: dice_score(pred_bin, m)?,
            iou: iou(pred_bin, m)?,
            dice_small: small_object_dice(pred_bin, m, areas, threshold_px)?,
            dice_large,
        })
    }
}

/// Metrics over a set of samples. Bucketed means cover only samples that
/// contain an object of that bucket.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub dice: f64,
    pub iou: f64,
    pub dice_small: f64,
    pub dice_large: f64,
    pub samples_with_small: usize,
    pub samples_with_large: usize,
    pub per_sample: Vec<SampleMetrics>,
}

fn mean(v: impl Iterator<Item = f64>) -> (f64, usize) {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (if n == 0 { f64::NAN } else { s / n as f64 }, n)
}

impl EvalResult {
    pub fn from_samples(per_sample: Vec<SampleMetrics>) -> Self {
        let (dice, _) = mean(per_sample.iter().map(|s| s.dice));
        let (iou, _) = mean(per_sample.iter().map(|s| s.iou));
        let (dice_small, samples_with_small) = mean(per_sample.iter().filter_map(|s| s.dice_small));
        let (dice_large, samples_with_large) = mean(per_sample.iter().filter_map(|s| s.dice_large));
        Self { dice, iou, dice_small, dice_large, samples_with_small, samples_with_large, per_sample }
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut s = format!("{EVAL_HEADER}\n");
        for r in &self.per_sample {
            let _ = writeln!(s, "{},{},{},{},{}", r.sample_id, r.dice, r.iou, opt(r.dice_small), opt(r.dice_large));
        }
        s
    }
}

/// Predict every sample in `indices` with the image branch and score it.
pub fn evaluate(
    model: &Model,
    store: &ParamStore<f32>,
    data: &Dataset,
    indices: &[usize],
    threshold_px: usize,
) -> Result<EvalResult> {
    let mut rows = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(8) {
        let (x, _) = data.batch(chunk)?;
        let mut tape = Tape::with_params(store);
        let y = model.predict(&mut tape, &x)?;
        let y = tape.value(y);
        for (k, &i) in chunk.iter().enumerate() {
            let s = &data.samples[i];
            let pred = binarize(&y.sample(k)?);
            let pred = pred.reshape(s.m.shape())?;
            rows.push(SampleMetrics::compute(i, &pred, &s.m, &s.areas, threshold_px)?);
        }
    }
    Ok(EvalResult::from_samples(rows))
}

/// Result of one training run in a comparison.
#[derive(Clone, Debug, PartialEq)]
pub enum Outcome {
    Reached(usize),
    NotReached,
    Failed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceRow {
    pub variant: Variant,
    pub seed: u64,
    pub outcome: Outcome,
    pub wall_time_s: f64,
    /// Dice on the validation split with the kept weights; NaN for failed runs.
    pub final_val_dice: f64,
}

impl ConvergenceRow {
    pub fn epochs_to_threshold(&self) -> Option<usize> {
        match self.outcome {
            Outcome::Reached(e) => Some(e),
            _ => None,
        }
    }
}

pub fn convergence_csv(rows: &[ConvergenceRow]) -> String {
    let mut s = format!("{CONVERGENCE_HEADER}\n");
    for r in rows {
        let epochs = match r.outcome {
            Outcome::Reached(e) => e.to_string(),
            Outcome::NotReached => "not-reached".into(),
            Outcome::Failed => "failed".into(),
        };
        let dice = if r.final_val_dice.is_nan() { String::new() } else { r.final_val_dice.to_string() };
        let _ = writeln!(s, "{},{},{epochs},{},{dice}", r.variant, r.seed, r.wall_time_s);
    }
    s
}

/// Write `contents` to `path` through a temporary sibling, so an I/O failure
/// leaves no partial file behind.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let result = fs::write(&tmp, contents).and_then(|_| fs::rename(&tmp, path));
    result.map_err(|e| {
        let _ = fs::remove_file(&tmp);
        let _ = fs::remove_file(path);
        Error::io(path, e)
    })
}

/// Write `eval.csv` and `convergence.csv` into `dir`. Both are removed again
/// if either write fails.
pub fn emit(dir: &Path, eval: &EvalResult, rows: &[ConvergenceRow]) -> Result<()> {
    if eval.per_sample.is_empty() && rows.is_empty() {
        return Err(Error::invalid("emit", "nothing to write"));
    }
    let eval_path = dir.join("eval.csv");
    let conv_path = dir.join("convergence.csv");
    let result =
        write_atomic(&eval_path, &eval.to_csv()).and_then(|_| write_atomic(&conv_path, &convergence_csv(rows)));
    if result.is_err() {
        let _ = fs::remove_file(&eval_path);
        let _ = fs::remove_file(&conv_path);
    }
    result
}

fn parse_rows<R>(path: &Path, header: &str, mut row: impl FnMut(&[&str]) -> Option<R>) -> Result<Vec<R>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let first = lines.next().unwrap_or_default();
    if first != header {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset: 0,
            detail: format!("header `{first}` does not match `{header}`"),
        });
    }
    let mut offset = first.len() as u64 + 1;
    let mut out = Vec::new();
    for line in lines {
        let cols: Vec<&str> = line.split(',').collect();
        out.push(row(&cols).ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            offset,
            detail: format!("malformed row `{line}`"),
        })?);
        offset += line.len() as u64 + 1;
    }
    Ok(out)
}

pub fn parse_eval_csv(path: &Path) -> Result<Vec<SampleMetrics>> {
    let opt = |s: &str| -> Option<Option<f64>> {
        if s.is_empty() {
            Some(None)
        } else {
            s.parse().ok().map(Some)
        }
    };
    parse_rows(path, EVAL_HEADER, |c| {
        let [id, d, i, s, l] = c else { return None };
        Some(SampleMetrics {
            sample_id: id.parse().ok()?,
            dice: d.parse().ok()?,
            iou: i.parse().ok()?,
            dice_small: opt(s)?,
            dice_large: opt(l)?,
        })
    })
}

pub fn parse_convergence_csv(path: &Path) -> Result<Vec<ConvergenceRow>> {
    parse_rows(path, CONVERGENCE_HEADER, |c| {
        let [v, seed, e, t, d] = c else { return None };
        Some(ConvergenceRow {
            variant: v.parse().ok()?,
            seed: seed.parse().ok()?,
            outcome: match *e {
                "not-reached" => Outcome::NotReached,
                "failed" => Outcome::Failed,
                n => Outcome::Reached(n.parse().ok()?),
            },
            wall_time_s: t.parse().ok()?,
            final_val_dice: if d.is_empty() { f64::NAN } else { d.parse().ok()? },
        })
    })
}

/// Mean and sample standard deviation (0 for a single value). `None` when empty.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    Some((mean, var.sqrt()))
}
