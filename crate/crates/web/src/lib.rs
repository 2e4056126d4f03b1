//! Browser bindings for the `isunet` demo page.
//!
//! Three things are exposed: drawing synthetic samples, plotting the
//! learning-rate schedule, and a [`Trainer`] that overfits a tiny model one
//! step at a time so the page can animate the loss and the prediction.

use isunet::data::{generate, Dataset, SynthSpec};
use isunet::models::{Model, ModelConfig, Variant};
use isunet::nn::ParamStore;
use isunet::report::{binarize, dice_score, small_object_dice, SMALL_AREA_PX};
use isunet::train::{batch_loss, lr_at_epoch, AdamConfig, AdamState, DecayMode, TrainConfig};
use isunet::{Tape, Tensor};
use wasm_bindgen::prelude::*;

fn js(e: isunet::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Synthetic-data settings for a square image of side `size`, with object
/// radii scaled from the 64-pixel defaults.
fn spec_for(size: usize, count: usize, noise_std: f64, large_prob: f64) -> SynthSpec {
    let d = SynthSpec::default();
    let s = size as f64 / 64.0;
    let scale = |r: &std::ops::RangeInclusive<f64>| (r.start() * s).max(1.0)..=(r.end() * s).max(1.0);
    SynthSpec {
        count,
        height: size,
        width: size,
        small_radius: scale(&d.small_radius),
        large_radius: scale(&d.large_radius),
        noise_std,
        large_object_prob: large_prob,
        ..d
    }
}

/// One synthetic image with its mask and per-object pixel areas.
#[wasm_bindgen]
pub struct SampleView {
    size: usize,
    image: Vec<f32>,
    mask: Vec<f32>,
    areas: Vec<u32>,
}

impl SampleView {
    pub fn generate(seed: u64, index: usize, size: usize, noise_std: f64, large_prob: f64) -> isunet::Result<Self> {
        let spec = spec_for(size, 1, noise_std, large_prob);
        spec.validate()?;
        let s = isunet::data::generate_sample(&spec, seed, index)?;
        Ok(SampleView {
            size,
            image: s.x.into_data(),
            mask: s.m.into_data(),
            areas: s.areas.iter().map(|&a| a as u32).collect(),
        })
    }
}

#[wasm_bindgen]
impl SampleView {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn image(&self) -> Vec<f32> {
        self.image.clone()
    }

    pub fn mask(&self) -> Vec<f32> {
        self.mask.clone()
    }

    /// Pixel area of each object, large object first when there is one.
    pub fn areas(&self) -> Vec<u32> {
        self.areas.clone()
    }

    /// Objects within the small-object area cut-off used by the metrics.
    pub fn small_objects(&self) -> usize {
        self.areas.iter().filter(|&&a| (a as usize) <= SMALL_AREA_PX).count()
    }
}

#[wasm_bindgen]
pub fn synth_sample(
    seed: u64,
    index: usize,
    size: usize,
    noise_std: f64,
    large_prob: f64,
) -> Result<SampleView, JsError> {
    SampleView::generate(seed, index, size, noise_std, large_prob).map_err(js)
}

/// Learning rate at each of the first `epochs` epochs.
pub fn schedule(lr0: f64, factor: f64, every: usize, single: bool, epochs: usize) -> Vec<f64> {
    let cfg = TrainConfig {
        lr0,
        decay_factor: factor,
        decay_every: every.max(1),
        decay_mode: if single { DecayMode::Single } else { DecayMode::Compound },
        ..TrainConfig::default()
    };
    (0..epochs).map(|e| lr_at_epoch(e, &cfg)).collect()
}

#[wasm_bindgen]
pub fn lr_schedule(lr0: f64, factor: f64, every: usize, single: bool, epochs: usize) -> Vec<f64> {
    schedule(lr0, factor, every, single, epochs)
}

/// A small model overfitting a fixed batch, advanced one Adam step at a time.
#[wasm_bindgen]
pub struct Trainer {
    model: Model,
    store: ParamStore<f32>,
    adam: AdamState<f32>,
    data: Dataset,
    x: Tensor<f32>,
    m: Tensor<f32>,
    cfg: TrainConfig,
    step: usize,
    last: Vec<f64>,
}

pub const DEMO_SIZE: usize = 32;
pub const DEMO_BASE: usize = 4;

impl Trainer {
    pub fn build(variant: &str, seed: u64, samples: usize, lr: f64) -> isunet::Result<Self> {
        let variant: Variant = variant.parse()?;
        let data = generate(&spec_for(DEMO_SIZE, samples.max(1), 0.05, 0.5), seed)?;
        let mut store = ParamStore::new(seed);
        let cfg = ModelConfig { base_channels: DEMO_BASE, ..ModelConfig::new(variant) };
        let model = Model::build(&cfg, &mut store)?;
        let all: Vec<usize> = (0..data.len()).collect();
        let (x, m) = data.batch(&all)?;
        let cfg = TrainConfig { lr0: lr, decay_factor: 1.0, ..TrainConfig::for_variant(variant) };
        Ok(Trainer {
            model,
            store,
            adam: AdamState::new(AdamConfig::default()),
            data,
            x,
            m,
            cfg,
            step: 0,
            last: Vec::new(),
        })
    }

    /// One full-batch Adam step; returns the loss measured before the update.
    pub fn advance(&mut self) -> isunet::Result<f64> {
        let b = {
            let mut tape = Tape::with_params(&self.store);
            let (loss, b) = batch_loss(&self.model, &mut tape, &self.x, &self.m, &self.cfg.loss_weights)?;
            tape.backward(loss)?;
            b
        };
        self.adam.step(&mut self.store, &self.model.handles(), self.cfg.lr0)?;
        self.store.zero_grad();
        self.step += 1;
        self.last = vec![b.l_h, b.l_image, b.l_mask, b.l_j.iter().sum(), b.l_t];
        Ok(b.l_h)
    }

    fn predicted(&self, i: usize) -> isunet::Result<Tensor<f32>> {
        let x = self.x.sample(i)?;
        let mut tape = Tape::with_params(&self.store);
        let y = self.model.predict(&mut tape, &x)?;
        Ok(tape.value(y).clone())
    }

    pub fn score(&self, i: usize) -> isunet::Result<(f64, Option<f64>)> {
        let y = binarize(&self.predicted(i)?);
        let m = self.m.sample(i)?;
        let s = &self.data.samples[i];
        Ok((dice_score(&y, &m)?, small_object_dice(&y, &m, &s.areas, SMALL_AREA_PX)?))
    }
}

#[wasm_bindgen]
impl Trainer {
    #[wasm_bindgen(constructor)]
    pub fn new(variant: &str, seed: u64, samples: usize, lr: f64) -> Result<Trainer, JsError> {
        Trainer::build(variant, seed, samples, lr).map_err(js)
    }

    /// Run `n` steps and return the loss after the last one.
    pub fn train(&mut self, n: usize) -> Result<f64, JsError> {
        let mut loss = f64::NAN;
        for _ in 0..n {
            loss = self.advance().map_err(js)?;
        }
        Ok(loss)
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    pub fn samples(&self) -> usize {
        self.data.len()
    }

    pub fn size(&self) -> usize {
        DEMO_SIZE
    }

    pub fn parameters(&self) -> usize {
        self.model.parameter_count(&self.store)
    }

    /// Terms of the last step: total, image, mask, intermediate sum, reconstruction.
    pub fn terms(&self) -> Vec<f64> {
        self.last.clone()
    }

    pub fn image(&self, i: usize) -> Result<Vec<f32>, JsError> {
        Ok(self.x.sample(i).map_err(js)?.into_data())
    }

    pub fn mask(&self, i: usize) -> Result<Vec<f32>, JsError> {
        Ok(self.m.sample(i).map_err(js)?.into_data())
    }

    pub fn prediction(&self, i: usize) -> Result<Vec<f32>, JsError> {
        Ok(self.predicted(i).map_err(js)?.into_data())
    }

    /// Dice of the binarized prediction, then small-object Dice (NaN when
    /// the sample has no small object).
    pub fn dice(&self, i: usize) -> Result<Vec<f64>, JsError> {
        let (d, small) = self.score(i).map_err(js)?;
        Ok(vec![d, small.unwrap_or(f64::NAN)])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn samples_are_reproducible_and_sized() {
        let a = SampleView::generate(3, 5, 32, 0.05, 0.5).unwrap();
        let b = SampleView::generate(3, 5, 32, 0.05, 0.5).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.image.len(), 32 * 32);
        let on = a.mask.iter().filter(|&&v| v == 1.0).count();
        assert_eq!(on, a.areas.iter().sum::<u32>() as usize);
        assert!(SampleView::generate(3, 5, 4, 0.05, 0.5).is_err());
    }

    #[test]
    fn schedule_steps_down() {
        let lr = schedule(3e-4, 0.9, 3, false, 8);
        assert_eq!(lr.len(), 8);
        assert_eq!(lr[0], 3e-4);
        assert!((lr[7] - 2.43e-4).abs() < 1e-15);
        let single = schedule(3e-4, 0.9, 3, true, 8);
        assert!((single[7] - 2.7e-4).abs() < 1e-15);
    }

    #[test]
    fn trainer_lowers_the_loss() {
        let mut t = Trainer::build("twi", 1, 2, 3e-3).unwrap();
        let first = t.advance().unwrap();
        for _ in 0..30 {
            t.advance().unwrap();
        }
        assert!(t.advance().unwrap() < first);
        assert_eq!(t.last.len(), 5);
        let (d, _) = t.score(0).unwrap();
        assert!((0.0..=1.0).contains(&d));
        assert!(Trainer::build("nope", 1, 2, 1e-3).is_err());
    }
}
