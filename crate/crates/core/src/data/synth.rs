use std::ops::RangeInclusive;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, Provenance, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Placement attempts per object before generation gives up.
const MAX_PLACEMENT_TRIES: usize = 200;
/// Minimum empty pixels between two object boundaries, so each object stays
/// its own connected component.
const OBJECT_GAP: f64 = 2.0;

/// Parameters of the synthetic disk dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub small_objects: RangeInclusive<usize>,
    pub small_radius: RangeInclusive<f64>,
    pub large_object_prob: f64,
    pub large_radius: RangeInclusive<f64>,
    pub noise_std: f64,
    pub intensity_fg: f64,
    pub intensity_bg: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            count: 100,
            height: 64,
            width: 64,
            small_objects: 1..=3,
            small_radius: 2.0..=4.0,
            large_object_prob: 0.5,
            large_radius: 8.0..=12.0,
            noise_std: 0.05,
            intensity_fg: 0.8,
            intensity_bg: 0.2,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(Error::invalid("SynthSpec", d));
        if self.height == 0 || self.width == 0 {
            return bad(format!("empty canvas {}x{}", self.height, self.width));
        }
        let limit = self.height.min(self.width) as f64 / 4.0;
        for (name, r) in [("small_radius", &self.small_radius), ("large_radius", &self.large_radius)] {
            if !(*r.start() > 0.0 && r.start() <= r.end()) {
                return bad(format!("{name} range {r:?} is empty or non-positive"));
            }
            if *r.end() >= limit {
                return bad(format!("{name} {} must be below min(H,W)/4 = {limit}", r.end()));
            }
        }
        if self.small_objects.start() > self.small_objects.end() {
            return bad(format!("small_objects range {:?} is empty", self.small_objects));
        }
        if *self.small_objects.end() == 0 && self.large_object_prob < 1.0 {
            return bad("with zero small objects the large object must always be present".into());
        }
        if !(0.0..=1.0).contains(&self.large_object_prob) {
            return bad(format!("large_object_prob {} outside [0,1]", self.large_object_prob));
        }
        for (name, v) in [("intensity_fg", self.intensity_fg), ("intensity_bg", self.intensity_bg)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} {v} outside [0,1]"));
            }
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std {} must be finite and non-negative", self.noise_std));
        }
        Ok(())
    }
}

/// One placed object. Pixels whose centre lies within `radius` of
/// `(cy, cx)` belong to it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Disk {
    pub cy: usize,
    pub cx: usize,
    pub radius: f64,
}

impl Disk {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        let dy = y as f64 - self.cy as f64;
        let dx = x as f64 - self.cx as f64;
        dy * dy + dx * dx <= self.radius * self.radius
    }

    fn fits(&self, h: usize, w: usize) -> bool {
        let r = self.radius.floor() as usize;
        self.cy >= r && self.cx >= r && self.cy + r < h && self.cx + r < w
    }

    fn clear_of(&self, other: &Disk) -> bool {
        let dy = self.cy as f64 - other.cy as f64;
        let dx = self.cx as f64 - other.cx as f64;
        (dy * dy + dx * dx).sqrt() >= self.radius + other.radius + OBJECT_GAP
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: &RangeInclusive<f64>) -> f64 {
    if r.start() == r.end() {
        *r.start()
    } else {
        rng.random_range(r.clone())
    }
}

fn place(rng: &mut ChaCha8Rng, spec: &SynthSpec, radius: f64, placed: &[Disk], index: usize) -> Result<Disk> {
    let r = radius.floor() as usize;
    if 2 * r >= spec.height || 2 * r >= spec.width {
        return Err(Error::invalid("generate", format!("radius {radius} does not fit the canvas")));
    }
    for _ in 0..MAX_PLACEMENT_TRIES {
        let d = Disk { cy: rng.random_range(r..spec.height - r), cx: rng.random_range(r..spec.width - r), radius };
        debug_assert!(d.fits(spec.height, spec.width));
        if placed.iter().all(|p| d.clear_of(p)) {
            return Ok(d);
        }
    }
    Err(Error::invalid(
        "generate",
        format!(
            "sample {index}: could not place object {} (radius {radius:.2}) after {MAX_PLACEMENT_TRIES} tries",
            placed.len() + 1
        ),
    ))
}

/// Generate sample `index` of the dataset for `seed`. Each index draws from
/// its own ChaCha stream, so samples can be produced independently.
pub fn generate_sample(spec: &SynthSpec, seed: u64, index: usize) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);

    let mut disks = Vec::new();
    if spec.large_object_prob > 0.0 && rng.random_bool(spec.large_object_prob) {
        let r = uniform(&mut rng, &spec.large_radius);
        disks.push(place(&mut rng, spec, r, &disks, index)?);
    }
    let n_small = rng.random_range(spec.small_objects.clone());
    for _ in 0..n_small {
        let r = uniform(&mut rng, &spec.small_radius);
        disks.push(place(&mut rng, spec, r, &disks, index)?);
    }

    let (h, w) = (spec.height, spec.width);
    let mut m = vec![0f32; h * w];
    let mut areas = vec![0usize; disks.len()];
    for (k, d) in disks.iter().enumerate() {
        let r = d.radius.ceil() as usize;
        for y in d.cy.saturating_sub(r)..(d.cy + r + 1).min(h) {
            for x in d.cx.saturating_sub(r)..(d.cx + r + 1).min(w) {
                if d.contains(y, x) {
                    m[y * w + x] = 1.0;
                    areas[k] += 1;
                }
            }
        }
    }
    if areas.iter().sum::<usize>() == 0 {
        return Err(Error::invalid("generate", format!("sample {index} has an empty mask")));
    }

    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::invalid("generate", e.to_string()))?;
    let x: Vec<f32> = m
        .iter()
        .map(|&mv| {
            let base = if mv > 0.0 { spec.intensity_fg } else { spec.intensity_bg };
            let n = if spec.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            (base + n).clamp(0.0, 1.0) as f32
        })
        .collect();

    Ok(Sample {
        x: Tensor::new(vec![1, h, w], x)?,
        m: Tensor::new(vec![1, h, w], m)?,
        areas,
        provenance: Provenance::Synthetic { seed, index },
    })
}

/// Generate `spec.count` samples.
pub fn generate(spec: &SynthSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let samples = (0..spec.count).map(|i| generate_sample(spec, seed, i)).collect::<Result<Vec<_>>>()?;
    Ok(Dataset { samples, seed: Some(seed) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        SynthSpec::default().validate().unwrap();
    }

    #[test]
    fn oversized_radius_rejected() {
        let spec = SynthSpec { height: 32, width: 32, ..SynthSpec::default() };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn crowded_canvas_fails_placement() {
        let spec = SynthSpec {
            count: 1,
            height: 16,
            width: 16,
            small_objects: 40..=40,
            small_radius: 3.0..=3.0,
            large_radius: 3.0..=3.0,
            large_object_prob: 0.0,
            ..SynthSpec::default()
        };
        let err = generate(&spec, 1).unwrap_err().to_string();
        assert!(err.contains("could not place"), "{err}");
    }

    #[test]
    fn areas_match_mask() {
        let spec = SynthSpec { count: 20, ..SynthSpec::default() };
        for s in generate(&spec, 9).unwrap().samples {
            assert_eq!(s.areas.iter().sum::<usize>() as f64, s.m.sum());
        }
    }
}
