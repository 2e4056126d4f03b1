//! Synthetic segmentation data, NTSR tensor files and the train/val/test split.

pub mod ntsr;
mod split;
mod synth;

use std::fs;
use std::path::{Path, PathBuf};

pub use split::{split, split_sizes, DatasetSplit, SPLIT_FRACTIONS};
pub use synth::{generate, generate_sample, Disk, SynthSpec};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.tsv";

/// Where a sample came from.
#[derive(Clone, Debug, PartialEq)]
pub enum Provenance {
    Synthetic { seed: u64, index: usize },
    File(PathBuf),
}

/// One image/mask pair. Both tensors are `1×H×W`.
#[derive(Clone, Debug)]
pub struct Sample {
    pub x: Tensor<f32>,
    pub m: Tensor<f32>,
    /// Pixel area of each object, in placement order.
    pub areas: Vec<usize>,
    pub provenance: Provenance,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.x.shape()[2]
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    /// Generator seed, when the data is synthetic.
    pub seed: Option<u64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `(x, m)` as `N×1×H×W` batches for the given indices.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let mut xs = Vec::with_capacity(indices.len());
        let mut ms = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = self
                .samples
                .get(i)
                .ok_or_else(|| Error::invalid("batch", format!("index {i} out of range for {} samples", self.len())))?;
            xs.push(&s.x);
            ms.push(&s.m);
        }
        Ok((Tensor::stack(&xs)?, Tensor::stack(&ms)?))
    }

    /// Write `img_%05d.ntsr`, `msk_%05d.ntsr` and `manifest.tsv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = String::new();
        if let Some(seed) = self.seed {
            manifest.push_str(&format!("# synthetic seed={seed}\n"));
        }
        manifest.push_str("index\timage\tmask\tareas\n");
        for (i, s) in self.samples.iter().enumerate() {
            let img = format!("img_{i:05}.ntsr");
            let msk = format!("msk_{i:05}.ntsr");
            ntsr::write(&dir.join(&img), &s.x)?;
            ntsr::write(&dir.join(&msk), &s.m)?;
            let areas: Vec<String> = s.areas.iter().map(|a| a.to_string()).collect();
            manifest.push_str(&format!("{i}\t{img}\t{msk}\t{}\n", areas.join(",")));
        }
        let path = dir.join(MANIFEST);
        fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
    }

    /// Load a directory written by [`Dataset::save`]. Without the synthetic
    /// marker line, images are min-max normalized per sample and masks are
    /// thresholded at 0.5.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut seed = None;
        let mut samples = Vec::new();
        let mut offset = 0u64;
        let mut saw_header = false;
        for (lineno, line) in text.lines().enumerate() {
            let here = offset;
            offset += line.len() as u64 + 1;
            let bad = |detail: String| Error::Parse {
                path: path.clone(),
                offset: here,
                detail: format!("line {}: {detail}", lineno + 1),
            };
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(v) = rest.trim().strip_prefix("synthetic seed=") {
                    seed = Some(v.trim().parse().map_err(|_| bad(format!("bad seed `{v}`")))?);
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            if !saw_header {
                saw_header = true;
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() < 3 {
                return Err(bad(format!("expected at least 3 columns, got {}", cols.len())));
            }
            let index: usize = cols[0].parse().map_err(|_| bad(format!("bad index `{}`", cols[0])))?;
            if index != samples.len() {
                return Err(bad(format!("expected index {}, got {index}", samples.len())));
            }
            let areas = match cols.get(3) {
                Some(a) if !a.is_empty() => a
                    .split(',')
                    .map(|v| v.parse::<usize>().map_err(|_| bad(format!("bad area `{v}`"))))
                    .collect::<Result<Vec<_>>>()?,
                _ => Vec::new(),
            };
            let img_path = dir.join(cols[1]);
            let mut x = ntsr::read::<f32>(&img_path)?;
            let mut m = ntsr::read::<f32>(&dir.join(cols[2]))?;
            if x.shape().len() != 3 || x.shape()[0] != 1 || x.shape() != m.shape() {
                return Err(bad(format!("image {:?} and mask {:?} must both be 1×H×W", x.shape(), m.shape())));
            }
            if seed.is_none() {
                let (h, w) = (x.shape()[1], x.shape()[2]);
                x = x.reshape(&[1, 1, h, w])?.minmax_per_sample()?.reshape(&[1, h, w])?;
                m = m.map(|v| if v > 0.5 { 1.0 } else { 0.0 });
            }
            let provenance = match seed {
                Some(seed) => Provenance::Synthetic { seed, index },
                None => Provenance::File(img_path),
            };
            samples.push(Sample { x, m, areas, provenance });
        }
        if let Some(first) = samples.first() {
            let shape = first.x.shape().to_vec();
            if let Some((i, s)) = samples.iter().enumerate().find(|(_, s)| s.x.shape() != shape.as_slice()) {
                return Err(Error::shape(
                    "dataset",
                    format!("sample {i} has shape {:?}, sample 0 has {shape:?}", s.x.shape()),
                ));
            }
        }
        Ok(Dataset { samples, seed })
    }
}
