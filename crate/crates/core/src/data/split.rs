use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Train/validation/test fractions.
pub const SPLIT_FRACTIONS: [f64; 3] = [0.7, 0.1, 0.2];

/// Disjoint, exhaustive index partition of a dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Part sizes by largest-remainder rounding of `n · SPLIT_FRACTIONS`.
/// Ties go to the earlier part.
pub fn split_sizes(n: usize) -> [usize; 3] {
    let exact: Vec<f64> = SPLIT_FRACTIONS.iter().map(|f| f * n as f64).collect();
    let mut sizes: [usize; 3] = [0; 3];
    for (s, e) in sizes.iter_mut().zip(&exact) {
        // guard against 0.7·10 = 6.999…
        *s = (e + 1e-9).floor() as usize;
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - sizes[a] as f64;
        let fb = exact[b] - sizes[b] as f64;
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    let mut left = n - sizes.iter().sum::<usize>();
    for i in order {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    sizes
}

/// Seeded shuffle, then partition 70/10/20.
pub fn split(n: usize, seed: u64) -> Result<DatasetSplit> {
    if n < 10 {
        return Err(Error::Config(format!("need at least 10 samples to split, got {n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let [a, b, _] = split_sizes(n);
    Ok(DatasetSplit { train: idx[..a].to_vec(), val: idx[a..a + b].to_vec(), test: idx[a + b..].to_vec() })
}

impl DatasetSplit {
    pub fn part(&self, name: &str) -> Result<&[usize]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::Config(format!("unknown split `{other}` (train, val, test)"))),
        }
    }

    /// Error if any index appears in two parts or twice in one.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = std::collections::HashMap::new();
        for (name, part) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            for &i in part {
                if let Some(prev) = seen.insert(i, name) {
                    return Err(Error::Config(format!("split leakage: sample {i} is in both {prev} and {name}")));
                }
            }
        }
        Ok(())
    }

    /// `split.tsv`: one `part<TAB>index` row per sample.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = String::from("part\tindex\n");
        for (name, part) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            for i in part {
                s.push_str(&format!("{name}\t{i}\n"));
            }
        }
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut out = DatasetSplit { train: Vec::new(), val: Vec::new(), test: Vec::new() };
        let mut offset = 0u64;
        for (lineno, line) in text.lines().enumerate() {
            let here = offset;
            offset += line.len() as u64 + 1;
            if lineno == 0 || line.is_empty() {
                continue;
            }
            let bad = |detail: String| Error::Parse { path: path.to_path_buf(), offset: here, detail };
            let (part, idx) =
                line.split_once('\t').ok_or_else(|| bad(format!("line {}: expected two columns", lineno + 1)))?;
            let idx: usize = idx.trim().parse().map_err(|_| bad(format!("line {}: bad index `{idx}`", lineno + 1)))?;
            match part {
                "train" => out.train.push(idx),
                "val" => out.val.push(idx),
                "test" => out.test.push(idx),
                other => return Err(bad(format!("line {}: unknown part `{other}`", lineno + 1))),
            }
        }
        Ok(out)
    }
}
