//! Checkpoint directories: `manifest.tsv` (name, shape, file), one NTSR file
//! per parameter storage, and `model.tsv` with the architecture settings.
//! Tied views are never written; they are rebuilt from their source kernels.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::ntsr;
use crate::error::{Error, Result};
use crate::models::{Model, ModelConfig};
use crate::nn::{ParamHandle, ParamStore};
use crate::tensor::{Real, Tensor};

pub const MANIFEST: &str = "manifest.tsv";
pub const MODEL_FILE: &str = "model.tsv";

/// How strictly a checkpoint must match the model it is loaded into.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LoadMode {
    /// Names must match exactly.
    Strict,
    /// Model parameters absent from the checkpoint keep their current
    /// (fresh) values. Extra checkpoint entries are still an error.
    Partial,
}

/// What a load did.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoadSummary {
    pub loaded: Vec<String>,
    pub fresh: Vec<String>,
}

fn shape_string(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

fn sorted_names<T: Real>(model: &Model, store: &ParamStore<T>) -> BTreeMap<String, ParamHandle> {
    model.handles().into_iter().map(|h| (store.name(h).to_string(), h)).collect()
}

fn tmp_sibling(dir: &Path) -> PathBuf {
    let mut name = dir.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".partial");
    dir.with_file_name(name)
}

/// Write every storage the model reads. The directory is assembled next to
/// `dir` and moved into place at the end, replacing an older checkpoint.
pub fn save<T: Real>(dir: &Path, model: &Model, store: &ParamStore<T>) -> Result<()> {
    let tmp = tmp_sibling(dir);
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let result = (|| {
        let mut manifest = String::from("name\tshape\tfile\n");
        for (name, h) in sorted_names(model, store) {
            let file = format!("{name}.ntsr");
            let value = store.value(h);
            ntsr::write(&tmp.join(&file), value)?;
            manifest.push_str(&format!("{name}\t{}\t{file}\n", shape_string(value.shape())));
        }
        let path = tmp.join(MANIFEST);
        fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
        let path = tmp.join(MODEL_FILE);
        fs::write(&path, model_tsv(model.config())).map_err(|e| Error::io(&path, e))
    })();
    if let Err(e) = result {
        let _ = fs::remove_dir_all(&tmp);
        return Err(e);
    }
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
}

struct ManifestRow {
    name: String,
    shape: Vec<usize>,
    file: String,
}

fn read_manifest(dir: &Path) -> Result<Vec<ManifestRow>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut rows = Vec::new();
    let mut offset = 0u64;
    for (lineno, line) in text.lines().enumerate() {
        let here = offset;
        offset += line.len() as u64 + 1;
        if lineno == 0 || line.is_empty() {
            continue;
        }
        let bad = |detail: &str| Error::Parse {
            path: path.clone(),
            offset: here,
            detail: format!("line {}: {detail}", lineno + 1),
        };
        let cols: Vec<&str> = line.split('\t').collect();
        let [name, shape, file] = cols[..] else {
            return Err(bad("expected name, shape, file"));
        };
        let shape =
            shape.split('x').map(|d| d.parse::<usize>().map_err(|_| bad("bad shape"))).collect::<Result<Vec<_>>>()?;
        rows.push(ManifestRow { name: name.to_string(), shape, file: file.to_string() });
    }
    Ok(rows)
}

/// Load parameter values into `store`. Every file is read and checked before
/// any value is replaced, so a failed load leaves the store unchanged.
pub fn load<T: Real>(dir: &Path, model: &Model, store: &mut ParamStore<T>, mode: LoadMode) -> Result<LoadSummary> {
    let rows = read_manifest(dir)?;
    let expected = sorted_names(model, store);
    let in_ckpt: BTreeSet<&str> = rows.iter().map(|r| r.name.as_str()).collect();
    let missing: Vec<String> = expected.keys().filter(|n| !in_ckpt.contains(n.as_str())).cloned().collect();
    let extra: Vec<String> = rows.iter().filter(|r| !expected.contains_key(&r.name)).map(|r| r.name.clone()).collect();
    if !extra.is_empty() || (mode == LoadMode::Strict && !missing.is_empty()) {
        return Err(Error::CheckpointMismatch { missing, extra });
    }

    let mut staged: Vec<(ParamHandle, Tensor<T>)> = Vec::with_capacity(rows.len());
    for row in &rows {
        let h = expected[&row.name];
        let t = ntsr::read::<T>(&dir.join(&row.file))?;
        if t.shape() != row.shape.as_slice() || t.shape() != store.value(h).shape() {
            return Err(Error::shape(
                "checkpoint",
                format!(
                    "`{}`: file {:?}, manifest {:?}, model {:?}",
                    row.name,
                    t.shape(),
                    row.shape,
                    store.value(h).shape()
                ),
            ));
        }
        staged.push((h, t));
    }
    let mut summary = LoadSummary::default();
    for (h, t) in staged {
        summary.loaded.push(store.name(h).to_string());
        *store.value_mut(h) = t;
    }
    if !missing.is_empty() {
        log::warn!(
            "checkpoint {} lacks {} parameter(s), keeping fresh values: {}",
            dir.display(),
            missing.len(),
            missing.join(", ")
        );
    }
    summary.fresh = missing;
    Ok(summary)
}

fn model_tsv(c: &ModelConfig) -> String {
    format!(
        "key\tvalue\nvariant\t{}\ndepth\t{}\nbase_channels\t{}\nin_channels\t{}\ndetach_mask_branch\t{}\nshare_heads\t{}\n",
        c.variant, c.depth, c.base_channels, c.in_channels, c.detach_mask_branch, c.share_heads
    )
}

/// Architecture settings stored alongside a checkpoint.
pub fn read_model_config(dir: &Path) -> Result<ModelConfig> {
    let path = dir.join(MODEL_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut cfg = ModelConfig::default();
    let bad = |key: &str, v: &str| Error::Config(format!("{}: bad value `{v}` for {key}", path.display()));
    for line in text.lines().skip(1) {
        let Some((key, v)) = line.split_once('\t') else { continue };
        match key {
            "variant" => cfg.variant = v.parse()?,
            "depth" => cfg.depth = v.parse().map_err(|_| bad(key, v))?,
            "base_channels" => cfg.base_channels = v.parse().map_err(|_| bad(key, v))?,
            "in_channels" => cfg.in_channels = v.parse().map_err(|_| bad(key, v))?,
            "detach_mask_branch" => cfg.detach_mask_branch = v.parse().map_err(|_| bad(key, v))?,
            "share_heads" => cfg.share_heads = v.parse().map_err(|_| bad(key, v))?,
            _ => return Err(Error::Config(format!("{}: unknown key `{key}`", path.display()))),
        }
    }
    Ok(cfg)
}

/// Rebuild the model recorded in `dir` and load its weights strictly.
pub fn load_model<T: Real>(dir: &Path) -> Result<(Model, ParamStore<T>)> {
    let cfg = read_model_config(dir)?;
    let mut store = ParamStore::new(0);
    let model = Model::build(&cfg, &mut store)?;
    load(dir, &model, &mut store, LoadMode::Strict)?;
    Ok((model, store))
}
