//! Command-line interface: `gen`, `train`, `eval` and `compare`.

pub mod compare;
mod echo;

use std::fs;
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use echo::ConfigEcho;

use crate::data::{self, Dataset, DatasetSplit, SynthSpec};
use crate::error::{Error, Result};
use crate::losses::{LossWeights, LEVELS};
use crate::models::{Model, ModelConfig, Variant};
use crate::nn::ParamStore;
use crate::report::{self, SMALL_AREA_PX};
use crate::train::{self, checkpoint, DecayMode, Threshold, TrainConfig};

pub const ECHO_FILE: &str = "config.echo.tsv";
pub const SPLIT_FILE: &str = "split.tsv";
pub const CHECKPOINT_DIR: &str = "checkpoint";

#[derive(Parser, Debug)]
#[command(name = "isunet", version, about = "Intermediate-supervision U-Nets for small-object segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic disk dataset.
    Gen(GenArgs),
    /// Train one model variant.
    Train(TrainArgs),
    /// Score a trained model on one split.
    Eval(EvalArgs),
    /// Train a variants × seeds matrix on one shared split and compare.
    Compare(CompareArgs),
}

/// An inclusive `lo:hi` range.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Span<T>(pub T, pub T);

impl<T: FromStr + PartialOrd + Copy> FromStr for Span<T> {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (a, b) = s.split_once(':').unwrap_or((s, s));
        let parse = |v: &str| v.trim().parse::<T>().map_err(|_| format!("bad range bound `{v}`"));
        let (a, b) = (parse(a)?, parse(b)?);
        if a > b {
            return Err(format!("empty range `{s}`"));
        }
        Ok(Span(a, b))
    }
}

impl<T: Copy> Span<T> {
    fn range(self) -> RangeInclusive<T> {
        self.0..=self.1
    }
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    /// Small objects per image, `lo:hi`.
    #[arg(long, default_value = "1:3")]
    pub small_objects: Span<usize>,
    /// Small-object radius in pixels, `lo:hi`.
    #[arg(long, default_value = "2:4")]
    pub small_radius: Span<f64>,
    #[arg(long, default_value_t = 0.5)]
    pub large_prob: f64,
    #[arg(long, default_value = "8:12")]
    pub large_radius: Span<f64>,
    #[arg(long, default_value_t = 0.05)]
    pub noise_std: f64,
    #[arg(long, default_value_t = 0.8)]
    pub fg: f64,
    #[arg(long, default_value_t = 0.2)]
    pub bg: f64,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

impl GenArgs {
    pub fn spec(&self) -> SynthSpec {
        SynthSpec {
            count: self.count,
            height: self.height,
            width: self.width,
            small_objects: self.small_objects.range(),
            small_radius: self.small_radius.range(),
            large_object_prob: self.large_prob,
            large_radius: self.large_radius.range(),
            noise_std: self.noise_std,
            intensity_fg: self.fg,
            intensity_bg: self.bg,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DecayModeArg {
    Compound,
    Single,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ThresholdMode {
    /// Validation total loss within `threshold ×` of the run's lowest value.
    FloorRatio,
    /// Validation total loss at or below `threshold`.
    Absolute,
}

/// Optimization, loss and architecture settings shared by `train` and `compare`.
#[derive(Args, Debug, Clone)]
pub struct TrainingArgs {
    /// Upper bound; early stopping usually ends the run sooner.
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    #[arg(long, default_value_t = 3e-4)]
    pub lr0: f64,
    #[arg(long, default_value_t = 0.9)]
    pub decay_factor: f64,
    #[arg(long, default_value_t = 3)]
    pub decay_every: usize,
    #[arg(long, value_enum, default_value_t = DecayModeArg::Compound)]
    pub decay_mode: DecayModeArg,
    #[arg(long, default_value_t = 10)]
    pub patience: usize,
    #[arg(long, default_value_t = 4)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    pub gamma: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    /// Per-level weights `w0,w1,w2,w3,w4`.
    #[arg(long, default_value = "1,1,1,1,1")]
    pub omega: String,
    /// Reconstruction weight. Defaults to 1 for twi/twae and 0 otherwise.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Treat the mask-branch intermediate outputs as fixed targets.
    #[arg(long)]
    pub detach_mask_branch: bool,
    #[arg(long, default_value_t = 16)]
    pub base_channels: usize,
    /// Give the SAE/TWAE mask branch its own heads.
    #[arg(long)]
    pub no_share_heads: bool,
    #[arg(long, value_enum, default_value_t = ThresholdMode::FloorRatio)]
    pub threshold_mode: ThresholdMode,
    #[arg(long, default_value_t = 1.5)]
    pub threshold: f64,
    /// Seed of the 70/10/20 split.
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    /// Objects with at most this many pixels count as small.
    #[arg(long, default_value_t = SMALL_AREA_PX)]
    pub small_threshold: usize,
}

impl Default for TrainingArgs {
    fn default() -> Self {
        #[derive(Parser)]
        struct Wrap {
            #[command(flatten)]
            t: TrainingArgs,
        }
        Wrap::parse_from(["isunet"]).t
    }
}

fn value_name<V: ValueEnum>(v: V) -> String {
    v.to_possible_value().map(|p| p.get_name().to_string()).unwrap_or_default()
}

fn parse_omega(s: &str) -> Result<[f64; LEVELS]> {
    let vals = s
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|_| Error::Config(format!("--omega: bad number `{v}`"))))
        .collect::<Result<Vec<_>>>()?;
    vals.try_into().map_err(|v: Vec<f64>| {
        Error::Config(format!("--omega needs {LEVELS} comma-separated weights, got {}", v.len()))
    })
}

impl TrainingArgs {
    pub fn model_config(&self, variant: Variant) -> ModelConfig {
        ModelConfig {
            base_channels: self.base_channels,
            detach_mask_branch: self.detach_mask_branch,
            share_heads: !self.no_share_heads,
            ..ModelConfig::new(variant)
        }
    }

    /// Effective training settings for one run. Rejects weights the variant
    /// cannot use.
    pub fn train_config(&self, variant: Variant, seed: u64) -> Result<TrainConfig> {
        let defaults = TrainConfig::for_variant(variant);
        let loss_weights = LossWeights {
            alpha: self.alpha,
            gamma: self.gamma,
            lambda: self.lambda,
            omega: parse_omega(&self.omega)?,
            beta: self.beta.unwrap_or(defaults.loss_weights.beta),
            ..LossWeights::default()
        };
        train::check_compatibility(variant, &loss_weights)?;
        let cfg = TrainConfig {
            lr0: self.lr0,
            decay_factor: self.decay_factor,
            decay_every: self.decay_every,
            decay_mode: match self.decay_mode {
                DecayModeArg::Compound => DecayMode::Compound,
                DecayModeArg::Single => DecayMode::Single,
            },
            max_epochs: self.epochs,
            early_stop_patience: self.patience,
            batch_size: self.batch_size,
            seed,
            loss_weights,
            threshold: match self.threshold_mode {
                ThresholdMode::FloorRatio => Threshold::FloorRatio(self.threshold),
                ThresholdMode::Absolute => Threshold::Absolute(self.threshold),
            },
            ..defaults
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn echo(&self, e: &mut ConfigEcho) {
        e.push("epochs", self.epochs);
        e.push("lr0", self.lr0);
        e.push("decay_factor", self.decay_factor);
        e.push("decay_every", self.decay_every);
        e.push("decay_mode", value_name(self.decay_mode));
        e.push("patience", self.patience);
        e.push("batch_size", self.batch_size);
        e.push("alpha", self.alpha);
        e.push("gamma", self.gamma);
        e.push("lambda", self.lambda);
        e.push("omega", &self.omega);
        e.push("beta", self.beta.map(|b| b.to_string()).unwrap_or_else(|| "variant-default".into()));
        e.push("detach_mask_branch", self.detach_mask_branch);
        e.push("base_channels", self.base_channels);
        e.push("share_heads", !self.no_share_heads);
        e.push("threshold_mode", value_name(self.threshold_mode));
        e.push("threshold", self.threshold);
        e.push("split_seed", self.split_seed);
        e.push("small_threshold", self.small_threshold);
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// One of unet, inter, ae, sae, twi, twae.
    #[arg(long)]
    pub model: Variant,
    /// Dataset directory written by `gen`.
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory for the checkpoint, epochs.csv and the config echo.
    #[arg(long)]
    pub out: PathBuf,
    /// Seeds weight initialization and batch order.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub training: TrainingArgs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Directory written by `train`.
    #[arg(long)]
    pub model_dir: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Where `eval.csv` goes; defaults to `<model-dir>/eval-<split>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = SMALL_AREA_PX)]
    pub small_threshold: usize,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    /// Comma-separated variants, at least two.
    #[arg(long, value_delimiter = ',', required = true)]
    pub variants: Vec<Variant>,
    /// Comma-separated seeds, at least three.
    #[arg(long, value_delimiter = ',', required = true)]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Matrix cells trained concurrently. Falls back to RUN_THREADS, then 1.
    #[arg(long)]
    pub jobs: Option<usize>,
    #[command(flatten)]
    pub training: TrainingArgs,
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn is_nonempty_dir(dir: &Path) -> bool {
    fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false)
}

pub fn run_gen(args: &GenArgs) -> Result<()> {
    if args.count == 0 {
        return Err(Error::Config("--count must be at least 1".into()));
    }
    if is_nonempty_dir(&args.out) && !args.force {
        return Err(Error::Config(format!(
            "{} exists and is not empty; pass --force to overwrite",
            args.out.display()
        )));
    }
    let spec = args.spec();
    let dataset = data::generate(&spec, args.seed)?;
    ensure_dir(&args.out)?;
    if args.force {
        for entry in fs::read_dir(&args.out).map_err(|e| Error::io(&args.out, e))?.flatten() {
            let name = entry.file_name().to_string_lossy().into_owned();
            if (name.starts_with("img_") || name.starts_with("msk_")) && name.ends_with(".ntsr") {
                fs::remove_file(entry.path()).map_err(|e| Error::io(entry.path(), e))?;
            }
        }
    }
    dataset.save(&args.out)?;
    let mut e = ConfigEcho::new("gen");
    e.push("out", args.out.display());
    e.push("count", spec.count);
    e.push("seed", args.seed);
    e.push("height", spec.height);
    e.push("width", spec.width);
    e.push("small_objects", format!("{}:{}", args.small_objects.0, args.small_objects.1));
    e.push("small_radius", format!("{}:{}", args.small_radius.0, args.small_radius.1));
    e.push("large_prob", spec.large_object_prob);
    e.push("large_radius", format!("{}:{}", args.large_radius.0, args.large_radius.1));
    e.push("noise_std", spec.noise_std);
    e.push("fg", spec.intensity_fg);
    e.push("bg", spec.intensity_bg);
    e.push("force", args.force);
    e.write(&args.out.join(ECHO_FILE))?;
    println!("wrote {} samples to {}", dataset.len(), args.out.display());
    Ok(())
}

/// Dataset plus the split every training run on it uses.
pub fn load_with_split(dir: &Path, split_seed: u64) -> Result<(Dataset, DatasetSplit)> {
    let dataset = Dataset::load(dir)?;
    let split = data::split(dataset.len(), split_seed)?;
    Ok((dataset, split))
}

/// Outputs of one training run.
pub struct RunOutput {
    pub model: Model,
    pub store: ParamStore<f32>,
    pub report: train::TrainReport,
}

/// Train one variant and write `epochs.csv`, `split.tsv`, `summary.tsv` and
/// the best checkpoint into `out`.
pub fn train_to_dir(
    variant: Variant,
    seed: u64,
    training: &TrainingArgs,
    dataset: &Dataset,
    split: &DatasetSplit,
    out: &Path,
) -> Result<RunOutput> {
    let cfg = training.train_config(variant, seed)?;
    let mut store = ParamStore::new(seed);
    let model = Model::build(&training.model_config(variant), &mut store)?;
    if let Some(s) = dataset.samples.first() {
        let d = model.config().spatial_divisor();
        if s.height() % d != 0 || s.width() % d != 0 {
            return Err(Error::Config(format!(
                "images are {}×{}; extents must be divisible by {d}, pad the data first",
                s.height(),
                s.width()
            )));
        }
    }
    ensure_dir(out)?;
    split.save(&out.join(SPLIT_FILE))?;
    let report = train::train(&model, &mut store, dataset, split, &cfg)?;
    report.write_epochs_csv(&out.join("epochs.csv"))?;
    checkpoint::save(&out.join(CHECKPOINT_DIR), &model, &store)?;
    let mut s = ConfigEcho::new("train-summary");
    s.push("variant", variant);
    s.push("parameters", model.parameter_count(&store));
    s.push("epochs_run", report.epochs.len());
    s.push("initial_val_loss", report.initial_val.l_h);
    s.push("best_epoch", report.best_epoch.map(|e| e.to_string()).unwrap_or_else(|| "none".into()));
    s.push("val_floor", report.val_floor().map(|v| v.to_string()).unwrap_or_default());
    s.push(
        "epochs_to_threshold",
        report.epochs_to_threshold().map(|e| e.to_string()).unwrap_or_else(|| "not-reached".into()),
    );
    s.push("stopped_early", report.stopped_early);
    s.push("wall_time_s", report.wall_time_s);
    s.write(&out.join("summary.tsv"))?;
    Ok(RunOutput { model, store, report })
}

pub fn run_train(args: &TrainArgs) -> Result<()> {
    // fail on inconsistent flags before touching the filesystem
    args.training.train_config(args.model, args.seed)?;
    let (dataset, split) = load_with_split(&args.data, args.training.split_seed)?;
    ensure_dir(&args.out)?;
    let mut e = ConfigEcho::new("train");
    e.push("model", args.model);
    e.push("data", args.data.display());
    e.push("out", args.out.display());
    e.push("seed", args.seed);
    args.training.echo(&mut e);
    e.write(&args.out.join(ECHO_FILE))?;
    let run = train_to_dir(args.model, args.seed, &args.training, &dataset, &split, &args.out)?;
    println!(
        "{}: {} epochs, best epoch {:?}, wrote {}",
        args.model,
        run.report.epochs.len(),
        run.report.best_epoch,
        args.out.display()
    );
    Ok(())
}

pub fn run_eval(args: &EvalArgs) -> Result<()> {
    let ckpt = args.model_dir.join(CHECKPOINT_DIR);
    if !ckpt.join(checkpoint::MANIFEST).exists() {
        return Err(Error::Config(format!("no checkpoint found in {}", ckpt.display())));
    }
    let split = DatasetSplit::load(&args.model_dir.join(SPLIT_FILE))?;
    split.check_disjoint()?;
    let indices = split.part(&args.split)?.to_vec();
    let dataset = Dataset::load(&args.data)?;
    let total = split.train.len() + split.val.len() + split.test.len();
    if total != dataset.len() || indices.iter().any(|&i| i >= dataset.len()) {
        return Err(Error::Config(format!(
            "split in {} covers {total} samples but {} holds {}",
            args.model_dir.display(),
            args.data.display(),
            dataset.len()
        )));
    }
    let (model, store) = checkpoint::load_model::<f32>(&ckpt)?;
    let result = report::evaluate(&model, &store, &dataset, &indices, args.small_threshold)?;
    let out = args.out.clone().unwrap_or_else(|| args.model_dir.join(format!("eval-{}", args.split)));
    ensure_dir(&out)?;
    let mut e = ConfigEcho::new("eval");
    e.push("model_dir", args.model_dir.display());
    e.push("data", args.data.display());
    e.push("split", &args.split);
    e.push("out", out.display());
    e.push("small_threshold", args.small_threshold);
    e.write(&out.join(ECHO_FILE))?;
    report::write_atomic(&out.join("eval.csv"), &result.to_csv())?;
    println!(
        "{} on {} ({} samples): dice {:.4} iou {:.4} dice_small {:.4} ({} samples) dice_large {:.4} ({} samples)",
        model.variant(),
        args.split,
        indices.len(),
        result.dice,
        result.iou,
        result.dice_small,
        result.samples_with_small,
        result.dice_large,
        result.samples_with_large
    );
    Ok(())
}

/// Parse `args` (including the program name) and run the subcommand.
pub fn run<I, S>(args: I) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::Config(e.to_string()))?;
    dispatch(&cli)
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Gen(a) => run_gen(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Compare(a) => compare::run_compare(a),
    }
}

/// Binary entry point; returns the process exit code.
pub fn main() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
