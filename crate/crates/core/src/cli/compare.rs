//! The variants × seeds experiment matrix.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use super::{ensure_dir, load_with_split, train_to_dir, CompareArgs, ConfigEcho, TrainingArgs, ECHO_FILE};
use crate::data::{Dataset, DatasetSplit};
use crate::error::{Error, Result};
use crate::models::Variant;
use crate::report::{self, mean_std, ConvergenceRow, EvalResult, Outcome};

/// One finished (or failed) matrix cell.
#[derive(Clone, Debug)]
pub struct CellResult {
    pub row: ConvergenceRow,
    /// Test-split metrics; `None` when the run failed.
    pub test: Option<EvalResult>,
    /// Per-epoch validation total and `L_h¹` losses, for inspection.
    pub val_curve: Vec<(f64, f64)>,
    pub error: Option<String>,
}

/// Aggregates for one variant over its seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct VariantSummary {
    pub variant: Variant,
    pub runs: usize,
    pub failed: usize,
    pub not_reached: usize,
    /// Over runs that reached the threshold.
    pub epochs_to_threshold: Option<(f64, f64)>,
    pub dice_small: Option<(f64, f64)>,
    pub dice: Option<(f64, f64)>,
}

pub const RESULTS_HEADER: &str = "variant,seed,test_dice,test_iou,test_dice_small,test_dice_large";
pub const SUMMARY_HEADER: &str =
    "variant\truns\tfailed\tnot_reached\tepochs_mean\tepochs_std\tdice_small_mean\tdice_small_std\tdice_mean\tdice_std";

fn cell_dir(out: &Path, variant: Variant, seed: u64) -> PathBuf {
    out.join(format!("{variant}_seed{seed}"))
}

fn run_cell(
    variant: Variant,
    seed: u64,
    training: &TrainingArgs,
    dataset: &Dataset,
    split: &DatasetSplit,
    out: &Path,
) -> Result<CellResult> {
    let dir = cell_dir(out, variant, seed);
    let run = train_to_dir(variant, seed, training, dataset, split, &dir)?;
    let val = report::evaluate(&run.model, &run.store, dataset, &split.val, training.small_threshold)?;
    let test = report::evaluate(&run.model, &run.store, dataset, &split.test, training.small_threshold)?;
    report::write_atomic(&dir.join("eval.csv"), &test.to_csv())?;
    Ok(CellResult {
        row: ConvergenceRow {
            variant,
            seed,
            outcome: match run.report.epochs_to_threshold() {
                Some(e) => Outcome::Reached(e),
                None => Outcome::NotReached,
            },
            wall_time_s: run.report.wall_time_s,
            final_val_dice: val.dice,
        },
        test: Some(test),
        val_curve: run.report.epochs.iter().map(|e| (e.val.l_h, e.val.l_h1)).collect(),
        error: None,
    })
}

/// Train every (variant, seed) cell on the shared split, `jobs` at a time.
/// A failing cell becomes a `failed` row; the rest of the matrix still runs.
/// Results come back in (variant, seed) order of the inputs.
pub fn run_matrix(
    variants: &[Variant],
    seeds: &[u64],
    training: &TrainingArgs,
    dataset: &Dataset,
    split: &DatasetSplit,
    out: &Path,
    jobs: usize,
) -> Vec<CellResult> {
    let cells: Vec<(Variant, u64)> = variants.iter().flat_map(|&v| seeds.iter().map(move |&s| (v, s))).collect();
    let next = Mutex::new(0usize);
    let results: Mutex<Vec<Option<CellResult>>> = Mutex::new(vec![None; cells.len()]);
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, cells.len().max(1)) {
            scope.spawn(|| loop {
                let i = {
                    let mut n = next.lock().unwrap();
                    let i = *n;
                    *n += 1;
                    i
                };
                let Some(&(variant, seed)) = cells.get(i) else { break };
                log::info!("compare: training {variant} seed {seed}");
                let result = run_cell(variant, seed, training, dataset, split, out).unwrap_or_else(|e| {
                    log::error!("compare: {variant} seed {seed} failed: {e}");
                    CellResult {
                        row: ConvergenceRow {
                            variant,
                            seed,
                            outcome: Outcome::Failed,
                            wall_time_s: 0.0,
                            final_val_dice: f64::NAN,
                        },
                        test: None,
                        val_curve: Vec::new(),
                        error: Some(e.to_string()),
                    }
                });
                results.lock().unwrap()[i] = Some(result);
            });
        }
    });
    results.into_inner().unwrap().into_iter().map(|r| r.expect("every cell ran")).collect()
}

pub fn summarize(variants: &[Variant], cells: &[CellResult]) -> Vec<VariantSummary> {
    variants
        .iter()
        .map(|&variant| {
            let mine: Vec<&CellResult> = cells.iter().filter(|c| c.row.variant == variant).collect();
            let epochs: Vec<f64> = mine.iter().filter_map(|c| c.row.epochs_to_threshold()).map(|e| e as f64).collect();
            let tests: Vec<&EvalResult> = mine.iter().filter_map(|c| c.test.as_ref()).collect();
            let small: Vec<f64> = tests.iter().map(|t| t.dice_small).filter(|v| !v.is_nan()).collect();
            let dice: Vec<f64> = tests.iter().map(|t| t.dice).collect();
            VariantSummary {
                variant,
                runs: mine.len(),
                failed: mine.iter().filter(|c| c.row.outcome == Outcome::Failed).count(),
                not_reached: mine.iter().filter(|c| c.row.outcome == Outcome::NotReached).count(),
                epochs_to_threshold: mean_std(&epochs),
                dice_small: mean_std(&small),
                dice: mean_std(&dice),
            }
        })
        .collect()
}

pub fn results_csv(cells: &[CellResult]) -> String {
    let mut s = format!("{RESULTS_HEADER}\n");
    for c in cells {
        let (d, i, sm, lg) = match &c.test {
            Some(t) => (t.dice.to_string(), t.iou.to_string(), t.dice_small.to_string(), t.dice_large.to_string()),
            None => Default::default(),
        };
        let _ = writeln!(s, "{},{},{d},{i},{sm},{lg}", c.row.variant, c.row.seed);
    }
    s
}

pub fn summary_tsv(summary: &[VariantSummary]) -> String {
    let pair = |p: Option<(f64, f64)>| match p {
        Some((m, s)) => format!("{m}\t{s}"),
        None => "\t".into(),
    };
    let mut s = format!("{SUMMARY_HEADER}\n");
    for v in summary {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            v.variant,
            v.runs,
            v.failed,
            v.not_reached,
            pair(v.epochs_to_threshold),
            pair(v.dice_small),
            pair(v.dice)
        );
    }
    s
}

pub fn run_compare(args: &CompareArgs) -> Result<()> {
    if args.variants.len() < 2 {
        return Err(Error::Config("compare needs at least two variants".into()));
    }
    if args.seeds.len() < 3 {
        return Err(Error::Config("compare needs at least three seeds".into()));
    }
    for &v in &args.variants {
        args.training.train_config(v, 0)?;
    }
    let jobs = match args.jobs {
        Some(j) => j,
        None => std::env::var("RUN_THREADS").ok().and_then(|v| v.parse().ok()).unwrap_or(1),
    };
    let (dataset, split) = load_with_split(&args.data, args.training.split_seed)?;
    ensure_dir(&args.out)?;
    let mut e = ConfigEcho::new("compare");
    e.push("variants", args.variants.iter().map(|v| v.name()).collect::<Vec<_>>().join(","));
    e.push("seeds", args.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","));
    e.push("data", args.data.display());
    e.push("out", args.out.display());
    e.push("jobs", jobs);
    args.training.echo(&mut e);
    e.write(&args.out.join(ECHO_FILE))?;
    split.save(&args.out.join(super::SPLIT_FILE))?;

    let cells = run_matrix(&args.variants, &args.seeds, &args.training, &dataset, &split, &args.out, jobs);
    let rows: Vec<ConvergenceRow> = cells.iter().map(|c| c.row.clone()).collect();
    report::write_atomic(&args.out.join("convergence.csv"), &report::convergence_csv(&rows))?;
    report::write_atomic(&args.out.join("results.csv"), &results_csv(&cells))?;
    let summary = summarize(&args.variants, &cells);
    let tsv = summary_tsv(&summary);
    report::write_atomic(&args.out.join("summary.tsv"), &tsv)?;
    print!("{tsv}");
    let failed: Vec<String> = cells
        .iter()
        .filter_map(|c| c.error.as_ref().map(|e| format!("{} seed {}: {e}", c.row.variant, c.row.seed)))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!("{} run(s) failed:\n  {}", failed.len(), failed.join("\n  "))))
    }
}
