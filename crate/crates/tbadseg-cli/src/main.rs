//! `tbadseg` command-line driver.
//!
//! Every subcommand except `phantom --n ...` and `ingest` reads a TOML
//! [`RunConfig`] and writes its artifacts under the configured output
//! directory, so one config file fully determines a run. Exit codes:
//! 0 success, 1 module error, 2 usage error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tbadseg::cohort::{build_manifest, holdout_split, stratified_folds, CohortManifest, SplitFile};
use tbadseg::config::{DataConfig, RunConfig, SplitConfig};
use tbadseg::experiment::{
    load_cases, load_pipeline, predict_cohort, preprocess_cohort, select_fold, train_pipeline,
    PreparedCase,
};
use tbadseg::metrics::evaluate_cohort;
use tbadseg::phantom::{generate_cohort, PhantomSpec};
use tbadseg::report::{plot_history, render_overlay};
use tbadseg::training::TrainingHistory;
use tbadseg::{Error, LabelMap, Result};

#[derive(Parser)]
#[command(name = "tbadseg", version, about = "Type-B aortic dissection segmentation pipelines")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Path to the run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct FoldArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Fold index within splits.json.
    #[arg(long, default_value_t = 0)]
    fold: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort (images, labels, manifest.json).
    Phantom {
        /// Take cohort size, FLT fraction, seed and directory from a config
        /// file instead of the flags below.
        #[arg(long, conflicts_with_all = ["n", "out"])]
        config: Option<PathBuf>,
        /// Number of cases.
        #[arg(long, required_unless_present = "config")]
        n: Option<usize>,
        /// Fraction of cases with false-lumen thrombus.
        #[arg(long, default_value_t = 0.5)]
        flt_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory (images/ + labels/ + manifest.json).
        #[arg(long, required_unless_present = "config")]
        out: Option<PathBuf>,
    },
    /// Scan a real images/ + labels/ tree and write its manifest.
    Ingest {
        /// Data directory containing images/ and labels/.
        #[arg(long)]
        data: PathBuf,
        /// Manifest output path (defaults to <data>/manifest.json).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Normalize, resample and crop every case into the output directory.
    Preprocess(ConfigArg),
    /// Write the stratified train/validation/test assignment (splits.json).
    Split(ConfigArg),
    /// Train every network of the configured pipeline on one fold.
    Train(FoldArgs),
    /// Run inference on the fold's test cases and write metrics.json/csv.
    Evaluate(FoldArgs),
    /// Plot the fold's training histories (history.png).
    Report(FoldArgs),
    /// Render tri-planar ground-truth/prediction overlays for the fold's
    /// test cases.
    Visualize {
        #[command(flatten)]
        fold: FoldArgs,
        /// Restrict to a single case id.
        #[arg(long)]
        case: Option<String>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn fold_dir(cfg: &RunConfig, fold: usize) -> PathBuf {
    cfg.output_dir.join(format!("fold{fold}"))
}

fn preprocessed_dir(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join("preprocessed")
}

/// The manifest training works from: preprocessed when available, raw
/// otherwise.
fn working_manifest(cfg: &RunConfig) -> Result<CohortManifest> {
    let prep = preprocessed_dir(cfg).join("manifest.json");
    if prep.exists() {
        CohortManifest::load(&prep)
    } else {
        CohortManifest::load(&cfg.data.dir().join("manifest.json"))
    }
}

fn fold_cases(
    cfg: &RunConfig,
    fold: usize,
) -> Result<(Vec<PreparedCase>, Vec<PreparedCase>, Vec<PreparedCase>)> {
    let manifest = working_manifest(cfg)?;
    let splits = SplitFile::load(&cfg.output_dir.join("splits.json"))?;
    let fold = select_fold(&splits.folds, fold)?;
    Ok((
        load_cases(&manifest, &fold.train)?,
        load_cases(&manifest, &fold.validation)?,
        load_cases(&manifest, &fold.test)?,
    ))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Phantom { config, n, flt_fraction, seed, out } => {
            let (n, frac, seed, dir, spec) = match config {
                Some(path) => {
                    let cfg = RunConfig::load(&path)?;
                    let DataConfig::Phantom { dir, count, flt_fraction, spec } = cfg.data else {
                        return Err(Error::Config(
                            "phantom subcommand needs a phantom data source".into(),
                        ));
                    };
                    (count, flt_fraction, cfg.seed, dir, spec)
                }
                None => (n.unwrap(), flt_fraction, seed, out.unwrap(), PhantomSpec::default()),
            };
            let manifest = generate_cohort(n, frac, seed, &dir, &spec)?;
            log::info!(
                "wrote {} cases ({} with FLT) under {}",
                manifest.cases.len(),
                manifest.flt_positive_count(),
                dir.display()
            );
            Ok(())
        }
        Command::Ingest { data, out } => {
            let manifest = build_manifest(&data)?;
            let out = out.unwrap_or_else(|| data.join("manifest.json"));
            manifest.save(&out)?;
            for w in &manifest.warnings {
                log::warn!("{w}");
            }
            log::info!(
                "{} labeled cases, {} unlabeled -> {}",
                manifest.cases.len(),
                manifest.unlabeled.len(),
                out.display()
            );
            Ok(())
        }
        Command::Preprocess(args) => {
            let cfg = RunConfig::load(&args.config)?;
            let raw = CohortManifest::load(&cfg.data.dir().join("manifest.json"))?;
            let out = preprocessed_dir(&cfg);
            let prep = preprocess_cohort(&raw, &cfg.preprocess, &out)?;
            log::info!("preprocessed {} cases into {}", prep.cases.len(), out.display());
            Ok(())
        }
        Command::Split(args) => {
            let cfg = RunConfig::load(&args.config)?;
            let manifest = working_manifest(&cfg)?;
            let folds = match cfg.split {
                SplitConfig::Holdout { train, validation, test } => {
                    vec![holdout_split(&manifest, train, validation, test, cfg.seed)?]
                }
                SplitConfig::Kfold { folds } => stratified_folds(&manifest, folds, cfg.seed)?,
            };
            let file = SplitFile { schema_version: 1, seed: cfg.seed, folds };
            let path = cfg.output_dir.join("splits.json");
            file.save(&path)?;
            log::info!("wrote {} fold(s) to {}", file.folds.len(), path.display());
            Ok(())
        }
        Command::Train(args) => {
            let cfg = RunConfig::load(&args.config.config)?;
            let (train, val, _) = fold_cases(&cfg, args.fold)?;
            let run_dir = fold_dir(&cfg, args.fold);
            cfg.save(&run_dir.join("config.toml"))?;
            let (_, histories) = train_pipeline(&cfg, &train, &val, Some(&run_dir))?;
            for (stage, h) in &histories {
                let last = h.records.last().expect("non-empty history");
                log::info!(
                    "stage {stage}: {} epochs, final loss {:.4}, best val DC {:.4}",
                    h.records.len(),
                    last.train_loss,
                    h.records.iter().map(|r| r.val_mean_dice).fold(f64::MIN, f64::max)
                );
            }
            Ok(())
        }
        Command::Evaluate(args) => {
            let cfg = RunConfig::load(&args.config.config)?;
            let (_, _, test) = fold_cases(&cfg, args.fold)?;
            let run_dir = fold_dir(&cfg, args.fold);
            let pipeline = load_pipeline(&cfg, &run_dir)?;
            let preds = predict_cohort(&pipeline, &test, &cfg.pipeline)?;
            let gts: Vec<LabelMap> = test.iter().map(|c| c.label.clone()).collect();
            let report = evaluate_cohort(&preds, &gts)?;
            report.save(&run_dir)?;
            for (slot, name) in [(0, "TL"), (1, "FL"), (2, "FLT")] {
                if let Some(s) = &report.dice[slot] {
                    log::info!("{name} DC {:.4} ± {:.4} (n={})", s.mean, s.std, s.count);
                }
            }
            if let Some(s) = &report.true_flt_dice {
                log::info!("True FLT DC {:.4} ± {:.4} (n={})", s.mean, s.std, s.count);
            }
            log::info!("metrics written to {}", run_dir.display());
            Ok(())
        }
        Command::Report(args) => {
            let cfg = RunConfig::load(&args.config.config)?;
            let run_dir = fold_dir(&cfg, args.fold);
            let mut named = Vec::new();
            for entry in std::fs::read_dir(&run_dir)? {
                let path = entry?.path();
                let history = path.join("history.json");
                if history.exists() {
                    let stage = path.file_name().unwrap().to_string_lossy().into_owned();
                    named.push((stage, TrainingHistory::load(&history)?));
                }
            }
            named.sort_by(|a, b| a.0.cmp(&b.0));
            if named.is_empty() {
                return Err(Error::NotFound(run_dir.join("*/history.json")));
            }
            let refs: Vec<(String, &TrainingHistory)> =
                named.iter().map(|(n, h)| (n.clone(), h)).collect();
            let out = run_dir.join("history.png");
            plot_history(&refs, &out)?;
            log::info!("plotted {} stage histories to {}", refs.len(), out.display());
            Ok(())
        }
        Command::Visualize { fold: args, case } => {
            let cfg = RunConfig::load(&args.config.config)?;
            let (_, _, test) = fold_cases(&cfg, args.fold)?;
            let run_dir = fold_dir(&cfg, args.fold);
            let pipeline = load_pipeline(&cfg, &run_dir)?;
            let selected: Vec<&PreparedCase> = match &case {
                Some(id) => {
                    let found = test.iter().find(|c| &c.id == id);
                    vec![found.ok_or_else(|| {
                        Error::Contract(format!("case {id} is not in the test split"))
                    })?]
                }
                None => test.iter().collect(),
            };
            let out_dir = run_dir.join("overlays");
            for case in selected {
                let (pred, _) = pipeline.predict(&case.volume, &cfg.pipeline)?;
                let rows: Vec<(&str, &LabelMap)> =
                    vec![("ground truth", &case.label), ("prediction", &pred)];
                let path = out_dir.join(format!("{}.png", case.id));
                render_overlay(&case.volume, &rows, &path)?;
                log::info!("wrote {}", path.display());
            }
            Ok(())
        }
    }
}
