//! `wae` command-line tool: augment images, generate fixtures, train the
//! classification head, score feature files, evaluate and ensemble
//! prediction files.

pub mod formats;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{error::ErrorKind, Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use wae_core::ensemble::{self, WeightVector, DEFAULT_STEP};
use wae_core::head::{self, TrainConfig};
use wae_core::imageprep::{self, pnm, AugmentConfig};
use wae_core::metrics::{roc_curve, ClassificationReport};
use wae_core::model::{align, AlignedPredictions, PredictionSet, DEFAULT_THRESHOLD};
use wae_core::synth::{self, SynthSpec};

use formats::{ReportDocument, SearchSummary, WeightsFile};

/// Tolerance on the sum of weights given on the command line.
const WEIGHT_SUM_TOL: f64 = 1e-6;

#[derive(Debug, Parser)]
#[command(name = "wae", version, about = "Weighted-average ensembling of binary classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Resize and randomly augment PGM/PPM images.
    Augment(AugmentArgs),
    /// Write seeded fixture files.
    Synth(SynthArgs),
    /// Train the classification head on an FTB1 feature file.
    TrainHead(TrainArgs),
    /// Score an FTB1 feature file with a trained head.
    Predict(PredictArgs),
    /// Evaluate one prediction file.
    Evaluate(EvaluateArgs),
    /// Grid-search ensemble weights over prediction files.
    EnsembleSearch(SearchArgs),
    /// Combine prediction files with fixed weights.
    EnsembleApply(ApplyArgs),
}

#[derive(Debug, Args)]
struct AugmentArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON augmentation ranges; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Variants written per input image.
    #[arg(long, default_value_t = 1)]
    count: usize,
    /// Side length of the square resize target.
    #[arg(long, default_value_t = imageprep::TARGET_SIZE)]
    size: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    /// Two correlated models on a 586-sample split (423 positive), plus a separable feature file.
    PaperLike,
    /// Generators configured by `--config`.
    Custom,
    /// Hand-built score pair whose 0.45/0.55 mix gets 578 of 586 right.
    EnsemblePair,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, value_enum)]
    preset: Preset,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_prefix: String,
    /// JSON config for the custom preset.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    history: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    preds: PathBuf,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    roc: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SearchArgs {
    #[arg(long, required = true)]
    preds: Vec<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_STEP)]
    step: f64,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
    /// Worker threads; the result does not depend on it.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, Args)]
struct ApplyArgs {
    #[arg(long, required = true)]
    preds: Vec<PathBuf>,
    /// Comma-separated, one per prediction file, summing to 1.
    #[arg(long, value_delimiter = ',', required = true)]
    weights: Vec<f64>,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
}

/// Parses `argv` (program name first), runs the command and returns the exit
/// status: 0 success, 1 domain or parse error, 2 usage error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    0
                }
                ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    let _ = e.print();
                    2
                }
                _ => {
                    let _ = e.print();
                    eprintln!();
                    let _ = Cli::command().print_help();
                    2
                }
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Augment(a) => augment(a),
        Command::Synth(a) => synth_cmd(a),
        Command::TrainHead(a) => train_head(a),
        Command::Predict(a) => predict(a),
        Command::Evaluate(a) => evaluate(a),
        Command::EnsembleSearch(a) => ensemble_search(a),
        Command::EnsembleApply(a) => ensemble_apply(a),
    }
}

fn augment(a: AugmentArgs) -> Result<()> {
    let cfg: AugmentConfig = match &a.config {
        Some(p) => formats::read_json(p)?,
        None => AugmentConfig::default(),
    };
    cfg.validate()?;
    ensure!(a.count > 0, "--count must be at least 1");
    ensure!(a.size > 0, "--size must be positive");

    let mut inputs: Vec<PathBuf> = fs::read_dir(&a.input)
        .with_context(|| format!("cannot list {}", a.input.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| pnm_extension(p).is_some())
        .collect();
    inputs.sort();
    ensure!(!inputs.is_empty(), "no .pgm or .ppm files in {}", a.input.display());

    let images = inputs
        .iter()
        .map(|p| {
            let raw = pnm::read(p)?;
            let img = imageprep::normalize(&raw)?;
            Ok(imageprep::resize_bilinear(&img, a.size, a.size)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let out = imageprep::augment_batch(&images, &cfg, a.seed, a.count)?;

    fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    for (idx, img) in out.iter().enumerate() {
        let src = &inputs[idx / a.count];
        let stem = src.file_stem().unwrap_or_default().to_string_lossy();
        let ext = pnm_extension(src).expect("filtered above");
        let name = format!("{stem}_aug{:03}.{ext}", idx % a.count);
        pnm::write(a.out.join(name), img)?;
    }
    println!("wrote {} images to {}", out.len(), a.out.display());
    Ok(())
}

fn pnm_extension(p: &Path) -> Option<&'static str> {
    match p.extension()?.to_str()?.to_ascii_lowercase().as_str() {
        "pgm" => Some("pgm"),
        "ppm" => Some("ppm"),
        _ => None,
    }
}

/// Feature-file settings for the synth command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeatureSpec {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    separation: f64,
    n_pos: usize,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        Self {
            n: 512,
            c: 16,
            h: 4,
            w: 4,
            separation: 4.0,
            n_pos: 256,
        }
    }
}

/// Config of the custom preset; either part may be omitted. Seeds inside a
/// predictions spec are replaced by `--seed`.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CustomSynth {
    predictions: Option<SynthSpec>,
    features: Option<FeatureSpec>,
}

fn write_prediction_sets(prefix: &str, sets: &[PredictionSet]) -> Result<()> {
    for s in sets {
        let path = PathBuf::from(format!("{prefix}{}.csv", s.model_name()));
        formats::write_predictions(&path, s)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn write_features(prefix: &str, f: &FeatureSpec, seed: u64) -> Result<()> {
    let batch = synth::gen_features(f.n, f.c, f.h, f.w, f.separation, f.n_pos, seed)?;
    let path = PathBuf::from(format!("{prefix}features.ftb"));
    formats::write_ftb(&path, &batch)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn synth_cmd(a: SynthArgs) -> Result<()> {
    if a.config.is_some() && !matches!(a.preset, Preset::Custom) {
        bail!("--config only applies to the custom preset");
    }
    match a.preset {
        Preset::PaperLike => {
            write_prediction_sets(&a.out_prefix, &synth::gen_predictions(&SynthSpec::test_split(a.seed))?)?;
            write_features(&a.out_prefix, &FeatureSpec::default(), a.seed)
        }
        Preset::Custom => {
            let path = a.config.as_ref().context("the custom preset needs --config")?;
            let cfg: CustomSynth = formats::read_json(path)?;
            ensure!(
                cfg.predictions.is_some() || cfg.features.is_some(),
                "{}: nothing to generate; give `predictions` and/or `features`",
                path.display()
            );
            if let Some(mut spec) = cfg.predictions {
                spec.seed = a.seed;
                write_prediction_sets(&a.out_prefix, &synth::gen_predictions(&spec)?)?;
            }
            if let Some(f) = cfg.features {
                write_features(&a.out_prefix, &f, a.seed)?;
            }
            Ok(())
        }
        Preset::EnsemblePair => {
            let (a_set, b_set) = synth::ensemble_pair_fixture();
            write_prediction_sets(&a.out_prefix, &[a_set, b_set])
        }
    }
}

fn train_head(a: TrainArgs) -> Result<()> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => formats::read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let features = formats::read_ftb(&a.features)?;
    let (model, history) = head::train(&features, &cfg)?;
    formats::write_json(&a.out, &model)?;

    if let Some(path) = &a.history {
        let mut w = csv::Writer::from_path(path).with_context(|| format!("cannot create {}", path.display()))?;
        w.write_record(["epoch", "train_loss", "val_loss", "val_accuracy", "learning_rate"])?;
        for e in &history.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.train_loss.to_string(),
                e.val_loss.to_string(),
                e.val_accuracy.to_string(),
                e.learning_rate.to_string(),
            ])?;
        }
        w.flush()?;
    }
    match history.best_epoch {
        Some(best) => {
            let e = &history.epochs[best - 1];
            println!(
                "trained {} epochs{}; best epoch {best}: val_loss {:.6}, val_accuracy {:.4}",
                history.epochs.len(),
                if history.stopped_early { " (stopped early)" } else { "" },
                e.val_loss,
                e.val_accuracy
            );
        }
        None => println!("no epochs run; wrote the initial model"),
    }
    Ok(())
}

fn predict(a: PredictArgs) -> Result<()> {
    let model = formats::read_model(&a.model)?;
    let features = formats::read_ftb(&a.features)?;
    let probs = model.predict(&features)?;
    let ids: Vec<String> = (0..features.len()).map(synth::sample_id).collect();
    formats::write_prediction_rows(
        &a.out,
        ids.iter()
            .zip(features.labels())
            .zip(&probs)
            .map(|((id, &l), &p)| (id.as_str(), l, p)),
    )?;
    println!("wrote {} predictions to {}", probs.len(), a.out.display());
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let set = formats::read_predictions(&a.preds)?;
    let report = ClassificationReport::evaluate(&set.scores(), &set.labels(), a.threshold)?;
    let doc = ReportDocument::new(&report, vec![set.model_name().to_string()], None, a.threshold);
    if let Some(path) = &a.roc {
        formats::write_roc(path, &roc_curve(&set.scores(), &set.labels())?)?;
    }
    finish_report(&doc, a.report.as_deref())
}

fn finish_report(doc: &ReportDocument, path: Option<&Path>) -> Result<()> {
    if let Some(p) = path {
        formats::write_json(p, doc)?;
    }
    print!("{}", doc.table());
    Ok(())
}

fn load_aligned(paths: &[PathBuf]) -> Result<AlignedPredictions> {
    let sets = paths
        .iter()
        .map(|p| formats::read_predictions(p))
        .collect::<Result<Vec<_>>>()?;
    let mut names: Vec<&str> = sets.iter().map(|s| s.model_name()).collect();
    names.sort_unstable();
    if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
        bail!("two prediction files share the model name `{}`", w[0]);
    }
    Ok(align(&sets)?)
}

fn ensemble_search(a: SearchArgs) -> Result<()> {
    let aligned = load_aligned(&a.preds)?;
    let result = match a.threads {
        Some(t) => ensemble::search_with_threads(&aligned, a.step, a.threshold, t)?,
        None => ensemble::search(&aligned, a.step, a.threshold)?,
    };
    let names = aligned.model_names().to_vec();
    if let Some(path) = &a.out {
        let wf = WeightsFile {
            model_names: names.clone(),
            weights: result.best_weights.clone(),
            step: a.step,
        };
        formats::write_json(path, &wf)?;
    }
    let mut doc = ReportDocument::new(&result.best_report, names, Some(&result.best_weights), a.threshold);
    doc.search = Some(SearchSummary {
        step: a.step,
        grid_size: result.grid_size,
        per_model_accuracy: result.per_model_accuracy.clone(),
    });
    println!("searched {} weight vectors", result.grid_size);
    finish_report(&doc, a.report.as_deref())
}

/// Checks the sum within [`WEIGHT_SUM_TOL`] and rescales to sum to one.
fn parse_weights(raw: &[f64], n_models: usize) -> Result<WeightVector> {
    ensure!(
        raw.len() == n_models,
        "{} weights given for {n_models} prediction files",
        raw.len()
    );
    if let Some(w) = raw.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
        bail!("weight {w} must be finite and nonnegative");
    }
    let sum: f64 = raw.iter().sum();
    ensure!(
        (sum - 1.0).abs() <= WEIGHT_SUM_TOL,
        "weights sum to {sum}, expected 1 within {WEIGHT_SUM_TOL}"
    );
    Ok(WeightVector::new(raw.iter().map(|w| w / sum).collect())?)
}

fn ensemble_apply(a: ApplyArgs) -> Result<()> {
    let aligned = load_aligned(&a.preds)?;
    let weights = parse_weights(&a.weights, aligned.n_models())?;
    let (scores, report) = ensemble::apply(&aligned, &weights, a.threshold)?;
    if let Some(path) = &a.out {
        formats::write_prediction_rows(
            path,
            aligned
                .sample_ids()
                .iter()
                .zip(aligned.true_labels())
                .zip(&scores)
                .map(|((id, &l), &s)| (id.as_str(), l, s)),
        )?;
    }
    let doc = ReportDocument::new(&report, aligned.model_names().to_vec(), Some(&weights), a.threshold);
    finish_report(&doc, a.report.as_deref())
}
