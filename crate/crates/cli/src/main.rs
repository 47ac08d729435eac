use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;
use serde_json::json;

use msml::dataset::{self, Fold, SplitSpec};
use msml::experiment::{self, ExperimentConfig};
use msml::gradcheck::{self, Scope};
use msml::metrics::build_report;
use msml::model::{history_to_csv, load_checkpoint, save_checkpoint, Checkpoint, Head};

const CHECKPOINT_FILE: &str = "checkpoint.bin";
const HISTORY_FILE: &str = "history.csv";
const RESOLVED_CONFIG_FILE: &str = "config.json";
const MANIFEST_FILE: &str = "manifest.json";
const GENERATOR_FILE: &str = "generator.conf";

#[derive(Parser)]
#[command(
    name = "msml",
    version,
    about = "Multi-label softmax loss and bilinear two-stream training at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with a grouped train/val/test split.
    GenData {
        /// Generator spec (`key = value` lines).
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model described by a JSON experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score one split with a checkpoint and write a metrics report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Fold,
        /// ce, msml, fce or fused (mean of ce and fce).
        #[arg(long, default_value = "fce")]
        head: Head,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// layers, losses, bilinear or model.
        #[arg(long)]
        scope: Scope,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Scale analytic gradients by 1 + PERTURB (harness self-test).
        #[arg(long, default_value_t = 0.0, hide = true)]
        perturb: f64,
    },
}

/// A check ran to completion and found a problem.
#[derive(Debug)]
struct VerificationFailed(usize);

impl std::fmt::Display for VerificationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} gradient check(s) exceeded tolerance", self.0)
    }
}

impl std::error::Error for VerificationFailed {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<VerificationFailed>().is_some() {
        return 1;
    }
    match err.chain().find_map(|e| e.downcast_ref::<msml::Error>()) {
        Some(msml::Error::Numerical { .. }) => 3,
        _ => 2,
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    dataset::write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn gen_data(spec_path: &Path, out: &Path) -> Result<()> {
    let text = fs::read_to_string(spec_path).with_context(|| format!("reading {}", spec_path.display()))?;
    let spec = dataset::parse_generator_spec(&text).with_context(|| format!("in {}", spec_path.display()))?;
    let samples = dataset::generate(&spec)?;
    let split_spec = SplitSpec {
        seed: spec.seed,
        ..SplitSpec::default()
    };
    let indices = dataset::split(&samples, &split_spec)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    dataset::save(&samples, out)?;
    dataset::write_splits(&indices, samples.len(), out)?;
    write_text(&out.join(GENERATOR_FILE), &dataset::render_generator_spec(&spec))?;
    let positives: Vec<usize> = (0..spec.num_classes)
        .map(|c| samples.iter().filter(|s| s.labels.is_positive(c)).count())
        .collect();
    let manifest = json!({
        "generator": spec,
        "seed": spec.seed,
        "split": split_spec,
        "fold_sizes": { "train": indices.train.len(), "val": indices.val.len(), "test": indices.test.len() },
        "class_positive_counts": positives,
        "normal_samples": samples.iter().filter(|s| s.labels.is_normal()).count(),
        "files": [dataset::IMAGES_FILE, dataset::LABELS_FILE, dataset::SPLITS_FILE, GENERATOR_FILE],
    });
    write_text(
        &out.join(MANIFEST_FILE),
        &(serde_json::to_string_pretty(&manifest)? + "\n"),
    )?;
    info!("wrote {} samples to {}", samples.len(), out.display());
    Ok(())
}

fn train(config_path: &Path) -> Result<()> {
    let text = fs::read_to_string(config_path).with_context(|| format!("reading {}", config_path.display()))?;
    let cfg: ExperimentConfig =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", config_path.display()))?;
    let samples =
        dataset::load(&cfg.data_dir).with_context(|| format!("loading dataset {}", cfg.data_dir.display()))?;
    let indices = dataset::read_splits(&cfg.data_dir)?;
    let data = experiment::prepare(&samples, &indices)?;
    let (model, history) = experiment::run(&cfg, &data)?;

    fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    save_checkpoint(
        &Checkpoint {
            model,
            norm: data.stats,
        },
        &cfg.out_dir.join(CHECKPOINT_FILE),
    )?;
    write_text(&cfg.out_dir.join(HISTORY_FILE), &history_to_csv(&history))?;
    write_text(
        &cfg.out_dir.join(RESOLVED_CONFIG_FILE),
        &(serde_json::to_string_pretty(&cfg)? + "\n"),
    )?;
    info!("wrote checkpoint and history to {}", cfg.out_dir.display());
    Ok(())
}

fn eval(checkpoint: &Path, data_dir: &Path, fold: Fold, head: Head, out: &Path) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let samples = dataset::load(data_dir).with_context(|| format!("loading dataset {}", data_dir.display()))?;
    let indices = dataset::read_splits(data_dir)?;
    let mut picked: Vec<_> = indices.take(fold, &samples).into_iter().cloned().collect();
    if picked.is_empty() {
        bail!("split {} is empty", fold.name());
    }
    ckpt.norm.apply_all(&mut picked)?;
    let sm = experiment::score(&ckpt.model, &picked, head)?;
    let report = build_report(&sm);
    write_text(out, &report.to_json())?;

    let resolved = json!({
        "checkpoint": checkpoint,
        "data": data_dir,
        "split": fold.name(),
        "head": head,
        "out": out,
    });
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "report".into());
    let config_path = out.with_file_name(format!("{stem}.config.json"));
    write_text(&config_path, &(serde_json::to_string_pretty(&resolved)? + "\n"))?;
    info!(
        "macro AUC {:.4} on {} {} samples",
        report.macro_auc.unwrap_or(f64::NAN),
        picked.len(),
        fold.name()
    );
    Ok(())
}

fn run_gradcheck(scope: Scope, seed: u64, perturb: f64) -> Result<()> {
    let results = gradcheck::run(scope, gradcheck::Options { seed, perturb })?;
    let mut failures = 0;
    for r in &results {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<32} rel_err {:.3e}  tol {:.0e}  {verdict}",
            r.name, r.rel_err, r.tolerance
        );
        failures += usize::from(!r.passed());
    }
    println!(
        "{}: {} of {} checks passed",
        scope.name(),
        results.len() - failures,
        results.len()
    );
    if failures > 0 {
        return Err(VerificationFailed(failures).into());
    }
    Ok(())
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("MSML_THREADS") {
        let n: usize = v
            .parse()
            .with_context(|| format!("MSML_THREADS={v:?} is not a thread count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match cli.command {
        Command::GenData { spec, out } => gen_data(&spec, &out),
        Command::Train { config } => train(&config),
        Command::Eval {
            checkpoint,
            data,
            split,
            head,
            out,
        } => eval(&checkpoint, &data, split, head, &out),
        Command::Gradcheck { scope, seed, perturb } => run_gradcheck(scope, seed, perturb),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
