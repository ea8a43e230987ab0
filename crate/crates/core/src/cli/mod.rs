//! Command-line driver: `synth`, `train`, `eval`, `ablate`, `gradcheck`,
//! `predict` and `export-attention` over a flat `key = value` config file.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
//! failure (divergence, failed gradient check).

mod config;

pub use config::{parse_components, DatasetKind, Magnitude, RunConfig};

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::attention::{fmt_f64, write_score_csvs};
use crate::data::{revin_normalize, sliding_windows, write_outlier_sidecar, Dataset, SplitWindows};
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, save_checkpoint, Fppformer, ModelConfig};
use crate::parallel::Execution;
use crate::train::{
    compare_gradients, evaluate, run_ablation, train, write_ablation_summary, write_history_csv, GradCheckReport,
    MetricsReport,
};

/// Tolerance of the `gradcheck` subcommand.
pub const GRADCHECK_TOLERANCE: f64 = 1e-3;
pub const GRADCHECK_STEP: f64 = 1e-5;

#[derive(Debug, Parser)]
#[command(name = "fppformer", version, about = "Train, evaluate and inspect FPPformer forecasters")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// Flat `key = value` config file.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set epochs=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Run everything on the current thread.
    #[arg(long)]
    pub sequential: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset CSV plus an outlier sidecar.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Output CSV (default: <out_dir>/synth.csv).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train a model; writes model.ckpt, history.csv and metrics.json to out_dir.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Metrics JSON path (default: <out_dir>/eval_metrics.json).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train and evaluate every configured variant over n_seeds seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference check of all parameter gradients on a small model.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
    /// Forecast the next pred_len steps of every column of a window CSV.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// CSV whose last input_len rows form the input window.
        #[arg(long)]
        window: PathBuf,
        /// Output CSV (default: <out_dir>/prediction.csv).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Write the attention weights of every block for one window.
    ExportAttention {
        #[command(flatten)]
        common: Common,
        /// Untrained model from the config seed when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        window: PathBuf,
        /// Column of the window CSV to use.
        #[arg(long, default_value_t = 0)]
        var: usize,
        /// Output directory (default: <out_dir>/attention).
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

impl Common {
    pub fn load(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        for o in &self.overrides {
            c.apply_override(o)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn exec(&self) -> Execution {
        if self.sequential {
            Execution::Sequential
        } else {
            Execution::default()
        }
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Synth { common, output } => cmd_synth(&common.load()?, output).map(|_| 0),
        Command::Train { common } => cmd_train(&common.load()?, common.exec()).map(|_| 0),
        Command::Eval { common, checkpoint, output } => {
            cmd_eval(&common.load()?, &checkpoint, output, common.exec()).map(|_| 0)
        }
        Command::Ablate { common } => cmd_ablate(&common.load()?, common.exec()).map(|_| 0),
        Command::Gradcheck { common, corrupt_gradient } => {
            let report = cmd_gradcheck(&common.load()?, corrupt_gradient, common.exec())?;
            Ok(if report.passed(GRADCHECK_TOLERANCE) { 0 } else { 4 })
        }
        Command::Predict { common, checkpoint, window, output } => {
            cmd_predict(&common.load()?, &checkpoint, &window, output).map(|_| 0)
        }
        Command::ExportAttention { common, checkpoint, window, var, output } => {
            cmd_export_attention(&common.load()?, checkpoint.as_deref(), &window, var, output).map(|_| 0)
        }
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

/// `data.csv` → `data.outliers.csv`.
pub fn sidecar_path(csv: &Path) -> PathBuf {
    let stem = csv.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    csv.with_file_name(format!("{stem}.outliers.csv"))
}

pub fn cmd_synth(config: &RunConfig, output: Option<PathBuf>) -> Result<PathBuf> {
    let spec = config.resolved_synth()?;
    let out = crate::data::synth_generate(&spec)?;
    let path = output.unwrap_or_else(|| config.out_dir.join("synth.csv"));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    out.dataset.write_csv(&path)?;
    write_outlier_sidecar(&out.outliers, &sidecar_path(&path))?;
    println!(
        "wrote {} rows x {} variables to {} ({} outlier patches)",
        out.dataset.len(),
        out.dataset.n_vars(),
        path.display(),
        out.outliers.len()
    );
    Ok(path)
}

fn windows_for(config: &RunConfig, model: &ModelConfig) -> Result<SplitWindows> {
    let (ds, _) = config.load_dataset()?;
    sliding_windows(&ds, model.input_len, model.pred_len, config.split, 1)
}

/// Paths written by `train`.
#[derive(Debug, Clone)]
pub struct TrainArtifacts {
    pub checkpoint: PathBuf,
    pub history: PathBuf,
    pub metrics: PathBuf,
    pub report: MetricsReport,
}

pub fn cmd_train(config: &RunConfig, exec: Execution) -> Result<TrainArtifacts> {
    let windows = windows_for(config, &config.model)?;
    let model = Fppformer::new(config.model.clone(), config.seed)?;
    let outcome = train(&model, &windows.train, &windows.val, &config.train_spec(exec))?;
    ensure_dir(&config.out_dir)?;
    let checkpoint = config.out_dir.join("model.ckpt");
    let history = config.out_dir.join("history.csv");
    let metrics = config.out_dir.join("metrics.json");
    save_checkpoint(&outcome.model, &checkpoint)?;
    write_history_csv(&outcome.history, &history)?;
    let e = evaluate(&outcome.model, &windows.test, config.periodicity_m, exec)?;
    let report = MetricsReport::new(config.model.variant.label(), config.seed, &e, config.to_json());
    report.write_json(&metrics)?;
    for r in &outcome.history {
        println!(
            "epoch {:>2}  lr {:.3e}  train {:.6}  val {:.6}",
            r.epoch, r.lr, r.train_loss, r.val_loss
        );
    }
    match (outcome.best_epoch, outcome.best_val_loss) {
        (Some(b), Some(v)) => println!("best validation loss {} at epoch {}", fmt_f64(v), b),
        _ => println!("no epochs run; checkpoint holds the initial parameters"),
    }
    println!("test mse {}  mae {}", fmt_f64(e.mse), fmt_f64(e.mae));
    Ok(TrainArtifacts { checkpoint, history, metrics, report })
}

pub fn cmd_eval(config: &RunConfig, checkpoint: &Path, output: Option<PathBuf>, exec: Execution) -> Result<MetricsReport> {
    let model = load_checkpoint(checkpoint)?;
    let windows = windows_for(config, model.config())?;
    let e = evaluate(&model, &windows.test, config.periodicity_m, exec)?;
    let mut cfg = config.to_json();
    cfg["checkpoint_model"] = serde_json::to_value(model.config())?;
    let report = MetricsReport::new(model.config().variant.label(), config.seed, &e, cfg);
    let path = output.unwrap_or_else(|| config.out_dir.join("eval_metrics.json"));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    report.write_json(&path)?;
    print!("{}", report.to_json()?);
    Ok(report)
}

pub fn cmd_ablate(config: &RunConfig, exec: Execution) -> Result<Vec<crate::train::AblationResult>> {
    let windows = windows_for(config, &config.model)?;
    let seeds: Vec<u64> = (0..config.n_seeds as u64).map(|k| config.seed + k).collect();
    let spec = config.train_spec(exec);
    let mut results = Vec::new();
    for &v in &config.variants {
        let mut r = run_ablation(v, &windows, &config.model, &spec, &seeds, config.periodicity_m)?;
        for run in &mut r.runs {
            let mut cfg = config.to_json();
            cfg["variant"] = serde_json::json!(v.label());
            run.config = cfg;
        }
        println!("{:<18} mean mse {:.6}  mean mae {:.6}", v.label(), r.mean_mse(), r.mean_mae());
        results.push(r);
    }
    ensure_dir(&config.out_dir)?;
    let all: Vec<&MetricsReport> = results.iter().flat_map(|r| &r.runs).collect();
    std::fs::write(config.out_dir.join("ablation.json"), serde_json::to_string_pretty(&all)? + "\n")?;
    write_ablation_summary(&results, &config.out_dir.join("ablation_summary.csv"))?;
    Ok(results)
}

/// Model used by `gradcheck`: L = H = 24, two stages, P₀ = 6, D = 4.
pub fn gradcheck_config(config: &RunConfig) -> ModelConfig {
    ModelConfig {
        input_len: 24,
        pred_len: 24,
        stages: 2,
        patch_size: 6,
        embed_dim: 4,
        dropout: config.model.dropout,
        variant: config.model.variant,
        feed_forward: config.model.feed_forward,
    }
}

/// Deterministic normalised input/target pair for the gradient check.
pub fn gradcheck_window(seed: u64) -> (Vec<f64>, Vec<f64>) {
    let spec = crate::data::SynthSpec { length: 48, seed, noise: 0.2, ..Default::default() };
    let ds = crate::data::synth_generate(&spec).expect("valid synthetic spec");
    let col = ds.dataset.column(0);
    let (x, stats) = revin_normalize(&col[..24]);
    (x, stats.normalize(&col[24..]))
}

pub fn cmd_gradcheck(config: &RunConfig, corrupt: bool, exec: Execution) -> Result<GradCheckReport> {
    let model = Fppformer::new(gradcheck_config(config), config.seed)?;
    let (x, y) = gradcheck_window(config.seed);
    let (_, mut grad) = model.loss_and_grad(model.params().data(), &x, &y, None)?;
    if corrupt {
        let n = grad.len();
        grad[n - 1] += 0.5;
    }
    let report = compare_gradients(&model, &x, &y, &grad, GRADCHECK_STEP, exec)?;
    println!("{:<28} {:>7} {:>12}", "parameter", "size", "max rel err");
    for g in &report.groups {
        println!("{:<28} {:>7} {:>12.3e}", g.name, g.len, g.worst);
    }
    let w = report.worst();
    let verdict = if report.passed(GRADCHECK_TOLERANCE) { "PASS" } else { "FAIL" };
    println!(
        "{verdict}: worst relative error {:.3e} at {}[{}] (analytic {}, numeric {}), tolerance {:.0e}",
        w.worst,
        w.name,
        w.index,
        fmt_f64(w.analytic),
        fmt_f64(w.numeric),
        GRADCHECK_TOLERANCE
    );
    Ok(report)
}

fn last_rows(ds: &Dataset, var: usize, len: usize) -> Result<&[f64]> {
    if ds.len() < len {
        return Err(Error::data(format!("window file has {} rows, model needs {}", ds.len(), len)));
    }
    Ok(&ds.column(var)[ds.len() - len..])
}

pub fn cmd_predict(config: &RunConfig, checkpoint: &Path, window: &Path, output: Option<PathBuf>) -> Result<Dataset> {
    use crate::train::Forecaster;
    let model = load_checkpoint(checkpoint)?;
    let ds = Dataset::load_csv(window)?;
    let l = model.config().input_len;
    let mut cols = Vec::with_capacity(ds.n_vars());
    for v in 0..ds.n_vars() {
        cols.push(model.forecast(last_rows(&ds, v, l)?)?);
    }
    let pred = Dataset::new(cols, ds.names().to_vec())?;
    let path = output.unwrap_or_else(|| config.out_dir.join("prediction.csv"));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    pred.write_csv(&path)?;
    println!("wrote {} x {} forecast to {}", pred.len(), pred.n_vars(), path.display());
    Ok(pred)
}

pub fn cmd_export_attention(
    config: &RunConfig,
    checkpoint: Option<&Path>,
    window: &Path,
    var: usize,
    output: Option<PathBuf>,
) -> Result<Vec<PathBuf>> {
    let model = match checkpoint {
        Some(p) => load_checkpoint(p)?,
        None => Fppformer::new(config.model.clone(), config.seed)?,
    };
    let ds = Dataset::load_csv(window)?;
    if var >= ds.n_vars() {
        return Err(Error::data(format!("window file has {} columns, asked for column {}", ds.n_vars(), var)));
    }
    let (x, _) = revin_normalize(last_rows(&ds, var, model.config().input_len)?);
    let records = model.attention_scores(&x)?;
    let dir = output.unwrap_or_else(|| config.out_dir.join("attention"));
    let paths = write_score_csvs(&records, &dir)?;
    for p in &paths {
        println!("{}", p.display());
    }
    Ok(paths)
}
