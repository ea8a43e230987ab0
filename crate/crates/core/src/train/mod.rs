//! Training loop, evaluation metrics and the ablation runner.

mod gradcheck;
mod metrics;

pub use gradcheck::{compare_gradients, gradient_check, GradCheckReport, GroupCheck};
pub use metrics::{mae, mase, mse, naive2_forecast, owa, smape};

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::fmt_f64;
use crate::data::{revin_denormalize, revin_normalize, SplitWindows, WindowSample};
use crate::error::{Error, Result};
use crate::model::{Fppformer, ModelConfig, Variant};
use crate::parallel::{map_range, Execution};
use crate::tensor::Adam;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSpec {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Multiplicative learning-rate decay applied after every epoch.
    pub lr_decay: f64,
    pub patience: usize,
    pub seed: u64,
    pub exec: Execution,
}

impl Default for TrainSpec {
    fn default() -> Self {
        TrainSpec {
            epochs: 10,
            batch_size: 16,
            lr: 1e-4,
            lr_decay: 0.5,
            patience: 1,
            seed: 0,
            exec: Execution::default(),
        }
    }
}

impl TrainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::config(format!("lr decay must lie in (0, 1], got {}", self.lr_decay)));
        }
        if self.patience == 0 {
            return Err(Error::config("patience must be positive"));
        }
        if self.epochs > 0 && self.patience > self.epochs {
            return Err(Error::config(format!(
                "patience ({}) must not exceed epochs ({})",
                self.patience, self.epochs
            )));
        }
        Ok(())
    }

    /// Learning rate used during 0-based epoch `e`.
    pub fn lr_at(&self, e: usize) -> f64 {
        self.lr * self.lr_decay.powi(e as i32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Model with the parameters of the best validation epoch.
    pub model: Fppformer,
    pub history: Vec<EpochRecord>,
    /// 0-based epoch with the lowest validation loss, if any epoch ran.
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
}

struct Prepared {
    input: Vec<f64>,
    target: Vec<f64>,
}

fn prepare(samples: &[WindowSample]) -> Vec<Prepared> {
    samples
        .iter()
        .map(|s| Prepared {
            input: s.normalized_input(),
            target: s.normalized_target(),
        })
        .collect()
}

fn mix(parts: &[u64]) -> u64 {
    // splitmix64 over the parts
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// Mean evaluation-mode loss in normalised space.
pub fn validation_loss(model: &Fppformer, params: &[f64], samples: &[WindowSample], exec: Execution) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::data("validation stream is empty"));
    }
    let prepared = prepare(samples);
    let losses = map_range(exec, prepared.len(), |i| model.loss_at(params, &prepared[i].input, &prepared[i].target));
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / samples.len() as f64)
}

/// Minibatch Adam with per-epoch learning-rate decay and early stopping on
/// the validation loss. Returns the best-validation parameters.
pub fn train(model: &Fppformer, train_set: &[WindowSample], val_set: &[WindowSample], spec: &TrainSpec) -> Result<TrainOutcome> {
    spec.validate()?;
    if train_set.is_empty() {
        return Err(Error::data("training stream is empty"));
    }
    if val_set.is_empty() {
        return Err(Error::data("validation stream is empty"));
    }
    let train_data = prepare(train_set);
    let mut params = model.params().data().to_vec();
    let mut adam = Adam::new(params.len(), spec.lr);
    let mut best_params = params.clone();
    let mut best: Option<(usize, f64)> = None;
    let mut history = Vec::new();
    let mut stale = 0;

    for epoch in 0..spec.epochs {
        adam.lr = spec.lr_at(epoch);
        let mut order: Vec<usize> = (0..train_data.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(&[spec.seed, epoch as u64])));

        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(spec.batch_size).enumerate() {
            let current = &params;
            let results = map_range(spec.exec, batch.len(), |k| {
                let sample = &train_data[batch[k]];
                let mut rng = ChaCha8Rng::seed_from_u64(mix(&[spec.seed, epoch as u64, b as u64, k as u64]));
                model.loss_and_grad(current, &sample.input, &sample.target, Some(&mut rng))
            });
            let mut grad = vec![0.0; params.len()];
            for r in results {
                let (loss, g) = r?;
                if !loss.is_finite() {
                    return Err(Error::Numerical(format!("training loss became non-finite in epoch {}", epoch)));
                }
                loss_sum += loss;
                for (acc, v) in grad.iter_mut().zip(&g) {
                    *acc += v;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            adam.step(&mut params, &grad)?;
        }
        let train_loss = loss_sum / train_data.len() as f64;
        let val_loss = validation_loss(model, &params, val_set, spec.exec)?;
        if !val_loss.is_finite() {
            return Err(Error::Numerical(format!("validation loss became non-finite in epoch {}", epoch)));
        }
        history.push(EpochRecord {
            epoch,
            lr: adam.lr,
            train_loss,
            val_loss,
        });
        if best.map_or(true, |(_, b)| val_loss < b) {
            best = Some((epoch, val_loss));
            best_params.copy_from_slice(&params);
            stale = 0;
        } else {
            stale += 1;
            if stale >= spec.patience {
                break;
            }
        }
    }

    let mut trained = model.clone();
    trained.params_mut().load(&best_params)?;
    Ok(TrainOutcome {
        model: trained,
        history,
        best_epoch: best.map(|b| b.0),
        best_val_loss: best.map(|b| b.1),
    })
}

/// Anything that maps a raw-scale input window to a raw-scale forecast.
pub trait Forecaster: Sync {
    fn horizon(&self) -> usize;
    fn forecast(&self, input: &[f64]) -> Result<Vec<f64>>;
}

impl Forecaster for Fppformer {
    fn horizon(&self) -> usize {
        self.config().pred_len
    }

    /// RevIN-normalises the window, runs the model, and restores the scale.
    fn forecast(&self, input: &[f64]) -> Result<Vec<f64>> {
        let (x, stats) = revin_normalize(input);
        let y = self.predict(&x)?;
        Ok(revin_denormalize(&y, stats))
    }
}

/// Seasonal-naive baseline used as the OWA scaler.
#[derive(Debug, Clone, Copy)]
pub struct Naive2 {
    pub period: usize,
    pub horizon: usize,
}

impl Forecaster for Naive2 {
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn forecast(&self, input: &[f64]) -> Result<Vec<f64>> {
        naive2_forecast(input, self.period, self.horizon)
    }
}

/// Window-averaged metrics of one forecaster.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub mse: f64,
    pub mae: f64,
    pub smape: Option<f64>,
    pub mase: Option<f64>,
    pub owa: Option<f64>,
    pub n_windows: usize,
}

struct WindowScores {
    mse: f64,
    mae: f64,
    seasonal: Option<(f64, f64, f64, f64)>,
}

fn score_window<F: Forecaster + ?Sized>(f: &F, s: &WindowSample, period: Option<usize>) -> Result<WindowScores> {
    if s.target.len() != f.horizon() {
        return Err(Error::shape(format!(
            "window target has {} steps, forecaster produces {}",
            s.target.len(),
            f.horizon()
        )));
    }
    let y = f.forecast(&s.input)?;
    let seasonal = match period {
        None => None,
        Some(m) => {
            let naive = naive2_forecast(&s.input, m, s.target.len())?;
            let mut full = s.input.clone();
            full.extend_from_slice(&s.target);
            Some((
                smape(&y, &s.target)?,
                mase(&y, &full, m)?,
                smape(&naive, &s.target)?,
                mase(&naive, &full, m)?,
            ))
        }
    };
    Ok(WindowScores {
        mse: mse(&y, &s.target)?,
        mae: mae(&y, &s.target)?,
        seasonal,
    })
}

/// Scores a forecaster on raw-scale windows. SMAPE, MASE and OWA (against
/// the seasonal-naive baseline on the same windows) are filled in when a
/// periodicity is given.
pub fn evaluate<F: Forecaster + ?Sized>(f: &F, windows: &[WindowSample], period: Option<usize>, exec: Execution) -> Result<Evaluation> {
    if windows.is_empty() {
        return Err(Error::data("test stream is empty"));
    }
    let scores = map_range(exec, windows.len(), |i| score_window(f, &windows[i], period));
    let n = windows.len() as f64;
    let (mut e_mse, mut e_mae) = (0.0, 0.0);
    let mut seasonal = [0.0; 4];
    for s in scores {
        let s = s?;
        e_mse += s.mse;
        e_mae += s.mae;
        if let Some((a, b, c, d)) = s.seasonal {
            for (acc, v) in seasonal.iter_mut().zip([a, b, c, d]) {
                *acc += v;
            }
        }
    }
    let (smape_v, mase_v, owa_v) = if period.is_some() {
        let [a, b, c, d] = seasonal.map(|v| v / n);
        (Some(a), Some(b), Some(owa(a, b, c, d)?))
    } else {
        (None, None, None)
    };
    Ok(Evaluation {
        mse: e_mse / n,
        mae: e_mae / n,
        smape: smape_v,
        mase: mase_v,
        owa: owa_v,
        n_windows: windows.len(),
    })
}

/// Metrics document written by `train`, `eval` and `ablate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub variant: String,
    pub seed: u64,
    pub mse: f64,
    pub mae: f64,
    pub smape: Option<f64>,
    pub mase: Option<f64>,
    pub owa: Option<f64>,
    pub n_windows: usize,
    pub config: serde_json::Value,
}

impl MetricsReport {
    pub fn new(variant: &str, seed: u64, e: &Evaluation, config: serde_json::Value) -> Self {
        MetricsReport {
            variant: variant.to_string(),
            seed,
            mse: e.mse,
            mae: e.mae,
            smape: e.smape,
            mase: e.mase,
            owa: e.owa,
            n_windows: e.n_windows,
            config,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

pub fn write_history_csv(history: &[EpochRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "lr", "train_loss", "val_loss"])?;
    for r in history {
        w.write_record([r.epoch.to_string(), fmt_f64(r.lr), fmt_f64(r.train_loss), fmt_f64(r.val_loss)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_history_csv(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::data(format!("bad history row {:?}", rec)))
        };
        out.push(EpochRecord {
            epoch: num(0)? as usize,
            lr: num(1)?,
            train_loss: num(2)?,
            val_loss: num(3)?,
        });
    }
    Ok(out)
}

/// Per-seed reports of one ablation variant.
#[derive(Debug, Clone)]
pub struct AblationResult {
    pub variant: Variant,
    pub runs: Vec<MetricsReport>,
}

impl AblationResult {
    pub fn mean_mse(&self) -> f64 {
        self.runs.iter().map(|r| r.mse).sum::<f64>() / self.runs.len() as f64
    }

    pub fn mean_mae(&self) -> f64 {
        self.runs.iter().map(|r| r.mae).sum::<f64>() / self.runs.len() as f64
    }

    fn mean_opt(&self, f: impl Fn(&MetricsReport) -> Option<f64>) -> Option<f64> {
        let vals: Option<Vec<f64>> = self.runs.iter().map(f).collect();
        vals.map(|v| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn mean_smape(&self) -> Option<f64> {
        self.mean_opt(|r| r.smape)
    }

    pub fn mean_mase(&self) -> Option<f64> {
        self.mean_opt(|r| r.mase)
    }

    pub fn mean_owa(&self) -> Option<f64> {
        self.mean_opt(|r| r.owa)
    }
}

/// Trains and evaluates `variant` once per seed; the seed drives both
/// initialisation and training randomness.
pub fn run_ablation(
    variant: Variant,
    windows: &SplitWindows,
    base: &ModelConfig,
    spec: &TrainSpec,
    seeds: &[u64],
    period: Option<usize>,
) -> Result<AblationResult> {
    if seeds.is_empty() {
        return Err(Error::config("ablation needs at least one seed"));
    }
    let config = ModelConfig { variant, ..base.clone() };
    config.validate()?;
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let model = Fppformer::new(config.clone(), seed)?;
        let outcome = train(&model, &windows.train, &windows.val, &TrainSpec { seed, ..spec.clone() })?;
        let e = evaluate(&outcome.model, &windows.test, period, spec.exec)?;
        runs.push(MetricsReport::new(variant.label(), seed, &e, serde_json::to_value(&config)?));
    }
    Ok(AblationResult { variant, runs })
}

/// Summary table with one row per variant, metrics averaged over seeds.
pub fn write_ablation_summary(results: &[AblationResult], path: &Path) -> Result<()> {
    let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["variant", "n_seeds", "seeds", "mse", "mae", "smape", "mase", "owa"])?;
    for r in results {
        let seeds: Vec<String> = r.runs.iter().map(|x| x.seed.to_string()).collect();
        w.write_record([
            r.variant.label().to_string(),
            r.runs.len().to_string(),
            seeds.join(";"),
            fmt_f64(r.mean_mse()),
            fmt_f64(r.mean_mae()),
            opt(r.mean_smape()),
            opt(r.mean_mase()),
            opt(r.mean_owa()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{sliding_windows, Dataset, SplitSpec};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            input_len: 24,
            pred_len: 12,
            stages: 1,
            patch_size: 6,
            embed_dim: 2,
            dropout: 0.1,
            variant: Variant::Full,
            feed_forward: false,
        }
    }

    fn sine_windows() -> SplitWindows {
        let xs: Vec<f64> = (0..400).map(|t| (t as f64 * 0.5).sin() + 0.01 * t as f64).collect();
        let ds = Dataset::univariate(xs).unwrap();
        sliding_windows(&ds, 24, 12, SplitSpec::default(), 4).unwrap()
    }

    struct Exact(Vec<Vec<f64>>, std::sync::atomic::AtomicUsize);

    impl Forecaster for Exact {
        fn horizon(&self) -> usize {
            self.0[0].len()
        }
        fn forecast(&self, _: &[f64]) -> Result<Vec<f64>> {
            let i = self.1.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            Ok(self.0[i].clone())
        }
    }

    struct Zero(usize);

    impl Forecaster for Zero {
        fn horizon(&self) -> usize {
            self.0
        }
        fn forecast(&self, _: &[f64]) -> Result<Vec<f64>> {
            Ok(vec![0.0; self.0])
        }
    }

    #[test]
    fn lr_schedule_halves() {
        let s = TrainSpec::default();
        assert_eq!(s.lr_at(0), 1e-4);
        assert_eq!(s.lr_at(1), 5e-5);
        assert_eq!(s.lr_at(2), 2.5e-5);
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let w = sine_windows();
        let model = Fppformer::new(tiny_config(), 3).unwrap();
        let spec = TrainSpec { epochs: 0, ..TrainSpec::default() };
        let out = train(&model, &w.train, &w.val, &spec).unwrap();
        assert!(out.history.is_empty());
        assert_eq!(out.model.params(), model.params());
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let w = sine_windows();
        let model = Fppformer::new(tiny_config(), 5).unwrap();
        let spec = TrainSpec { epochs: 3, lr: 3e-3, patience: 3, seed: 11, ..TrainSpec::default() };
        let a = train(&model, &w.train, &w.val, &spec).unwrap();
        let b = train(&model, &w.train, &w.val, &TrainSpec { exec: Execution::Sequential, ..spec.clone() }).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model.params(), b.model.params());
        let before = validation_loss(&model, model.params().data(), &w.val, Execution::Sequential).unwrap();
        assert!(a.best_val_loss.unwrap() < before);
    }

    #[test]
    fn early_stopping_respects_patience() {
        let w = sine_windows();
        let model = Fppformer::new(tiny_config(), 5).unwrap();
        // a huge learning rate makes validation loss bounce
        let spec = TrainSpec { epochs: 6, lr: 0.5, lr_decay: 1.0, patience: 1, seed: 1, ..TrainSpec::default() };
        let out = train(&model, &w.train, &w.val, &spec).unwrap();
        let best = out.best_epoch.unwrap();
        assert!(out.history.len() <= best + 2);
        let min = out.history.iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(out.best_val_loss, Some(min));
    }

    #[test]
    fn empty_streams_rejected() {
        let w = sine_windows();
        let model = Fppformer::new(tiny_config(), 5).unwrap();
        assert!(train(&model, &[], &w.val, &TrainSpec::default()).is_err());
        assert!(evaluate(&model, &[], None, Execution::Sequential).is_err());
    }

    #[test]
    fn exact_forecaster_scores_zero() {
        let w = sine_windows();
        let truths: Vec<Vec<f64>> = w.test.iter().map(|s| s.target.clone()).collect();
        let f = Exact(truths, Default::default());
        let e = evaluate(&f, &w.test, Some(6), Execution::Sequential).unwrap();
        assert_eq!((e.mse, e.mae, e.smape, e.mase), (0.0, 0.0, Some(0.0), Some(0.0)));
        assert_eq!(e.owa, Some(0.0));
    }

    #[test]
    fn zero_forecaster_on_ones() {
        let ds = Dataset::univariate(vec![1.0; 200]).unwrap();
        let w = sliding_windows(&ds, 10, 5, SplitSpec::default(), 1).unwrap();
        let e = evaluate(&Zero(5), &w.test, None, Execution::Sequential).unwrap();
        assert_eq!((e.mse, e.mae), (1.0, 1.0));
        assert_eq!(e.smape, None);
    }

    #[test]
    fn naive2_owa_is_one() {
        let w = sine_windows();
        let e = evaluate(&Naive2 { period: 12, horizon: 12 }, &w.test, Some(12), Execution::Parallel).unwrap();
        assert_eq!(e.owa, Some(1.0));
    }

    #[test]
    fn history_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.csv");
        let h = vec![EpochRecord { epoch: 0, lr: 1e-4, train_loss: 0.3, val_loss: 1.0 / 3.0 }];
        write_history_csv(&h, &p).unwrap();
        assert_eq!(read_history_csv(&p).unwrap(), h);
    }
}
