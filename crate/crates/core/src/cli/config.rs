use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use crate::data::{synth_generate, Dataset, OutlierPatch, Sinusoid, SplitSpec, SynthSpec};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant};
use crate::parallel::Execution;
use crate::train::TrainSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Csv,
    Synth,
}

/// Outlier magnitude, either absolute or a multiple of the clean series' std.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Magnitude {
    Absolute(f64),
    StdMultiple(f64),
}

/// Flat run configuration. Defaults follow the paper's training setup.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data_path: Option<PathBuf>,
    pub dataset_kind: DatasetKind,
    pub model: ModelConfig,
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub split: SplitSpec,
    pub periodicity_m: Option<usize>,
    pub out_dir: PathBuf,
    pub n_seeds: usize,
    pub variants: Vec<Variant>,
    pub synth: SynthSpec,
    pub outlier_magnitude: Magnitude,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data_path: None,
            dataset_kind: DatasetKind::Synth,
            model: ModelConfig::default(),
            batch_size: 16,
            lr: 1e-4,
            epochs: 10,
            patience: 1,
            seed: 0,
            split: SplitSpec::default(),
            periodicity_m: None,
            out_dir: PathBuf::from("out"),
            n_seeds: 1,
            variants: Variant::ALL.to_vec(),
            synth: SynthSpec::default(),
            outlier_magnitude: Magnitude::Absolute(0.0),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse '{value}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::config(format!("{key}: expected a boolean, got '{value}'"))),
    }
}

/// `amp:period[:phase]` terms separated by `;`.
pub fn parse_components(value: &str) -> Result<Vec<Sinusoid>> {
    let mut out = Vec::new();
    for term in value.split(';').map(str::trim).filter(|t| !t.is_empty()) {
        let parts: Vec<&str> = term.split(':').map(str::trim).collect();
        if !(2..=3).contains(&parts.len()) {
            return Err(Error::config(format!(
                "synth.components: term '{term}' must be amplitude:period[:phase]"
            )));
        }
        out.push(Sinusoid {
            amplitude: parse("synth.components", parts[0])?,
            period: parse("synth.components", parts[1])?,
            phase: parts.get(2).map(|p| parse("synth.components", p)).transpose()?.unwrap_or(0.0),
        });
    }
    Ok(out)
}

fn format_components(cs: &[Sinusoid]) -> String {
    cs.iter()
        .map(|c| format!("{}:{}:{}", c.amplitude, c.period, c.phase))
        .collect::<Vec<_>>()
        .join(";")
}

impl RunConfig {
    /// Parses `key = value` lines on top of the defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {}", path.display(), e)))?;
        Self::from_text(&text)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value, got '{}'", n + 1, line)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override '{kv}' is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "data_path" => self.data_path = Some(PathBuf::from(value)),
            "dataset_kind" => {
                self.dataset_kind = match value {
                    "csv" => DatasetKind::Csv,
                    "synth" => DatasetKind::Synth,
                    _ => return Err(Error::config(format!("dataset_kind must be csv or synth, got '{value}'"))),
                }
            }
            "input_len" => self.model.input_len = parse(key, value)?,
            "pred_len" => self.model.pred_len = parse(key, value)?,
            "stages" => self.model.stages = parse(key, value)?,
            "patch_size" => self.model.patch_size = parse(key, value)?,
            "embed_dim" => self.model.embed_dim = parse(key, value)?,
            "dropout" => self.model.dropout = parse(key, value)?,
            "variant" => self.model.variant = value.parse()?,
            "feed_forward" => self.model.feed_forward = parse_bool(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "split_train" => self.split.train = parse(key, value)?,
            "split_val" => self.split.val = parse(key, value)?,
            "split_test" => self.split.test = parse(key, value)?,
            "periodicity_m" => {
                self.periodicity_m = match value {
                    "" | "none" => None,
                    _ => Some(parse(key, value)?),
                }
            }
            "out_dir" => self.out_dir = PathBuf::from(value),
            "n_seeds" => self.n_seeds = parse(key, value)?,
            "variants" => {
                self.variants = value
                    .split(',')
                    .map(str::trim)
                    .filter(|v| !v.is_empty())
                    .map(str::parse)
                    .collect::<Result<_>>()?
            }
            "synth.components" => self.synth.components = parse_components(value)?,
            "synth.trend" => self.synth.trend = parse(key, value)?,
            "synth.noise" => self.synth.noise = parse(key, value)?,
            "synth.outlier_rate" => self.synth.outlier_rate = parse(key, value)?,
            "synth.outlier_magnitude" => {
                self.outlier_magnitude = match value.strip_suffix("*std") {
                    Some(k) => Magnitude::StdMultiple(parse(key, k.trim())?),
                    None => Magnitude::Absolute(parse(key, value)?),
                }
            }
            "synth.length" => self.synth.length = parse(key, value)?,
            "synth.n_vars" => self.synth.n_vars = parse(key, value)?,
            _ => return Err(Error::config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    pub fn train_spec(&self, exec: Execution) -> TrainSpec {
        TrainSpec {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            lr_decay: 0.5,
            patience: self.patience,
            seed: self.seed,
            exec,
        }
    }

    /// Synthetic spec with the outlier magnitude resolved.
    pub fn resolved_synth(&self) -> Result<SynthSpec> {
        let mut spec = SynthSpec { seed: self.seed, ..self.synth.clone() };
        spec.outlier_magnitude = match self.outlier_magnitude {
            Magnitude::Absolute(m) => m,
            Magnitude::StdMultiple(k) => {
                let clean = synth_generate(&SynthSpec { outlier_rate: 0.0, ..spec.clone() })?;
                let x = clean.dataset.column(0);
                let n = x.len() as f64;
                let mean = x.iter().sum::<f64>() / n;
                k * (x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
            }
        };
        Ok(spec)
    }

    /// Checks every invariant before any work is done.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.split.validate()?;
        self.train_spec(Execution::Sequential).validate()?;
        if self.periodicity_m == Some(0) {
            return Err(Error::config("periodicity_m must be positive"));
        }
        if self.n_seeds == 0 {
            return Err(Error::config("n_seeds must be positive"));
        }
        if self.variants.is_empty() {
            return Err(Error::config("variants must list at least one variant"));
        }
        match self.dataset_kind {
            DatasetKind::Csv if self.data_path.is_none() => {
                return Err(Error::config("dataset_kind = csv requires data_path"))
            }
            DatasetKind::Synth => self.synth.validate()?,
            _ => {}
        }
        Ok(())
    }

    /// Loads or generates the dataset; outlier positions are empty for CSV input.
    pub fn load_dataset(&self) -> Result<(Dataset, Vec<OutlierPatch>)> {
        let (mut ds, outliers) = match self.dataset_kind {
            DatasetKind::Csv => {
                let path = self.data_path.as_ref().ok_or_else(|| Error::config("data_path is not set"))?;
                (Dataset::load_csv(path)?, Vec::new())
            }
            DatasetKind::Synth => {
                let out = synth_generate(&self.resolved_synth()?)?;
                (out.dataset, out.outliers)
            }
        };
        ds.periodicity = self.periodicity_m;
        Ok((ds, outliers))
    }

    /// Typed snapshot of every key, embedded in metrics documents.
    pub fn to_json(&self) -> Value {
        let magnitude = match self.outlier_magnitude {
            Magnitude::Absolute(m) => json!(m),
            Magnitude::StdMultiple(k) => json!(format!("{k}*std")),
        };
        let variants: Vec<&str> = self.variants.iter().map(|v| v.label()).collect();
        json!({
            "data_path": self.data_path.as_ref().map(|p| p.display().to_string()),
            "dataset_kind": match self.dataset_kind { DatasetKind::Csv => "csv", DatasetKind::Synth => "synth" },
            "input_len": self.model.input_len,
            "pred_len": self.model.pred_len,
            "stages": self.model.stages,
            "patch_size": self.model.patch_size,
            "embed_dim": self.model.embed_dim,
            "dropout": self.model.dropout,
            "variant": self.model.variant.label(),
            "feed_forward": self.model.feed_forward,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "epochs": self.epochs,
            "patience": self.patience,
            "seed": self.seed,
            "split_train": self.split.train,
            "split_val": self.split.val,
            "split_test": self.split.test,
            "periodicity_m": self.periodicity_m,
            "n_seeds": self.n_seeds,
            "variants": variants.join(","),
            "synth.components": format_components(&self.synth.components),
            "synth.trend": self.synth.trend,
            "synth.noise": self.synth.noise,
            "synth.outlier_rate": self.synth.outlier_rate,
            "synth.outlier_magnitude": magnitude,
            "synth.length": self.synth.length,
            "synth.n_vars": self.synth.n_vars,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_training_setup() {
        let c = RunConfig::default();
        assert_eq!((c.model.stages, c.model.patch_size, c.model.embed_dim), (3, 6, 32));
        assert_eq!((c.batch_size, c.lr, c.epochs, c.patience), (16, 1e-4, 10, 1));
        assert_eq!(c.model.dropout, 0.1);
        c.validate().unwrap();
    }

    #[test]
    fn parses_file_and_overrides() {
        let mut c = RunConfig::from_text(
            "# comment\ninput_len = 48\n\npred_len=24 # trailing\nvariant = no_dm\nsynth.components = 1:24:0; 0.5:168\nsynth.outlier_magnitude = 5*std\n",
        )
        .unwrap();
        assert_eq!((c.model.input_len, c.model.pred_len), (48, 24));
        assert_eq!(c.model.variant, Variant::NoDM);
        assert_eq!(c.synth.components.len(), 2);
        assert_eq!(c.synth.components[1].period, 168.0);
        assert_eq!(c.outlier_magnitude, Magnitude::StdMultiple(5.0));
        c.apply_override("input_len=96").unwrap();
        assert_eq!(c.model.input_len, 96);
    }

    #[test]
    fn errors_name_the_problem() {
        let e = RunConfig::from_text("bogus = 1").unwrap_err();
        assert!(e.to_string().contains("bogus"));
        let e = RunConfig::from_text("epochs = ten").unwrap_err();
        assert!(e.to_string().contains("epochs"));
        let e = RunConfig::from_text("input_len = 100").unwrap().validate().unwrap_err();
        assert!(e.to_string().contains("divisible"));
        let e = RunConfig::from_text("dataset_kind = csv").unwrap().validate().unwrap_err();
        assert!(e.to_string().contains("data_path"));
        assert!(RunConfig::from_text("no equals sign").is_err());
    }

    #[test]
    fn std_multiple_resolves_against_clean_series() {
        let c = RunConfig::from_text("synth.length = 2000\nsynth.noise = 0\nsynth.trend = 0\nsynth.components = 1:20\nsynth.outlier_magnitude = 2*std").unwrap();
        let s = c.resolved_synth().unwrap();
        assert!((s.outlier_magnitude - 2.0 / 2f64.sqrt()).abs() < 1e-9);
    }
}
