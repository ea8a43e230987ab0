use std::f64::consts::PI;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Dataset;
use crate::error::{Error, Result};

/// Length of every injected outlier patch.
pub const OUTLIER_PATCH_LEN: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sinusoid {
    pub amplitude: f64,
    pub period: f64,
    pub phase: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub length: usize,
    pub n_vars: usize,
    pub components: Vec<Sinusoid>,
    pub trend: f64,
    pub noise: f64,
    /// Fraction of time steps covered by outlier patches, per variable.
    pub outlier_rate: f64,
    pub outlier_magnitude: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            length: 5000,
            n_vars: 1,
            components: vec![
                Sinusoid { amplitude: 1.0, period: 24.0, phase: 0.0 },
                Sinusoid { amplitude: 0.5, period: 168.0, phase: 0.0 },
            ],
            trend: 1e-4,
            noise: 0.1,
            outlier_rate: 0.0,
            outlier_magnitude: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OutlierPatch {
    pub var: usize,
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub dataset: Dataset,
    pub outliers: Vec<OutlierPatch>,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.length == 0 {
            return Err(Error::config("synth.length must be positive"));
        }
        if self.n_vars == 0 {
            return Err(Error::config("synth.n_vars must be positive"));
        }
        for c in &self.components {
            if !(c.period > 0.0 && c.period.is_finite()) {
                return Err(Error::config(format!("sinusoid period must be positive, got {}", c.period)));
            }
        }
        if !(0.0..=0.5).contains(&self.outlier_rate) {
            return Err(Error::config(format!("synth.outlier_rate must lie in [0, 0.5], got {}", self.outlier_rate)));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config(format!("synth.noise must be non-negative, got {}", self.noise)));
        }
        Ok(())
    }

    /// Noise-free signal of variable `v` at time `t`; variable `v` is phase-shifted by `v` radians.
    pub fn clean_value(&self, v: usize, t: usize) -> f64 {
        let tf = t as f64;
        let s: f64 = self
            .components
            .iter()
            .map(|c| c.amplitude * (2.0 * PI * tf / c.period + c.phase + v as f64).sin())
            .sum();
        s + self.trend * tf
    }

    /// Number of outlier patches placed in each variable.
    pub fn patches_per_var(&self) -> usize {
        (self.outlier_rate * self.length as f64 / OUTLIER_PATCH_LEN as f64).round() as usize
    }
}

fn place_patches(rng: &mut ChaCha8Rng, length: usize, count: usize) -> Vec<usize> {
    if length < OUTLIER_PATCH_LEN || count == 0 {
        return Vec::new();
    }
    let slots = length / OUTLIER_PATCH_LEN;
    let count = count.min(slots);
    let mut starts: Vec<usize> = rand::seq::index::sample(rng, slots, count)
        .into_iter()
        .map(|s| s * OUTLIER_PATCH_LEN)
        .collect();
    starts.sort_unstable();
    starts
}

pub fn synth_generate(spec: &SynthSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut columns = Vec::with_capacity(spec.n_vars);
    let mut outliers = Vec::new();
    for v in 0..spec.n_vars {
        let mut col: Vec<f64> = (0..spec.length)
            .map(|t| spec.clean_value(v, t) + spec.noise * normal.sample(&mut rng))
            .collect();
        for start in place_patches(&mut rng, spec.length, spec.patches_per_var()) {
            for x in &mut col[start..start + OUTLIER_PATCH_LEN] {
                *x += spec.outlier_magnitude;
            }
            outliers.push(OutlierPatch { var: v, start, len: OUTLIER_PATCH_LEN });
        }
        columns.push(col);
    }
    let names = (0..spec.n_vars).map(|v| format!("v{v}")).collect();
    Ok(SynthOutput { dataset: Dataset::new(columns, names)?, outliers })
}

/// Writes the outlier positions as `var,start,len` rows.
pub fn write_outlier_sidecar(patches: &[OutlierPatch], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["var", "start", "len"])?;
    for p in patches {
        w.write_record([p.var.to_string(), p.start.to_string(), p.len.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
