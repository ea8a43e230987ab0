use super::{revin_normalize, Dataset, RevinStats};
use crate::error::{Error, Result};

/// Chronological train/validation/test fractions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { train: 0.7, val: 0.1, test: 0.2 }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let parts = [("split_train", self.train), ("split_val", self.val), ("split_test", self.test)];
        for (name, f) in parts {
            if !(f > 0.0 && f.is_finite()) {
                return Err(Error::config(format!("{name} must be positive, got {f}")));
            }
        }
        let sum = self.train + self.val + self.test;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("split fractions must sum to 1, got {sum}")));
        }
        Ok(())
    }

    /// Row ranges `[start, end)` of the three segments for a series of length `t`.
    pub fn boundaries(&self, t: usize) -> [(usize, usize); 3] {
        let train_end = (t as f64 * self.train).round() as usize;
        let val_end = ((t as f64 * (self.train + self.val)).round() as usize).clamp(train_end, t);
        [(0, train_end.min(t)), (train_end.min(t), val_end), (val_end, t)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowOrigin {
    /// First index of the input window.
    pub start: usize,
    pub var: usize,
}

/// One channel-independent `(input, target)` pair, kept in raw scale.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub input: Vec<f64>,
    pub target: Vec<f64>,
    pub stats: RevinStats,
    pub origin: WindowOrigin,
}

impl WindowSample {
    /// Index of the first target element in the dataset.
    pub fn target_start(&self) -> usize {
        self.origin.start + self.input.len()
    }

    pub fn normalized_input(&self) -> Vec<f64> {
        revin_normalize(&self.input).0
    }

    pub fn normalized_target(&self) -> Vec<f64> {
        self.stats.normalize(&self.target)
    }
}

#[derive(Debug, Clone, Default)]
pub struct SplitWindows {
    pub train: Vec<WindowSample>,
    pub val: Vec<WindowSample>,
    pub test: Vec<WindowSample>,
}

fn segment_windows(
    ds: &Dataset,
    name: &str,
    (lo, hi): (usize, usize),
    input_len: usize,
    pred_len: usize,
    stride: usize,
) -> Result<Vec<WindowSample>> {
    let span = input_len + pred_len;
    if hi - lo < span {
        return Err(Error::data(format!(
            "{name} segment has {} rows (rows {lo}..{hi}), needs at least input_len + pred_len = {span}",
            hi - lo
        )));
    }
    let mut out = Vec::new();
    for start in (lo..=hi - span).step_by(stride) {
        for v in 0..ds.n_vars() {
            let col = ds.column(v);
            let input = col[start..start + input_len].to_vec();
            let target = col[start + input_len..start + span].to_vec();
            let (_, stats) = revin_normalize(&input);
            out.push(WindowSample {
                input,
                target,
                stats,
                origin: WindowOrigin { start, var: v },
            });
        }
    }
    Ok(out)
}

/// Enumerates windows per split, ordered by start index then variable.
/// No window straddles a segment boundary.
pub fn sliding_windows(
    ds: &Dataset,
    input_len: usize,
    pred_len: usize,
    split: SplitSpec,
    stride: usize,
) -> Result<SplitWindows> {
    split.validate()?;
    if input_len < 2 || pred_len == 0 {
        return Err(Error::config(format!("need input_len >= 2 and pred_len >= 1, got {input_len}, {pred_len}")));
    }
    if stride == 0 {
        return Err(Error::config("stride must be positive"));
    }
    let [tr, va, te] = split.boundaries(ds.len());
    Ok(SplitWindows {
        train: segment_windows(ds, "train", tr, input_len, pred_len, stride)?,
        val: segment_windows(ds, "validation", va, input_len, pred_len, stride)?,
        test: segment_windows(ds, "test", te, input_len, pred_len, stride)?,
    })
}
