//! Dataset ingestion, per-window normalisation, window enumeration and the
//! synthetic series generator.

mod revin;
mod synth;
mod windows;

pub use revin::{revin_denormalize, revin_normalize, RevinStats, REVIN_EPS};
pub use synth::{synth_generate, write_outlier_sidecar, OutlierPatch, Sinusoid, SynthOutput, SynthSpec, OUTLIER_PATCH_LEN};
pub use windows::{sliding_windows, SplitSpec, SplitWindows, WindowOrigin, WindowSample};

use std::path::Path;

use crate::attention::fmt_f64;
use crate::error::{Error, Result};

/// `T × V` numeric series, stored column-major (one vector per variable).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    columns: Vec<Vec<f64>>,
    names: Vec<String>,
    dates: Option<Vec<String>>,
    /// Seasonal period used by MASE and the seasonal-naive baseline.
    pub periodicity: Option<usize>,
    pub frequency: Option<String>,
}

impl Dataset {
    pub fn new(columns: Vec<Vec<f64>>, names: Vec<String>) -> Result<Self> {
        if columns.is_empty() {
            return Err(Error::data("dataset has no variables"));
        }
        if names.len() != columns.len() {
            return Err(Error::data(format!("{} names for {} variables", names.len(), columns.len())));
        }
        let t = columns[0].len();
        if t == 0 {
            return Err(Error::data("dataset has no rows"));
        }
        if columns.iter().any(|c| c.len() != t) {
            return Err(Error::data("variables have different lengths"));
        }
        if let Some((v, i)) = columns
            .iter()
            .enumerate()
            .find_map(|(v, c)| c.iter().position(|x| !x.is_finite()).map(|i| (v, i)))
        {
            return Err(Error::data(format!("non-finite value at row {} of variable '{}'", i, names[v])));
        }
        Ok(Dataset {
            columns,
            names,
            dates: None,
            periodicity: None,
            frequency: None,
        })
    }

    pub fn univariate(values: Vec<f64>) -> Result<Self> {
        Self::new(vec![values], vec!["value".into()])
    }

    pub fn with_dates(mut self, dates: Vec<String>) -> Result<Self> {
        if dates.len() != self.len() {
            return Err(Error::data(format!("{} dates for {} rows", dates.len(), self.len())));
        }
        self.dates = Some(dates);
        Ok(self)
    }

    /// Number of time steps `T`.
    pub fn len(&self) -> usize {
        self.columns[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of variables `V`.
    pub fn n_vars(&self) -> usize {
        self.columns.len()
    }

    pub fn column(&self, v: usize) -> &[f64] {
        &self.columns[v]
    }

    pub fn columns(&self) -> &[Vec<f64>] {
        &self.columns
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn dates(&self) -> Option<&[String]> {
        self.dates.as_deref()
    }

    /// Reorders variables; `order[k]` is the source index of new variable `k`.
    pub fn permute_vars(&self, order: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.n_vars()];
        for &o in order {
            if o >= self.n_vars() || std::mem::replace(&mut seen[o], true) {
                return Err(Error::data(format!("{:?} is not a permutation of the variables", order)));
            }
        }
        if order.len() != self.n_vars() {
            return Err(Error::data(format!("{:?} is not a permutation of the variables", order)));
        }
        let mut out = self.clone();
        out.columns = order.iter().map(|&o| self.columns[o].clone()).collect();
        out.names = order.iter().map(|&o| self.names[o].clone()).collect();
        Ok(out)
    }

    /// Reads a CSV with a header row. A first column named `date` is kept
    /// for provenance but excluded from the variables.
    pub fn load_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path).map_err(|e| {
            Error::data(format!("cannot open {}: {}", path.display(), e))
        })?;
        let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
        if headers.is_empty() || headers.iter().all(|h| h.is_empty()) {
            return Err(Error::data(format!("{} is empty", path.display())));
        }
        let has_date = headers[0].eq_ignore_ascii_case("date");
        let first = usize::from(has_date);
        let names = headers[first..].to_vec();
        if names.is_empty() {
            return Err(Error::data(format!("{} has no numeric columns", path.display())));
        }
        let mut columns = vec![Vec::new(); names.len()];
        let mut dates = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if rec.len() != headers.len() {
                return Err(Error::data(format!(
                    "row {} has {} fields, header has {}",
                    row + 1,
                    rec.len(),
                    headers.len()
                )));
            }
            if has_date {
                dates.push(rec[0].to_string());
            }
            for (c, field) in rec.iter().skip(first).enumerate() {
                let v: f64 = field.trim().parse().map_err(|_| {
                    Error::data(format!("row {}, column '{}': '{}' is not a number", row + 1, names[c], field))
                })?;
                if !v.is_finite() {
                    return Err(Error::data(format!(
                        "row {}, column '{}': missing or non-finite value '{}'",
                        row + 1,
                        names[c],
                        field
                    )));
                }
                columns[c].push(v);
            }
        }
        if columns[0].is_empty() {
            return Err(Error::data(format!("{} has a header but no rows", path.display())));
        }
        let ds = Dataset::new(columns, names)?;
        if has_date {
            ds.with_dates(dates)
        } else {
            Ok(ds)
        }
    }

    /// Writes the dataset back in the format read by [`Dataset::load_csv`].
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = Vec::new();
        if self.dates.is_some() {
            header.push("date".to_string());
        }
        header.extend(self.names.iter().cloned());
        w.write_record(&header)?;
        for t in 0..self.len() {
            let mut rec = Vec::with_capacity(header.len());
            if let Some(d) = &self.dates {
                rec.push(d[t].clone());
            }
            rec.extend(self.columns.iter().map(|c| fmt_f64(c[t])));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}
