use crate::error::{Error, Result};

fn check_lengths(y: &[f64], x: &[f64]) -> Result<()> {
    if y.is_empty() || y.len() != x.len() {
        return Err(Error::shape(format!("metric over {} predictions and {} truths", y.len(), x.len())));
    }
    Ok(())
}

pub fn mse(y: &[f64], x: &[f64]) -> Result<f64> {
    check_lengths(y, x)?;
    Ok(y.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64)
}

pub fn mae(y: &[f64], x: &[f64]) -> Result<f64> {
    check_lengths(y, x)?;
    Ok(y.iter().zip(x).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64)
}

/// `(200/n) Σ |y−x| / (|y|+|x|)`; terms with a zero denominator count as 0.
pub fn smape(y: &[f64], x: &[f64]) -> Result<f64> {
    check_lengths(y, x)?;
    let s: f64 = y
        .iter()
        .zip(x)
        .map(|(a, b)| {
            let den = a.abs() + b.abs();
            if den == 0.0 {
                0.0
            } else {
                (a - b).abs() / den
            }
        })
        .sum();
    Ok(200.0 * s / y.len() as f64)
}

/// Mean absolute error of `y` against the last `y.len()` values of `x_full`,
/// scaled by the mean seasonal difference `|x_j − x_{j−m}|` over all of `x_full`.
pub fn mase(y: &[f64], x_full: &[f64], m: usize) -> Result<f64> {
    let h = y.len();
    if m == 0 {
        return Err(Error::config("periodicity must be positive"));
    }
    if h == 0 || x_full.len() < h || x_full.len() - h <= m {
        return Err(Error::config(format!(
            "MASE needs more than m = {} history points, got {}",
            m,
            x_full.len().saturating_sub(h)
        )));
    }
    let truth = &x_full[x_full.len() - h..];
    let num = mae(y, truth)?;
    let n = x_full.len();
    let den = (m..n).map(|j| (x_full[j] - x_full[j - m]).abs()).sum::<f64>() / (n - m) as f64;
    if den == 0.0 {
        return Err(Error::Numerical("MASE undefined: series has zero seasonal variation".into()));
    }
    Ok(num / den)
}

/// Seasonal-naive forecast: `history[T − m + (t mod m)]`.
pub fn naive2_forecast(history: &[f64], m: usize, h: usize) -> Result<Vec<f64>> {
    if m == 0 || history.len() < m {
        return Err(Error::config(format!(
            "seasonal naive needs 1 <= m <= history length, got m = {} for {} points",
            m,
            history.len()
        )));
    }
    let base = history.len() - m;
    Ok((0..h).map(|t| history[base + t % m]).collect())
}

/// `½ (SMAPE/SMAPE_naive2 + MASE/MASE_naive2)`.
pub fn owa(smape: f64, mase: f64, smape_naive2: f64, mase_naive2: f64) -> Result<f64> {
    if smape_naive2 == 0.0 || mase_naive2 == 0.0 {
        return Err(Error::Numerical("OWA undefined: naive2 SMAPE or MASE is zero".into()));
    }
    Ok(0.5 * (smape / smape_naive2 + mase / mase_naive2))
}
