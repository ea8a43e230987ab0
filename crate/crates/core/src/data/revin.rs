/// Lower clamp on the window standard deviation.
pub const REVIN_EPS: f64 = 1e-5;

/// Per-window statistics used to restore a forecast to the input scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RevinStats {
    pub mean: f64,
    /// Population standard deviation, clamped below at [`REVIN_EPS`].
    pub std: f64,
}

/// Normalises a window by its own mean and population standard deviation.
pub fn revin_normalize(window: &[f64]) -> (Vec<f64>, RevinStats) {
    let n = window.len() as f64;
    let mean = window.iter().sum::<f64>() / n;
    let var = window.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(REVIN_EPS);
    let out = window.iter().map(|x| (x - mean) / std).collect();
    (out, RevinStats { mean, std })
}

pub fn revin_denormalize(pred: &[f64], stats: RevinStats) -> Vec<f64> {
    let std = stats.std.max(REVIN_EPS);
    pred.iter().map(|p| p * std + stats.mean).collect()
}

impl RevinStats {
    /// Applies the window's normalisation to another series (e.g. the target).
    pub fn normalize(&self, xs: &[f64]) -> Vec<f64> {
        xs.iter().map(|x| (x - self.mean) / self.std).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn three_point_window() {
        let (y, s) = revin_normalize(&[1.0, 2.0, 3.0]);
        assert_eq!(s.mean, 2.0);
        assert!((s.std - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        let want = 1.0 / (2.0f64 / 3.0).sqrt();
        assert!((y[0] + want).abs() < 1e-12 && y[1].abs() < 1e-15 && (y[2] - want).abs() < 1e-12);
        assert!((want - 1.2247).abs() < 1e-4);
    }

    #[test]
    fn constant_window_uses_eps() {
        let (y, s) = revin_normalize(&[4.0; 5]);
        assert!(y.iter().all(|&v| v == 0.0));
        assert_eq!(s.std, REVIN_EPS);
        assert_eq!(revin_denormalize(&[0.0, 0.0], s), vec![4.0, 4.0]);
    }

    #[test]
    fn identity_statistics() {
        let s = RevinStats { mean: 0.0, std: 1.0 };
        assert_eq!(revin_denormalize(&[1.5, -2.0], s), vec![1.5, -2.0]);
    }

    proptest! {
        #[test]
        fn round_trip_and_moments(xs in proptest::collection::vec(-1e3f64..1e3, 2..64)) {
            let (y, s) = revin_normalize(&xs);
            let back = revin_denormalize(&y, s);
            for (a, b) in xs.iter().zip(&back) {
                prop_assert!((a - b).abs() < 1e-9);
            }
            let raw_std = {
                let m = xs.iter().sum::<f64>() / xs.len() as f64;
                (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
            };
            if raw_std > 1e-3 {
                let n = y.len() as f64;
                let m = y.iter().sum::<f64>() / n;
                let sd = (y.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
                prop_assert!(m.abs() < 1e-9);
                prop_assert!((sd - 1.0).abs() < 1e-6);
            }
        }
    }
}
