use crate::error::{Error, Result};
use crate::model::Fppformer;
use crate::parallel::{map_range_init, Execution};
use crate::tensor::relative_error;

/// Worst relative error within one named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupCheck {
    pub name: String,
    pub len: usize,
    pub worst: f64,
    /// Index of the worst element inside the tensor.
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub groups: Vec<GroupCheck>,
}

impl GradCheckReport {
    pub fn worst(&self) -> &GroupCheck {
        self.groups
            .iter()
            .max_by(|a, b| a.worst.total_cmp(&b.worst))
            .expect("report has at least one group")
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.worst().worst < tolerance
    }
}

/// Central differences of the evaluation-mode loss with respect to every
/// parameter, compared against `analytic`.
pub fn compare_gradients(
    model: &Fppformer,
    x: &[f64],
    target: &[f64],
    analytic: &[f64],
    h: f64,
    exec: Execution,
) -> Result<GradCheckReport> {
    let base = model.params().data();
    if analytic.len() != base.len() {
        return Err(Error::shape(format!("{} gradients for {} parameters", analytic.len(), base.len())));
    }
    let numeric = map_range_init(
        exec,
        base.len(),
        || base.to_vec(),
        |p, i| -> Result<f64> {
            let orig = p[i];
            p[i] = orig + h;
            let up = model.loss_at(p, x, target)?;
            p[i] = orig - h;
            let down = model.loss_at(p, x, target)?;
            p[i] = orig;
            Ok((up - down) / (2.0 * h))
        },
    );
    let numeric: Vec<f64> = numeric.into_iter().collect::<Result<_>>()?;
    let groups = model
        .params()
        .specs()
        .iter()
        .map(|spec| {
            let mut g = GroupCheck {
                name: spec.name.clone(),
                len: spec.len(),
                worst: -1.0,
                index: 0,
                analytic: 0.0,
                numeric: 0.0,
            };
            for (k, i) in spec.range().enumerate() {
                let e = relative_error(analytic[i], numeric[i]);
                if e > g.worst {
                    g = GroupCheck { worst: e, index: k, analytic: analytic[i], numeric: numeric[i], ..g };
                }
            }
            g
        })
        .collect();
    Ok(GradCheckReport { groups })
}

/// Full check: autodiff gradient of the forecast loss against central differences.
pub fn gradient_check(model: &Fppformer, x: &[f64], target: &[f64], h: f64, exec: Execution) -> Result<GradCheckReport> {
    let (_, analytic) = model.loss_and_grad(model.params().data(), x, target, None)?;
    compare_gradients(model, x, target, &analytic, h, exec)
}
