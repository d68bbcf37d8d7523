//! Central finite-difference oracle for reverse-mode gradients.

use rand::seq::index::sample;
use rand::Rng;

use super::params::{ParamId, ParamRegistry};
use super::KernelError;

#[derive(Clone, Debug, PartialEq)]
pub struct CoordCheck {
    pub param: String,
    pub offset: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub checked: Vec<CoordCheck>,
    /// Coordinates dropped by the kink-skip rule.
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.checked.iter().map(|c| c.rel_error).fold(0.0, f64::max)
    }

    /// Fraction of checked coordinates whose relative error is below `tol`.
    pub fn pass_fraction(&self, tol: f64) -> f64 {
        if self.checked.is_empty() {
            return 1.0;
        }
        let ok = self.checked.iter().filter(|c| c.rel_error < tol).count();
        ok as f64 / self.checked.len() as f64
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

/// A scalar objective evaluated at the current registry values.
///
/// `eval` returns the loss together with the signed kink offsets of every
/// ReLU/clamp input seen during the evaluation (see [`Graph::kink_offsets`]).
///
/// [`Graph::kink_offsets`]: super::Graph::kink_offsets
pub trait Objective {
    fn eval(&mut self, reg: &ParamRegistry) -> Result<Evaluation, KernelError>;
    /// Accumulates analytic gradients into `reg` and returns the loss.
    fn grad(&mut self, reg: &mut ParamRegistry) -> Result<f64, KernelError>;
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub loss: f64,
    pub kinks: Vec<f64>,
}

/// Compares analytic gradients against central differences on `samples`
/// coordinates drawn uniformly without replacement from all parameters.
///
/// A coordinate is skipped, and another one drawn in its place, when some
/// ReLU/clamp input lies on different sides of its kink at `+step` and
/// `-step`: the stencil straddles a non-differentiable point there.
pub fn grad_check(
    objective: &mut impl Objective,
    reg: &mut ParamRegistry,
    samples: usize,
    step: f64,
    rng: &mut impl Rng,
) -> Result<GradCheckReport, KernelError> {
    reg.zero_grad();
    objective.grad(reg)?;
    let total = reg.numel();
    let mut flat: Vec<(ParamId, usize)> = Vec::with_capacity(total);
    for id in reg.ids() {
        for off in 0..reg.value(id).len() {
            flat.push((id, off));
        }
    }
    let order = sample(rng, total, total);
    let mut report = GradCheckReport::default();
    for p in order.iter() {
        if report.checked.len() == samples {
            break;
        }
        let (id, off) = flat[p];
        let orig = reg.value(id).data()[off];
        reg.value_mut(id).data_mut()[off] = orig + step;
        let plus = objective.eval(reg)?;
        reg.value_mut(id).data_mut()[off] = orig - step;
        let minus = objective.eval(reg)?;
        reg.value_mut(id).data_mut()[off] = orig;
        let crossed = plus.kinks.len() != minus.kinks.len()
            || plus.kinks.iter().zip(&minus.kinks).any(|(a, b)| (*a > 0.0) != (*b > 0.0));
        if crossed {
            report.skipped += 1;
            continue;
        }
        let numeric = (plus.loss - minus.loss) / (2.0 * step);
        let analytic = reg.grad(id).data()[off];
        report.checked.push(CoordCheck {
            param: reg.name(id).to_string(),
            offset: off,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
        });
    }
    Ok(report)
}
