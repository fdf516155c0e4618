//! Central finite-difference oracle for reverse-mode gradients.
//!
//! Checks run at 64-bit precision: the analytic gradient of a scalar-valued
//! function of a [`ParamSet`] is compared element-by-element against
//! (f(p+eps) - f(p-eps)) / 2eps. The oracle only ever calls the function
//! forward, so it stays independent of the backward implementation it checks.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::nn::{ParamBinder, ParamId, ParamSet};
use crate::tape::{Tape, Var};
use crate::Result;

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// (parameter name, max relative error over its elements)
    pub per_param: Vec<(String, f64)>,
    pub max_rel_err: f64,
    /// Non-finite values encountered, with their location.
    pub failures: Vec<String>,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.failures.is_empty() && self.max_rel_err <= tol
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    let denom = a.abs().max(n.abs()).max(1e-6);
    (a - n).abs() / denom
}

/// Compare reverse-mode gradients of `f` against central differences.
///
/// `f` must be deterministic and scalar-valued; it sees the parameter set it
/// is handed, so the oracle can evaluate it at perturbed points.
pub fn grad_check<Ff>(
    f: &mut Ff,
    params: &mut ParamSet<f64>,
    eps: f64,
) -> Result<GradCheckReport>
where
    Ff: FnMut(&ParamSet<f64>, &mut ParamBinder<'_, f64>, &mut Tape<f64>) -> Result<Var>,
{
    // Analytic pass.
    let mut tape = Tape::new();
    let mut binder = ParamBinder::new(params);
    let loss = f(params, &mut binder, &mut tape)?;
    let base = tape.data(loss)[0];
    let analytic = binder.backward(&mut tape, loss)?;
    drop(tape);

    let mut report =
        GradCheckReport { per_param: Vec::new(), max_rel_err: 0.0, failures: Vec::new() };
    if !base.is_finite() {
        report.failures.push(format!("loss is non-finite at the base point: {base}"));
        return Ok(report);
    }

    let eval = |params: &ParamSet<f64>, f: &mut Ff| -> Result<f64> {
        let mut tape = Tape::new();
        let mut binder = ParamBinder::new(params);
        let loss = f(params, &mut binder, &mut tape)?;
        Ok(tape.data(loss)[0])
    };

    for i in 0..params.len() {
        let id = ParamId(i);
        let name = String::from(params.name(id));
        let numel = params.get(id).numel();
        let mut worst = 0.0f64;
        for k in 0..numel {
            let orig = params.get(id).data()[k];
            params.get_mut(id).data_mut()[k] = orig + eps;
            let up = eval(params, f)?;
            params.get_mut(id).data_mut()[k] = orig - eps;
            let down = eval(params, f)?;
            params.get_mut(id).data_mut()[k] = orig;

            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.get(id).map_or(0.0, |g| g.data()[k]);
            if !numeric.is_finite() || !a.is_finite() {
                report.failures.push(format!(
                    "non-finite gradient at {name}[{k}]: analytic {a}, numeric {numeric}"
                ));
                continue;
            }
            worst = worst.max(rel_err(a, numeric));
        }
        report.max_rel_err = report.max_rel_err.max(worst);
        report.per_param.push((name, worst));
    }
    Ok(report)
}
