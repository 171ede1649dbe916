use std::collections::BTreeMap;

use super::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Outcome of comparing reverse-mode gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub per_parameter_errors: BTreeMap<String, f64>,
    pub step_size: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error < tolerance
    }
}

/// Gradient norms below this are treated as exactly zero.
const NORM_FLOOR: f64 = 1e-10;

/// `‖a − n‖ / max(‖a‖, ‖n‖)` over a whole parameter tensor.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < NORM_FLOOR {
        return norm(&diff);
    }
    norm(&diff) / scale
}

/// Check d(loss)/d(param) for every id in `params` against central
/// differences `(f(θ+h) − f(θ−h)) / 2h`. `loss_fn` rebuilds the forward pass
/// on a fresh tape each call and must be deterministic in the parameters.
pub fn grad_check<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    step: f64,
    loss_fn: F,
) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&mut Tape<'a>) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {step}")));
    }
    let analytic = {
        let mut tape = Tape::with_params(store);
        let loss = loss_fn(&mut tape)?;
        tape.backward(loss)?;
        tape.param_grads()
    };
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::with_params(store);
        let loss = loss_fn(&mut tape)?;
        Ok(tape.value(loss).item())
    };

    let mut per_parameter_errors = BTreeMap::new();
    for &id in params {
        let n = store.value(id).numel();
        let mut numeric = vec![0.0; n];
        for (e, slot) in numeric.iter_mut().enumerate() {
            let orig = store.value(id).data()[e];
            store.value_mut(id).data_mut()[e] = orig + step;
            let plus = eval(store)?;
            store.value_mut(id).data_mut()[e] = orig - step;
            let minus = eval(store)?;
            store.value_mut(id).data_mut()[e] = orig;
            *slot = (plus - minus) / (2.0 * step);
        }
        let a = analytic[id]
            .as_ref()
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        per_parameter_errors.insert(store.get(id).name.clone(), relative_error(&a, &numeric));
    }
    let max_relative_error = per_parameter_errors.values().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_relative_error,
        per_parameter_errors,
        step_size: step,
    })
}
