use std::collections::BTreeMap;

use super::tape::{Tape, Var};
use super::tensor::{ParamStore, Tensor};
use crate::error::Result;

/// Denominator floor for the relative error of near-zero gradients.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares `analytic` gradients with central differences of `f`, coordinate by coordinate.
///
/// Parameters missing from `analytic` are taken to have zero gradient.
pub fn grad_check_with<F>(
    store: &mut ParamStore,
    analytic: &BTreeMap<String, Tensor>,
    eps: f64,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    for name in names {
        let len = store.get(&name).unwrap().len();
        for k in 0..len {
            let original = store.get(&name).unwrap().data()[k];
            store.get_mut(&name).unwrap().data_mut()[k] = original + eps;
            let plus = f(store)?;
            store.get_mut(&name).unwrap().data_mut()[k] = original - eps;
            let minus = f(store)?;
            store.get_mut(&name).unwrap().data_mut()[k] = original;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.get(&name).map_or(0.0, |g| g.data()[k]);
            let err = relative_error(a, numeric);
            report.coordinates += 1;
            if report.coordinates == 1 || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = name.clone();
                report.worst_index = k;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Gradient check of a scalar function built on a fresh tape per evaluation.
pub fn grad_check<F>(store: &mut ParamStore, eps: f64, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let grads = tape.backward(loss)?;
    let mut analytic: BTreeMap<String, Tensor> = BTreeMap::new();
    for (name, g) in grads.params() {
        analytic
            .entry(name.to_string())
            .and_modify(|t| t.add_assign(g))
            .or_insert_with(|| g.clone());
    }
    grad_check_with(store, &analytic, eps, |s| {
        let mut tape = Tape::new();
        let loss = f(&mut tape, s)?;
        Ok(tape.value(loss).item())
    })
}
