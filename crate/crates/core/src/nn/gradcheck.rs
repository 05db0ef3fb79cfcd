//! Central finite-difference checks of tape gradients.
//!
//! The numerical side only evaluates the forward pass, so it stays
//! independent of the backward code it checks.

use crate::error::{Error, Result};
use crate::nn::graph::Graph;
use crate::nn::params::ParamStore;
use crate::nn::tape::Var;

/// Step used for central differences at 64-bit precision, near the cube
/// root of machine epsilon where truncation and rounding errors balance.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for the relative error, so gradients near zero are
/// compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// `name[flat_index]` of the worst element.
    pub worst: String,
    pub checked: usize,
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the tape gradient of the scalar built by `loss` against central
/// differences for every element of every tensor in `store`.
pub fn check_gradients<F>(store: &ParamStore, loss: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::with_all_gradients(store);
        let l = loss(&mut g)?;
        let grads = g.backward(l)?;
        g.param_grads(&grads)
    };
    let eval = |ps: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(ps);
        let l = loss(&mut g)?;
        Ok(g.value(l).data()[0])
    };
    let mut work = store.clone();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
    };
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in names {
        let n = store.tensor(&name)?.numel();
        for i in 0..n {
            let orig = store.tensor(&name)?.data()[i];
            work.tensor_mut(&name)?.data_mut()[i] = orig + FD_STEP;
            let up = eval(&work)?;
            work.tensor_mut(&name)?.data_mut()[i] = orig - FD_STEP;
            let down = eval(&work)?;
            work.tensor_mut(&name)?.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic.get(&name).map_or(0.0, |t| t.data()[i]);
            if !a.is_finite() || !numeric.is_finite() {
                return Err(Error::Training(format!("non-finite gradient at {name}[{i}]")));
            }
            let e = rel_error(a, numeric);
            if e > report.max_rel_error || report.worst.is_empty() {
                report.max_rel_error = e.max(report.max_rel_error);
                report.worst = format!("{name}[{i}]");
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
