//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// `|g_a − g_n| / max(|g_a|, |g_n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Flat index (over all checked scalars) of the worst component.
    pub worst_index: usize,
    pub checked: usize,
}

fn scalar(g: &Graph<'_>, v: Var, context: &str) -> Result<f64> {
    let t = g.value(v);
    if t.len() != 1 {
        return Err(Error::Contract(format!(
            "{context}: objective is not a scalar"
        )));
    }
    let x = t.item();
    if !x.is_finite() {
        return Err(Error::NonFinite {
            context: context.to_owned(),
            index: 0,
        });
    }
    Ok(x)
}

/// Compares the gradient of a scalar function of one input tensor against
/// central differences with step `eps`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>, Var) -> Result<Var>,
{
    if let Some(i) = x.first_non_finite() {
        return Err(Error::NonFinite {
            context: "grad_check input".into(),
            index: i,
        });
    }
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let y = f(&mut g, xv)?;
    scalar(&g, y, "objective")?;
    let grads = g.backward(y)?;
    let analytic = grads
        .get(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.len()]);

    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.input(t);
        let y = f(&mut g, v)?;
        scalar(&g, y, "perturbed objective")
    };
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_index: 0,
        checked: x.len(),
    };
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric =
            (eval(plus).map_err(|e| at(e, i))? - eval(minus).map_err(|e| at(e, i))?) / (2.0 * eps);
        let err = relative_error(analytic[i], numeric);
        if err > report.max_relative_error {
            report.max_relative_error = err;
            report.worst_index = i;
        }
    }
    Ok(report)
}

/// Same check over every scalar of every parameter in `store`.
pub fn grad_check_params<F>(store: &ParamStore, f: F, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let mut g = Graph::grad(store);
    let y = f(&mut g)?;
    scalar(&g, y, "objective")?;
    let grads = g.backward(y)?.params(&g);

    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_index: 0,
        checked: 0,
    };
    let mut flat = 0;
    for p in 0..store.len() {
        let n = store.by_index(p).1.len();
        for i in 0..n {
            let orig = work.by_index(p).1.data()[i];
            work.by_index_mut(p).data_mut()[i] = orig + eps;
            let fp = {
                let mut g = Graph::grad(&work);
                let y = f(&mut g).map_err(|e| at(e, flat))?;
                scalar(&g, y, "perturbed objective").map_err(|e| at(e, flat))?
            };
            work.by_index_mut(p).data_mut()[i] = orig - eps;
            let fm = {
                let mut g = Graph::grad(&work);
                let y = f(&mut g).map_err(|e| at(e, flat))?;
                scalar(&g, y, "perturbed objective").map_err(|e| at(e, flat))?
            };
            work.by_index_mut(p).data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let analytic = grads.0[p].as_ref().map_or(0.0, |g| g[i]);
            let err = relative_error(analytic, numeric);
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst_index = flat;
            }
            flat += 1;
            report.checked += 1;
        }
    }
    Ok(report)
}

fn at(e: Error, index: usize) -> Error {
    match e {
        Error::NonFinite { context, .. } => Error::NonFinite { context, index },
        other => other,
    }
}
