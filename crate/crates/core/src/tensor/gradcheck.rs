use super::{BoundParams, Graph, ModelParams, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub coords_checked: usize,
}

/// Compares reverse-mode gradients of the scalar program `f` against central
/// differences `(f(θ+ε) - f(θ-ε)) / 2ε`.
///
/// At most `max_per_tensor` evenly spaced coordinates of each parameter are
/// perturbed. The error of one coordinate is
/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(params: &ModelParams, f: F, eps: f64, max_per_tensor: usize) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &BoundParams) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound = params.bind(&mut g, true);
    let loss = f(&mut g, &bound)?;
    if !g.value(loss).item().is_finite() {
        return Err(Error::Runtime("grad_check: loss is not finite".into()));
    }
    let grads = g.backward(loss)?;

    let eval = |p: &ModelParams| -> Result<f64> {
        let mut h = Graph::new();
        let b = p.bind(&mut h, false);
        let l = f(&mut h, &b)?;
        let v = h.value(l).item();
        if !v.is_finite() {
            return Err(Error::Runtime("grad_check: perturbed loss is not finite".into()));
        }
        Ok(v)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        coords_checked: 0,
    };
    let mut work = params.clone();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in &names {
        let var = bound.get(name)?;
        let n = params.get(name).expect("bound from params").len();
        let count = n.min(max_per_tensor.max(1));
        for c in 0..count {
            let idx = c * n / count;
            let analytic = grads.get(var).map_or(0.0, |t| t.data()[idx]);
            let orig = params.get(name).unwrap().data()[idx];
            work.get_mut(name).unwrap().data_mut()[idx] = orig + eps;
            let plus = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[idx] = orig - eps;
            let minus = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = (analytic - numeric).abs() / numeric.abs().max(1.0);
            report.coords_checked += 1;
            if err > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = err;
                report.worst_param = name.clone();
                report.worst_index = idx;
            }
        }
    }
    Ok(report)
}
