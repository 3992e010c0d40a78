//! Central-difference gradient checking.

use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};

use super::{Graph, Tensor, Var};

fn eval_scalar(g: &Graph, loss: Var) -> Result<f64> {
    let t = g.value(loss);
    if t.numel() != 1 {
        return Err(Error::Contract(format!("gradient check needs a scalar, got {:?}", t.shape())));
    }
    let v = t.data()[0];
    if !v.is_finite() {
        return Err(Error::Numeric(format!("function evaluated to {v}")));
    }
    Ok(v)
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Max over coordinates of `|analytic - numeric| / max(1, |numeric|)` for a
/// scalar function of one tensor.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xt = x.clone().tracked();
    let xv = g.leaf(&xt);
    let loss = f(&mut g, xv)?;
    eval_scalar(&g, loss)?;
    let grads = g.backward(loss)?;
    let analytic = grads.get(xv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval_at = |probe: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(probe.clone());
        let loss = f(&mut g, v)?;
        eval_scalar(&g, loss)
    };

    let mut worst = 0.0f64;
    let mut probe = x.detached();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval_at(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval_at(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        worst = worst.max(rel_error(analytic[i], numeric));
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

/// Gradient check of a scalar function over every coordinate of every
/// parameter in `params`.
pub fn grad_check_params<F>(f: F, params: &ParamStore, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &Bound) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let loss = f(&mut g, &bound)?;
    eval_scalar(&g, loss)?;
    let grads = g.backward(loss)?;

    let eval_with = |ps: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let b = ps.bind(&mut g);
        let loss = f(&mut g, &b)?;
        eval_scalar(&g, loss)
    };

    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    for name in names {
        let var = bound.get(&name)?;
        let analytic = grads.get(var).map(<[f64]>::to_vec).unwrap_or_default();
        let n = params.get(&name).map(Tensor::numel).unwrap_or(0);
        for i in 0..n {
            let orig = probe.get(&name).unwrap().data()[i];
            probe.get_mut(&name).unwrap().data_mut()[i] = orig + eps;
            let up = eval_with(&probe)?;
            probe.get_mut(&name).unwrap().data_mut()[i] = orig - eps;
            let down = eval_with(&probe)?;
            probe.get_mut(&name).unwrap().data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = rel_error(analytic.get(i).copied().unwrap_or(0.0), numeric);
            report.coordinates += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}
