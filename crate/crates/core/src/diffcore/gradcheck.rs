//! Finite-difference verification of reverse-mode gradients.

use super::{Graph, Tensor, Var};
use crate::error::{bail_input, Result};

pub const DEFAULT_STEP: f64 = 1e-4;

/// Gradients smaller than this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// `(input, coordinate, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Max relative error between the reverse-mode gradient of scalar `f` at `x`
/// and central differences with step `h`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let report = grad_check_inputs(|g, vars| f(g, vars[0]), std::slice::from_ref(x), h, None)?;
    Ok(report.max_rel_err)
}

/// Multi-input variant. `coords` restricts the check to `(input, index)`
/// pairs; `None` checks every coordinate of every input.
pub fn grad_check_inputs<F>(f: F, inputs: &[Tensor<f64>], h: f64, coords: Option<&[(usize, usize)]>) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if h <= 0.0 {
        bail_input!("finite-difference step must be positive");
    }
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let all: Vec<(usize, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = inputs
                .iter()
                .enumerate()
                .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
                .collect();
            &all
        }
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        worst: None,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for &(i, j) in coords {
        if i >= inputs.len() || j >= inputs[i].len() {
            bail_input!("gradient check coordinate ({i}, {j}) out of range");
        }
        let analytic = grads.get(vars[i]).map_or(0.0, |t| t.data()[j]);
        let x0 = inputs[i].data()[j];
        work[i].data_mut()[j] = x0 + h;
        let fp = eval(&work)?;
        work[i].data_mut()[j] = x0 - h;
        let fm = eval(&work)?;
        work[i].data_mut()[j] = x0;
        let numeric = (fp - fm) / (2.0 * h);
        let err = relative_error(analytic, numeric);
        report.checked += 1;
        if err > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(err);
            report.worst = Some((i, j, analytic, numeric));
        }
    }
    Ok(report)
}
