use std::fmt;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is ~0 are compared on an absolute scale instead.
pub const REL_ERR_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct Coordinate {
    /// Which input tensor (index into the inputs slice).
    pub input: usize,
    /// Flat index within that input.
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub h: f64,
    pub tol: f64,
    pub coordinates: Vec<Coordinate>,
    pub max_rel_err: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn failures(&self) -> impl Iterator<Item = &Coordinate> {
        self.coordinates.iter().filter(move |c| c.rel_err >= self.tol)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "grad_check h={:e} tol={:e} coords={} max_rel_err={:e} {}",
            self.h,
            self.tol,
            self.coordinates.len(),
            self.max_rel_err,
            if self.passed { "PASS" } else { "FAIL" }
        )?;
        for c in self.failures() {
            writeln!(
                f,
                "  input {} [{}]: analytic={:.12e} numeric={:.12e} rel_err={:e}",
                c.input, c.index, c.analytic, c.numeric, c.rel_err
            )?;
        }
        Ok(())
    }
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if !v.is_scalar() {
        return Err(Error::Contract(format!("grad_check function must be scalar, got {:?}", v.shape())));
    }
    Ok(v.data()[0])
}

/// Compares backward-pass gradients of a scalar function against central
/// finite differences, coordinate by coordinate.
pub fn grad_check<F>(f: F, x0: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_multi(|g: &mut Graph, v: &[Var]| f(g, v[0]), std::slice::from_ref(x0), h, tol)
}

/// [`grad_check`] over several inputs at once.
pub fn grad_check_multi<F>(f: F, inputs: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    grad_check_with(f, inputs, h, tol, |_| {})
}

/// [`grad_check_multi`] with a hook that configures the graph used for the
/// analytic pass (finite differences always run on a fresh graph).
pub fn grad_check_with<F, S>(f: F, inputs: &[Tensor], h: f64, tol: f64, setup: S) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    S: Fn(&mut Graph),
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::Domain(format!("step h={h} outside [1e-7, 1e-3]")));
    }
    let mut g = Graph::new();
    setup(&mut g);
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let f0 = g.value(out).data()[0];
    if !f0.is_finite() {
        return Err(Error::Evaluation(format!("f(x0) = {f0} is not finite")));
    }
    g.backward(out)?;

    let mut coordinates = Vec::new();
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (input, var) in vars.iter().enumerate() {
        let analytic = g.grad_tensor(*var);
        for index in 0..inputs[input].len() {
            let orig = inputs[input].data()[index];
            probe[input].data_mut()[index] = orig + h;
            let plus = eval(&f, &probe)?;
            probe[input].data_mut()[index] = orig - h;
            let minus = eval(&f, &probe)?;
            probe[input].data_mut()[index] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Evaluation(format!("non-finite value probing input {input}[{index}]")));
            }
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[index];
            let rel_err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
            coordinates.push(Coordinate { input, index, analytic: a, numeric, rel_err });
        }
    }
    let max_rel_err = coordinates.iter().map(|c| c.rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport { h, tol, coordinates, max_rel_err, passed: max_rel_err < tol })
}
