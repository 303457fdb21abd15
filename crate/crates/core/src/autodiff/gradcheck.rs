use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const REL_FLOOR: f64 = 1e-6;

/// Outcome of comparing an analytic gradient against central differences.
#[derive(Clone, Debug)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub pass: bool,
}

/// Evaluates `f` at `x` in a fresh graph, returning the scalar value.
fn eval<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    let g = Graph::new();
    let xv = g.constant(x.clone());
    let y = f(&g, xv)?;
    Ok(y.item())
}

/// Analytic gradient of the scalar `f` at `x`.
pub fn analytic_gradient<F>(f: &F, x: &Tensor) -> Result<Tensor>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    let g = Graph::new();
    let xv = g.param(x.clone());
    let y = f(&g, xv)?;
    g.backward(y)?;
    Ok(xv.grad().unwrap_or_else(|| Tensor::zeros(x.shape())))
}

/// Compares `analytic` with central differences of `f` around `x`.
///
/// Relative error per entry is `|a - n| / max(|a|, |n|, REL_FLOOR)`; the floor keeps
/// entries below central-difference roundoff from dominating the report.
pub fn compare_gradients<F>(f: &F, x: &Tensor, analytic: &Tensor, step: f64, tol: f64) -> Result<GradReport>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    if step <= 0.0 {
        return Err(Error::InvalidArgument(format!("step must be positive, got {step}")));
    }
    let mut report = GradReport {
        max_rel_err: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        pass: true,
    };
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let fp = eval(f, &probe)?;
        probe.data_mut()[i] = orig - step;
        let fm = eval(f, &probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Numerical(format!("function not finite around entry {i}")));
        }
        let numeric = (fp - fm) / (2.0 * step);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        if i == 0 || rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_index = i;
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    report.pass = report.max_rel_err <= tol;
    Ok(report)
}

/// Checks the reverse-mode gradient of `f` at `x` against central differences.
pub fn finite_difference_check<F>(f: F, x: &Tensor, step: f64, tol: f64) -> Result<GradReport>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    let analytic = analytic_gradient(&f, x)?;
    compare_gradients(&f, x, &analytic, step, tol)
}
