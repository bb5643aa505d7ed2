//! Differentiable functions and the generic evaluate / gradient entry points.

use std::fmt::Debug;

use super::graph::{Graph, Var};
use super::mat::Mat;
use super::params::{ParamMap, ParamSpec};
use crate::error::{Error, Result};

/// A batched map `n×input_dim → n×output_dim` built from graph primitives.
///
/// Rows must not interact: row `i` of the output depends only on row `i` of
/// the input. Every shipped implementation honours this, and batch-level
/// gradients rely on it.
pub trait DiffFn: Debug + Send + Sync {
    fn signature(&self) -> Vec<ParamSpec>;
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;

    /// Records the forward computation. `params` follow `signature()` order.
    fn forward(&self, g: &Graph, params: &[Var], input: Var) -> Var;

    /// For scalar functions: a graph expression for `∇ₓ f`, `n×input_dim`,
    /// itself differentiable in the parameters. Needed by gradient penalties.
    fn input_gradient(&self, _g: &Graph, _params: &[Var], _input: Var) -> Option<Var> {
        None
    }
}

/// Loads `params` onto `g`, either as tracked leaves or as constants.
pub fn load_params(g: &Graph, params: &ParamMap, tracked: bool) -> Vec<Var> {
    params
        .entries()
        .iter()
        .map(|e| if tracked { g.param(e.as_mat()) } else { g.constant(e.as_mat()) })
        .collect()
}

fn check_call(f: &dyn DiffFn, params: &ParamMap, input: &Mat) -> Result<()> {
    params.check_signature(&f.signature())?;
    if input.cols() != f.input_dim() {
        return Err(Error::Signature(format!(
            "input has {} columns, function expects {}",
            input.cols(),
            f.input_dim()
        )));
    }
    Ok(())
}

/// Evaluates `f` on one input point.
pub fn evaluate(f: &dyn DiffFn, params: &ParamMap, input: &[f64]) -> Result<Vec<f64>> {
    Ok(evaluate_batch(f, params, &Mat::row_vector(input.to_vec()))?.into_vec())
}

/// Evaluates `f` on every row of `input`.
pub fn evaluate_batch(f: &dyn DiffFn, params: &ParamMap, input: &Mat) -> Result<Mat> {
    check_call(f, params, input)?;
    let g = Graph::new();
    let p = load_params(&g, params, false);
    let x = g.constant(input.clone());
    Ok(g.value(f.forward(&g, &p, x)))
}

#[derive(Clone, Debug)]
pub struct Gradient {
    pub value: f64,
    pub params: ParamMap,
    pub input: Vec<f64>,
}

/// Gradients of a scalar-output function at one point.
pub fn gradient(f: &dyn DiffFn, params: &ParamMap, input: &[f64]) -> Result<Gradient> {
    let b = gradient_batch(f, params, &Mat::row_vector(input.to_vec()), true)?;
    Ok(Gradient {
        value: b.values[0],
        params: b.params.expect("requested parameter gradients"),
        input: b.input.into_vec(),
    })
}

#[derive(Clone, Debug)]
pub struct BatchGradient {
    /// `f` at each row.
    pub values: Vec<f64>,
    /// `∇θ Σᵢ f(xᵢ)`, when requested.
    pub params: Option<ParamMap>,
    /// Row `i` holds `∇ₓ f(xᵢ)`.
    pub input: Mat,
}

/// Batched gradients of a scalar-output function.
pub fn gradient_batch(f: &dyn DiffFn, params: &ParamMap, input: &Mat, want_params: bool) -> Result<BatchGradient> {
    check_call(f, params, input)?;
    if f.output_dim() != 1 {
        return Err(Error::Contract(format!("gradient needs a scalar output, function has {}", f.output_dim())));
    }
    let g = Graph::new();
    let p = load_params(&g, params, want_params);
    let x = g.param(input.clone());
    let out = f.forward(&g, &p, x);
    let values = g.value(out).into_vec();
    let grads = g.backward(out);
    let params_grad = want_params.then(|| {
        let mut pm = params.clone();
        for (e, v) in pm.entries_mut().iter_mut().zip(&p) {
            e.values = grads.wrt(*v).into_vec();
        }
        pm
    });
    Ok(BatchGradient { values, params: params_grad, input: grads.wrt(x) })
}

/// Jacobian blocks `∂f(xᵢ)/∂xᵢ[cols]`, one `output_dim × cols.len()` matrix
/// per row of `input`, by one reverse sweep per output coordinate.
pub fn jacobians(
    f: &dyn DiffFn,
    params: &ParamMap,
    input: &Mat,
    cols: std::ops::Range<usize>,
) -> Result<(Mat, Vec<Mat>)> {
    check_call(f, params, input)?;
    let g = Graph::new();
    let p = load_params(&g, params, false);
    let x = g.param(input.clone());
    let out = f.forward(&g, &p, x);
    let y = g.value(out);
    let (n, m) = y.shape();
    let mut jac = vec![Mat::zeros(m, cols.len()); n];
    for j in 0..m {
        let mut seed = Mat::zeros(n, m);
        for i in 0..n {
            seed[(i, j)] = 1.0;
        }
        let dx = g.backward_seeded(out, seed).wrt(x);
        for (i, ji) in jac.iter_mut().enumerate() {
            for (c, col) in cols.clone().enumerate() {
                ji[(j, c)] = dx[(i, col)];
            }
        }
    }
    Ok((y, jac))
}

/// Largest relative discrepancy between reverse-mode gradients and central
/// differences, over every parameter and input coordinate.
///
/// The discrepancy at a coordinate is `|ad − fd| / (|fd| + √eps)`; the
/// `√eps` floor keeps coordinates whose true derivative is zero from being
/// judged on rounding noise alone.
pub fn check_gradient(f: &dyn DiffFn, params: &ParamMap, input: &[f64], eps: f64) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {eps}")));
    }
    let ad = gradient(f, params, input)?;
    if !ad.value.is_finite() {
        return Err(Error::Numeric("non-finite function value at the base point".into()));
    }
    let floor = eps.sqrt();
    let eval = |p: &ParamMap, x: &[f64]| -> Result<f64> { Ok(evaluate(f, p, x)?[0]) };
    let mut worst: f64 = 0.0;

    let mut probe = params.clone();
    for (ei, entry) in params.entries().iter().enumerate() {
        for k in 0..entry.values.len() {
            let orig = entry.values[k];
            probe.entries_mut()[ei].values[k] = orig + eps;
            let up = eval(&probe, input)?;
            probe.entries_mut()[ei].values[k] = orig - eps;
            let down = eval(&probe, input)?;
            probe.entries_mut()[ei].values[k] = orig;
            let fd = (up - down) / (2.0 * eps);
            let a = ad.params.entries()[ei].values[k];
            if !fd.is_finite() || !a.is_finite() {
                return Err(Error::Numeric(format!("non-finite derivative for parameter `{}`[{k}]", entry.name)));
            }
            worst = worst.max((a - fd).abs() / (fd.abs() + floor));
        }
    }

    let mut x = input.to_vec();
    for k in 0..x.len() {
        let orig = x[k];
        x[k] = orig + eps;
        let up = eval(params, &x)?;
        x[k] = orig - eps;
        let down = eval(params, &x)?;
        x[k] = orig;
        let fd = (up - down) / (2.0 * eps);
        let a = ad.input[k];
        if !fd.is_finite() || !a.is_finite() {
            return Err(Error::Numeric(format!("non-finite derivative for input coordinate {k}")));
        }
        worst = worst.max((a - fd).abs() / (fd.abs() + floor));
    }
    Ok(worst)
}
