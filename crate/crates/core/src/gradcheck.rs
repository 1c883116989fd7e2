//! Central finite-difference gradient checks.
//!
//! A central difference is only meaningful when both probes sit on the same
//! smooth piece as the base point. Each coordinate's step is divided by ten
//! until the ReLU signs and max-pool winners at `x - eps` and `x + eps` match
//! those at `x`, for at most [`MAX_SHRINKS`] tries.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, OpKind};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Relative deviation `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_deviation(analytic: f64, numeric: f64) -> f64 {
    let d = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8);
    if d.is_nan() {
        f64::INFINITY
    } else {
        d
    }
}

/// Fixed projection weights used to reduce a non-scalar output to a scalar.
fn projection(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 1.0 + 0.5 * (1.7 * i as f64 + 0.3).sin())
        .collect()
}

fn scalarize(g: &mut Graph<'_, f64>, out: NodeId) -> Result<NodeId> {
    if g.shape(out) == [1] {
        return Ok(out);
    }
    let shape = g.shape(out).to_vec();
    let w = g.input_raw(&shape, projection(g.value(out).len()))?;
    let prod = g.record(OpKind::Mul, &[out, w])?;
    g.record(OpKind::Sum, &[prod])
}

/// Step reductions tried before a coordinate is declared to sit on a kink.
pub const MAX_SHRINKS: usize = 3;

fn eval_scalar<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<(f64, Vec<bool>)>
where
    F: Fn(&mut Graph<'static, f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.input(t)).collect();
    let out = f(&mut g, &ids)?;
    let s = scalarize(&mut g, out)?;
    Ok((g.value(s)[0], g.branch_pattern()))
}

/// Central difference of `eval` around `x` with the first step in
/// `eps, eps/10, ...` whose probes stay on the base point's piece.
fn smooth_difference(
    mut eval: impl FnMut(f64) -> Result<(f64, Vec<bool>)>,
    x: f64,
    eps: f64,
) -> Result<f64> {
    let (_, base) = eval(x)?;
    let mut h = eps;
    for _ in 0..=MAX_SHRINKS {
        let (plus, p) = eval(x + h)?;
        let (minus, m) = eval(x - h)?;
        if p == base && m == base {
            return Ok((plus - minus) / (2.0 * h));
        }
        h /= 10.0;
    }
    Err(Error::RejectedInput(format!(
        "no smooth finite-difference stencil around {x} down to step {}",
        h * 10.0
    )))
}

/// Checks the gradient of `f` with respect to every element of every input.
/// Non-scalar outputs are reduced with a fixed weighted sum. Returns the
/// maximum relative deviation between analytic and numeric gradients;
/// non-finite evaluations count as `+inf`.
pub fn grad_check_inputs<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<'static, f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.input(t)).collect();
    let out = f(&mut g, &ids)?;
    let s = scalarize(&mut g, out)?;
    if !g.value(s)[0].is_finite() {
        return Ok(f64::INFINITY);
    }
    g.backward(s)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| {
            g.grad(id)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (which, grads) in analytic.iter().enumerate() {
        for (i, &a) in grads.iter().enumerate() {
            let orig = probe[which].values()[i];
            let numeric = smooth_difference(
                |v| {
                    probe[which].values_mut()[i] = v;
                    eval_scalar(&f, &probe)
                },
                orig,
                eps,
            );
            probe[which].values_mut()[i] = orig;
            worst = worst.max(relative_deviation(a, numeric?));
        }
    }
    Ok(worst)
}

/// Single-input form of [`grad_check_inputs`].
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<'static, f64>, NodeId) -> Result<NodeId>,
{
    grad_check_inputs(|g, ids| f(g, ids[0]), std::slice::from_ref(x), eps)
}

/// Checks parameter gradients of a scalar loss at selected coordinates
/// `(parameter, flat index)`.
pub fn grad_check_params<F>(
    store: &ParamStore<f64>,
    loss: F,
    coords: &[(ParamId, usize)],
    eps: f64,
) -> Result<f64>
where
    F: for<'p> Fn(&mut Graph<'p, f64>) -> Result<NodeId>,
{
    let grads = {
        let mut g = Graph::with_params(store);
        let l = loss(&mut g)?;
        if !g.value(l)[0].is_finite() {
            return Ok(f64::INFINITY);
        }
        g.backward(l)?;
        g.into_param_grads()
    };
    let mut probe = store.clone();
    let eval = |s: &ParamStore<f64>| -> Result<(f64, Vec<bool>)> {
        let mut g = Graph::with_params(s);
        let l = loss(&mut g)?;
        Ok((g.value(l)[0], g.branch_pattern()))
    };
    let mut worst: f64 = 0.0;
    for &(pid, idx) in coords {
        let analytic = grads.get(pid).map_or(0.0, |g| g[idx]);
        let orig = probe.get(pid).values()[idx];
        let numeric = smooth_difference(
            |v| {
                probe.get_mut(pid).values_mut()[idx] = v;
                eval(&probe)
            },
            orig,
            eps,
        );
        probe.get_mut(pid).values_mut()[idx] = orig;
        worst = worst.max(relative_deviation(analytic, numeric?));
    }
    Ok(worst)
}
