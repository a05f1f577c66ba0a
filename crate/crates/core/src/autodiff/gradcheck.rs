use super::graph::{Graph, NodeId};
use super::matrix::Matrix;
use crate::error::{Error, Result};

/// `|a − n| / max(1e-12, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-12)
}

pub fn max_relative_error(analytic: &Matrix, numeric: &Matrix) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// Central-difference gradient of a scalar function of one matrix.
pub fn numeric_gradient(
    mut f: impl FnMut(&Matrix) -> Result<f64>,
    theta: &Matrix,
    eps: f64,
) -> Result<Matrix> {
    let mut probe = theta.clone();
    let mut out = Matrix::zeros(theta.rows(), theta.cols());
    for k in 0..theta.len() {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[k] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[k] = orig;
        out.data_mut()[k] = (plus - minus) / (2.0 * eps);
    }
    Ok(out)
}

fn central(
    f: &mut impl FnMut(&Matrix) -> Result<f64>,
    probe: &mut Matrix,
    k: usize,
    h: f64,
) -> Result<f64> {
    let orig = probe.data()[k];
    probe.data_mut()[k] = orig + h;
    let plus = f(probe)?;
    probe.data_mut()[k] = orig - h;
    let minus = f(probe)?;
    probe.data_mut()[k] = orig;
    Ok((plus - minus) / (2.0 * h))
}

/// Central differences with Richardson extrapolation and step refinement.
///
/// Per entry, `R(h) = (4·D(h/2) − D(h)) / 3` cancels the `O(h²)` term of the
/// central difference `D`, so a large `h` keeps roundoff low. `R(h)` is
/// accepted when it agrees with `R(h/2)`; otherwise the stencil straddles a
/// kink (max, ReLU) and `h` shrinks by 8, at most `levels` times.
pub fn extrapolated_gradient(
    mut f: impl FnMut(&Matrix) -> Result<f64>,
    theta: &Matrix,
    eps: f64,
    levels: usize,
) -> Result<Matrix> {
    let mut probe = theta.clone();
    let mut out = Matrix::zeros(theta.rows(), theta.cols());
    for k in 0..theta.len() {
        let mut h = eps;
        let mut estimate = 0.0;
        for _ in 0..levels.max(1) {
            let d1 = central(&mut f, &mut probe, k, h)?;
            let d2 = central(&mut f, &mut probe, k, h / 2.0)?;
            let d3 = central(&mut f, &mut probe, k, h / 4.0)?;
            let r1 = (4.0 * d2 - d1) / 3.0;
            let r2 = (4.0 * d3 - d2) / 3.0;
            estimate = r1;
            if (r1 - r2).abs() <= 1e-10 || relative_error(r1, r2) <= 1e-5 {
                break;
            }
            h /= 8.0;
        }
        out.data_mut()[k] = estimate;
    }
    Ok(out)
}

/// Compares the tape gradient of `f` at `theta` with central differences and
/// returns the maximum relative error over all entries.
///
/// `f` receives a fresh graph and the leaf holding `theta`, and must return a
/// `1×1` node.
pub fn grad_check<F>(f: F, theta: &Matrix, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<'_>, NodeId) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let x = g.leaf(theta.clone());
    let out = f(&mut g, x)?;
    if g.shape(out) != (1, 1) {
        return Err(Error::NonScalar(g.shape(out)));
    }
    g.backward(out)?;
    let analytic = g.grad_or_zeros(x);
    let numeric = numeric_gradient(
        |t| {
            let mut g = Graph::new();
            let x = g.leaf(t.clone());
            let out = f(&mut g, x)?;
            Ok(g.value(out).to_scalar())
        },
        theta,
        eps,
    )?;
    Ok(max_relative_error(&analytic, &numeric))
}
