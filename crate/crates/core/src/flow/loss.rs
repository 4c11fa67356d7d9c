//! Training objectives for the flow: flow matching and the explicit NLL.

use rand::Rng;
use rand_distr::StandardNormal;

use super::density::log_density_graph;
use super::field::VectorField;
use super::ode::OdeConfig;
use super::FlowConfig;
use crate::autodiff::{Array, DiffNode};
use crate::error::{Error, Result};

/// Per-row `‖f(z_t, t) − (x̄ − (1 − σ_min) z0)‖²` (`rows × 1`).
///
/// Each row draws `t ~ U[0, 1]` and then `z0 ~ N(0, I)`. Gradients reach the
/// field and, if `x_bar` is not detached, whatever produced `x_bar`.
pub fn flow_matching_rows<V: VectorField + ?Sized, R: Rng + ?Sized>(
    field: &V,
    x_bar: &DiffNode,
    sigma_min: f64,
    rng: &mut R,
) -> Result<DiffNode> {
    if !(0.0..1.0).contains(&sigma_min) {
        return Err(Error::invalid(format!("sigma_min = {sigma_min} outside [0, 1)")));
    }
    let (rows, d) = x_bar.value().dims2()?;
    if d != field.data_dim() {
        return Err(Error::invalid(format!(
            "targets have {d} columns, field expects {}",
            field.data_dim()
        )));
    }
    if let Some(i) = x_bar.value().first_non_finite() {
        return Err(Error::invalid(format!("non-finite target at element {i}")));
    }
    let a = 1.0 - sigma_min;
    let mut t = Vec::with_capacity(rows);
    let mut z0 = Vec::with_capacity(rows * d);
    let mut c0 = Vec::with_capacity(rows * d);
    let mut c1 = Vec::with_capacity(rows * d);
    for _ in 0..rows {
        let ti: f64 = rng.random();
        t.push(ti);
        for _ in 0..d {
            z0.push(rng.sample::<f64, _>(StandardNormal));
            c0.push(1.0 - a * ti);
            c1.push(ti);
        }
    }
    let z0 = Array::matrix(rows, d, z0)?;
    let z_t_base = DiffNode::constant(z0.zip_map(&Array::matrix(rows, d, c0)?, |z, c| z * c)?);
    let z_t = z_t_base.add(&x_bar.mul(&DiffNode::constant(Array::matrix(rows, d, c1)?))?)?;
    let target = x_bar.sub(&DiffNode::constant(z0.map(|z| a * z)))?;
    let t = DiffNode::constant(Array::matrix(rows, 1, t)?);
    field.velocity(&z_t, &t)?.sub(&target)?.square().sum_axis(1)
}

/// Batch mean of [`flow_matching_rows`].
pub fn flow_matching_loss<V: VectorField + ?Sized, R: Rng + ?Sized>(
    field: &V,
    x_bar: &DiffNode,
    cfg: &FlowConfig,
    rng: &mut R,
) -> Result<DiffNode> {
    Ok(flow_matching_rows(field, x_bar, cfg.sigma_min, rng)?.mean())
}

/// Per-row `Σ log σ̂ − log p_θ((x − μ̂)/σ̂)` through the unrolled ODE.
pub fn explicit_nll_rows<V: VectorField + ?Sized, R: Rng + ?Sized>(
    field: &V,
    mu: &DiffNode,
    sigma: &DiffNode,
    x: &DiffNode,
    cfg: &FlowConfig,
    ode: &OdeConfig,
    rng: &mut R,
) -> Result<DiffNode> {
    if mu.shape() != x.shape() || sigma.shape() != x.shape() {
        return Err(Error::invalid("mu, sigma and x must share a shape"));
    }
    if let Some(i) = sigma.value().data().iter().position(|&s| !(s > 0.0)) {
        return Err(Error::invalid(format!("sigma must be positive (element {i})")));
    }
    let x_bar = x.sub(mu)?.div(sigma)?;
    let density = log_density_graph(field, &x_bar, cfg, ode, rng)?;
    sigma.log()?.sum_axis(1)?.sub(&density.log_prob)
}

/// Batch mean of [`explicit_nll_rows`].
#[allow(clippy::too_many_arguments)]
pub fn explicit_nll_loss<V: VectorField + ?Sized, R: Rng + ?Sized>(
    field: &V,
    mu: &DiffNode,
    sigma: &DiffNode,
    x: &DiffNode,
    cfg: &FlowConfig,
    ode: &OdeConfig,
    rng: &mut R,
) -> Result<DiffNode> {
    Ok(explicit_nll_rows(field, mu, sigma, x, cfg, ode, rng)?.mean())
}
