//! Base-distribution NLLs, residual standardization and the combined loss.

use crate::autodiff::{Array, DiffNode};
use crate::error::{Error, Result};

use super::BaseKind;

const LN_SQRT2: f64 = 0.346_573_590_279_972_65;
const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_7;

fn check_sigma(sigma: &Array) -> Result<()> {
    match sigma.data().iter().position(|&s| !(s > 0.0)) {
        Some(i) => Err(Error::invalid(format!("sigma must be positive (element {i})"))),
        None => Ok(()),
    }
}

fn check_shapes(mu: &DiffNode, sigma: &DiffNode, target: &DiffNode) -> Result<()> {
    if mu.shape() != target.shape() || sigma.shape() != target.shape() {
        return Err(Error::invalid("mu, sigma and target must share a shape"));
    }
    check_sigma(sigma.value())
}

/// Per-sample sums of `log(√2 σ̂) + √2 |μ_g − μ̂| / σ̂` (`rows × 1`).
pub fn laplace_nll_rows(mu: &DiffNode, sigma: &DiffNode, target: &DiffNode) -> Result<DiffNode> {
    check_shapes(mu, sigma, target)?;
    let r = target.sub(mu)?.abs();
    let per = sigma
        .log()?
        .add_scalar(LN_SQRT2)
        .add(&r.div(sigma)?.scale(std::f64::consts::SQRT_2))?;
    per.sum_axis(1)
}

/// Per-sample sums of `log σ̂ + (μ_g − μ̂)² / (2σ̂²) + ½ log 2π`.
pub fn gaussian_nll_rows(mu: &DiffNode, sigma: &DiffNode, target: &DiffNode) -> Result<DiffNode> {
    check_shapes(mu, sigma, target)?;
    let z = target.sub(mu)?.div(sigma)?;
    let per = sigma.log()?.add(&z.square().scale(0.5))?.add_scalar(HALF_LOG_2PI);
    per.sum_axis(1)
}

pub fn base_nll_rows(kind: BaseKind, mu: &DiffNode, sigma: &DiffNode, target: &DiffNode) -> Result<DiffNode> {
    match kind {
        BaseKind::Laplace => laplace_nll_rows(mu, sigma, target),
        BaseKind::Gaussian => gaussian_nll_rows(mu, sigma, target),
    }
}

/// How per-sample losses become a batch loss: summed over joints and axes
/// inside each sample, averaged over samples.
pub fn reduce_batch(rows: &DiffNode) -> DiffNode {
    rows.mean()
}

pub fn laplace_nll(mu: &DiffNode, sigma: &DiffNode, target: &DiffNode) -> Result<DiffNode> {
    Ok(reduce_batch(&laplace_nll_rows(mu, sigma, target)?))
}

pub fn gaussian_nll(mu: &DiffNode, sigma: &DiffNode, target: &DiffNode) -> Result<DiffNode> {
    Ok(reduce_batch(&gaussian_nll_rows(mu, sigma, target)?))
}

/// Log-density of a standardized residual vector under the unit-variance
/// base law.
pub fn base_log_density(kind: BaseKind, x_bar: &[f64]) -> f64 {
    match kind {
        BaseKind::Laplace => x_bar
            .iter()
            .map(|v| -LN_SQRT2 - std::f64::consts::SQRT_2 * v.abs())
            .sum(),
        BaseKind::Gaussian => x_bar.iter().map(|v| -0.5 * v * v - HALF_LOG_2PI).sum(),
    }
}

/// `x̄ = (x − μ̂) / σ̂`.
pub fn standardize(x: &Array, mu: &Array, sigma: &Array) -> Result<Array> {
    check_sigma(sigma)?;
    x.zip_map(mu, |a, b| a - b)?.zip_map(sigma, |r, s| r / s)
}

/// `x = x̄ σ̂ + μ̂`.
pub fn destandardize(x_bar: &Array, mu: &Array, sigma: &Array) -> Result<Array> {
    check_sigma(sigma)?;
    x_bar.zip_map(sigma, |a, s| a * s)?.zip_map(mu, |a, m| a + m)
}

pub fn standardize_node(x: &DiffNode, mu: &DiffNode, sigma: &DiffNode) -> Result<DiffNode> {
    check_sigma(sigma.value())?;
    x.sub(mu)?.div(sigma)
}

/// `mean(L_reg) + mean(λ ⊙ L_flow)` with `λ = c (1 − mean σ̂)` per sample,
/// held constant for differentiation. For `c = 0` this is exactly the
/// reduced regression loss.
pub fn cfre_loss(reg_rows: &DiffNode, flow_rows: &DiffNode, sigma: &DiffNode, c: f64) -> Result<DiffNode> {
    if !(c >= 0.0) || !c.is_finite() {
        return Err(Error::invalid(format!("c must be finite and >= 0, got {c}")));
    }
    let reg = reduce_batch(reg_rows);
    if c == 0.0 {
        return Ok(reg);
    }
    let rows = reg_rows.shape()[0];
    if flow_rows.shape() != [rows, 1] || sigma.shape()[0] != rows {
        return Err(Error::invalid("loss rows and sigma rows disagree"));
    }
    let lambda = sigma.value().sum_axis(1)?.map(|s| c * (1.0 - s / sigma.value().cols() as f64));
    let weighted = flow_rows.mul(&DiffNode::constant(lambda))?;
    reg.add(&reduce_batch(&weighted))
}
