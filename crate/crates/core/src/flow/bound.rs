//! Jacobians, the sampled Lipschitz constant and the NLL upper bound.

use rand::Rng;
use serde::Serialize;

use super::density::basis_probes;
use super::field::VectorField;
use crate::autodiff::{grad, with_grad, Array, DiffNode};
use crate::error::{Error, Result};
use crate::linalg::{spectral_norm, DEFAULT_POWER_ITERS, DEFAULT_POWER_TOL};

/// Half-width of the cube `[−R, R]^d` sampled by [`lipschitz_estimate`].
pub const LIPSCHITZ_REGION: f64 = 4.0;

/// `∂f/∂z` at every row of `z` (`rows × d`) with per-row times `t`
/// (`rows × 1`). Entry `(i, j)` of each matrix is `∂f_i/∂z_j`.
pub fn jacobian<V: VectorField + ?Sized>(field: &V, z: &Array, t: &Array) -> Result<Vec<Array>> {
    let (rows, d) = z.dims2()?;
    if t.shape() != [rows, 1] {
        return Err(Error::invalid("time column must be rows x 1"));
    }
    let eps = basis_probes(rows, d)?;
    let g = with_grad(|| -> Result<Array> {
        let z_leaf = DiffNode::leaf(z.clone(), true);
        let z_rep = z_leaf.reshape(&[1, rows * d])?.expand_axis(0, d)?.reshape(&[d * rows, d])?;
        let t_rep = DiffNode::constant(t.reshape(&[1, rows])?.expand_axis(0, d)?.reshape(&[d * rows, 1])?);
        let s = field.velocity(&z_rep, &t_rep)?.mul(&DiffNode::constant(eps))?.sum();
        Ok(grad(&s, std::slice::from_ref(&z_rep), false)?.grads.remove(0).value().clone())
    })?;
    (0..rows)
        .map(|r| {
            let mut m = Vec::with_capacity(d * d);
            for i in 0..d {
                m.extend_from_slice(g.row(i * rows + r));
            }
            Array::matrix(d, d, m)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LipschitzEstimate {
    /// Largest sampled Jacobian spectral norm; a lower bound on the supremum.
    pub value: f64,
    /// False if any power iteration stopped at the iteration cap.
    pub all_converged: bool,
    pub samples: usize,
}

/// Max of `‖∂f/∂z‖₂` over `z ~ U[−R, R]^d`, `t ~ U[0, 1]`.
pub fn lipschitz_estimate<V: VectorField + ?Sized, R: Rng + ?Sized>(
    field: &V,
    region_samples: usize,
    rng: &mut R,
) -> Result<LipschitzEstimate> {
    if region_samples == 0 {
        return Err(Error::invalid("region_samples must be >= 1"));
    }
    let d = field.data_dim();
    const CHUNK: usize = 256;
    let mut best = 0.0_f64;
    let mut all_converged = true;
    let mut done = 0;
    while done < region_samples {
        let rows = CHUNK.min(region_samples - done);
        let mut z = Vec::with_capacity(rows * d);
        let mut t = Vec::with_capacity(rows);
        for _ in 0..rows {
            for _ in 0..d {
                z.push(rng.random_range(-LIPSCHITZ_REGION..=LIPSCHITZ_REGION));
            }
            t.push(rng.random::<f64>());
        }
        let jacs = jacobian(field, &Array::matrix(rows, d, z)?, &Array::matrix(rows, 1, t)?)?;
        for j in &jacs {
            let p = spectral_norm(j, DEFAULT_POWER_ITERS, DEFAULT_POWER_TOL)?;
            if !p.converged {
                log::warn!("power iteration hit {} iterations (best {})", p.iterations, p.value);
                all_converged = false;
            }
            best = best.max(p.value);
        }
        done += rows;
    }
    Ok(LipschitzEstimate {
        value: best,
        all_converged,
        samples: region_samples,
    })
}

/// `L_UB = −log p(z0) + n·L̂`.
pub fn upper_bound_value(z0_logprob: f64, n: usize, l_hat: f64) -> Result<f64> {
    if !(l_hat >= 0.0) {
        return Err(Error::invalid(format!("Lipschitz estimate must be >= 0, got {l_hat}")));
    }
    Ok(-z0_logprob + n as f64 * l_hat)
}
