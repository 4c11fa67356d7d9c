//! Fixed-step classical Runge–Kutta over graph nodes.
//!
//! Integrating on [`DiffNode`]s makes the unrolled solve differentiable
//! (discretize-then-optimize); under [`no_grad`] it is a plain solver.

use serde::{Deserialize, Serialize};

use super::field::{time_column, VectorField};
use crate::autodiff::{no_grad, Array, DiffNode};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OdeScheme {
    #[default]
    Rk4,
}

/// Integration over `t ∈ [0, 1]` with a fixed number of RK4 steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct OdeConfig {
    pub steps: usize,
    pub scheme: OdeScheme,
}

impl Default for OdeConfig {
    fn default() -> Self {
        OdeConfig {
            steps: 32,
            scheme: OdeScheme::Rk4,
        }
    }
}

impl OdeConfig {
    pub fn with_steps(steps: usize) -> Self {
        OdeConfig {
            steps,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("ODE steps must be >= 1"));
        }
        Ok(())
    }
}

fn axpy(y: &[DiffNode], h: f64, k: &[DiffNode]) -> Result<Vec<DiffNode>> {
    y.iter().zip(k).map(|(a, b)| a.add(&b.scale(h))).collect()
}

/// Integrate `dy/dt = rhs(y, t)` from `t0` to `t1` (either direction).
///
/// The state is a list of nodes so auxiliary quantities (such as a running
/// log-density) can ride along with the main state.
pub fn rk4<F>(state: Vec<DiffNode>, t0: f64, t1: f64, steps: usize, mut rhs: F) -> Result<Vec<DiffNode>>
where
    F: FnMut(&[DiffNode], f64) -> Result<Vec<DiffNode>>,
{
    if steps == 0 {
        return Err(Error::invalid("ODE steps must be >= 1"));
    }
    let h = (t1 - t0) / steps as f64;
    let mut y = state;
    for i in 0..steps {
        let t = t0 + i as f64 * h;
        let k1 = rhs(&y, t)?;
        let k2 = rhs(&axpy(&y, 0.5 * h, &k1)?, t + 0.5 * h)?;
        let k3 = rhs(&axpy(&y, 0.5 * h, &k2)?, t + 0.5 * h)?;
        let k4 = rhs(&axpy(&y, h, &k3)?, t + h)?;
        let mut next = Vec::with_capacity(y.len());
        for j in 0..y.len() {
            let incr = k1[j]
                .add(&k2[j].scale(2.0))?
                .add(&k3[j].scale(2.0))?
                .add(&k4[j])?
                .scale(h / 6.0);
            next.push(y[j].add(&incr)?);
        }
        if let Some(node) = next.iter().find(|n| !n.value().all_finite()) {
            let idx = node.value().first_non_finite().unwrap_or(0);
            return Err(Error::NumericInstability(format!(
                "non-finite ODE state at step {} (element {idx})",
                i + 1
            )));
        }
        y = next;
    }
    Ok(y)
}

/// Push base samples `z0` (`rows × d`) through the flow from t = 0 to t = 1.
pub fn integrate_sample<V: VectorField + ?Sized>(field: &V, z0: &Array, ode: &OdeConfig) -> Result<Array> {
    ode.validate()?;
    let (rows, d) = z0.dims2()?;
    if d != field.data_dim() {
        return Err(Error::invalid(format!(
            "samples have {d} columns, field expects {}",
            field.data_dim()
        )));
    }
    no_grad(|| {
        let out = rk4(vec![DiffNode::constant(z0.clone())], 0.0, 1.0, ode.steps, |y, t| {
            Ok(vec![field.velocity(&y[0], &time_column(rows, t))?])
        })?;
        Ok(out[0].value().clone())
    })
}
