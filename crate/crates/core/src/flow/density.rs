//! Jacobian traces and log-densities through the instantaneous change of
//! variables.
//!
//! All trace variants reduce to one primitive: for probe vectors `ε_k`,
//! compute `Σ_k ε_kᵀ J ε_k` with a single forward and a single
//! vector-Jacobian pass over a batch tiled once per probe. Exact traces use
//! the basis vectors as probes.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::field::{time_column, VectorField};
use super::ode::{rk4, OdeConfig};
use super::{FlowConfig, ProbeLaw, TraceMode};
use crate::autodiff::{grad, is_grad_enabled, no_grad, with_grad, Array, DiffNode};
use crate::error::{Error, Result};

/// Largest dimension for which the exact trace is allowed.
pub const EXACT_TRACE_MAX_DIM: usize = 8;

/// Rows per chunk when evaluating densities for many points.
pub const DENSITY_CHUNK_ROWS: usize = 256;

const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_7;

/// `log N(z; 0, I)` per row, as a `rows × 1` node.
pub fn standard_normal_log_prob(z: &DiffNode) -> Result<DiffNode> {
    let d = z.value().cols() as f64;
    Ok(z.square().sum_axis(1)?.scale(-0.5).add_scalar(-d * HALF_LOG_2PI))
}

/// Plain-number version of [`standard_normal_log_prob`] for one point.
pub fn standard_normal_log_pdf(z: &[f64]) -> f64 {
    -0.5 * z.iter().map(|v| v * v).sum::<f64>() - z.len() as f64 * HALF_LOG_2PI
}

/// Repeat the rows of `x` (`rows × d`) `p` times, block by block.
fn tile_rows(x: &DiffNode, p: usize) -> Result<DiffNode> {
    if p == 1 {
        return Ok(x.clone());
    }
    let (rows, d) = x.value().dims2()?;
    x.reshape(&[1, rows * d])?
        .expand_axis(0, p)?
        .reshape(&[p * rows, d])
}

/// Sum of `ε_kᵀ J(z_r) ε_k` over probe blocks, per row `r`.
///
/// `probes` is `(p·rows) × d`; row `k·rows + r` is the `k`-th probe for
/// point `r`. The result is differentiable with respect to the field
/// parameters and `z` when gradients are enabled.
pub fn probe_quadratic<V: VectorField + ?Sized>(
    field: &V,
    z: &DiffNode,
    t: f64,
    probes: &Array,
    p: usize,
) -> Result<DiffNode> {
    let (rows, d) = z.value().dims2()?;
    if p == 0 || probes.shape() != [p * rows, d] {
        return Err(Error::invalid(format!(
            "probe array must be {} x {d}, got {:?}",
            p * rows,
            probes.shape()
        )));
    }
    let create_graph = is_grad_enabled();
    let z_in = if z.requires_grad() { z.clone() } else { z.detached_leaf() };
    let eps = DiffNode::constant(probes.clone());
    with_grad(|| {
        let z_rep = tile_rows(&z_in, p)?;
        let f = field.velocity(&z_rep, &time_column(p * rows, t))?;
        let s = f.mul(&eps)?.sum();
        let vjp = grad(&s, std::slice::from_ref(&z_rep), create_graph)?.grads.remove(0);
        let q = vjp.mul(&eps)?.sum_axis(1)?;
        let per_row = if p == 1 {
            q
        } else {
            q.reshape(&[p, rows])?.sum_axis(0)?.reshape(&[rows, 1])?
        };
        if create_graph {
            Ok(per_row)
        } else {
            Ok(per_row.detach())
        }
    })
}

/// Basis probes `e_0..e_{d−1}`, each tiled over `rows`.
pub fn basis_probes(rows: usize, d: usize) -> Result<Array> {
    let mut data = vec![0.0; d * rows * d];
    for i in 0..d {
        for r in 0..rows {
            data[(i * rows + r) * d + i] = 1.0;
        }
    }
    Array::matrix(d * rows, d, data)
}

/// `(p·rows) × d` probes, drawn independently for every row of every block.
pub fn draw_probes<R: Rng + ?Sized>(rows: usize, d: usize, p: usize, law: ProbeLaw, rng: &mut R) -> Result<Array> {
    let n = p * rows * d;
    let data: Vec<f64> = match law {
        ProbeLaw::Rademacher => (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect(),
        ProbeLaw::Gaussian => (0..n).map(|_| rng.sample(StandardNormal)).collect(),
    };
    Array::matrix(p * rows, d, data)
}

/// `tr(∂f/∂z)` per row of `z` (`rows × 1`).
pub fn exact_trace<V: VectorField + ?Sized>(field: &V, z: &DiffNode, t: f64) -> Result<DiffNode> {
    let (rows, d) = z.value().dims2()?;
    if d > EXACT_TRACE_MAX_DIM {
        return Err(Error::invalid(format!(
            "exact trace limited to dimension {EXACT_TRACE_MAX_DIM}, got {d}"
        )));
    }
    probe_quadratic(field, z, t, &basis_probes(rows, d)?, d)
}

/// Hutchinson estimate with freshly drawn probes.
pub fn hutchinson_trace<V: VectorField + ?Sized, R: Rng + ?Sized>(
    field: &V,
    z: &DiffNode,
    t: f64,
    probes: usize,
    law: ProbeLaw,
    rng: &mut R,
) -> Result<DiffNode> {
    if probes == 0 {
        return Err(Error::invalid("need at least one probe"));
    }
    let (rows, d) = z.value().dims2()?;
    let eps = draw_probes(rows, d, probes, law, rng)?;
    hutchinson_trace_with(field, z, t, &eps, probes)
}

/// Hutchinson estimate with caller-supplied probes (mean over `p` blocks).
pub fn hutchinson_trace_with<V: VectorField + ?Sized>(
    field: &V,
    z: &DiffNode,
    t: f64,
    probes: &Array,
    p: usize,
) -> Result<DiffNode> {
    Ok(probe_quadratic(field, z, t, probes, p)?.scale(1.0 / p as f64))
}

/// Density of one point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityResult {
    pub log_prob: f64,
    pub z0_terminal: Array,
    pub trace_integral: f64,
}

/// Densities of a batch of points, one entry per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchDensity {
    pub log_prob: Vec<f64>,
    pub z0_terminal: Array,
    pub trace_integral: Vec<f64>,
}

impl BatchDensity {
    pub fn get(&self, i: usize) -> DensityResult {
        DensityResult {
            log_prob: self.log_prob[i],
            z0_terminal: Array::vector(self.z0_terminal.row(i).to_vec()),
            trace_integral: self.trace_integral[i],
        }
    }
}

/// Graph-level outputs of the backward solve.
pub struct DensityGraph {
    /// `rows × 1`
    pub log_prob: DiffNode,
    pub z0: DiffNode,
    /// `rows × 1`, `∫₀¹ tr(∂f/∂z) dt`
    pub trace_integral: DiffNode,
}

/// Solve from `t = 1` (state `x̄`) back to `t = 0`, carrying the trace
/// integral on the same RK4 stages. Differentiable when gradients are on.
///
/// Hutchinson probes are drawn once and reused at every stage of the solve.
pub fn log_density_graph<V: VectorField + ?Sized, R: Rng + ?Sized>(
    field: &V,
    x_bar: &DiffNode,
    cfg: &FlowConfig,
    ode: &OdeConfig,
    rng: &mut R,
) -> Result<DensityGraph> {
    cfg.validate()?;
    ode.validate()?;
    let (rows, d) = x_bar.value().dims2()?;
    if d != field.data_dim() {
        return Err(Error::invalid(format!(
            "points have {d} columns, field expects {}",
            field.data_dim()
        )));
    }
    if let Some(i) = x_bar.value().first_non_finite() {
        return Err(Error::invalid(format!("non-finite input at element {i}")));
    }
    let (probes, p, mean) = match cfg.trace_mode {
        TraceMode::Exact => {
            if d > EXACT_TRACE_MAX_DIM {
                return Err(Error::invalid(format!(
                    "exact trace limited to dimension {EXACT_TRACE_MAX_DIM}, got {d}"
                )));
            }
            (basis_probes(rows, d)?, d, false)
        }
        TraceMode::Hutchinson => {
            let p = cfg.hutchinson_probes;
            (draw_probes(rows, d, p, cfg.probe_law, rng)?, p, true)
        }
    };
    let ell0 = DiffNode::constant(Array::zeros(&[rows, 1])?);
    let out = rk4(vec![x_bar.clone(), ell0], 1.0, 0.0, ode.steps, |y, t| {
        let v = field.velocity(&y[0], &time_column(rows, t))?;
        let mut tr = probe_quadratic(field, &y[0], t, &probes, p)?;
        if mean {
            tr = tr.scale(1.0 / p as f64);
        }
        if let Some(i) = tr.value().first_non_finite() {
            return Err(Error::NumericInstability(format!(
                "non-finite trace at t = {t} (row {i})"
            )));
        }
        Ok(vec![v, tr])
    })?;
    let mut it = out.into_iter();
    let z0 = it.next().expect("state");
    // integrating backwards accumulates −∫₀¹ tr dt
    let trace_integral = it.next().expect("trace").neg();
    let log_prob = standard_normal_log_prob(&z0)?.sub(&trace_integral)?;
    Ok(DensityGraph {
        log_prob,
        z0,
        trace_integral,
    })
}

/// Densities for every row of `x_bar`, evaluated without a graph in chunks.
pub fn log_density_batch<V: VectorField + ?Sized, R: Rng + ?Sized>(
    field: &V,
    x_bar: &Array,
    cfg: &FlowConfig,
    ode: &OdeConfig,
    rng: &mut R,
) -> Result<BatchDensity> {
    let (rows, d) = x_bar.dims2()?;
    let mut log_prob = Vec::with_capacity(rows);
    let mut trace_integral = Vec::with_capacity(rows);
    let mut z0 = Vec::with_capacity(rows * d);
    let mut start = 0;
    while start < rows {
        let end = (start + DENSITY_CHUNK_ROWS).min(rows);
        let chunk = Array::matrix(end - start, d, x_bar.data()[start * d..end * d].to_vec())?;
        let g = no_grad(|| log_density_graph(field, &DiffNode::constant(chunk), cfg, ode, rng))?;
        log_prob.extend_from_slice(g.log_prob.value().data());
        trace_integral.extend_from_slice(g.trace_integral.value().data());
        z0.extend_from_slice(g.z0.value().data());
        start = end;
    }
    Ok(BatchDensity {
        log_prob,
        z0_terminal: Array::matrix(rows, d, z0)?,
        trace_integral,
    })
}

/// Density of a single point `x̄` (any shape with `d` elements).
pub fn log_density<V: VectorField + ?Sized, R: Rng + ?Sized>(
    field: &V,
    x_bar: &Array,
    cfg: &FlowConfig,
    ode: &OdeConfig,
    rng: &mut R,
) -> Result<DensityResult> {
    let point = x_bar.reshape(&[1, x_bar.len()])?;
    Ok(log_density_batch(field, &point, cfg, ode, rng)?.get(0))
}
