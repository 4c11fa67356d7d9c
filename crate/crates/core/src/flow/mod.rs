//! Continuous normalizing flow: vector field, OT paths, flow-matching loss,
//! RK4 sampling, log-densities with exact or Hutchinson traces, and the
//! Lipschitz upper bound on the NLL.

mod bound;
mod density;
mod field;
mod loss;
mod ode;
mod path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use bound::{jacobian, lipschitz_estimate, upper_bound_value, LipschitzEstimate, LIPSCHITZ_REGION};
pub use density::{
    basis_probes, draw_probes, exact_trace, hutchinson_trace, hutchinson_trace_with, log_density, log_density_batch,
    log_density_graph, probe_quadratic, standard_normal_log_pdf, standard_normal_log_prob, BatchDensity,
    DensityGraph, DensityResult, DENSITY_CHUNK_ROWS, EXACT_TRACE_MAX_DIM,
};
pub use field::{time_column, AffineField, BoundField, FnField, VectorField, VectorFieldNet, DEFAULT_HIDDEN};
pub use loss::{explicit_nll_loss, explicit_nll_rows, flow_matching_loss, flow_matching_rows};
pub use ode::{integrate_sample, rk4, OdeConfig, OdeScheme};
pub use path::{ot_path, ot_target_field, PathSample, SINGULARITY_TOL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TraceMode {
    #[default]
    Exact,
    Hutchinson,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProbeLaw {
    Gaussian,
    #[default]
    Rademacher,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowConfig {
    pub sigma_min: f64,
    pub trace_mode: TraceMode,
    pub hutchinson_probes: usize,
    pub probe_law: ProbeLaw,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            sigma_min: 0.01,
            trace_mode: TraceMode::Exact,
            hutchinson_probes: 1,
            probe_law: ProbeLaw::Rademacher,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.sigma_min) {
            return Err(Error::invalid(format!("sigma_min = {} outside [0, 1)", self.sigma_min)));
        }
        if self.hutchinson_probes == 0 {
            return Err(Error::invalid("hutchinson_probes must be >= 1"));
        }
        Ok(())
    }
}
