//! Heteroscedastic regression with a flow-refined residual density.

mod checkpoint;
mod nll;
mod regression;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{FlowConfig, OdeConfig, DEFAULT_HIDDEN};

pub use checkpoint::{read_history_csv, write_history_csv, Checkpoint, CheckpointHeader, CHECKPOINT_VERSION};
pub use nll::{
    base_log_density, base_nll_rows, cfre_loss, destandardize, gaussian_nll, gaussian_nll_rows, laplace_nll,
    laplace_nll_rows, reduce_batch, standardize, standardize_node,
};
pub use regression::{confidence, squash_sigma, Prediction, RegressionModel, SIGMA_FLOOR};
pub use train::{
    train, train_cfre, train_explicit_nll, train_heteroscedastic, training_loss, EpochRecord, TrainedCfre,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BaseKind {
    Gaussian,
    #[default]
    Laplace,
}

impl BaseKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BaseKind::Gaussian => "gaussian",
            BaseKind::Laplace => "laplace",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainerKind {
    Cfre,
    ExplicitNll,
    LaplaceOnly,
    GaussianOnly,
}

impl TrainerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainerKind::Cfre => "cfre",
            TrainerKind::ExplicitNll => "explicit_nll",
            TrainerKind::LaplaceOnly => "laplace_only",
            TrainerKind::GaussianOnly => "gaussian_only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cfre" => Ok(TrainerKind::Cfre),
            "explicit_nll" => Ok(TrainerKind::ExplicitNll),
            "laplace_only" => Ok(TrainerKind::LaplaceOnly),
            "gaussian_only" => Ok(TrainerKind::GaussianOnly),
            other => Err(Error::invalid(format!("unknown trainer `{other}`"))),
        }
    }
}

/// Everything that shapes one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CfreConfig {
    /// Weight of the confidence-gated flow loss.
    pub c: f64,
    pub base: BaseKind,
    pub flow: FlowConfig,
    /// Integration used for densities at evaluation time.
    pub ode: OdeConfig,
    /// Unroll length when training through the ODE (explicit NLL).
    pub train_ode_steps: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub flow_hidden: Vec<usize>,
    /// Stop gradients from the flow loss into μ̂ and σ̂.
    pub detach_flow_input: bool,
    /// Validation samples used for the per-epoch `val_nll`.
    pub val_monitor: usize,
}

impl Default for CfreConfig {
    fn default() -> Self {
        CfreConfig {
            c: 0.1,
            base: BaseKind::Laplace,
            flow: FlowConfig::default(),
            ode: OdeConfig::default(),
            train_ode_steps: 8,
            epochs: 50,
            batch_size: 256,
            lr: 1e-3,
            seed: 0,
            hidden: DEFAULT_HIDDEN.to_vec(),
            flow_hidden: DEFAULT_HIDDEN.to_vec(),
            detach_flow_input: false,
            val_monitor: 128,
        }
    }
}

impl CfreConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c >= 0.0) || !self.c.is_finite() {
            return Err(Error::invalid(format!("c must be finite and >= 0, got {}", self.c)));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.train_ode_steps == 0 {
            return Err(Error::invalid("epochs, batch_size and train_ode_steps must be >= 1"));
        }
        if self.hidden.contains(&0) || self.flow_hidden.contains(&0) {
            return Err(Error::invalid("hidden widths must be positive"));
        }
        self.flow.validate()?;
        self.ode.validate()
    }
}
