//! Versioned JSON checkpoints and CSV training histories.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::regression::RegressionModel;
use super::train::{EpochRecord, TrainedCfre};
use super::{BaseKind, TrainerKind};
use crate::autodiff::Array;
use crate::error::{Error, Result};
use crate::flow::{FlowConfig, VectorFieldNet};
use crate::nn::Mlp;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    /// Axes per joint, the dimension the flow works in.
    pub data_dim: usize,
    #[serde(rename = "K")]
    pub k: usize,
    /// Regression network widths.
    pub widths: Vec<usize>,
    /// Flow widths, absent when the residual density is the base law.
    pub flow_widths: Option<Vec<usize>>,
    pub base_kind: BaseKind,
    pub sigma_min: f64,
    pub trainer: TrainerKind,
    pub flow: FlowConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    /// Regression weights then biases per layer, in declaration order.
    pub regression: Vec<Array>,
    pub flow: Option<Vec<Array>>,
}

impl Checkpoint {
    pub fn from_model(m: &TrainedCfre) -> Self {
        Checkpoint {
            header: CheckpointHeader {
                format_version: CHECKPOINT_VERSION,
                data_dim: m.regression.d(),
                k: m.regression.k(),
                widths: m.regression.mlp().widths().to_vec(),
                flow_widths: m.flow.as_ref().map(|f| f.widths().to_vec()),
                base_kind: m.base,
                sigma_min: m.flow_cfg.sigma_min,
                trainer: m.trainer,
                flow: m.flow_cfg,
            },
            regression: m.regression.params().to_vec(),
            flow: m.flow.as_ref().map(|f| f.params().to_vec()),
        }
    }

    /// Rebuild the model; the training history is not stored.
    pub fn into_model(self) -> Result<TrainedCfre> {
        let h = self.header;
        if h.format_version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                h.format_version
            )));
        }
        let regression = RegressionModel::from_mlp(h.k, h.data_dim, Mlp::from_params(&h.widths, self.regression)?)?;
        let flow = match (h.flow_widths, self.flow) {
            (Some(w), Some(p)) => {
                let net = VectorFieldNet::from_mlp(Mlp::from_params(&w, p)?)?;
                if net.widths().last() != Some(&h.data_dim) {
                    return Err(Error::Format("flow dimension does not match data_dim".into()));
                }
                Some(net)
            }
            (None, None) => None,
            _ => return Err(Error::Format("flow widths and weights must appear together".into())),
        };
        let mut flow_cfg = h.flow;
        flow_cfg.sigma_min = h.sigma_min;
        Ok(TrainedCfre {
            regression,
            flow,
            base: h.base_kind,
            flow_cfg,
            trainer: h.trainer,
            history: Vec::new(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Format(format!("checkpoint: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in history {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_history_csv(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
