use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::nll::{base_log_density, base_nll_rows, cfre_loss, reduce_batch, standardize, standardize_node};
use super::regression::RegressionModel;
use super::{BaseKind, CfreConfig, TrainerKind};
use crate::autodiff::{grad, Array, DiffNode};
use crate::data::{epoch_batches, stream_rng, Dataset};
use crate::error::{Error, Result};
use crate::flow::{
    explicit_nll_rows, flow_matching_rows, integrate_sample, log_density_batch, FlowConfig, OdeConfig, TraceMode,
    VectorFieldNet, EXACT_TRACE_MAX_DIM,
};
use crate::nn::Adam;

const STREAM_REGRESSION: u64 = 0;
const STREAM_FLOW_INIT: u64 = 1;
const STREAM_BATCHES: u64 = 2;
const STREAM_FLOW_NOISE: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_reg: f64,
    pub l_flow: f64,
    pub l_total: f64,
    pub val_nll: f64,
}

/// A regression model plus the density of its standardized residuals:
/// a trained flow, or the unit-variance base law when there is none.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedCfre {
    pub regression: RegressionModel,
    pub flow: Option<VectorFieldNet>,
    pub base: BaseKind,
    pub flow_cfg: FlowConfig,
    pub trainer: TrainerKind,
    pub history: Vec<EpochRecord>,
}

impl TrainedCfre {
    fn eval_flow_cfg(&self) -> FlowConfig {
        let mut cfg = self.flow_cfg;
        if self.regression.d() <= EXACT_TRACE_MAX_DIM {
            cfg.trace_mode = TraceMode::Exact;
        }
        cfg
    }

    /// `log p(x̄)` for each row of `x_bar` (`rows × d`).
    pub fn residual_log_density(&self, x_bar: &Array, ode: &OdeConfig) -> Result<Vec<f64>> {
        match &self.flow {
            Some(net) => {
                let mut rng = stream_rng(0, STREAM_FLOW_NOISE);
                Ok(log_density_batch(net, x_bar, &self.eval_flow_cfg(), ode, &mut rng)?.log_prob)
            }
            None => {
                let (rows, _) = x_bar.dims2()?;
                Ok((0..rows).map(|r| base_log_density(self.base, x_bar.row(r))).collect())
            }
        }
    }

    /// `log P(x_j | input)` per sample and joint (`rows × k`).
    pub fn joint_log_density_parts(&self, input: &Array, x: &Array, ode: &OdeConfig) -> Result<Array> {
        let (k, d) = (self.regression.k(), self.regression.d());
        let pred = self.regression.predict(input)?;
        if x.shape() != pred.mu.shape() {
            return Err(Error::invalid(format!(
                "targets have shape {:?}, predictions {:?}",
                x.shape(),
                pred.mu.shape()
            )));
        }
        let rows = x.rows();
        let x_bar = standardize(x, &pred.mu, &pred.sigma)?.reshape(&[rows * k, d])?;
        let lp = self.residual_log_density(&x_bar, ode)?;
        let mut out = Vec::with_capacity(rows * k);
        for r in 0..rows {
            let s = pred.sigma.row(r);
            for j in 0..k {
                let log_sigma: f64 = s[j * d..(j + 1) * d].iter().map(|v| v.ln()).sum();
                out.push(lp[r * k + j] - log_sigma);
            }
        }
        Array::matrix(rows, k, out)
    }

    /// `log P(x | input)` per sample, summed over joints.
    pub fn joint_log_density(&self, input: &Array, x: &Array, ode: &OdeConfig) -> Result<Vec<f64>> {
        let parts = self.joint_log_density_parts(input, x, ode)?;
        Ok((0..parts.rows()).map(|r| parts.row(r).iter().sum()).collect())
    }

    /// Mean negative log-likelihood per sample.
    pub fn nll(&self, data: &Dataset, ode: &OdeConfig) -> Result<f64> {
        let lp = self.joint_log_density(&data.inputs, &data.targets, ode)?;
        let v = -lp.iter().sum::<f64>() / lp.len() as f64;
        if !v.is_finite() {
            return Err(Error::NumericInstability("non-finite held-out NLL".into()));
        }
        Ok(v)
    }

    /// Draws of the standardized residual `x̄` (`n × d`).
    pub fn sample_residuals<R: Rng + ?Sized>(&self, n: usize, ode: &OdeConfig, rng: &mut R) -> Result<Array> {
        let d = self.regression.d();
        match &self.flow {
            Some(net) => {
                let z0: Vec<f64> = (0..n * d).map(|_| rng.sample(StandardNormal)).collect();
                integrate_sample(net, &Array::matrix(n, d, z0)?, ode)
            }
            None => {
                let draw = |rng: &mut R| -> f64 {
                    match self.base {
                        BaseKind::Gaussian => rng.sample(StandardNormal),
                        BaseKind::Laplace => {
                            // unit variance: scale 1/√2
                            let u: f64 = rng.random_range(-0.5..0.5);
                            -u.signum() * (1.0 - 2.0 * u.abs()).ln() / std::f64::consts::SQRT_2
                        }
                    }
                };
                let data: Vec<f64> = (0..n * d).map(|_| draw(rng)).collect();
                Array::matrix(n, d, data)
            }
        }
    }
}

/// Train a regression model under a plain Gaussian or Laplace NLL.
pub fn train_heteroscedastic(
    data: &Dataset,
    val: Option<&Dataset>,
    cfg: &CfreConfig,
    base: BaseKind,
) -> Result<TrainedCfre> {
    let cfg = CfreConfig {
        base,
        ..cfg.clone()
    };
    let trainer = match base {
        BaseKind::Laplace => TrainerKind::LaplaceOnly,
        BaseKind::Gaussian => TrainerKind::GaussianOnly,
    };
    run(data, val, &cfg, Objective::Regression, trainer)
}

/// Decoupled training: regression NLL plus the confidence-weighted
/// flow-matching loss on standardized residuals. With `c = 0` the flow is
/// never built and the run is plain heteroscedastic regression.
pub fn train_cfre(data: &Dataset, val: Option<&Dataset>, cfg: &CfreConfig) -> Result<TrainedCfre> {
    let objective = if cfg.c == 0.0 {
        Objective::Regression
    } else {
        Objective::FlowMatching
    };
    run(data, val, cfg, objective, TrainerKind::Cfre)
}

/// End-to-end training of the change-of-variables NLL through the unrolled
/// ODE, with Hutchinson traces.
pub fn train_explicit_nll(data: &Dataset, val: Option<&Dataset>, cfg: &CfreConfig) -> Result<TrainedCfre> {
    run(data, val, cfg, Objective::ExplicitNll, TrainerKind::ExplicitNll)
}

/// Dispatch on a trainer name.
pub fn train(kind: TrainerKind, data: &Dataset, val: Option<&Dataset>, cfg: &CfreConfig) -> Result<TrainedCfre> {
    match kind {
        TrainerKind::Cfre => train_cfre(data, val, cfg),
        TrainerKind::ExplicitNll => train_explicit_nll(data, val, cfg),
        TrainerKind::LaplaceOnly => train_heteroscedastic(data, val, cfg, BaseKind::Laplace),
        TrainerKind::GaussianOnly => train_heteroscedastic(data, val, cfg, BaseKind::Gaussian),
    }
}

/// The scalar objective one optimizer step of `kind` minimizes on `batch`.
///
/// `reg_params` and `flow` are the bound parameters gradients flow into;
/// `flow` is required for the cfre (c > 0) and explicit_nll trainers.
pub fn training_loss(
    kind: TrainerKind,
    regression: &RegressionModel,
    reg_params: &[DiffNode],
    flow: Option<&crate::flow::BoundField>,
    batch: &Dataset,
    cfg: &CfreConfig,
    rng: &mut ChaCha8Rng,
) -> Result<DiffNode> {
    let (objective, cfg) = match kind {
        TrainerKind::Cfre if cfg.c == 0.0 => (Objective::Regression, cfg.clone()),
        TrainerKind::Cfre => (Objective::FlowMatching, cfg.clone()),
        TrainerKind::ExplicitNll => (Objective::ExplicitNll, cfg.clone()),
        TrainerKind::LaplaceOnly => (
            Objective::Regression,
            CfreConfig {
                base: BaseKind::Laplace,
                ..cfg.clone()
            },
        ),
        TrainerKind::GaussianOnly => (
            Objective::Regression,
            CfreConfig {
                base: BaseKind::Gaussian,
                ..cfg.clone()
            },
        ),
    };
    Ok(step_losses(regression, reg_params, flow, batch, &cfg, objective, rng)?.total)
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Objective {
    Regression,
    FlowMatching,
    ExplicitNll,
}

struct StepLosses {
    total: DiffNode,
    l_reg: f64,
    l_flow: f64,
}

fn check_data(data: &Dataset, cfg: &CfreConfig) -> Result<()> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    Ok(())
}

fn run(
    data: &Dataset,
    val: Option<&Dataset>,
    cfg: &CfreConfig,
    objective: Objective,
    trainer: TrainerKind,
) -> Result<TrainedCfre> {
    check_data(data, cfg)?;
    let (k, d) = (data.k, data.d);
    let mut regression = RegressionModel::new(
        data.input_dim(),
        k,
        d,
        &cfg.hidden,
        &mut stream_rng(cfg.seed, STREAM_REGRESSION),
    )?;
    let mut flow = match objective {
        Objective::Regression => None,
        _ => Some(VectorFieldNet::new(
            d,
            &cfg.flow_hidden,
            &mut stream_rng(cfg.seed, STREAM_FLOW_INIT),
        )?),
    };
    let mut batch_rng = stream_rng(cfg.seed, STREAM_BATCHES);
    let mut noise_rng = stream_rng(cfg.seed, STREAM_FLOW_NOISE);
    let mut opt = Adam::new(cfg.lr);
    let monitor = val.unwrap_or(data).head(cfg.val_monitor.max(1))?;
    let n_reg = regression.params().len();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let (mut s_reg, mut s_flow, mut s_total, mut weight) = (0.0, 0.0, 0.0, 0.0);
        for (step, idx) in epoch_batches(data.len(), cfg.batch_size, &mut batch_rng).iter().enumerate() {
            let abort = |reason: String| Error::TrainingAborted {
                epoch,
                step: step + 1,
                reason,
            };
            let batch = data.select(idx)?;
            let reg_params = regression.mlp().bind(true);
            let flow_params = flow.as_ref().map(|f| f.bind(true));
            let losses = step_losses(
                &regression,
                &reg_params,
                flow_params.as_ref(),
                &batch,
                cfg,
                objective,
                &mut noise_rng,
            )
            .map_err(|e| if e.is_numeric() { abort(e.to_string()) } else { e })?;
            let total = losses.total.item();
            if !total.is_finite() || !losses.l_reg.is_finite() || !losses.l_flow.is_finite() {
                return Err(abort(format!("non-finite loss {total}")));
            }
            let mut wrt = reg_params.clone();
            if let Some(fp) = &flow_params {
                wrt.extend(fp.params().iter().cloned());
            }
            let grads = grad(&losses.total, &wrt, false)?.values();
            if let Some(i) = grads.iter().position(|g| !g.all_finite()) {
                return Err(abort(format!("non-finite gradient in parameter array {i}")));
            }
            let mut current: Vec<Array> = regression.params().to_vec();
            if let Some(f) = &flow {
                current.extend(f.params().iter().cloned());
            }
            let mut updated = opt.step(&current, &grads)?;
            let flow_part = updated.split_off(n_reg);
            regression.set_params(updated)?;
            if let Some(f) = flow.as_mut() {
                f.set_params(flow_part)?;
            }
            let w = idx.len() as f64;
            s_reg += w * losses.l_reg;
            s_flow += w * losses.l_flow;
            s_total += w * total;
            weight += w;
        }
        let model = TrainedCfre {
            regression: regression.clone(),
            flow: flow.clone(),
            base: cfg.base,
            flow_cfg: cfg.flow,
            trainer,
            history: Vec::new(),
        };
        let val_nll = model.nll(&monitor, &cfg.ode).map_err(|e| Error::TrainingAborted {
            epoch,
            step: 0,
            reason: format!("validation: {e}"),
        })?;
        let rec = EpochRecord {
            epoch,
            l_reg: s_reg / weight,
            l_flow: s_flow / weight,
            l_total: s_total / weight,
            val_nll,
        };
        log::debug!("epoch {epoch}: {rec:?}");
        history.push(rec);
    }
    Ok(TrainedCfre {
        regression,
        flow,
        base: cfg.base,
        flow_cfg: cfg.flow,
        trainer,
        history,
    })
}

fn step_losses(
    regression: &RegressionModel,
    reg_params: &[DiffNode],
    flow: Option<&crate::flow::BoundField>,
    batch: &Dataset,
    cfg: &CfreConfig,
    objective: Objective,
    rng: &mut ChaCha8Rng,
) -> Result<StepLosses> {
    let (b, k, d) = (batch.len(), batch.k, batch.d);
    let x = DiffNode::constant(batch.inputs.clone());
    let y = DiffNode::constant(batch.targets.clone());
    let (mu, sigma) = regression.forward(reg_params, &x)?;
    let reg_rows = base_nll_rows(cfg.base, &mu, &sigma, &y)?;
    let l_reg = reduce_batch(&reg_rows).item();
    match objective {
        Objective::Regression => {
            let total = cfre_loss(&reg_rows, &reg_rows, &sigma, 0.0)?;
            Ok(StepLosses { total, l_reg, l_flow: 0.0 })
        }
        Objective::FlowMatching => {
            let field = flow.ok_or_else(|| Error::invalid("flow objective without a flow"))?;
            let x_bar = if cfg.detach_flow_input {
                standardize_node(&y, &mu.detach(), &sigma.detach())?
            } else {
                standardize_node(&y, &mu, &sigma)?
            };
            let per_joint = flow_matching_rows(field, &x_bar.reshape(&[b * k, d])?, cfg.flow.sigma_min, rng)?;
            let flow_rows = per_joint.reshape(&[b, k])?.sum_axis(1)?;
            let l_flow = reduce_batch(&flow_rows).item();
            let total = cfre_loss(&reg_rows, &flow_rows, &sigma, cfg.c)?;
            Ok(StepLosses { total, l_reg, l_flow })
        }
        Objective::ExplicitNll => {
            let field = flow.ok_or_else(|| Error::invalid("explicit NLL objective without a flow"))?;
            let fcfg = FlowConfig {
                trace_mode: TraceMode::Hutchinson,
                ..cfg.flow
            };
            let ode = OdeConfig::with_steps(cfg.train_ode_steps);
            let rows = explicit_nll_rows(
                field,
                &mu.reshape(&[b * k, d])?,
                &sigma.reshape(&[b * k, d])?,
                &y.reshape(&[b * k, d])?,
                &fcfg,
                &ode,
                rng,
            )?;
            let total = reduce_batch(&rows.reshape(&[b, k])?.sum_axis(1)?);
            let l = total.item();
            Ok(StepLosses {
                total,
                l_reg,
                l_flow: l,
            })
        }
    }
}
