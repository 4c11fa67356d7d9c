//! Synthetic regression tasks with controlled residual families.
//!
//! Targets are a smooth function of the input plus a residual whose scale
//! depends on the input, so predicted uncertainty has something to rank.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Array;
use crate::data::{stream_rng, Dataset};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    AnisoGaussian,
    AnisoLaplace,
    /// `0.9·N(0, Σ) + 0.1·N(0, 9Σ)`
    HeavyTailMixture,
    Skewed,
    Bimodal,
}

impl TaskKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "aniso_gaussian" => Ok(TaskKind::AnisoGaussian),
            "aniso_laplace" => Ok(TaskKind::AnisoLaplace),
            "heavy_tail_mixture" => Ok(TaskKind::HeavyTailMixture),
            "skewed" => Ok(TaskKind::Skewed),
            "bimodal" => Ok(TaskKind::Bimodal),
            other => Err(Error::invalid(format!("unknown task kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    pub input_dim: usize,
    pub k: usize,
    pub d: usize,
    /// Multiplier on the input-dependent residual scale; 0 gives noiseless
    /// targets.
    pub noise_scale: f64,
    /// Per-axis residual variance `diag(Σ)` before scaling.
    pub axis_variance: Vec<f64>,
    pub seed: u64,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        SyntheticTask {
            kind: TaskKind::HeavyTailMixture,
            input_dim: 8,
            k: 3,
            d: 2,
            noise_scale: 0.1,
            // horizontal : vertical = 1 : 2
            axis_variance: vec![1.0, 2.0],
            seed: 0,
        }
    }
}

const STREAM_WEIGHTS: u64 = 10;
const STREAM_SAMPLES: u64 = 11;

impl SyntheticTask {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.k == 0 || self.d == 0 {
            return Err(Error::invalid("input_dim, k and d must be positive"));
        }
        if self.axis_variance.len() != self.d {
            return Err(Error::invalid(format!(
                "axis_variance has {} entries, expected d = {}",
                self.axis_variance.len(),
                self.d
            )));
        }
        if self.axis_variance.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::invalid("axis variances must be positive"));
        }
        if !(self.noise_scale >= 0.0) || !self.noise_scale.is_finite() {
            return Err(Error::invalid("noise_scale must be finite and >= 0"));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        SyntheticTask {
            seed,
            ..self.clone()
        }
    }
}

/// Fixed random parameters of the mean function and the scale field.
struct TaskFunction {
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    v: Vec<f64>,
    hidden: usize,
    input_dim: usize,
    outputs: usize,
}

impl TaskFunction {
    fn new(task: &SyntheticTask) -> Self {
        let mut rng = stream_rng(task.seed, STREAM_WEIGHTS);
        let hidden = 16;
        let p = task.input_dim;
        let m = task.k * task.d;
        let mut normal = |s: f64, n: usize| -> Vec<f64> {
            (0..n).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect()
        };
        let w1 = normal(1.5 / (p as f64).sqrt(), p * hidden);
        let b1 = normal(0.5, hidden);
        let w2 = normal(1.0 / (hidden as f64).sqrt(), hidden * m);
        let v = normal(2.0 / (p as f64).sqrt(), p);
        TaskFunction {
            w1,
            b1,
            w2,
            v,
            hidden,
            input_dim: p,
            outputs: m,
        }
    }

    fn mean(&self, u: &[f64], out: &mut [f64]) {
        let mut h = vec![0.0; self.hidden];
        for (j, hj) in h.iter_mut().enumerate() {
            let mut s = self.b1[j];
            for i in 0..self.input_dim {
                s += u[i] * self.w1[i * self.hidden + j];
            }
            *hj = s.tanh();
        }
        for (o, slot) in out.iter_mut().enumerate() {
            *slot = (0..self.hidden).map(|j| h[j] * self.w2[j * self.outputs + o]).sum();
        }
    }

    /// Relative residual scale in `[0.25, 2]`.
    fn scale(&self, u: &[f64]) -> f64 {
        let a: f64 = u.iter().zip(&self.v).map(|(x, w)| x * w).sum();
        0.25 + 1.75 / (1.0 + (-a).exp())
    }
}

fn laplace_unit<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // unit variance: scale 1/√2
    let u: f64 = rng.random_range(-0.5..0.5);
    -u.signum() * (1.0 - 2.0 * u.abs()).ln() / std::f64::consts::SQRT_2
}

/// One residual vector with covariance `diag(axis_variance)` (per family
/// before any input-dependent scaling).
pub fn draw_residual<R: Rng + ?Sized>(kind: TaskKind, axis_variance: &[f64], rng: &mut R, out: &mut [f64]) {
    let d = axis_variance.len();
    match kind {
        TaskKind::AnisoGaussian => {
            for a in 0..d {
                out[a] = axis_variance[a].sqrt() * rng.sample::<f64, _>(StandardNormal);
            }
        }
        TaskKind::AnisoLaplace => {
            for a in 0..d {
                out[a] = axis_variance[a].sqrt() * laplace_unit(rng);
            }
        }
        TaskKind::HeavyTailMixture => {
            let wide = rng.random::<f64>() < 0.1;
            let s = if wide { 3.0 } else { 1.0 };
            for a in 0..d {
                out[a] = s * axis_variance[a].sqrt() * rng.sample::<f64, _>(StandardNormal);
            }
        }
        TaskKind::Skewed => {
            // last axis: centred exponential (variance 1); others Gaussian
            for a in 0..d {
                let e = if a + 1 == d {
                    let u: f64 = rng.random();
                    -(1.0 - u).ln() - 1.0
                } else {
                    rng.sample::<f64, _>(StandardNormal)
                };
                out[a] = axis_variance[a].sqrt() * e;
            }
        }
        TaskKind::Bimodal => {
            // first axis: ±0.8 modes with variance-completing noise
            for a in 0..d {
                let e = if a == 0 {
                    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    0.8 * sign + 0.6 * rng.sample::<f64, _>(StandardNormal)
                } else {
                    rng.sample::<f64, _>(StandardNormal)
                };
                out[a] = axis_variance[a].sqrt() * e;
            }
        }
    }
}

/// `n × d` residual draws at unit input scale.
pub fn draw_residuals(kind: TaskKind, axis_variance: &[f64], n: usize, rng: &mut ChaCha8Rng) -> Result<Array> {
    let d = axis_variance.len();
    let mut data = vec![0.0; n * d];
    for chunk in data.chunks_mut(d) {
        draw_residual(kind, axis_variance, rng, chunk);
    }
    Array::matrix(n, d, data)
}

/// `n` samples `(u, f(u) + s(u)·noise_scale·ε)` with `u ~ U[−1, 1]^p`.
pub fn generate(task: &SyntheticTask, n: usize) -> Result<Dataset> {
    task.validate()?;
    if n == 0 {
        return Err(Error::invalid("n must be >= 1"));
    }
    let f = TaskFunction::new(task);
    let mut rng = stream_rng(task.seed, STREAM_SAMPLES);
    let (p, k, d) = (task.input_dim, task.k, task.d);
    let mut inputs = Vec::with_capacity(n * p);
    let mut targets = vec![0.0; n * k * d];
    let mut eps = vec![0.0; d];
    for r in 0..n {
        let u: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
        let row = &mut targets[r * k * d..(r + 1) * k * d];
        f.mean(&u, row);
        let s = task.noise_scale * f.scale(&u);
        for j in 0..k {
            draw_residual(task.kind, &task.axis_variance, &mut rng, &mut eps);
            if task.noise_scale > 0.0 {
                for a in 0..d {
                    row[j * d + a] += s * eps[a];
                }
            }
        }
        inputs.extend(u);
    }
    Dataset::new(Array::matrix(n, p, inputs)?, Array::matrix(n, k * d, targets)?, k, d)
}

/// Noise-free targets for the given inputs.
pub fn mean_function(task: &SyntheticTask, inputs: &Array) -> Result<Array> {
    task.validate()?;
    let f = TaskFunction::new(task);
    let (n, p) = inputs.dims2()?;
    if p != task.input_dim {
        return Err(Error::invalid("input width does not match the task"));
    }
    let m = task.k * task.d;
    let mut out = vec![0.0; n * m];
    for r in 0..n {
        f.mean(inputs.row(r), &mut out[r * m..(r + 1) * m]);
    }
    Array::matrix(n, m, out)
}

/// Excess kurtosis of one axis of the heavy-tail mixture, in closed form.
pub fn mixture_excess_kurtosis() -> f64 {
    // E[x⁴] = 3(0.9 + 0.1·81)σ⁴, E[x²] = (0.9 + 0.1·9)σ²
    3.0 * (0.9 + 8.1) / (1.8 * 1.8) - 3.0
}
