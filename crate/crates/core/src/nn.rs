//! Dense tanh networks and the Adam optimizer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, DiffNode};
use crate::error::{Error, Result};

/// Fully connected network with tanh hidden activations and a linear output.
///
/// Parameters are stored as plain arrays, `[W0, b0, W1, b1, ...]` with
/// `W_l: in_l × out_l` and `b_l: 1 × out_l`, so a trained network can be
/// shared across threads. [`Mlp::bind`] turns them into graph leaves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    widths: Vec<usize>,
    params: Vec<Array>,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Self> {
        if widths.len() < 2 || widths.iter().any(|&w| w == 0) {
            return Err(Error::invalid(format!("invalid layer widths {widths:?}")));
        }
        let mut params = Vec::with_capacity(2 * (widths.len() - 1));
        for pair in widths.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-limit..limit))
                .collect();
            params.push(Array::matrix(fan_in, fan_out, w)?);
            params.push(Array::zeros(&[1, fan_out])?);
        }
        Ok(Mlp {
            widths: widths.to_vec(),
            params,
        })
    }

    pub fn from_params(widths: &[usize], params: Vec<Array>) -> Result<Self> {
        let mut m = Mlp {
            widths: widths.to_vec(),
            params: Vec::new(),
        };
        m.set_params(params)?;
        Ok(m)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("non-empty widths")
    }

    pub fn params(&self) -> &[Array] {
        &self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Array::len).sum()
    }

    pub fn set_params(&mut self, params: Vec<Array>) -> Result<()> {
        let layers = self.widths.len() - 1;
        if params.len() != 2 * layers {
            return Err(Error::invalid(format!(
                "expected {} parameter arrays, got {}",
                2 * layers,
                params.len()
            )));
        }
        for (l, pair) in self.widths.windows(2).enumerate() {
            let (w, b) = (&params[2 * l], &params[2 * l + 1]);
            if w.shape() != [pair[0], pair[1]] || b.shape() != [1, pair[1]] {
                return Err(Error::invalid(format!("layer {l} parameter shapes do not match widths")));
            }
            if !w.all_finite() || !b.all_finite() {
                return Err(Error::NumericInstability(format!("layer {l} has non-finite parameters")));
            }
        }
        self.params = params;
        Ok(())
    }

    pub fn bind(&self, requires_grad: bool) -> Vec<DiffNode> {
        self.params
            .iter()
            .map(|p| DiffNode::leaf(p.clone(), requires_grad))
            .collect()
    }

    /// Forward pass for a batch `x: rows × input_dim` using bound parameters.
    pub fn forward(params: &[DiffNode], x: &DiffNode) -> Result<DiffNode> {
        let layers = params.len() / 2;
        let rows = x.shape()[0];
        let mut h = x.clone();
        for l in 0..layers {
            let bias = params[2 * l + 1].expand_axis(0, rows)?;
            h = h.matmul(&params[2 * l])?.add(&bias)?;
            if l + 1 < layers {
                h = h.tanh();
            }
        }
        Ok(h)
    }

    /// Forward pass without recording a graph.
    pub fn eval(&self, x: &Array) -> Result<Array> {
        crate::autodiff::no_grad(|| {
            Self::forward(&self.bind(false), &DiffNode::constant(x.clone())).map(|n| n.value().clone())
        })
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Apply one update; `params` and `grads` must keep the same layout
    /// between calls.
    pub fn step(&mut self, params: &[Array], grads: &[Array]) -> Result<Vec<Array>> {
        if params.len() != grads.len() {
            return Err(Error::invalid("parameter and gradient counts differ"));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::invalid("optimizer state layout changed"));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut out = Vec::with_capacity(params.len());
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::invalid("gradient shape does not match parameter"));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let mut data = p.to_vec();
            for (k, (&gk, x)) in g.data().iter().zip(data.iter_mut()).enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                *x -= self.lr * mh / (vh.sqrt() + self.eps);
            }
            out.push(Array::new(p.shape().to_vec(), data)?);
        }
        Ok(out)
    }
}
