//! Small dense matrix helpers: power-iteration spectral norm and the
//! trace / Frobenius / spectral norm inequalities behind the NLL bound.

use serde::Serialize;

use crate::autodiff::Array;
use crate::error::{Error, Result};

/// Outcome of a power iteration run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PowerIteration {
    /// Best estimate of the largest singular value (a lower bound).
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

pub const DEFAULT_POWER_ITERS: usize = 50;
pub const DEFAULT_POWER_TOL: f64 = 1e-8;

/// Largest singular value of `a` by power iteration on `AᵀA`.
///
/// Stops when the relative change of the estimate drops below `tol`.
/// A non-converged run still returns its best iterate.
pub fn spectral_norm(a: &Array, max_iters: usize, tol: f64) -> Result<PowerIteration> {
    let (r, c) = a.dims2()?;
    let m = a.data();
    if m.iter().all(|&x| x == 0.0) {
        return Ok(PowerIteration {
            value: 0.0,
            iterations: 0,
            converged: true,
        });
    }
    // Fixed, non-symmetric start so structured matrices do not start orthogonal
    // to their top singular vector.
    let mut v: Vec<f64> = (0..c).map(|j| 1.0 + 0.37 * ((j as f64 + 1.0) * 1.618).sin()).collect();
    normalize(&mut v);
    let mut av = vec![0.0; r];
    let mut best = 0.0_f64;
    let mut prev = 0.0_f64;
    for it in 1..=max_iters.max(1) {
        for i in 0..r {
            av[i] = (0..c).map(|j| m[i * c + j] * v[j]).sum();
        }
        let sigma = norm(&av);
        best = best.max(sigma);
        if sigma == 0.0 {
            return Ok(PowerIteration {
                value: best,
                iterations: it,
                converged: true,
            });
        }
        for (j, vj) in v.iter_mut().enumerate() {
            *vj = (0..r).map(|i| m[i * c + j] * av[i]).sum();
        }
        normalize(&mut v);
        if it > 1 && (sigma - prev).abs() <= tol * sigma {
            return Ok(PowerIteration {
                value: best,
                iterations: it,
                converged: true,
            });
        }
        prev = sigma;
    }
    Ok(PowerIteration {
        value: best,
        iterations: max_iters,
        converged: false,
    })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn normalize(v: &mut [f64]) {
    let n = norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

pub fn trace(a: &Array) -> Result<f64> {
    let (r, c) = a.dims2()?;
    if r != c {
        return Err(Error::invalid("trace of a non-square matrix"));
    }
    Ok((0..r).map(|i| a.at2(i, i)).sum())
}

pub fn frobenius_norm(a: &Array) -> f64 {
    norm(a.data())
}

/// The chain `tr(A) ≤ √n‖A‖_F ≤ n‖A‖` evaluated for one square matrix.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct NormChain {
    pub n: usize,
    pub trace: f64,
    pub frobenius: f64,
    pub spectral: PowerIteration,
}

impl NormChain {
    pub fn evaluate(a: &Array, power_iters: usize) -> Result<Self> {
        let (n, _) = a.dims2()?;
        Ok(NormChain {
            n,
            trace: trace(a)?,
            frobenius: frobenius_norm(a),
            spectral: spectral_norm(a, power_iters, 1e-12)?,
        })
    }

    /// `√n‖A‖_F − tr(A)`; non-negative when the trace bound holds.
    pub fn trace_slack(&self) -> f64 {
        (self.n as f64).sqrt() * self.frobenius - self.trace
    }

    /// `√n‖A‖ − ‖A‖_F`; non-negative when the Frobenius bound holds.
    pub fn frobenius_slack(&self) -> f64 {
        (self.n as f64).sqrt() * self.spectral.value - self.frobenius
    }

    pub fn holds(&self, tol: f64) -> bool {
        self.trace_slack() >= -tol && self.frobenius_slack() >= -tol
    }
}
