use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{no_grad, Array, DiffNode};
use crate::error::{Error, Result};
use crate::nn::Mlp;

/// Lower bound on σ̂; keeps standardized residuals finite.
pub const SIGMA_FLOOR: f64 = 1e-4;

/// MLP over input features with a `(μ̂, σ̂)` head per joint and axis.
///
/// The last layer has `2·k·d` outputs: `μ̂` in the first `k·d` columns and
/// the raw scale in the rest, both ordered `j·d + a`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionModel {
    k: usize,
    d: usize,
    mlp: Mlp,
}

/// Point predictions, scales and confidences for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub mu: Array,
    pub sigma: Array,
    /// `rows × k`, `1 − mean_a σ̂`
    pub s_hat: Array,
    /// mean of `s_hat` per row
    pub c_hat: Vec<f64>,
}

impl RegressionModel {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, k: usize, d: usize, hidden: &[usize], rng: &mut R) -> Result<Self> {
        if input_dim == 0 || k == 0 || d == 0 {
            return Err(Error::invalid("input_dim, k and d must be positive"));
        }
        let mut widths = vec![input_dim];
        widths.extend_from_slice(hidden);
        widths.push(2 * k * d);
        Ok(RegressionModel {
            k,
            d,
            mlp: Mlp::new(&widths, rng)?,
        })
    }

    pub fn from_mlp(k: usize, d: usize, mlp: Mlp) -> Result<Self> {
        if k == 0 || d == 0 || mlp.output_dim() != 2 * k * d {
            return Err(Error::invalid(format!(
                "regression head needs {} outputs, network has {}",
                2 * k * d,
                mlp.output_dim()
            )));
        }
        Ok(RegressionModel { k, d, mlp })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn params(&self) -> &[Array] {
        self.mlp.params()
    }

    pub fn set_params(&mut self, params: Vec<Array>) -> Result<()> {
        self.mlp.set_params(params)
    }

    /// `(μ̂, σ̂)`, each `rows × k·d`, from bound parameters.
    pub fn forward(&self, params: &[DiffNode], x: &DiffNode) -> Result<(DiffNode, DiffNode)> {
        let m = self.k * self.d;
        let out = Mlp::forward(params, x)?;
        let mu = out.slice_cols(0, m)?;
        let sigma = squash_sigma(&out.slice_cols(m, 2 * m)?);
        Ok((mu, sigma))
    }

    pub fn predict(&self, x: &Array) -> Result<Prediction> {
        if let Some(i) = x.first_non_finite() {
            return Err(Error::invalid(format!("non-finite input at element {i}")));
        }
        let (mu, sigma) = no_grad(|| self.forward(&self.mlp.bind(false), &DiffNode::constant(x.clone())))?;
        let (s_hat, c_hat) = confidence(sigma.value(), self.k, self.d)?;
        Ok(Prediction {
            mu: mu.value().clone(),
            sigma: sigma.value().clone(),
            s_hat,
            c_hat,
        })
    }
}

/// `σ̂ = floor + (1 − floor)·sigmoid(raw)`, in `(floor, 1)`.
pub fn squash_sigma(raw: &DiffNode) -> DiffNode {
    raw.sigmoid().scale(1.0 - SIGMA_FLOOR).add_scalar(SIGMA_FLOOR)
}

/// Joint confidences `ŝ_j = 1 − mean_a σ̂_{j,a}` and their row means.
pub fn confidence(sigma: &Array, k: usize, d: usize) -> Result<(Array, Vec<f64>)> {
    let (rows, cols) = sigma.dims2()?;
    if cols != k * d {
        return Err(Error::invalid(format!("sigma has {cols} columns, expected {}", k * d)));
    }
    let mut s = Vec::with_capacity(rows * k);
    let mut c = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = sigma.row(r);
        let mut acc = 0.0;
        for j in 0..k {
            let m = row[j * d..(j + 1) * d].iter().sum::<f64>() / d as f64;
            let sj = (1.0 - m).clamp(0.0, 1.0);
            s.push(sj);
            acc += sj;
        }
        c.push(acc / k as f64);
    }
    Ok((Array::matrix(rows, k, s)?, c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn confidence_examples() {
        let (s, c) = confidence(&Array::full(&[1, 4], 1.0).unwrap(), 2, 2).unwrap();
        assert_eq!(s.data(), &[0.0, 0.0]);
        assert_eq!(c, vec![0.0]);
        let (s, _) = confidence(&Array::matrix(1, 2, vec![0.2, 0.4]).unwrap(), 1, 2).unwrap();
        assert!((s.item() - 0.7).abs() < 1e-15);
        let (_, c) = confidence(&Array::matrix(1, 4, vec![0.2, 0.4, 0.1, 0.1]).unwrap(), 2, 2).unwrap();
        assert!((c[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn predictions_are_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = RegressionModel::new(4, 3, 2, &[16], &mut rng).unwrap();
        let x = Array::matrix(5, 4, (0..20).map(|i| (i as f64 * 0.37).sin() * 3.0).collect()).unwrap();
        let p = m.predict(&x).unwrap();
        assert_eq!(p.mu.shape(), &[5, 6]);
        assert!(p.sigma.data().iter().all(|&s| s > 0.0 && s <= 1.0));
        assert!(p.s_hat.data().iter().all(|&s| (0.0..=1.0).contains(&s)));
        for r in 0..5 {
            let mean = p.s_hat.row(r).iter().sum::<f64>() / 3.0;
            assert!((p.c_hat[r] - mean).abs() < 1e-15);
        }
        assert!(m.predict(&Array::full(&[1, 4], f64::NAN).unwrap()).is_err());
    }

    #[test]
    fn raising_sigma_lowers_confidence() {
        let lo = Array::matrix(1, 4, vec![0.1, 0.3, 0.5, 0.2]).unwrap();
        let hi = lo.map(|s| s + 0.05);
        let (a, _) = confidence(&lo, 2, 2).unwrap();
        let (b, _) = confidence(&hi, 2, 2).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| y < x));
    }

    #[test]
    fn squash_stays_in_unit_interval() {
        let raw = DiffNode::constant(Array::vector(vec![-800.0, 0.0, 800.0]));
        let s = squash_sigma(&raw);
        assert_eq!(s.value().data()[0], SIGMA_FLOOR);
        assert_eq!(s.value().data()[1], SIGMA_FLOOR + (1.0 - SIGMA_FLOOR) * 0.5);
        assert_eq!(s.value().data()[2], 1.0);
    }
}
