//! Optimal-transport conditional paths and their target velocity.

use crate::autodiff::Array;
use crate::error::{Error, Result};

/// Denominators at or below this are treated as singular.
pub const SINGULARITY_TOL: f64 = 1e-12;

fn check_t(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("t = {t} outside [0, 1]")));
    }
    Ok(())
}

fn check_sigma_min(sigma_min: f64) -> Result<()> {
    if !(0.0..1.0).contains(&sigma_min) {
        return Err(Error::invalid(format!("sigma_min = {sigma_min} outside [0, 1)")));
    }
    Ok(())
}

/// `z(t) = (1 − (1 − σ_min) t) z0 + t z1`.
pub fn ot_path(z0: &Array, z1: &Array, t: f64, sigma_min: f64) -> Result<Array> {
    check_t(t)?;
    check_sigma_min(sigma_min)?;
    if z0.shape() != z1.shape() {
        return Err(Error::invalid(format!(
            "endpoint shapes differ: {:?} vs {:?}",
            z0.shape(),
            z1.shape()
        )));
    }
    let c0 = 1.0 - (1.0 - sigma_min) * t;
    z0.zip_map(z1, |a, b| c0 * a + t * b)
}

/// `u(z_t, t) = (z1 − (1 − σ_min) z_t) / (1 − (1 − σ_min) t)`.
pub fn ot_target_field(z_t: &Array, z1: &Array, t: f64, sigma_min: f64) -> Result<Array> {
    check_t(t)?;
    check_sigma_min(sigma_min)?;
    if z_t.shape() != z1.shape() {
        return Err(Error::invalid("z_t and z1 shapes differ"));
    }
    let a = 1.0 - sigma_min;
    let denom = 1.0 - a * t;
    if denom <= SINGULARITY_TOL {
        return Err(Error::Singularity(denom));
    }
    z_t.zip_map(z1, |zt, x| (x - a * zt) / denom)
}

/// One draw along the path with its regression target.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSample {
    pub z0: Array,
    pub z1: Array,
    pub t: f64,
    pub z_t: Array,
    pub u_t: Array,
}

impl PathSample {
    /// The target is the path derivative `z1 − (1 − σ_min) z0`, which stays
    /// finite at `t = 1` where the field form is singular for `σ_min = 0`.
    pub fn new(z0: Array, z1: Array, t: f64, sigma_min: f64) -> Result<Self> {
        let z_t = ot_path(&z0, &z1, t, sigma_min)?;
        let a = 1.0 - sigma_min;
        let u_t = z1.zip_map(&z0, |x, z| x - a * z)?;
        if let Some(i) = u_t.first_non_finite() {
            return Err(Error::NumericInstability(format!("non-finite target at element {i}")));
        }
        Ok(PathSample { z0, z1, t, z_t, u_t })
    }
}
