//! Fast invariant checks, cheap enough to run on every install.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{check_gradient, Array, DiffNode};
use crate::data::stream_rng;
use crate::error::{Error, Result};
use crate::experiment::ExperimentConfig;
use crate::flow::{
    exact_trace, hutchinson_trace, integrate_sample, log_density_batch, standard_normal_log_pdf, AffineField,
    FlowConfig, OdeConfig, ProbeLaw, VectorFieldNet,
};
use crate::linalg::{NormChain, DEFAULT_POWER_ITERS};
use crate::metrics::{ause, sparsification_curve, PredictionRecord, RankBy};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn gradient() -> Result<String> {
    let mut rng = stream_rng(1, 0);
    let mut draw = |r: usize, c: usize| {
        Array::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    };
    let point = [draw(3, 4), draw(4, 2), draw(3, 2)];
    let f = |p: &[DiffNode]| -> Result<DiffNode> {
        let h = p[0].matmul(&p[1])?.tanh();
        Ok(h.mul(&p[2].sigmoid())?.add(&p[2].exp())?.square().mean())
    };
    let rep = check_gradient(f, &point, 1e-6)?;
    ensure(rep.max_rel_error < 1e-4, format!("max relative error {:.2e}", rep.max_rel_error))
}

fn norm_chain() -> Result<String> {
    let mut rng = stream_rng(2, 0);
    for i in 0..100 {
        let n = 2 + i % 7;
        let a = Array::matrix(n, n, (0..n * n).map(|_| rng.sample(StandardNormal)).collect())?;
        let chain = NormChain::evaluate(&a, DEFAULT_POWER_ITERS)?;
        if !chain.holds(1e-9) {
            return Err(Error::NumericInstability(format!("matrix {i}: {chain:?}")));
        }
    }
    Ok("100 random matrices".into())
}

fn hutchinson() -> Result<String> {
    let mut rng = stream_rng(3, 0);
    let net = VectorFieldNet::new(3, &[16], &mut rng)?;
    let field = net.bind(false);
    let z = DiffNode::constant(Array::matrix(1, 3, vec![0.3, -0.2, 0.5])?);
    let exact = exact_trace(&field, &z, 0.4)?.item();
    let n = 4000;
    let rows = Array::matrix(n, 3, z.value().data().repeat(n))?;
    let est = hutchinson_trace(&field, &DiffNode::constant(rows), 0.4, 1, ProbeLaw::Rademacher, &mut rng)?;
    let v = est.value().data();
    let mean = v.iter().sum::<f64>() / n as f64;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    // the estimator is unbiased, so judge the gap in standard errors
    let z = (mean - exact).abs() / (var / n as f64).sqrt();
    ensure(var > 0.0 && z < 5.0, format!("exact {exact:.5}, mean {mean:.5}, z {z:.2}"))
}

fn rk4_decay() -> Result<String> {
    let field = AffineField::scaled_identity(1, -1.0);
    let z1 = integrate_sample(&field, &Array::matrix(1, 1, vec![1.0])?, &OdeConfig::with_steps(100))?;
    let err = (z1.item() - (-1.0f64).exp()).abs();
    ensure(err < 1e-6, format!("error {err:.2e}"))
}

fn identity_density() -> Result<String> {
    let x = Array::matrix(3, 2, vec![0.0, 0.0, 1.5, -0.5, -2.0, 3.0])?;
    let mut rng = stream_rng(4, 0);
    let got = log_density_batch(&AffineField::zero(2), &x, &FlowConfig::default(), &OdeConfig::default(), &mut rng)?;
    let worst = (0..3)
        .map(|i| (got.log_prob[i] - standard_normal_log_pdf(x.row(i))).abs())
        .fold(0.0, f64::max);
    ensure(worst < 1e-12, format!("max deviation {worst:.1e}"))
}

fn sparsification() -> Result<String> {
    let e = [5.0, 4.0, 3.0, 2.0, 1.0];
    let recs = |u: &[f64]| -> Vec<PredictionRecord> {
        e.iter()
            .zip(u)
            .map(|(&error, &uncertainty)| PredictionRecord {
                error,
                uncertainty,
                confidence: 0.5,
            })
            .collect()
    };
    let fr = [0.0, 0.2, 0.4];
    let oracle = sparsification_curve(&recs(&e), RankBy::Error, &fr)?;
    let worst = sparsification_curve(&recs(&[1.0, 2.0, 3.0, 4.0, 5.0]), RankBy::Uncertainty, &fr)?;
    let a = ause(&worst, &oracle)?;
    let hand = 0.1 / 3.0 + 0.1 * (1.0 / 3.0 + 2.0 / 3.0);
    ensure((a - hand).abs() < 1e-12, format!("AUSE {a:.6} vs {hand:.6}"))
}

fn config_round_trip() -> Result<String> {
    let cfg = ExperimentConfig {
        c_sweep: Some(vec![0.0, 0.05, 0.1]),
        seeds: vec![0, 1, 2],
        ..ExperimentConfig::default()
    };
    let back = ExperimentConfig::from_toml(&cfg.to_toml()?)?;
    ensure(back == cfg, "TOML round trip".into())
}

fn ensure(ok: bool, detail: String) -> Result<String> {
    if ok {
        Ok(detail)
    } else {
        Err(Error::NumericInstability(detail))
    }
}

/// Run every check; failures are reported, not propagated.
pub fn run_selftest() -> Vec<Check> {
    let checks: [(&'static str, fn() -> Result<String>); 7] = [
        ("gradient", gradient),
        ("norm_chain", norm_chain),
        ("hutchinson", hutchinson),
        ("rk4_decay", rk4_decay),
        ("identity_density", identity_density),
        ("sparsification", sparsification),
        ("config_round_trip", config_round_trip),
    ];
    checks
        .into_iter()
        .map(|(name, f)| match f() {
            Ok(detail) => Check {
                name,
                passed: true,
                detail,
            },
            Err(e) => Check {
                name,
                passed: false,
                detail: e.to_string(),
            },
        })
        .collect()
}
