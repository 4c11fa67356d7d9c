//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs every criterion by default. `ACCEPTANCE_ONLY=1,5,10` restricts the set.
//! Failures are reported but do not fail the process unless
//! `ACCEPTANCE_STRICT=1` is set, so slow directional checks can go red
//! without breaking `cargo test`.

use std::collections::HashMap;
use std::time::Instant;

use cfre_core::autodiff::{check_gradient, grad, Array, DiffNode};
use cfre_core::data::{stream_rng, Dataset};
use cfre_core::experiment::{evaluate_model, median, run_data, ExperimentConfig, RunMetrics};
use cfre_core::flow::{
    exact_trace, flow_matching_loss, flow_matching_rows, hutchinson_trace, integrate_sample, lipschitz_estimate,
    log_density_batch, standard_normal_log_pdf, upper_bound_value, AffineField, BatchDensity, BoundField, FlowConfig,
    FnField, OdeConfig, ProbeLaw, VectorFieldNet,
};
use cfre_core::linalg::{NormChain, DEFAULT_POWER_ITERS};
use cfre_core::metrics::{
    aurg, ause, default_fractions, random_baseline, removal_count, sparsification_curve, PredictionRecord, RankBy,
    SparsificationCurve,
};
use cfre_core::model::{
    base_nll_rows, cfre_loss, standardize_node, train, training_loss, BaseKind, CfreConfig,
    RegressionModel, TrainedCfre, TrainerKind,
};
use cfre_core::nn::Adam;
use cfre_core::tasks::TaskKind;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<(bool, String), String>;

fn draw(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Array {
    Array::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array {
    Array::matrix(rows, cols, (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

fn e<T, E: std::fmt::Display>(r: std::result::Result<T, E>) -> std::result::Result<T, String> {
    r.map_err(|x| x.to_string())
}

// ---------------------------------------------------------------- 1

/// One step of a random expression over 3×3 operands.
#[derive(Debug, Clone, Copy)]
enum Op {
    Tanh,
    Sigmoid,
    Softplus,
    ExpTanh,
    LogSq,
    Square,
    AbsLeaf(usize),
    Add(usize),
    Sub(usize),
    Mul(usize),
    Div(usize),
    Matmul(usize),
    MatmulLeft(usize),
    MeanExpand(usize),
    SumExpand(usize),
    Affine(f64, f64),
}

fn random_recipe(rng: &mut ChaCha8Rng, leaves: usize) -> Vec<Op> {
    let len = rng.random_range(3..9);
    (0..len)
        .map(|_| {
            let l = rng.random_range(0..leaves);
            match rng.random_range(0..16) {
                0 => Op::Tanh,
                1 => Op::Sigmoid,
                2 => Op::Softplus,
                3 => Op::ExpTanh,
                4 => Op::LogSq,
                5 => Op::Square,
                6 => Op::AbsLeaf(l),
                7 => Op::Add(l),
                8 => Op::Sub(l),
                9 => Op::Mul(l),
                10 => Op::Div(l),
                11 => Op::Matmul(l),
                12 => Op::MatmulLeft(l),
                13 => Op::MeanExpand(rng.random_range(0..2)),
                14 => Op::SumExpand(rng.random_range(0..2)),
                _ => Op::Affine(rng.random_range(-1.5..1.5), rng.random_range(-1.0..1.0)),
            }
        })
        .collect()
}

fn eval_recipe(recipe: &[Op], p: &[DiffNode]) -> cfre_core::Result<DiffNode> {
    let mut x = p[0].clone();
    for op in recipe {
        x = match *op {
            Op::Tanh => x.tanh(),
            Op::Sigmoid => x.sigmoid(),
            Op::Softplus => x.softplus(),
            Op::ExpTanh => x.tanh().exp(),
            Op::LogSq => x.square().add_scalar(0.5).log()?,
            Op::Square => x.tanh().square(),
            // leaves stay at least 0.2 away from the kink
            Op::AbsLeaf(l) => x.add(&p[l].abs())?,
            Op::Add(l) => x.add(&p[l])?,
            Op::Sub(l) => x.sub(&p[l])?,
            Op::Mul(l) => x.mul(&p[l])?,
            Op::Div(l) => x.div(&p[l].square().add_scalar(1.0))?,
            Op::Matmul(l) => x.matmul(&p[l])?.scale(0.5),
            Op::MatmulLeft(l) => p[l].matmul(&x)?.scale(0.5),
            Op::MeanExpand(a) => x.mean_axis(a)?.expand_axis(a, 3)?.add(&x)?,
            Op::SumExpand(a) => x.sum_axis(a)?.expand_axis(a, 3)?.mul(&x.sigmoid())?,
            Op::Affine(s, b) => x.scale(s).add_scalar(b),
        };
    }
    Ok(x.mean())
}

fn leaf_point(rng: &mut ChaCha8Rng, n: usize) -> Vec<Array> {
    (0..n)
        .map(|_| {
            let v = (0..9)
                .map(|_| {
                    let m: f64 = rng.random_range(0.2..1.0);
                    if rng.random::<bool>() {
                        m
                    } else {
                        -m
                    }
                })
                .collect();
            Array::matrix(3, 3, v).unwrap()
        })
        .collect()
}

fn small_problem() -> (RegressionModel, VectorFieldNet, Dataset, CfreConfig) {
    let mut rng = stream_rng(91, 0);
    let regression = RegressionModel::new(3, 2, 2, &[6], &mut rng).unwrap();
    let flow = VectorFieldNet::new(2, &[6], &mut rng).unwrap();
    let inputs = draw(&mut rng, 4, 3, -1.0, 1.0);
    let targets = normal(&mut rng, 4, 4);
    let batch = Dataset::new(inputs, targets, 2, 2).unwrap();
    let cfg = CfreConfig {
        c: 0.7,
        train_ode_steps: 4,
        ..CfreConfig::default()
    };
    (regression, flow, batch, cfg)
}

fn c1() -> Outcome {
    let mut rng = stream_rng(101, 0);
    let mut worst_expr = 0.0_f64;
    for _ in 0..100 {
        let recipe = random_recipe(&mut rng, 3);
        let point = leaf_point(&mut rng, 3);
        let rep = e(check_gradient(|p| eval_recipe(&recipe, p), &point, 1e-5))?;
        worst_expr = worst_expr.max(rep.max_rel_error);
    }

    let (regression, flow, batch, cfg) = small_problem();
    let nreg = regression.params().len();
    let point: Vec<Array> = regression.params().iter().chain(flow.params()).cloned().collect();

    // λ is a stop-gradient weight, so the checked function holds it at its
    // base-point value; everything else is live.
    let frozen_sigma = {
        let (_, s) = e(regression.forward(&regression.mlp().bind(false), &DiffNode::constant(batch.inputs.clone())))?;
        DiffNode::constant(s.value().clone())
    };
    let cfre_full = |p: &[DiffNode]| -> cfre_core::Result<DiffNode> {
        let mut r = stream_rng(7, 0);
        let field = BoundField::from_nodes(2, p[nreg..].to_vec())?;
        let x = DiffNode::constant(batch.inputs.clone());
        let y = DiffNode::constant(batch.targets.clone());
        let (mu, sigma) = regression.forward(&p[..nreg], &x)?;
        let reg_rows = base_nll_rows(BaseKind::Laplace, &mu, &sigma, &y)?;
        let x_bar = standardize_node(&y, &mu, &sigma)?.reshape(&[8, 2])?;
        let flow_rows = flow_matching_rows(&field, &x_bar, cfg.flow.sigma_min, &mut r)?.reshape(&[4, 2])?.sum_axis(1)?;
        cfre_loss(&reg_rows, &flow_rows, &frozen_sigma, cfg.c)
    };
    let cfre_rep = e(check_gradient(cfre_full, &point, 1e-6))?;

    // the library objective itself, differentiated in the flow parameters
    let reg_nodes: Vec<DiffNode> = regression.params().iter().cloned().map(DiffNode::constant).collect();
    let lib_flow = |p: &[DiffNode]| -> cfre_core::Result<DiffNode> {
        let field = BoundField::from_nodes(2, p.to_vec())?;
        training_loss(TrainerKind::Cfre, &regression, &reg_nodes, Some(&field), &batch, &cfg, &mut stream_rng(7, 0))
    };
    let lib_rep = e(check_gradient(lib_flow, flow.params(), 1e-6))?;

    let explicit = |p: &[DiffNode]| -> cfre_core::Result<DiffNode> {
        let field = BoundField::from_nodes(2, p[nreg..].to_vec())?;
        training_loss(TrainerKind::ExplicitNll, &regression, &p[..nreg], Some(&field), &batch, &cfg, &mut stream_rng(8, 0))
    };
    let explicit_rep = e(check_gradient(explicit, &point, 1e-6))?;

    let pass = worst_expr < 1e-4 && cfre_rep.max_rel_error < 1e-4 && lib_rep.max_rel_error < 1e-4 && explicit_rep.max_rel_error < 1e-3;
    Ok((
        pass,
        format!(
            "100 expressions max rel {worst_expr:.2e}; cfre loss {:.2e} (flow-only via trainer objective {:.2e}); explicit NLL 4-step unroll {:.2e}",
            cfre_rep.max_rel_error, lib_rep.max_rel_error, explicit_rep.max_rel_error
        ),
    ))
}

// ---------------------------------------------------------------- 2

fn svd_spectral(a: &Array) -> f64 {
    let (r, c) = a.dims2().unwrap();
    let m = nalgebra::DMatrix::from_row_slice(r, c, a.data());
    m.singular_values().max()
}

fn c2() -> Outcome {
    let mut rng = stream_rng(102, 0);
    let (mut worst_trace, mut worst_frob, mut worst_svd) = (f64::INFINITY, f64::INFINITY, 0.0_f64);
    let mut worst_over = f64::NEG_INFINITY;
    let mut all = true;
    for i in 0..1000 {
        let n = 1 + i % 12;
        let a = match i % 4 {
            0 => normal(&mut rng, n, n),
            1 => draw(&mut rng, n, n, 0.0, 1.0),
            // positive semidefinite: the trace bound is tightest here
            2 => {
                let b = normal(&mut rng, n, n);
                let bt = DiffNode::constant(b.clone()).transpose().unwrap();
                bt.matmul(&DiffNode::constant(b)).unwrap().value().clone()
            }
            _ => {
                let v: f64 = rng.random_range(-2.0..2.0);
                Array::matrix(n, n, (0..n * n).map(|k| if k % (n + 1) == 0 { 1.0 + 0.01 * v } else { 1e-3 * v }).collect()).unwrap()
            }
        };
        let chain = e(NormChain::evaluate(&a, 10_000))?;
        all &= chain.holds(1e-9);
        worst_trace = worst_trace.min(chain.trace_slack());
        worst_frob = worst_frob.min(chain.frobenius_slack());
        let svd = svd_spectral(&a);
        worst_over = worst_over.max((chain.spectral.value - svd) / svd.max(1e-12));
        // near-identity matrices have clustered singular values, where power
        // iteration converges too slowly for a tight two-sided comparison
        if i % 4 != 3 {
            worst_svd = worst_svd.max((chain.spectral.value - svd).abs() / svd.max(1e-12));
        }
    }
    let mut eq_gap = 0.0_f64;
    for n in 1..=12 {
        for c in [0.5, 1.0, 3.7] {
            let a = Array::matrix(n, n, (0..n * n).map(|k| if k % (n + 1) == 0 { c } else { 0.0 }).collect()).unwrap();
            let chain = e(NormChain::evaluate(&a, DEFAULT_POWER_ITERS))?;
            eq_gap = eq_gap.max(chain.trace_slack().abs() / chain.trace);
        }
    }
    let pass = all && eq_gap < 1e-12 && worst_svd < 1e-6 && worst_over <= 1e-12;
    Ok((
        pass,
        format!(
            "min slacks trace {worst_trace:.2e} frobenius {worst_frob:.2e}; power iteration vs SVD max rel {worst_svd:.1e} (never above SVD by more than {worst_over:.1e}); cI equality rel gap {eq_gap:.1e}"
        ),
    ))
}

// ---------------------------------------------------------------- 3

fn c3() -> Outcome {
    let mut rng = stream_rng(103, 0);
    let n = 10_000;
    let (mut within, mut worst_rel, mut worst_z, mut min_var) = (0, 0.0_f64, 0.0_f64, f64::INFINITY);
    let mut worst_case = String::new();
    for i in 0..50 {
        let d = 2 + i % 7;
        let net = e(VectorFieldNet::new(d, &[32, 32], &mut rng))?;
        let field = net.bind(false);
        let z = normal(&mut rng, 1, d);
        let t: f64 = rng.random();
        let exact = e(exact_trace(&field, &DiffNode::constant(z.clone()), t))?.item();
        let rows = Array::matrix(n, d, z.data().repeat(n)).unwrap();
        let est = e(hutchinson_trace(&field, &DiffNode::constant(rows), t, 1, ProbeLaw::Rademacher, &mut rng))?;
        let v = est.value().data();
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let rel = (mean - exact).abs() / exact.abs();
        let zs = (mean - exact).abs() / (var / n as f64).sqrt();
        if rel <= 0.02 {
            within += 1;
        } else if rel > worst_rel {
            worst_case = format!("d={d} exact {exact:.4} mean {mean:.4} sd/sqrt(N) {:.4}", (var / n as f64).sqrt());
        }
        worst_rel = worst_rel.max(rel);
        worst_z = worst_z.max(zs);
        min_var = min_var.min(var);
    }
    let pass = within == 50 && min_var > 0.0;
    let mut detail = format!(
        "{within}/50 within 2%; worst rel {worst_rel:.3}; worst |z| {worst_z:.2}; min single-probe var {min_var:.2e}"
    );
    if !worst_case.is_empty() {
        detail.push_str(&format!("; worst miss {worst_case}"));
    }
    Ok((pass, detail))
}

// ---------------------------------------------------------------- 4

fn c4() -> Outcome {
    let decay = AffineField::scaled_identity(1, -1.0);
    // dz/dt = −2t·z also lands on e⁻¹ at t = 1
    let timed = FnField::new(1, |z: &DiffNode, t: &DiffNode| z.mul(&t.scale(-2.0)));
    let target = (-1.0f64).exp();
    let one = Array::matrix(1, 1, vec![1.0]).unwrap();
    let err = |steps: usize, timed_field: bool| -> std::result::Result<f64, String> {
        let ode = OdeConfig::with_steps(steps);
        let z = if timed_field {
            e(integrate_sample(&timed, &one, &ode))?
        } else {
            e(integrate_sample(&decay, &one, &ode))?
        };
        Ok((z.item() - target).abs())
    };
    let at100 = err(100, false)?;
    let at100_t = err(100, true)?;
    let order = |timed_field: bool| -> std::result::Result<f64, String> {
        let steps = [4usize, 8, 16, 32];
        let logs: Vec<(f64, f64)> = steps
            .iter()
            .map(|&s| Ok(((s as f64).ln(), err(s, timed_field)?.ln())))
            .collect::<std::result::Result<_, String>>()?;
        // least-squares slope of log error against log steps
        let n = logs.len() as f64;
        let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
        let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
        Ok(-sxy / sxx)
    };
    let (p1, p2) = (order(false)?, order(true)?);
    let ok = |p: f64| (3.5..=4.5).contains(&p);
    let pass = at100 < 1e-6 && at100_t < 1e-6 && ok(p1) && ok(p2);
    Ok((
        pass,
        format!("|z(1) − e⁻¹| at 100 steps {at100:.1e} (time-dependent field {at100_t:.1e}); order {p1:.3} / {p2:.3}"),
    ))
}

// ---------------------------------------------------------------- 5, 6, 11

const GRID_N: usize = 161;
const GRID_HALF: f64 = 8.0;

fn laplace_draws(rng: &mut ChaCha8Rng, n: usize) -> Array {
    let v = (0..2 * n)
        .map(|_| {
            let u: f64 = rng.random_range(-0.5..0.5);
            -u.signum() * (1.0 - 2.0 * u.abs()).ln()
        })
        .collect();
    Array::matrix(n, 2, v).unwrap()
}

struct LaplaceFlow {
    net: VectorFieldNet,
    train_seconds: f64,
}

fn train_laplace_flow() -> std::result::Result<LaplaceFlow, String> {
    let start = Instant::now();
    let mut rng = stream_rng(11, 0);
    let mut net = e(VectorFieldNet::new(2, &[64, 64], &mut rng))?;
    let mut opt = Adam::new(1e-3);
    let cfg = FlowConfig::default();
    for _ in 0..2000 {
        let x = DiffNode::constant(laplace_draws(&mut rng, 512));
        let field = net.bind(true);
        let loss = e(flow_matching_loss(&field, &x, &cfg, &mut rng))?;
        let g = e(grad(&loss, field.params(), false))?.values();
        let p = e(opt.step(net.params(), &g))?;
        e(net.set_params(p))?;
    }
    Ok(LaplaceFlow {
        net,
        train_seconds: start.elapsed().as_secs_f64(),
    })
}

fn trapezoid_weight(i: usize) -> f64 {
    if i == 0 || i == GRID_N - 1 {
        0.5
    } else {
        1.0
    }
}

fn c5(flow: &LaplaceFlow) -> Outcome {
    let mut rng = stream_rng(105, 0);
    let cfg = FlowConfig::default();
    let ode = OdeConfig::default();

    let mut zero = e(VectorFieldNet::new(2, &[16, 16], &mut rng))?;
    let zeros = zero.params().iter().map(|p| Array::zeros(p.shape()).unwrap()).collect();
    e(zero.set_params(zeros))?;
    let pts = normal(&mut rng, 1000, 2).map(|v| 2.0 * v);
    let got = e(log_density_batch(&zero, &pts, &cfg, &ode, &mut rng))?;
    let identity_dev = (0..1000)
        .map(|i| (got.log_prob[i] - standard_normal_log_pdf(pts.row(i))).abs())
        .fold(0.0, f64::max);

    let h = 2.0 * GRID_HALF / (GRID_N - 1) as f64;
    let axis: Vec<f64> = (0..GRID_N).map(|i| -GRID_HALF + i as f64 * h).collect();
    let mut grid = Vec::with_capacity(GRID_N * GRID_N * 2);
    for &x in &axis {
        for &y in &axis {
            grid.push(x);
            grid.push(y);
        }
    }
    let grid = Array::matrix(GRID_N * GRID_N, 2, grid).unwrap();
    let dens = e(log_density_batch(&flow.net, &grid, &cfg, &ode, &mut rng))?;
    let (mut mass, mut m2, mut m_abs, mut m1) = (0.0, [0.0; 2], [0.0; 2], [0.0; 2]);
    for i in 0..GRID_N {
        for j in 0..GRID_N {
            let w = trapezoid_weight(i) * trapezoid_weight(j) * h * h * dens.log_prob[i * GRID_N + j].exp();
            mass += w;
            for (a, v) in [axis[i], axis[j]].into_iter().enumerate() {
                m1[a] += w * v;
                m2[a] += w * v * v;
                m_abs[a] += w * v.abs();
            }
        }
    }
    let quad = |m: [f64; 2]| [m[0] / mass, m[1] / mass];
    let (q1, q2, qa) = (quad(m1), quad(m2), quad(m_abs));

    let samples = e(integrate_sample(&flow.net, &normal(&mut rng, 10_000, 2), &ode))?;
    let (mut s1, mut s2, mut sa) = ([0.0; 2], [0.0; 2], [0.0; 2]);
    for r in 0..samples.rows() {
        for (a, &v) in samples.row(r).iter().enumerate() {
            s1[a] += v / 1e4;
            s2[a] += v * v / 1e4;
            sa[a] += v.abs() / 1e4;
        }
    }
    let mut worst_rel = 0.0_f64;
    let mut worst_mean = 0.0_f64;
    for a in 0..2 {
        worst_rel = worst_rel.max((s2[a] - q2[a]).abs() / q2[a]).max((sa[a] - qa[a]).abs() / qa[a]);
        // means are near zero, so compare them on the scale of the spread
        worst_mean = worst_mean.max((s1[a] - q1[a]).abs() / q2[a].sqrt());
    }
    let pass = identity_dev < 1e-12 && (mass - 1.0).abs() <= 0.05 && worst_rel <= 0.05 && worst_mean <= 0.05;
    Ok((
        pass,
        format!(
            "identity max dev {identity_dev:.1e}; mass {mass:.4}; E x² sample ({:.3}, {:.3}) vs quadrature ({:.3}, {:.3}); E|x| ({:.3}, {:.3}) vs ({:.3}, {:.3}); worst rel {worst_rel:.3}, mean gap {worst_mean:.3} sd",
            s2[0], s2[1], q2[0], q2[1], sa[0], sa[1], qa[0], qa[1]
        ),
    ))
}

/// `∫ p log p` of the unit-scale Laplace law by quadrature, for two axes.
fn laplace_loglik_quadrature() -> f64 {
    let n = 400_001;
    let half = 50.0;
    let h = 2.0 * half / (n - 1) as f64;
    let mut acc = 0.0;
    for i in 0..n {
        let x = -half + i as f64 * h;
        let lp = -(2f64).ln() - x.abs();
        let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
        acc += w * h * lp.exp() * lp;
    }
    2.0 * acc
}

fn held_out_density(flow: &LaplaceFlow) -> std::result::Result<(BatchDensity, f64), String> {
    let start = Instant::now();
    let mut rng = stream_rng(106, 0);
    let x = laplace_draws(&mut rng, 10_000);
    let d = e(log_density_batch(&flow.net, &x, &FlowConfig::default(), &OdeConfig::default(), &mut rng))?;
    Ok((d, start.elapsed().as_secs_f64()))
}

fn c6(flow: &LaplaceFlow, held: &(BatchDensity, f64)) -> Outcome {
    let quad = laplace_loglik_quadrature();
    let closed = -2.0 * (1.0 + 2f64.ln());
    let mean = held.0.log_prob.iter().sum::<f64>() / held.0.log_prob.len() as f64;
    let gap = (mean - quad).abs();
    let seconds = flow.train_seconds + held.1;
    let pass = (quad - closed).abs() < 1e-6 && gap < 0.10 && seconds < 180.0;
    Ok((
        pass,
        format!(
            "mean held-out loglik {mean:.4} vs quadrature {quad:.6} (closed form {closed:.6}); gap {gap:.4}; train + eval {seconds:.0} s"
        ),
    ))
}

fn c11(flow: &LaplaceFlow, held: &(BatchDensity, f64)) -> Outcome {
    let mut rng = stream_rng(111, 0);
    let lip = e(lipschitz_estimate(&flow.net, 4096, &mut rng))?;
    let d = &held.0;
    let mut min_slack = f64::INFINITY;
    let mut violations = 0;
    for i in 0..1000 {
        let nll = -d.log_prob[i];
        let ub = e(upper_bound_value(standard_normal_log_pdf(d.z0_terminal.row(i)), 2, lip.value))?;
        let slack = ub - nll;
        if slack < 0.0 {
            violations += 1;
        }
        min_slack = min_slack.min(slack);
    }
    Ok((
        violations == 0,
        format!(
            "L̂ = {:.4} from {} samples (converged: {}); min slack {min_slack:.4}; {violations} violations over 1000 points",
            lip.value, lip.samples, lip.all_converged
        ),
    ))
}

// ---------------------------------------------------------------- 7, 8, 9

const TOY_EPOCHS: usize = 60;
const BUDGET_EPOCHS: usize = 10;

fn toy_config(epochs: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        model: CfreConfig {
            epochs,
            val_monitor: 32,
            ..CfreConfig::default()
        },
        ..ExperimentConfig::default()
    };
    cfg.task.kind = TaskKind::HeavyTailMixture;
    cfg
}

struct Run {
    metrics: RunMetrics,
    model: TrainedCfre,
}

/// Trained runs keyed by (trainer, c bits, seed, epochs).
#[derive(Default)]
struct Runs(HashMap<(TrainerKind, u64, u64, usize), Run>);

impl Runs {
    fn get(&mut self, trainer: TrainerKind, c: f64, seed: u64, epochs: usize) -> std::result::Result<&Run, String> {
        let key = (trainer, c.to_bits(), seed, epochs);
        if !self.0.contains_key(&key) {
            let cfg = toy_config(epochs);
            let model_cfg = CfreConfig {
                seed,
                c,
                ..cfg.model.clone()
            };
            let (train_set, val, test) = e(run_data(&cfg, seed))?;
            let model = e(train(trainer, &train_set, Some(&val), &model_cfg))?;
            let (metrics, _, _) = e(evaluate_model(&model, &val, &test, &model_cfg.ode, seed))?;
            self.0.insert(key, Run { metrics, model });
        }
        Ok(&self.0[&key])
    }

    fn median_of(
        &mut self,
        trainer: TrainerKind,
        c: f64,
        seeds: &[u64],
        epochs: usize,
        pick: fn(&RunMetrics) -> f64,
    ) -> std::result::Result<f64, String> {
        let mut v = Vec::new();
        for &s in seeds {
            v.push(pick(&self.get(trainer, c, s, epochs)?.metrics));
        }
        Ok(median(&v))
    }
}

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn c7(runs: &mut Runs) -> Outcome {
    let start = Instant::now();
    let ause_of = |m: &RunMetrics| m.ause;
    let nll_of = |m: &RunMetrics| m.test_nll;
    let g = TrainerKind::GaussianOnly;
    let l = TrainerKind::LaplaceOnly;
    let c = TrainerKind::Cfre;
    let a_g = runs.median_of(g, 0.1, &SEEDS, TOY_EPOCHS, ause_of)?;
    let a_l = runs.median_of(l, 0.1, &SEEDS, TOY_EPOCHS, ause_of)?;
    let a_c = runs.median_of(c, 0.1, &SEEDS, TOY_EPOCHS, ause_of)?;
    let n_g = runs.median_of(g, 0.1, &SEEDS, TOY_EPOCHS, nll_of)?;
    let n_l = runs.median_of(l, 0.1, &SEEDS, TOY_EPOCHS, nll_of)?;
    let n_c = runs.median_of(c, 0.1, &SEEDS, TOY_EPOCHS, nll_of)?;
    let mut per_seed = Vec::new();
    for s in SEEDS {
        let a = runs.get(g, 0.1, s, TOY_EPOCHS)?.metrics.ause;
        let b = runs.get(l, 0.1, s, TOY_EPOCHS)?.metrics.ause;
        let d = runs.get(c, 0.1, s, TOY_EPOCHS)?.metrics.ause;
        per_seed.push(format!("{a:.4}/{b:.4}/{d:.4}"));
    }
    let seconds = start.elapsed().as_secs_f64();
    let pass = a_l < a_g && a_c < a_l && n_c < n_l && n_l < n_g && seconds < 25.0 * 60.0;
    Ok((
        pass,
        format!(
            "median AUSE gaussian {a_g:.4} laplace {a_l:.4} cfre {a_c:.4}; median test NLL gaussian {n_g:.4} laplace {n_l:.4} cfre {n_c:.4}; per-seed AUSE g/l/c {}; {seconds:.0} s",
            per_seed.join(" ")
        ),
    ))
}

const BUDGET_SEEDS: [u64; 3] = [0, 1, 2];

fn c8(runs: &mut Runs) -> Outcome {
    let nll_of = |m: &RunMetrics| m.test_nll;
    let c = runs.median_of(TrainerKind::Cfre, 0.1, &BUDGET_SEEDS, BUDGET_EPOCHS, nll_of)?;
    let x = runs.median_of(TrainerKind::ExplicitNll, 0.1, &BUDGET_SEEDS, BUDGET_EPOCHS, nll_of)?;
    let mut per_seed = Vec::new();
    for s in BUDGET_SEEDS {
        let a = runs.get(TrainerKind::Cfre, 0.1, s, BUDGET_EPOCHS)?.metrics.test_nll;
        let b = runs.get(TrainerKind::ExplicitNll, 0.1, s, BUDGET_EPOCHS)?.metrics.test_nll;
        per_seed.push(format!("{a:.3}/{b:.3}"));
    }
    Ok((
        c <= x,
        format!(
            "{BUDGET_EPOCHS} epochs each; median test NLL cfre {c:.4} vs explicit {x:.4}; per seed cfre/explicit {}",
            per_seed.join(" ")
        ),
    ))
}

const SWEEP_SEEDS: [u64; 3] = [0, 1, 2];

fn c9(runs: &mut Runs) -> Outcome {
    let mut identical = 0;
    for s in SEEDS {
        let lap = runs.get(TrainerKind::LaplaceOnly, 0.1, s, TOY_EPOCHS)?;
        let (lm, lp, lh) = (lap.metrics.clone(), lap.model.regression.params().to_vec(), lap.model.history.clone());
        let zero = runs.get(TrainerKind::Cfre, 0.0, s, TOY_EPOCHS)?;
        let m = &zero.metrics;
        let same_metrics = [
            (m.val_nll, lm.val_nll),
            (m.test_nll, lm.test_nll),
            (m.ause, lm.ause),
            (m.aurg, lm.aurg),
            (m.pcc, lm.pcc),
        ]
        .iter()
        .all(|(a, b)| a.to_bits() == b.to_bits());
        let same_params = zero.model.regression.params() == lp.as_slice();
        let same_history = zero.model.history.len() == lh.len()
            && zero.model.history.iter().zip(&lh).all(|(a, b)| {
                [(a.l_reg, b.l_reg), (a.l_flow, b.l_flow), (a.l_total, b.l_total), (a.val_nll, b.val_nll)]
                    .iter()
                    .all(|(x, y)| x.to_bits() == y.to_bits())
            });
        if same_metrics && same_params && same_history {
            identical += 1;
        }
    }
    let val_of = |m: &RunMetrics| m.val_nll;
    let mut table = Vec::new();
    for c in [0.0, 0.05, 0.1, 0.2, 0.5] {
        table.push((c, runs.median_of(TrainerKind::Cfre, c, &SWEEP_SEEDS, TOY_EPOCHS, val_of)?));
    }
    let best = table.iter().cloned().fold((f64::NAN, f64::INFINITY), |b, x| if x.1 < b.1 { x } else { b });
    // the required reading is "best c is not 0"; grid-interior is reported too
    let nonzero = best.0 != 0.0;
    let grid_interior = nonzero && best.0 != 0.5;
    let cells: Vec<String> = table.iter().map(|(c, v)| format!("c={c}: {v:.4}")).collect();
    Ok((
        identical == SEEDS.len() && nonzero,
        format!(
            "c=0 bit-identical to laplace_only on {identical}/{} seeds; median val NLL {}; best c = {} (interior to the grid: {grid_interior})",
            SEEDS.len(),
            cells.join(", "),
            best.0
        ),
    ))
}

// ---------------------------------------------------------------- 10

/// Remove the top-ranked record one at a time (earliest index on ties) and
/// average whatever is left, in index order.
fn brute_curve(errors: &[f64], keys: &[f64], fractions: &[f64]) -> (Vec<f64>, bool) {
    let n = errors.len();
    let retained = |gone: &[bool]| {
        let mut s = 0.0;
        let mut c = 0usize;
        for i in 0..n {
            if !gone[i] {
                s += errors[i];
                c += 1;
            }
        }
        s / c as f64
    };
    let full = retained(&vec![false; n]);
    let normalized = full > 0.0;
    let mut out = Vec::new();
    for &phi in fractions {
        let m = removal_count(phi, n).min(n - 1);
        let mut gone = vec![false; n];
        for _ in 0..m {
            let mut pick = usize::MAX;
            for i in 0..n {
                if !gone[i] && (pick == usize::MAX || keys[i] > keys[pick]) {
                    pick = i;
                }
            }
            gone[pick] = true;
        }
        let v = retained(&gone);
        out.push(if normalized { v / full } else { v });
    }
    (out, normalized)
}

fn brute_area(fractions: &[f64], y: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 1..fractions.len() {
        acc += 0.5 * (fractions[i] - fractions[i - 1]) * (y[i - 1] + y[i]);
    }
    acc
}

fn records(errors: &[f64], unc: &[f64]) -> Vec<PredictionRecord> {
    errors
        .iter()
        .zip(unc)
        .map(|(&error, &uncertainty)| PredictionRecord {
            error,
            uncertainty,
            confidence: 0.5,
        })
        .collect()
}

/// Exact expectation of the normalized curve over all removal orders.
fn exhaustive_random(errors: &[f64], fractions: &[f64]) -> Vec<f64> {
    let n = errors.len();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut acc = vec![0.0; fractions.len()];
    let mut count = 0usize;
    let full = errors.iter().sum::<f64>() / n as f64;
    loop {
        for (k, &phi) in fractions.iter().enumerate() {
            let m = removal_count(phi, n).min(n - 1);
            let kept: f64 = perm[m..].iter().map(|&i| errors[i]).sum();
            acc[k] += kept / (n - m) as f64 / full;
        }
        count += 1;
        // next lexicographic permutation
        let Some(i) = (0..n.saturating_sub(1)).rev().find(|&i| perm[i] < perm[i + 1]) else {
            break;
        };
        let j = (i + 1..n).rev().find(|&j| perm[j] > perm[i]).unwrap();
        perm.swap(i, j);
        perm[i + 1..].reverse();
    }
    acc.into_iter().map(|v| v / count as f64).collect()
}

fn c10() -> Outcome {
    let mut rng = stream_rng(110, 0);
    let grids: [Vec<f64>; 3] = [default_fractions(), vec![0.0, 0.2, 0.4], (0..20).map(|i| i as f64 / 20.0).collect()];
    let mut sets = 0;
    let mut mismatches = Vec::new();
    for n in 1..=12usize {
        for trial in 0..120 {
            // few distinct levels so ties are common
            let levels = if trial % 3 == 0 { 2 } else { 5 };
            let errors: Vec<f64> = (0..n)
                .map(|_| if trial % 17 == 0 { 0.0 } else { rng.random_range(0..levels) as f64 * 0.5 })
                .collect();
            let unc: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 * 0.25 + 0.1).collect();
            let recs = records(&errors, &unc);
            for fr in &grids {
                sets += 1;
                let model = e(sparsification_curve(&recs, RankBy::Uncertainty, fr))?;
                let oracle = e(sparsification_curve(&recs, RankBy::Error, fr))?;
                let (bm, norm_m) = brute_curve(&errors, &unc, fr);
                let (bo, _) = brute_curve(&errors, &errors, fr);
                let ones = vec![1.0; fr.len()];
                let flat = SparsificationCurve::constant(fr, 1.0);
                let diff: Vec<f64> = bm.iter().zip(&bo).map(|(a, b)| a - b).collect();
                let gain: Vec<f64> = ones.iter().zip(&bm).map(|(a, b)| a - b).collect();
                let ok = model.remaining_error == bm
                    && model.normalized == norm_m
                    && oracle.remaining_error == bo
                    && e(ause(&model, &oracle))?.to_bits() == brute_area(fr, &diff).to_bits()
                    && (!norm_m || e(aurg(&model, &flat))?.to_bits() == brute_area(fr, &gain).to_bits());
                if !ok && mismatches.len() < 3 {
                    mismatches.push(format!("n={n} errors {errors:?} unc {unc:?}"));
                }
            }
        }
    }

    // the seeded random baseline against the exact expectation over all orders
    let mut worst_random = 0.0_f64;
    for n in 2..=7usize {
        let errors: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..3.0)).collect();
        let fr = &grids[2];
        let exact = exhaustive_random(&errors, fr);
        let seeded = e(random_baseline(&records(&errors, &errors), fr, 20_000, 3))?;
        for (a, b) in seeded.remaining_error.iter().zip(&exact) {
            worst_random = worst_random.max((a - b).abs());
        }
    }

    let hand = records(&[5.0, 4.0, 3.0, 2.0, 1.0], &[5.0, 4.0, 3.0, 2.0, 1.0]);
    let fr = [0.0, 0.2, 0.4];
    let matching = e(sparsification_curve(&hand, RankBy::Uncertainty, &fr))?;
    let want = [1.0, 2.5 / 3.0, 2.0 / 3.0];
    let hand_curve = matching.remaining_error.iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-12);
    let worst = records(&[5.0, 4.0, 3.0, 2.0, 1.0], &[1.0, 2.0, 3.0, 4.0, 5.0]);
    let worst_curve = e(sparsification_curve(&worst, RankBy::Uncertainty, &fr))?;
    let hand_ause = e(ause(&worst_curve, &matching))?;
    let hand_aurg = e(aurg(&matching, &SparsificationCurve::constant(&fr, 1.0)))?;
    let hand_ok = hand_curve && (hand_ause - 2.0 / 15.0).abs() < 1e-12 && (hand_aurg - 1.0 / 15.0).abs() < 1e-12;

    let pass = mismatches.is_empty() && hand_ok && worst_random < 0.02;
    let mut detail = format!(
        "{sets} record sets (sizes 1..=12, tied and all-zero cases) exact; seeded random baseline vs exhaustive expectation max gap {worst_random:.4}; hand case curve {:?}, AUSE {hand_ause:.5}, AURG {hand_aurg:.5}",
        matching.remaining_error
    );
    if !mismatches.is_empty() {
        detail.push_str(&format!("; mismatches e.g. {}", mismatches.join(" | ")));
    }
    Ok((pass, detail))
}

// ---------------------------------------------------------------- driver

fn selected() -> Option<Vec<usize>> {
    let s = std::env::var("ACCEPTANCE_ONLY").ok()?;
    Some(s.split(',').filter_map(|x| x.trim().parse().ok()).collect())
}

fn main() {
    let only = selected();
    let wanted = |i: usize| only.as_ref().map_or(true, |v| v.contains(&i));
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut failures = 0;
    let mut report = |i: usize, name: &str, start: Instant, out: Outcome| {
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match out {
            Ok((true, d)) => ("PASS", d),
            Ok((false, d)) => ("FAIL", d),
            Err(err) => ("FAIL", format!("error: {err}")),
        };
        if tag == "FAIL" {
            failures += 1;
        }
        println!("{tag} criterion {i:>2} {name} ({secs:.1} s): {detail}");
    };

    let simple: [(usize, &str, fn() -> Outcome); 4] = [
        (1, "gradient-correctness", c1),
        (2, "norm-inequalities", c2),
        (3, "hutchinson-trace", c3),
        (4, "ode-integrator", c4),
    ];
    for (i, name, f) in simple {
        if wanted(i) {
            let t = Instant::now();
            report(i, name, t, f());
        }
    }

    if wanted(5) || wanted(6) || wanted(11) {
        let t = Instant::now();
        match train_laplace_flow() {
            Ok(flow) => {
                println!("     trained 2-D Laplace flow in {:.1} s", flow.train_seconds);
                if wanted(5) {
                    let t = Instant::now();
                    report(5, "density-conservation", t, c5(&flow));
                }
                if wanted(6) || wanted(11) {
                    let t = Instant::now();
                    match held_out_density(&flow) {
                        Ok(held) => {
                            if wanted(6) {
                                report(6, "distribution-recovery", t, c6(&flow, &held));
                            }
                            if wanted(11) {
                                let t = Instant::now();
                                report(11, "upper-bound", t, c11(&flow, &held));
                            }
                        }
                        Err(err) => {
                            for i in [6, 11].into_iter().filter(|&i| wanted(i)) {
                                report(i, "held-out density", t, Err(err.clone()));
                            }
                        }
                    }
                }
            }
            Err(err) => {
                for i in [5, 6, 11].into_iter().filter(|&i| wanted(i)) {
                    report(i, "laplace flow", t, Err(err.clone()));
                }
            }
        }
    }

    let mut runs = Runs::default();
    let toy: [(usize, &str, fn(&mut Runs) -> Outcome); 3] = [
        (7, "base-law-ordering", c7),
        (8, "equal-budget-vs-explicit", c8),
        (9, "c-sweep", c9),
    ];
    for (i, name, f) in toy {
        if wanted(i) {
            let t = Instant::now();
            report(i, name, t, f(&mut runs));
        }
    }

    if wanted(10) {
        let t = Instant::now();
        report(10, "uq-metric-oracles", t, c10());
    }

    println!("acceptance: {failures} failing criteria");
    if strict && failures > 0 {
        std::process::exit(1);
    }
}
