use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cfre_core::autodiff::Array;
use cfre_core::data::stream_rng;
use cfre_core::experiment::{
    density_grid, evaluate_model, group_medians, load_run_metrics, run_data, run_experiment, run_label, sample_joint,
    ExperimentConfig, GridSpec,
};
use cfre_core::metrics::{default_fractions, evaluate_on, read_records_csv, write_records_csv};
use cfre_core::model::{Checkpoint, TrainerKind};
use cfre_core::selftest::run_selftest;
use cfre_core::Error;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cfre", version, about = "Heteroscedastic regression with flow-refined residual densities")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate every (c, seed) run of an experiment config.
    Train(TrainArgs),
    /// Held-out NLL and sparsification metrics for a checkpoint.
    Eval(EvalArgs),
    /// Export the predicted density of one joint over a 2-D grid.
    DensityGrid(GridArgs),
    /// Sparsification curves and metrics from a prediction CSV.
    Sparsify(SparsifyArgs),
    /// Join run metrics into one table with per-group medians.
    Compare(CompareArgs),
    /// Run the fast invariant suite.
    Selftest,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replaces the config's seed list; repeatable.
    #[arg(long)]
    seed: Vec<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    trainer: Option<String>,
    /// Single c value; replaces any sweep in the config.
    #[arg(long)]
    c: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Config that generated the data; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GridArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated input features; defaults to the config's probe input.
    #[arg(long)]
    input: Option<String>,
    #[arg(long)]
    joint: Option<usize>,
    #[arg(long, num_args = 2, value_names = ["A", "B"], allow_hyphen_values = true)]
    grid_range: Option<Vec<f64>>,
    #[arg(long)]
    grid_steps: Option<usize>,
    /// Also export N draws for the same joint.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SparsifyArgs {
    /// CSV with header `error,uncertainty,confidence`.
    #[arg(long)]
    predictions: PathBuf,
    /// Seed of the random-removal baseline.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated fraction grid; defaults to 0, 0.01, …, 0.99.
    #[arg(long)]
    fractions: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    /// metrics.json files, summary CSVs or experiment directories.
    #[arg(required = true)]
    paths: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig, Error> {
    let cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn parse_list(s: &str, what: &str) -> Result<Vec<f64>, Error> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidInput(format!("bad {what} value `{v}`")))
        })
        .collect()
}

fn train(a: TrainArgs) -> Result<(), Error> {
    let mut cfg = load_config(a.config.as_deref())?;
    if !a.seed.is_empty() {
        cfg.seeds = a.seed;
    }
    if let Some(out) = a.out {
        cfg.out_dir = out;
    }
    if let Some(t) = a.trainer {
        cfg.trainer = TrainerKind::parse(&t)?;
    }
    if let Some(c) = a.c {
        cfg.model.c = c;
        cfg.c_sweep = None;
    }
    let rep = run_experiment(&cfg)?;
    println!("run,val_nll,test_nll,ause,aurg,pcc,seconds");
    for r in &rep.runs {
        let m = &r.metrics;
        println!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.1}",
            run_label(m.trainer, m.c, m.seed),
            m.val_nll,
            m.test_nll,
            m.ause,
            m.aurg,
            m.pcc,
            r.wall_clock_seconds
        );
    }
    eprintln!("summary: {}", rep.summary_path.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<(), Error> {
    let cfg = load_config(a.config.as_deref())?;
    let model = Checkpoint::load(&a.checkpoint)?.into_model()?;
    let seed = a.seed.unwrap_or(cfg.seeds[0]);
    let (_, val, test) = run_data(&cfg, seed)?;
    let (metrics, report, records) = evaluate_model(&model, &val, &test, &cfg.model.ode, seed)?;
    let json = serde_json::to_string_pretty(&metrics)?;
    if let Some(out) = a.out {
        fs::create_dir_all(&out)?;
        fs::write(out.join("metrics.json"), format!("{json}\n"))?;
        report.write_curves_csv(&out.join("sparsification.csv"))?;
        write_records_csv(&out.join("predictions.csv"), &records)?;
    }
    println!("{json}");
    Ok(())
}

fn grid(a: GridArgs) -> Result<(), Error> {
    let cfg = load_config(a.config.as_deref())?;
    let model = Checkpoint::load(&a.checkpoint)?.into_model()?;
    let seed = a.seed.unwrap_or(cfg.seeds[0]);
    let input = match &a.input {
        Some(s) => {
            let v = parse_list(s, "input")?;
            Array::matrix(1, v.len(), v)?
        }
        None => {
            let (_, _, test) = run_data(&cfg, seed)?;
            test.select(&[cfg.probe_index.min(test.len() - 1)])?.inputs
        }
    };
    if input.cols() != model.regression.input_dim() {
        return Err(Error::InvalidInput(format!(
            "input has {} features, checkpoint expects {}",
            input.cols(),
            model.regression.input_dim()
        )));
    }
    let spec = GridSpec {
        range: match a.grid_range {
            Some(r) => [r[0], r[1]],
            None => cfg.grid.range,
        },
        steps: a.grid_steps.unwrap_or(cfg.grid.steps),
        joint: a.joint.unwrap_or(cfg.grid.joint),
    };
    let ode = &cfg.model.ode;
    fs::create_dir_all(&a.out)?;
    let g = density_grid(&model, &input, &spec, ode)?;
    g.write_csv(&a.out.join("density_grid.csv"))?;
    if let Some(n) = a.samples.filter(|&n| n > 0) {
        let mut rng = stream_rng(seed, 20);
        let draws = sample_joint(&model, &input, spec.joint, n, ode, &mut rng)?;
        let mut s = String::from("x,y\n");
        for r in 0..draws.rows() {
            let row = draws.row(r);
            s.push_str(&format!("{},{}\n", row[0], row[1]));
        }
        fs::write(a.out.join("samples.csv"), s)?;
    }
    eprintln!("wrote {} grid points to {}", g.points.len(), a.out.display());
    Ok(())
}

fn sparsify(a: SparsifyArgs) -> Result<(), Error> {
    let records = read_records_csv(&a.predictions)?;
    let fractions = match &a.fractions {
        Some(s) => parse_list(s, "fraction")?,
        None => default_fractions(),
    };
    let report = evaluate_on(&records, &fractions, a.seed)?;
    let json = serde_json::to_string_pretty(&report.metrics)?;
    if let Some(out) = a.out {
        fs::create_dir_all(&out)?;
        fs::write(out.join("metrics.json"), format!("{json}\n"))?;
        report.write_curves_csv(&out.join("sparsification.csv"))?;
    }
    println!("{json}");
    Ok(())
}

fn compare(a: CompareArgs) -> Result<(), Error> {
    let mut rows = Vec::new();
    for p in &a.paths {
        rows.extend(load_run_metrics(p)?);
    }
    let fmt_c = |c: Option<f64>| c.map(|c| c.to_string()).unwrap_or_default();
    let mut s = String::from("row,trainer,c,seed,runs,val_nll,test_nll,ause,aurg,pcc\n");
    for m in &rows {
        s.push_str(&format!(
            "run,{},{},{},1,{},{},{},{},{}\n",
            m.trainer.as_str(),
            fmt_c(m.c),
            m.seed,
            m.val_nll,
            m.test_nll,
            m.ause,
            m.aurg,
            m.pcc
        ));
    }
    for g in group_medians(&rows) {
        s.push_str(&format!(
            "median,{},{},,{},{},{},{},{},{}\n",
            g.trainer.as_str(),
            fmt_c(g.c),
            g.runs,
            g.val_nll,
            g.test_nll,
            g.ause,
            g.aurg,
            g.pcc
        ));
    }
    match a.out {
        Some(out) => fs::write(out, s)?,
        None => print!("{s}"),
    }
    Ok(())
}

fn selftest() -> ExitCode {
    let checks = run_selftest();
    let mut ok = true;
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        ok &= c.passed;
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.cmd {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::DensityGrid(a) => grid(a),
        Command::Sparsify(a) => sparsify(a),
        Command::Compare(a) => compare(a),
        Command::Selftest => return selftest(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 2 } else { 1 })
        }
    }
}
