//! Seeded experiment runs: train, evaluate on a held-out split and persist
//! every artifact with a content-hashed manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Array;
use crate::data::{hash_split, stream_rng, Dataset};
use crate::error::{Error, Result};
use crate::flow::OdeConfig;
use crate::metrics::{evaluate, write_records_csv, PredictionRecord, UqReport};
use crate::model::{train, write_history_csv, Checkpoint, CfreConfig, TrainedCfre, TrainerKind};
use crate::tasks::{generate, SyntheticTask};

const STREAM_SCATTER: u64 = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    /// Offsets from μ̂, in target units, covered on both axes.
    pub range: [f64; 2],
    pub steps: usize,
    /// Which joint of the probe input is gridded.
    pub joint: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            range: [-1.0, 1.0],
            steps: 41,
            joint: 0,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.range[0] < self.range[1]) || !self.range.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid(format!("grid range must satisfy A < B, got {:?}", self.range)));
        }
        if self.steps < 2 {
            return Err(Error::invalid("grid steps must be >= 2"));
        }
        Ok(())
    }

    pub fn axis(&self) -> Vec<f64> {
        let [a, b] = self.range;
        let h = (b - a) / (self.steps - 1) as f64;
        (0..self.steps).map(|i| a + h * i as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub task: SyntheticTask,
    pub n_samples: usize,
    pub trainer: TrainerKind,
    pub model: CfreConfig,
    /// Values of `c` to sweep; only meaningful for the cfre trainer.
    pub c_sweep: Option<Vec<f64>>,
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
    /// Index into the test split of the input used for density exports.
    pub probe_index: usize,
    pub grid: GridSpec,
    /// Draws exported for the probe joint; 0 disables the scatter file.
    pub scatter_samples: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: SyntheticTask::default(),
            n_samples: 20_000,
            trainer: TrainerKind::Cfre,
            model: CfreConfig::default(),
            c_sweep: None,
            out_dir: PathBuf::from("runs"),
            seeds: vec![0],
            probe_index: 0,
            grid: GridSpec::default(),
            scatter_samples: 200,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.model.validate()?;
        self.grid.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::invalid("at least one seed is required"));
        }
        if self.n_samples < 10 {
            return Err(Error::invalid("n_samples must be >= 10"));
        }
        if let Some(cs) = &self.c_sweep {
            if self.trainer != TrainerKind::Cfre {
                return Err(Error::invalid("c_sweep requires trainer = cfre"));
            }
            if cs.is_empty() {
                return Err(Error::invalid("c_sweep must not be empty"));
            }
            if cs.iter().any(|&c| !(c >= 0.0) || !c.is_finite()) {
                return Err(Error::invalid("c_sweep values must be finite and >= 0"));
            }
        }
        if self.grid.joint >= self.task.k {
            return Err(Error::invalid("grid joint out of range"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    /// The `c` values this config runs, `None` for trainers without one.
    fn c_values(&self) -> Vec<Option<f64>> {
        match (&self.c_sweep, self.trainer) {
            (Some(cs), _) => cs.iter().map(|&c| Some(c)).collect(),
            (None, TrainerKind::Cfre) => vec![Some(self.model.c)],
            (None, _) => vec![None],
        }
    }
}

/// Persisted per-run metrics. Wall-clock time is deliberately absent so
/// reruns are byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub trainer: TrainerKind,
    pub c: Option<f64>,
    pub seed: u64,
    pub val_nll: f64,
    pub test_nll: f64,
    pub ause: f64,
    pub aurg: f64,
    pub pcc: f64,
    pub normalized: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub metrics: RunMetrics,
    pub dir: PathBuf,
    pub history_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
    pub wall_clock_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub runs: Vec<RunReport>,
    pub summary_path: PathBuf,
    pub manifest_path: PathBuf,
}

/// One record per (sample, joint): Euclidean error, mean σ̂ over axes and
/// the joint confidence.
pub fn prediction_records(model: &TrainedCfre, data: &Dataset) -> Result<Vec<PredictionRecord>> {
    let pred = model.regression.predict(&data.inputs)?;
    let (k, d) = (data.k, data.d);
    let mut out = Vec::with_capacity(data.len() * k);
    for r in 0..data.len() {
        let (mu, sigma, x) = (pred.mu.row(r), pred.sigma.row(r), data.targets.row(r));
        for j in 0..k {
            let s = j * d..(j + 1) * d;
            let error = x[s.clone()].iter().zip(&mu[s.clone()]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let uncertainty = sigma[s].iter().sum::<f64>() / d as f64;
            out.push(PredictionRecord {
                error,
                uncertainty,
                confidence: pred.s_hat.at2(r, j),
            });
        }
    }
    Ok(out)
}

/// Held-out NLL on `val` and `test` plus the sparsification metrics on `test`.
pub fn evaluate_model(
    model: &TrainedCfre,
    val: &Dataset,
    test: &Dataset,
    ode: &OdeConfig,
    seed: u64,
) -> Result<(RunMetrics, UqReport, Vec<PredictionRecord>)> {
    let records = prediction_records(model, test)?;
    let report = evaluate(&records, seed)?;
    let metrics = RunMetrics {
        trainer: model.trainer,
        c: None,
        seed,
        val_nll: model.nll(val, ode)?,
        test_nll: model.nll(test, ode)?,
        ause: report.metrics.ause,
        aurg: report.metrics.aurg,
        pcc: report.metrics.pcc,
        normalized: report.metrics.normalized,
    };
    for (name, v) in [
        ("val_nll", metrics.val_nll),
        ("test_nll", metrics.test_nll),
        ("ause", metrics.ause),
        ("aurg", metrics.aurg),
        ("pcc", metrics.pcc),
    ] {
        if !v.is_finite() {
            return Err(Error::NumericInstability(format!("non-finite {name}")));
        }
    }
    Ok((metrics, report, records))
}

/// Density of one joint over a 2-D grid of offsets around its μ̂.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid {
    pub mu: [f64; 2],
    pub sigma: [f64; 2],
    /// Absolute target coordinates, row-major over (x, y).
    pub points: Vec<[f64; 2]>,
    pub log_prob: Vec<f64>,
}

impl DensityGrid {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["x", "y", "log_prob", "prob"])?;
        for (p, lp) in self.points.iter().zip(&self.log_prob) {
            w.write_record(&[p[0].to_string(), p[1].to_string(), lp.to_string(), lp.exp().to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn density_grid(model: &TrainedCfre, input: &Array, grid: &GridSpec, ode: &OdeConfig) -> Result<DensityGrid> {
    grid.validate()?;
    let (k, d) = (model.regression.k(), model.regression.d());
    if d != 2 {
        return Err(Error::invalid(format!("density grids need d = 2, model has d = {d}")));
    }
    if grid.joint >= k {
        return Err(Error::invalid(format!("joint {} out of range for k = {k}", grid.joint)));
    }
    if input.rows() != 1 {
        return Err(Error::invalid("density grids take a single input row"));
    }
    let pred = model.regression.predict(input)?;
    let c = 2 * grid.joint;
    let mu = [pred.mu.at2(0, c), pred.mu.at2(0, c + 1)];
    let sigma = [pred.sigma.at2(0, c), pred.sigma.at2(0, c + 1)];
    let axis = grid.axis();
    let mut points = Vec::with_capacity(axis.len() * axis.len());
    let mut x_bar = Vec::with_capacity(2 * axis.len() * axis.len());
    for &dx in &axis {
        for &dy in &axis {
            points.push([mu[0] + dx, mu[1] + dy]);
            x_bar.push(dx / sigma[0]);
            x_bar.push(dy / sigma[1]);
        }
    }
    let lp = model.residual_log_density(&Array::matrix(points.len(), 2, x_bar)?, ode)?;
    let log_sigma = sigma[0].ln() + sigma[1].ln();
    Ok(DensityGrid {
        mu,
        sigma,
        points,
        log_prob: lp.into_iter().map(|v| v - log_sigma).collect(),
    })
}

/// `n` draws `μ̂ + σ̂ ⊙ x̄` for one joint of a single input (`n × d`).
pub fn sample_joint<R: Rng + ?Sized>(
    model: &TrainedCfre,
    input: &Array,
    joint: usize,
    n: usize,
    ode: &OdeConfig,
    rng: &mut R,
) -> Result<Array> {
    let d = model.regression.d();
    if joint >= model.regression.k() {
        return Err(Error::invalid("joint out of range"));
    }
    let pred = model.regression.predict(input)?;
    let x_bar = model.sample_residuals(n, ode, rng)?;
    let c = joint * d;
    let mut out = Vec::with_capacity(n * d);
    for r in 0..n {
        for a in 0..d {
            out.push(pred.mu.at2(0, c + a) + pred.sigma.at2(0, c + a) * x_bar.at2(r, a));
        }
    }
    Array::matrix(n, d, out)
}

fn write_matrix_csv(path: &Path, header: &[&str], m: &Array) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in 0..m.rows() {
        w.write_record(m.row(r).iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

pub fn run_label(trainer: TrainerKind, c: Option<f64>, seed: u64) -> String {
    match c {
        Some(c) => format!("{}_c{c}_seed{seed}", trainer.as_str()),
        None => format!("{}_seed{seed}", trainer.as_str()),
    }
}

/// The dataset and split a given run seed sees.
pub fn run_data(cfg: &ExperimentConfig, seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let data = generate(&cfg.task.with_seed(cfg.task.seed.wrapping_add(seed)), cfg.n_samples)?;
    let split = hash_split(data.len(), seed);
    if split.val.is_empty() || split.test.is_empty() {
        return Err(Error::invalid("split produced an empty val or test set; raise n_samples"));
    }
    Ok((data.select(&split.train)?, data.select(&split.val)?, data.select(&split.test)?))
}

fn run_one(cfg: &ExperimentConfig, c: Option<f64>, seed: u64, dir: &Path) -> Result<RunReport> {
    let start = Instant::now();
    fs::create_dir_all(dir)?;
    let mut model_cfg = CfreConfig {
        seed,
        ..cfg.model.clone()
    };
    if let Some(c) = c {
        model_cfg.c = c;
    }
    let (train_set, val, test) = run_data(cfg, seed)?;
    let model = match train(cfg.trainer, &train_set, Some(&val), &model_cfg) {
        Ok(m) => m,
        Err(e) => {
            write_json(
                &dir.join("status.json"),
                &serde_json::json!({ "status": "aborted", "error": e.to_string() }),
            )?;
            return Err(e);
        }
    };
    let ode = &model_cfg.ode;

    let history_path = dir.join("history.csv");
    write_history_csv(&history_path, &model.history)?;
    let checkpoint_path = dir.join("checkpoint.json");
    Checkpoint::from_model(&model).save(&checkpoint_path)?;

    let (mut metrics, report, records) = evaluate_model(&model, &val, &test, ode, seed)?;
    metrics.c = c;
    let metrics_path = dir.join("metrics.json");
    write_json(&metrics_path, &metrics)?;
    write_records_csv(&dir.join("predictions.csv"), &records)?;
    report.write_curves_csv(&dir.join("sparsification.csv"))?;

    let probe = test.select(&[cfg.probe_index.min(test.len() - 1)])?;
    if cfg.task.d == 2 {
        density_grid(&model, &probe.inputs, &cfg.grid, ode)?.write_csv(&dir.join("density_grid.csv"))?;
    }
    if cfg.scatter_samples > 0 {
        let mut rng = stream_rng(seed, STREAM_SCATTER);
        let draws = sample_joint(&model, &probe.inputs, cfg.grid.joint, cfg.scatter_samples, ode, &mut rng)?;
        let header: Vec<String> = (0..cfg.task.d).map(|a| format!("x{a}")).collect();
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        write_matrix_csv(&dir.join("samples.csv"), &header, &draws)?;
    }
    write_json(&dir.join("status.json"), &serde_json::json!({ "status": "complete" }))?;
    Ok(RunReport {
        metrics,
        dir: dir.to_path_buf(),
        history_path,
        checkpoint_path,
        metrics_path,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn write_summary_csv(path: &Path, rows: &[RunMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["trainer", "c", "seed", "val_nll", "test_nll", "ause", "aurg", "pcc"])?;
    for m in rows {
        w.write_record(&[
            m.trainer.as_str().to_string(),
            m.c.map(|c| c.to_string()).unwrap_or_default(),
            m.seed.to_string(),
            m.val_nll.to_string(),
            m.test_nll.to_string(),
            m.ause.to_string(),
            m.aurg.to_string(),
            m.pcc.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_summary_csv(path: &Path) -> Result<Vec<RunMetrics>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (i, row) in r.records().enumerate() {
        let row = row?;
        let bad = |what: &str| Error::Format(format!("{}: row {}: bad {what}", path.display(), i + 1));
        if row.len() != 8 {
            return Err(bad("column count"));
        }
        let num = |j: usize, what: &str| row[j].parse::<f64>().map_err(|_| bad(what));
        out.push(RunMetrics {
            trainer: TrainerKind::parse(&row[0])?,
            c: if row[1].is_empty() { None } else { Some(num(1, "c")?) },
            seed: row[2].parse().map_err(|_| bad("seed"))?,
            val_nll: num(3, "val_nll")?,
            test_nll: num(4, "test_nll")?,
            ause: num(5, "ause")?,
            aurg: num(6, "aurg")?,
            pcc: num(7, "pcc")?,
            normalized: true,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else {
            out.push(p.strip_prefix(root).map_err(|e| Error::Format(e.to_string()))?.to_path_buf());
        }
    }
    Ok(())
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// Hash every file under `root` except the manifest itself, sorted by path.
pub fn write_manifest(root: &Path, config: &ExperimentConfig) -> Result<PathBuf> {
    let manifest_path = root.join("manifest.json");
    let mut files = Vec::new();
    collect_files(root, root, &mut files)?;
    files.retain(|p| p != Path::new("manifest.json"));
    files.sort();
    let mut entries = Vec::with_capacity(files.len());
    for rel in files {
        let full = root.join(&rel);
        entries.push(ManifestEntry {
            path: rel.to_string_lossy().replace('\\', "/"),
            sha256: sha256_file(&full)?,
            bytes: fs::metadata(&full)?.len(),
        });
    }
    let doc = serde_json::json!({
        "config": config,
        "files": entries,
    });
    write_json(&manifest_path, &doc)?;
    Ok(manifest_path)
}

/// Train and evaluate every (c, seed) pair of the config, then write the
/// summary, the resolved config and the manifest under `out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let root = &cfg.out_dir;
    fs::create_dir_all(root)?;
    fs::write(root.join("config.toml"), cfg.to_toml()?)?;
    let mut runs = Vec::new();
    for c in cfg.c_values() {
        for &seed in &cfg.seeds {
            let dir = root.join("runs").join(run_label(cfg.trainer, c, seed));
            log::info!("run {}", dir.display());
            match run_one(cfg, c, seed, &dir) {
                Ok(r) => runs.push(r),
                Err(e) => {
                    // keep what was written so far, hashed and marked
                    write_manifest(root, cfg)?;
                    return Err(e);
                }
            }
        }
    }
    let summary_path = root.join("summary.csv");
    let rows: Vec<RunMetrics> = runs.iter().map(|r| r.metrics.clone()).collect();
    write_summary_csv(&summary_path, &rows)?;
    let manifest_path = write_manifest(root, cfg)?;
    Ok(ExperimentReport {
        runs,
        summary_path,
        manifest_path,
    })
}

/// Load run metrics from `metrics.json` files, summary CSVs or experiment
/// directories (which contribute their `summary.csv`).
pub fn load_run_metrics(path: &Path) -> Result<Vec<RunMetrics>> {
    if path.is_dir() {
        return read_summary_csv(&path.join("summary.csv"));
    }
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => Ok(vec![serde_json::from_str(&fs::read_to_string(path)?)?]),
        Some("csv") => read_summary_csv(path),
        _ => Err(Error::invalid(format!("cannot read run metrics from {}", path.display()))),
    }
}

/// Median of each metric per (trainer, c) group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSummary {
    pub trainer: TrainerKind,
    pub c: Option<f64>,
    pub runs: usize,
    pub val_nll: f64,
    pub test_nll: f64,
    pub ause: f64,
    pub aurg: f64,
    pub pcc: f64,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn group_medians(rows: &[RunMetrics]) -> Vec<GroupSummary> {
    let mut groups: BTreeMap<(String, String), Vec<&RunMetrics>> = BTreeMap::new();
    for m in rows {
        let c = m.c.map(|c| format!("{c:020.10}")).unwrap_or_default();
        groups.entry((m.trainer.as_str().to_string(), c)).or_default().push(m);
    }
    groups
        .into_values()
        .map(|g| {
            let col = |f: fn(&RunMetrics) -> f64| median(&g.iter().map(|m| f(m)).collect::<Vec<_>>());
            GroupSummary {
                trainer: g[0].trainer,
                c: g[0].c,
                runs: g.len(),
                val_nll: col(|m| m.val_nll),
                test_nll: col(|m| m.test_nll),
                ause: col(|m| m.ause),
                aurg: col(|m| m.aurg),
                pcc: col(|m| m.pcc),
            }
        })
        .collect()
}
