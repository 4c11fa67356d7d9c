//! Sparsification curves, AUSE, AURG and Pearson correlation.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::stream_rng;
use crate::error::{Error, Result};

/// One evaluated prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub error: f64,
    pub uncertainty: f64,
    pub confidence: f64,
}

impl PredictionRecord {
    pub fn validate(&self) -> Result<()> {
        if !(self.error.is_finite() && self.error >= 0.0) {
            return Err(Error::invalid(format!("error must be finite and >= 0, got {}", self.error)));
        }
        if !(self.uncertainty.is_finite() && self.uncertainty >= 0.0) {
            return Err(Error::invalid(format!(
                "uncertainty must be finite and >= 0, got {}",
                self.uncertainty
            )));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(Error::invalid(format!("confidence {} outside [0, 1]", self.confidence)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankBy {
    Uncertainty,
    /// Ranking by the true error gives the oracle curve.
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsificationCurve {
    pub fractions: Vec<f64>,
    pub remaining_error: Vec<f64>,
    /// False when the full-set mean error was zero and values are raw.
    pub normalized: bool,
    /// Fractions whose removal count was capped at `N − 1`.
    pub capped: Vec<usize>,
}

impl SparsificationCurve {
    /// A flat curve, e.g. the analytic random baseline.
    pub fn constant(fractions: &[f64], value: f64) -> Self {
        SparsificationCurve {
            fractions: fractions.to_vec(),
            remaining_error: vec![value; fractions.len()],
            normalized: true,
            capped: Vec::new(),
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["fraction", "remaining_error"])?;
        for (f, e) in self.fractions.iter().zip(&self.remaining_error) {
            w.write_record([f.to_string(), e.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `0, 0.01, …, 0.99`.
pub fn default_fractions() -> Vec<f64> {
    (0..100).map(|i| i as f64 / 100.0).collect()
}

/// Number of records removed at fraction `phi`, before capping.
pub fn removal_count(phi: f64, n: usize) -> usize {
    // guard against 0.29 * 100 = 28.999999999999996
    (phi * n as f64 - 1e-9).ceil().max(0.0) as usize
}

fn check_inputs(records: &[PredictionRecord], fractions: &[f64]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::invalid("no records"));
    }
    for r in records {
        r.validate()?;
    }
    if fractions.is_empty() || fractions[0] != 0.0 {
        return Err(Error::invalid("fraction grid must start at 0"));
    }
    if fractions.windows(2).any(|w| !(w[1] > w[0])) || fractions.iter().any(|f| !(0.0..1.0).contains(f)) {
        return Err(Error::invalid("fractions must be strictly ascending within [0, 1)"));
    }
    Ok(())
}

/// Mean error of records not flagged as removed, summed in input order.
fn retained_mean(records: &[PredictionRecord], removed: &[bool]) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for (r, &gone) in records.iter().zip(removed) {
        if !gone {
            s += r.error;
            n += 1;
        }
    }
    s / n as f64
}

/// Curve for a fixed removal order (`order[0]` goes first).
fn curve_for_order(records: &[PredictionRecord], order: &[usize], fractions: &[f64]) -> SparsificationCurve {
    let n = records.len();
    let full = retained_mean(records, &vec![false; n]);
    let normalized = full > 0.0;
    let mut capped = Vec::new();
    let mut values = Vec::with_capacity(fractions.len());
    let mut removed = vec![false; n];
    let mut done = 0;
    for (i, &phi) in fractions.iter().enumerate() {
        let mut m = removal_count(phi, n);
        if m > n - 1 {
            m = n - 1;
            capped.push(i);
        }
        while done < m {
            removed[order[done]] = true;
            done += 1;
        }
        let v = retained_mean(records, &removed);
        values.push(if normalized { v / full } else { v });
    }
    SparsificationCurve {
        fractions: fractions.to_vec(),
        remaining_error: values,
        normalized,
        capped,
    }
}

/// Remove the highest-ranked fraction of records and report the mean error
/// of the rest, normalized by the full-set mean. Ties go in input order.
pub fn sparsification_curve(
    records: &[PredictionRecord],
    by: RankBy,
    fractions: &[f64],
) -> Result<SparsificationCurve> {
    check_inputs(records, fractions)?;
    let key = |r: &PredictionRecord| match by {
        RankBy::Uncertainty => r.uncertainty,
        RankBy::Error => r.error,
    };
    let mut order: Vec<usize> = (0..records.len()).collect();
    // stable sort keeps input order among equal keys
    order.sort_by(|&a, &b| key(&records[b]).total_cmp(&key(&records[a])));
    let curve = curve_for_order(records, &order, fractions);
    if !curve.capped.is_empty() {
        log::warn!("{} fractions capped at N - 1 removals", curve.capped.len());
    }
    if !curve.normalized {
        log::warn!("all errors are zero; curve left unnormalized");
    }
    Ok(curve)
}

pub const RANDOM_SHUFFLES: usize = 100;

/// Expected curve under random removal, averaged over seeded shuffles.
pub fn random_baseline(
    records: &[PredictionRecord],
    fractions: &[f64],
    shuffles: usize,
    seed: u64,
) -> Result<SparsificationCurve> {
    check_inputs(records, fractions)?;
    if shuffles == 0 {
        return Err(Error::invalid("need at least one shuffle"));
    }
    let mut rng = stream_rng(seed, 0x5eed);
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut acc = vec![0.0; fractions.len()];
    let mut last = None;
    for _ in 0..shuffles {
        order.shuffle(&mut rng);
        let c = curve_for_order(records, &order, fractions);
        for (a, v) in acc.iter_mut().zip(&c.remaining_error) {
            *a += v;
        }
        last = Some(c);
    }
    let mut c = last.expect("shuffles >= 1");
    c.remaining_error = acc.into_iter().map(|v| v / shuffles as f64).collect();
    Ok(c)
}

fn trapezoid(fractions: &[f64], y: &[f64]) -> f64 {
    fractions
        .windows(2)
        .zip(y.windows(2))
        .map(|(f, v)| 0.5 * (f[1] - f[0]) * (v[0] + v[1]))
        .sum()
}

fn same_grid(a: &SparsificationCurve, b: &SparsificationCurve) -> Result<()> {
    if a.fractions != b.fractions || a.remaining_error.len() != b.remaining_error.len() {
        return Err(Error::invalid("curves use different fraction grids"));
    }
    Ok(())
}

/// Area between the model and oracle curves.
pub fn ause(model: &SparsificationCurve, oracle: &SparsificationCurve) -> Result<f64> {
    same_grid(model, oracle)?;
    let diff: Vec<f64> = model
        .remaining_error
        .iter()
        .zip(&oracle.remaining_error)
        .map(|(m, o)| m - o)
        .collect();
    Ok(trapezoid(&model.fractions, &diff))
}

/// Area between the random baseline and the model curve.
pub fn aurg(model: &SparsificationCurve, random_baseline: &SparsificationCurve) -> Result<f64> {
    same_grid(model, random_baseline)?;
    let diff: Vec<f64> = random_baseline
        .remaining_error
        .iter()
        .zip(&model.remaining_error)
        .map(|(r, m)| r - m)
        .collect();
    Ok(trapezoid(&model.fractions, &diff))
}

pub fn pcc(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::invalid("series lengths differ"));
    }
    if x.len() < 2 {
        return Err(Error::UndefinedCorrelation("need at least two records".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("a series has zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Scalar summary written next to the curves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UqMetrics {
    pub ause: f64,
    pub aurg: f64,
    pub pcc: f64,
    /// Curves divided by the full-set mean error before integrating.
    pub normalized: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UqReport {
    pub metrics: UqMetrics,
    pub model: SparsificationCurve,
    pub oracle: SparsificationCurve,
    pub random: SparsificationCurve,
}

impl UqReport {
    /// `fraction,model,oracle,random` rows.
    pub fn write_curves_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["fraction", "model", "oracle", "random"])?;
        for (i, f) in self.model.fractions.iter().enumerate() {
            w.write_record([
                f.to_string(),
                self.model.remaining_error[i].to_string(),
                self.oracle.remaining_error[i].to_string(),
                self.random.remaining_error[i].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// All metrics on the default grid with the empirical random baseline.
pub fn evaluate(records: &[PredictionRecord], seed: u64) -> Result<UqReport> {
    evaluate_on(records, &default_fractions(), seed)
}

/// [`evaluate`] on a caller-chosen fraction grid.
pub fn evaluate_on(records: &[PredictionRecord], fractions: &[f64], seed: u64) -> Result<UqReport> {
    let model = sparsification_curve(records, RankBy::Uncertainty, fractions)?;
    let oracle = sparsification_curve(records, RankBy::Error, fractions)?;
    let random = random_baseline(records, fractions, RANDOM_SHUFFLES, seed)?;
    let errors: Vec<f64> = records.iter().map(|r| r.error).collect();
    let unc: Vec<f64> = records.iter().map(|r| r.uncertainty).collect();
    Ok(UqReport {
        metrics: UqMetrics {
            ause: ause(&model, &oracle)?,
            aurg: aurg(&model, &random)?,
            pcc: pcc(&errors, &unc)?,
            normalized: model.normalized,
        },
        model,
        oracle,
        random,
    })
}

/// Read `error,uncertainty,confidence` rows; the header is required.
pub fn read_records_csv(path: &Path) -> Result<Vec<PredictionRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let want = ["error", "uncertainty", "confidence"];
    if headers.iter().collect::<Vec<_>>() != want {
        return Err(Error::Format(format!(
            "expected header `error,uncertainty,confidence`, got `{}`",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut out = Vec::new();
    for (i, row) in r.deserialize::<PredictionRecord>().enumerate() {
        let rec = row.map_err(|e| Error::Format(format!("row {}: {e}", i + 1)))?;
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_records_csv(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
