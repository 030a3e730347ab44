//! Multi-trial report tables, summary statistics and least-squares lines.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::audit::{AuditOutcome, ReportRecord};
use crate::error::{Error, Result};

/// Detected-error counts: one row per SUBTPA, one column per trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialMatrix {
    pub subtpas: Vec<usize>,
    pub trials: Vec<u64>,
    pub cells: Vec<Vec<f64>>,
}

impl TrialMatrix {
    pub fn new(subtpas: Vec<usize>, trials: Vec<u64>, cells: Vec<Vec<f64>>) -> Result<Self> {
        if cells.len() != subtpas.len() {
            return Err(Error::InvalidInput(format!(
                "{} rows for {} SUBTPAs",
                cells.len(),
                subtpas.len()
            )));
        }
        for (row, id) in cells.iter().zip(&subtpas) {
            if row.len() != trials.len() {
                return Err(Error::InvalidInput(format!(
                    "row S{} has {} cells, expected {}",
                    id + 1,
                    row.len(),
                    trials.len()
                )));
            }
            if let Some(v) = row.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
                return Err(Error::InvalidInput(format!("cell value {v} is not a non-negative count")));
            }
        }
        Ok(Self { subtpas, trials, cells })
    }

    /// Builds the matrix from `(trial, outcome)` pairs; every outcome must
    /// have the same SUBTPA set.
    pub fn from_outcomes(outcomes: &[(u64, AuditOutcome)]) -> Result<Self> {
        let Some((_, first)) = outcomes.first() else {
            return Err(Error::InvalidInput("no trials to tabulate".into()));
        };
        let subtpas: Vec<usize> = first.agents.iter().map(|a| a.subtpa).collect();
        let mut cells = vec![Vec::with_capacity(outcomes.len()); subtpas.len()];
        for (_, out) in outcomes {
            if out.agents.len() != subtpas.len() {
                return Err(Error::InvalidInput("trials disagree on the SUBTPA count".into()));
            }
            for (row, agent) in cells.iter_mut().zip(&out.agents) {
                row.push(agent.detected() as f64);
            }
        }
        Self::new(subtpas, outcomes.iter().map(|(t, _)| *t).collect(), cells)
    }

    /// Aggregates per-packet report rows into per-trial SUBTPA totals.
    pub fn from_records(records: &[ReportRecord]) -> Result<Self> {
        let mut by: BTreeMap<(usize, u64), f64> = BTreeMap::new();
        let mut subtpas = std::collections::BTreeSet::new();
        let mut trials = std::collections::BTreeSet::new();
        for r in records {
            *by.entry((r.subtpa, r.trial)).or_default() += r.mismatches as f64;
            subtpas.insert(r.subtpa);
            trials.insert(r.trial);
        }
        if by.is_empty() {
            return Err(Error::InvalidInput("report has no rows".into()));
        }
        let cells = subtpas
            .iter()
            .map(|&s| trials.iter().map(|&t| by.get(&(s, t)).copied().unwrap_or(0.0)).collect())
            .collect();
        Self::new(subtpas.into_iter().collect(), trials.into_iter().collect(), cells)
    }

    pub fn column_totals(&self) -> Vec<f64> {
        (0..self.trials.len())
            .map(|j| self.cells.iter().map(|r| r[j]).sum())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub subtpa: usize,
    pub max: f64,
    pub min: f64,
    pub mean: f64,
    /// Population (divide-by-N) standard deviation.
    pub stddev: f64,
}

/// `(max, min, mean, population stddev)` of a non-empty slice.
pub fn stats(values: &[f64]) -> Result<(f64, f64, f64, f64)> {
    if values.is_empty() {
        return Err(Error::InvalidInput("statistics of an empty row".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    Ok((max, min, mean.clamp(min, max), var.sqrt()))
}

pub fn summarize(matrix: &TrialMatrix) -> Result<Vec<SummaryRow>> {
    if matrix.trials.is_empty() {
        return Err(Error::InvalidInput("summary needs at least one trial".into()));
    }
    matrix
        .subtpas
        .iter()
        .zip(&matrix.cells)
        .map(|(&subtpa, row)| {
            let (max, min, mean, stddev) = stats(row)?;
            Ok(SummaryRow { subtpa, max, min, mean, stddev })
        })
        .collect()
}

/// Coefficient of variation of the per-SUBTPA means.
pub fn mean_cov(rows: &[SummaryRow]) -> Result<f64> {
    let means: Vec<f64> = rows.iter().map(|r| r.mean).collect();
    let (_, _, mean, sd) = stats(&means)?;
    if mean == 0.0 {
        return Err(Error::InvalidInput("coefficient of variation of zero means".into()));
    }
    Ok(sd / mean)
}

/// `y = A·x + B`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FittedLine {
    #[serde(rename = "A")]
    pub a: f64,
    #[serde(rename = "B")]
    pub b: f64,
}

impl FittedLine {
    pub fn at(&self, x: f64) -> f64 {
        self.a * x + self.b
    }

    /// Mean squared vertical distance of the points from the line.
    pub fn residual(&self, points: &[(f64, f64)]) -> f64 {
        if points.is_empty() {
            return 0.0;
        }
        points.iter().map(|&(x, y)| (y - self.at(x)).powi(2)).sum::<f64>() / points.len() as f64
    }
}

/// Solves the normal equations
/// `(Σx²)A + (Σx)B = Σxy` and `(Σx)A + N·B = Σy` by Cramer's rule.
pub fn fit_from_sums(sum_x2: f64, sum_x: f64, sum_xy: f64, sum_y: f64, n: f64) -> Result<FittedLine> {
    let det = sum_x2 * n - sum_x * sum_x;
    if det.abs() <= 1e-12 * (sum_x2 * n).abs().max(1.0) {
        return Err(Error::SingularFit("all x values coincide".into()));
    }
    Ok(FittedLine {
        a: (sum_xy * n - sum_x * sum_y) / det,
        b: (sum_x2 * sum_y - sum_x * sum_xy) / det,
    })
}

pub fn fit_line(points: &[(f64, f64)]) -> Result<FittedLine> {
    if points.len() < 2 {
        return Err(Error::SingularFit(format!("{} point(s) cannot fix a line", points.len())));
    }
    let (mut sx2, mut sx, mut sxy, mut sy) = (0.0, 0.0, 0.0, 0.0);
    for &(x, y) in points {
        sx2 += x * x;
        sx += x;
        sxy += x * y;
        sy += y;
    }
    fit_from_sums(sx2, sx, sxy, sy, points.len() as f64)
}

/// `(k, mean of SUBTPA k)` with SUBTPAs numbered from 1.
pub fn mean_points(rows: &[SummaryRow]) -> Vec<(f64, f64)> {
    rows.iter().map(|r| ((r.subtpa + 1) as f64, r.mean)).collect()
}

/// Same, for the per-row minima.
pub fn min_points(rows: &[SummaryRow]) -> Vec<(f64, f64)> {
    rows.iter().map(|r| ((r.subtpa + 1) as f64, r.min)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    #[serde(rename = "A")]
    pub a: f64,
    #[serde(rename = "B")]
    pub b: f64,
    pub residual: f64,
}

pub fn fit_report(points: &[(f64, f64)]) -> Result<FitReport> {
    let line = fit_line(points)?;
    Ok(FitReport {
        a: line.a,
        b: line.b,
        residual: line.residual(points),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tighter {
    First,
    Second,
    Equal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DispersionReport {
    pub first: FitReport,
    pub second: FitReport,
    pub tighter: Tighter,
}

/// Fits a line through each matrix's per-SUBTPA means and compares the mean
/// squared residuals.
pub fn dispersion_compare(a: &TrialMatrix, b: &TrialMatrix) -> Result<DispersionReport> {
    if a.cells.len() != b.cells.len() || a.trials.len() != b.trials.len() {
        return Err(Error::InvalidInput("matrices differ in shape".into()));
    }
    let first = fit_report(&mean_points(&summarize(a)?))?;
    let second = fit_report(&mean_points(&summarize(b)?))?;
    let tighter = if first.residual < second.residual {
        Tighter::First
    } else if second.residual < first.residual {
        Tighter::Second
    } else {
        Tighter::Equal
    };
    Ok(DispersionReport { first, second, tighter })
}

/// SUBTPAs grouped by their integer-rounded mean.
pub fn mean_buckets(rows: &[SummaryRow]) -> BTreeMap<i64, Vec<usize>> {
    let mut buckets: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for r in rows {
        buckets.entry(r.mean.round() as i64).or_default().push(r.subtpa);
    }
    buckets
}

pub fn write_summary_csv<W: Write>(writer: W, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_summary_csv<R: Read>(reader: R) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_reader(reader);
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Whitespace-separated `x y` lines, readable by gnuplot.
pub fn write_points<W: Write>(mut writer: W, points: &[(f64, f64)]) -> Result<()> {
    for (x, y) in points {
        writeln!(writer, "{x} {y}")?;
    }
    Ok(())
}
