use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use distaudit::analysis::{fit_report, mean_points, summarize, write_points, write_summary_csv, SummaryRow, TrialMatrix};
use distaudit::audit::{report_records, run_trial, write_report_csv, AuditOutcome, StopReason};
use distaudit::cloudsim::Scenario;
use serde::Serialize;

use crate::config::Experiment;

/// Per-trial totals, one row per trial in `totals.csv`.
#[derive(Debug, Serialize)]
pub struct TrialTotal {
    pub trial: u64,
    pub detected: usize,
    pub corrupted: usize,
    pub corrupted_covered: usize,
    pub challenges: usize,
    pub signals: usize,
    pub stopped_at_round: Option<usize>,
}

impl TrialTotal {
    fn new(trial: u64, o: &AuditOutcome) -> Self {
        Self {
            trial,
            detected: o.total_detected(),
            corrupted: o.corrupted_total,
            corrupted_covered: o.corrupted_covered,
            challenges: o.challenges_issued(),
            signals: o.signal_count(),
            stopped_at_round: match o.stop {
                StopReason::Completed => None,
                StopReason::ThresholdStop { round, .. } => Some(round),
            },
        }
    }
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    Ok(BufWriter::new(
        File::create(&path).with_context(|| format!("cannot create {}", path.display()))?,
    ))
}

/// Writes `summary.csv`, `fit.json` (when at least two SUBTPAs) and
/// `means.dat`; returns the summary rows.
pub fn write_analysis(matrix: &TrialMatrix, dir: &Path) -> Result<Vec<SummaryRow>> {
    let summary = summarize(matrix)?;
    write_summary_csv(create(dir, "summary.csv")?, &summary)?;
    let points = mean_points(&summary);
    write_points(create(dir, "means.dat")?, &points)?;
    if points.len() >= 2 {
        let fit = fit_report(&points)?;
        let mut w = create(dir, "fit.json")?;
        serde_json::to_writer_pretty(&mut w, &fit)?;
        writeln!(w)?;
        w.flush()?;
    }
    Ok(summary)
}

pub struct RunSummary {
    pub totals: Vec<TrialTotal>,
    pub summary: Vec<SummaryRow>,
}

pub fn run_experiment(exp: &Experiment, dir: &Path) -> Result<RunSummary> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let scenario = Scenario::provision(&exp.scenario)?;
    let blocks = scenario.block_count();
    let mut records = Vec::new();
    let mut outcomes = Vec::new();
    for t in 0..exp.trials {
        let sealed = scenario.trial(t)?;
        let out = run_trial(&sealed, blocks, &exp.params, exp.seed, t)
            .with_context(|| format!("trial {t}"))?;
        records.extend(report_records(t, &out));
        outcomes.push((t, out));
    }
    write_report_csv(create(dir, "report.csv")?, &records)?;
    let totals: Vec<TrialTotal> = outcomes.iter().map(|(t, o)| TrialTotal::new(*t, o)).collect();
    let mut w = csv::Writer::from_writer(create(dir, "totals.csv")?);
    for t in &totals {
        w.serialize(t)?;
    }
    w.flush()?;
    let summary = write_analysis(&TrialMatrix::from_outcomes(&outcomes)?, dir)?;
    Ok(RunSummary { totals, summary })
}
