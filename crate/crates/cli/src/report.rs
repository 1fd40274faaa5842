//! Metric logs (JSON lines) and accuracy reports (CSV, percent with one
//! decimal). Every report cell is recomputable from the metric log.

use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use dsbn_core::data::Metrics;
use dsbn_core::pipeline::{Phase, RunLog};

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MetricLine {
    Step {
        phase: String,
        step: usize,
        loss: f64,
        lambda: f64,
        lr: f64,
    },
    Eval {
        phase: String,
        step: usize,
        per_class: Vec<f64>,
        class_avg: f64,
        overall: f64,
        n: usize,
    },
}

pub fn phase_label(phase: Phase) -> String {
    match phase {
        Phase::Stage1 => "stage1".to_string(),
        Phase::Stage2(j) => format!("stage2_iter{j}"),
    }
}

/// Serializes the run log in event order: step lines, then eval lines.
pub fn metric_lines(log: &RunLog) -> Vec<MetricLine> {
    let mut lines = Vec::with_capacity(log.steps.len() + log.evals.len());
    for s in &log.steps {
        lines.push(MetricLine::Step {
            phase: phase_label(s.phase),
            step: s.step,
            loss: s.loss,
            lambda: s.lambda,
            lr: s.lr,
        });
    }
    for e in &log.evals {
        lines.push(MetricLine::Eval {
            phase: phase_label(e.phase),
            step: e.step,
            per_class: e.metrics.per_class.clone(),
            class_avg: e.metrics.class_avg,
            overall: e.metrics.overall,
            n: e.metrics.n,
        });
    }
    lines
}

pub fn write_metrics_jsonl(path: &Path, log: &RunLog) -> Result<()> {
    let mut out = Vec::new();
    for line in metric_lines(log) {
        serde_json::to_writer(&mut out, &line)?;
        out.push(b'\n');
    }
    std::fs::write(path, out).with_context(|| format!("cannot write {}", path.display()))
}

pub fn read_metrics_jsonl(path: &Path) -> Result<Vec<MetricLine>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read {}", path.display()))?;
    text.lines()
        .map(|l| serde_json::from_str(l).context("bad metrics line"))
        .collect()
}

/// Final metrics per phase, in phase order (the last eval of each phase).
pub fn final_evals(log: &RunLog) -> Vec<(String, Metrics)> {
    let mut out: Vec<(String, Metrics)> = Vec::new();
    for e in &log.evals {
        let label = phase_label(e.phase);
        match out.iter_mut().find(|(l, _)| *l == label) {
            Some(slot) => slot.1 = e.metrics.clone(),
            None => out.push((label, e.metrics.clone())),
        }
    }
    out
}

pub fn fmt_pct(frac: f64) -> String {
    format!("{:.1}", 100.0 * frac)
}

fn class_header(classes: usize) -> Vec<String> {
    let mut cols: Vec<String> = (0..classes).map(|c| format!("class_{c}")).collect();
    cols.push("avg".to_string());
    cols.push("overall".to_string());
    cols
}

/// Per-run report: one row per phase, columns per class plus the class
/// average and overall accuracy.
pub fn write_run_report(
    path: &Path,
    classes: usize,
    rows: &[(String, Metrics)],
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .with_context(|| format!("cannot write {}", path.display()))?;
    let mut header = vec!["phase".to_string()];
    header.extend(class_header(classes));
    w.write_record(&header)?;
    for (phase, m) in rows {
        let mut record = vec![phase.clone()];
        record.extend(m.per_class.iter().map(|&a| fmt_pct(a)));
        record.push(fmt_pct(m.class_avg));
        record.push(fmt_pct(m.overall));
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

/// Multi-seed aggregate: per-seed rows plus mean and standard deviation
/// rows for every phase.
pub fn write_aggregate_report(
    path: &Path,
    classes: usize,
    per_seed: &[(u64, Vec<(String, Metrics)>)],
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .with_context(|| format!("cannot write {}", path.display()))?;
    let mut header = vec!["phase".to_string(), "seed".to_string()];
    header.extend(class_header(classes));
    w.write_record(&header)?;

    let phases: Vec<String> = per_seed
        .first()
        .map(|(_, rows)| rows.iter().map(|(p, _)| p.clone()).collect())
        .unwrap_or_default();
    for phase in &phases {
        let mut cells: Vec<Vec<f64>> = Vec::new();
        for (seed, rows) in per_seed {
            let Some((_, m)) = rows.iter().find(|(p, _)| p == phase) else {
                continue;
            };
            let mut record = vec![phase.clone(), seed.to_string()];
            let mut row: Vec<f64> = m.per_class.clone();
            row.push(m.class_avg);
            row.push(m.overall);
            record.extend(row.iter().map(|&a| fmt_pct(a)));
            w.write_record(&record)?;
            cells.push(row);
        }
        if cells.is_empty() {
            continue;
        }
        let cols = classes + 2;
        let mut mean_row = vec![phase.clone(), "mean".to_string()];
        let mut std_row = vec![phase.clone(), "std".to_string()];
        for j in 0..cols {
            let vals: Vec<f64> = cells.iter().map(|r| r[j]).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / vals.len() as f64;
            mean_row.push(fmt_pct(mean));
            std_row.push(fmt_pct(var.sqrt()));
        }
        w.write_record(&mean_row)?;
        w.write_record(&std_row)?;
    }
    w.flush()?;
    Ok(())
}

/// Ablation grid report row.
#[derive(Clone, Debug)]
pub struct AblationCell {
    pub baseline: String,
    pub stage1_norm: String,
    pub stage2_norm: String,
    /// Per-seed class-average accuracy after stage 1.
    pub stage1_acc: Vec<f64>,
    /// Per-seed class-average accuracy after stage 2 (first iteration).
    pub stage2_acc: Vec<f64>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let mean = values.iter().sum::<f64>() / values.len().max(1) as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
        / values.len().max(1) as f64;
    (mean, var.sqrt())
}

/// Displayed one-decimal percent, as a number.
pub fn displayed_pct(frac: f64) -> f64 {
    fmt_pct(frac).parse().expect("fixed-format float")
}

/// Ablation grid: per-cell means with the stage-2 gain column computed from
/// the displayed (rounded) averages so the table is self-consistent.
pub fn write_ablation_report(path: &Path, cells: &[AblationCell]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .with_context(|| format!("cannot write {}", path.display()))?;
    w.write_record([
        "baseline",
        "stage1",
        "stage2",
        "stage1_acc",
        "stage1_std",
        "stage2_acc",
        "stage2_std",
        "delta",
    ])?;
    for cell in cells {
        let (m1, s1) = mean_std(&cell.stage1_acc);
        let (m2, s2) = mean_std(&cell.stage2_acc);
        let delta = displayed_pct(m2) - displayed_pct(m1);
        w.write_record([
            cell.baseline.clone(),
            cell.stage1_norm.clone(),
            cell.stage2_norm.clone(),
            fmt_pct(m1),
            fmt_pct(s1),
            fmt_pct(m2),
            fmt_pct(s2),
            format!("{delta:+.1}"),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Multi-source comparison report row.
#[derive(Clone, Debug)]
pub struct MultiSourceCell {
    pub mode: String,
    pub norm: String,
    /// Per-seed class-average accuracy of the run's final phase.
    pub acc: Vec<f64>,
}

pub fn write_multisource_report(path: &Path, cells: &[MultiSourceCell]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .with_context(|| format!("cannot write {}", path.display()))?;
    w.write_record(["mode", "norm", "acc", "std"])?;
    for cell in cells {
        let (m, s) = mean_std(&cell.acc);
        w.write_record([
            cell.mode.clone(),
            cell.norm.clone(),
            fmt_pct(m),
            fmt_pct(s),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use dsbn_core::pipeline::{EvalEvent, StepEvent};

    fn metrics(acc: f64) -> Metrics {
        Metrics {
            per_class: vec![acc, acc],
            class_avg: acc,
            overall: acc,
            n: 10,
        }
    }

    #[test]
    fn final_evals_keep_last_per_phase() {
        let mut log = RunLog::default();
        log.evals.push(EvalEvent {
            phase: Phase::Stage1,
            step: 10,
            metrics: metrics(0.5),
        });
        log.evals.push(EvalEvent {
            phase: Phase::Stage1,
            step: 20,
            metrics: metrics(0.75),
        });
        log.evals.push(EvalEvent {
            phase: Phase::Stage2(1),
            step: 20,
            metrics: metrics(0.8),
        });
        let finals = final_evals(&log);
        assert_eq!(finals.len(), 2);
        assert_eq!(finals[0].0, "stage1");
        assert_eq!(finals[0].1.class_avg, 0.75);
        assert_eq!(finals[1].0, "stage2_iter1");
    }

    #[test]
    fn metric_lines_round_trip_through_json() {
        let mut log = RunLog::default();
        log.steps.push(StepEvent {
            phase: Phase::Stage1,
            step: 3,
            loss: 1.25,
            lambda: 0.1,
            lr: 1e-4,
        });
        log.evals.push(EvalEvent {
            phase: Phase::Stage2(2),
            step: 7,
            metrics: metrics(0.9),
        });
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        write_metrics_jsonl(&path, &log).unwrap();
        let lines = read_metrics_jsonl(&path).unwrap();
        assert_eq!(lines.len(), 2);
        match &lines[1] {
            MetricLine::Eval { phase, class_avg, .. } => {
                assert_eq!(phase, "stage2_iter2");
                assert_eq!(*class_avg, 0.9);
            }
            other => panic!("unexpected line {other:?}"),
        }
    }

    #[test]
    fn percent_formatting_has_one_decimal() {
        assert_eq!(fmt_pct(0.8349), "83.5");
        assert_eq!(fmt_pct(1.0), "100.0");
        assert_eq!(fmt_pct(0.0), "0.0");
    }
}
