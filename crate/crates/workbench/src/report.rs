//! Aggregation of per-epoch evaluations into the sweep tables.

use rkld::eval::EvalReport;
use rkld::unlearn::UnlearnSpec;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::pipeline::{epochs_of, load_record, save_json, EvalRecord, RunDir};

/// Smallest 1-based epoch reaching the maximum forget quality.
///
/// # Panics
/// If `forget_quality` is empty.
pub fn select_peak(forget_quality: &[f64]) -> usize {
    assert!(
        !forget_quality.is_empty(),
        "select_peak needs at least one epoch"
    );
    let mut best = 0;
    for (i, &q) in forget_quality.iter().enumerate() {
        if q > forget_quality[best] {
            best = i;
        }
    }
    best + 1
}

/// One method on one seed, at its peak epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeakRow {
    pub method: String,
    pub retain_mode: String,
    pub forget_pct: u32,
    pub seed: u64,
    pub peak_epoch: usize,
    pub leakage: f64,
    pub report: EvalReport,
}

/// Seed-averaged numbers for one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub retain_mode: String,
    /// Mean over seeds of the values at each seed's peak epoch.
    pub forget_quality: f64,
    pub model_utility: f64,
    pub forget_rouge_l: f64,
    pub forget_prob: f64,
    pub leakage: f64,
    /// Mean forget quality and model utility per epoch.
    pub forget_quality_curve: Vec<f64>,
    pub model_utility_curve: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub name: String,
    pub seeds: Vec<u64>,
    /// `original` and `retrain` per seed (peak epoch 0).
    pub baselines: Vec<PeakRow>,
    pub peaks: Vec<PeakRow>,
    pub summary: Vec<MethodSummary>,
    pub baseline_summary: Vec<MethodSummary>,
}

impl Report {
    pub fn method(&self, label: &str) -> Option<&MethodSummary> {
        self.summary.iter().find(|m| m.method == label)
    }

    pub fn baseline(&self, name: &str) -> Option<&MethodSummary> {
        self.baseline_summary.iter().find(|m| m.method == name)
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn summarize(
    method: &str,
    retain_mode: &str,
    rows: &[&PeakRow],
    curves: &[Vec<EvalRecord>],
) -> MethodSummary {
    let epochs = curves.iter().map(Vec::len).min().unwrap_or(0);
    let curve = |f: fn(&EvalRecord) -> f64| -> Vec<f64> {
        (0..epochs)
            .map(|e| mean(curves.iter().map(|c| f(&c[e]))))
            .collect()
    };
    MethodSummary {
        method: method.to_string(),
        retain_mode: retain_mode.to_string(),
        forget_quality: mean(rows.iter().map(|r| r.report.forget_quality)),
        model_utility: mean(rows.iter().map(|r| r.report.model_utility)),
        forget_rouge_l: mean(rows.iter().map(|r| r.report.forget_rouge_l)),
        forget_prob: mean(rows.iter().map(|r| r.report.forget_prob)),
        leakage: mean(rows.iter().map(|r| r.leakage)),
        forget_quality_curve: curve(|r| r.report.forget_quality),
        model_utility_curve: curve(|r| r.report.model_utility),
    }
}

fn spec_row(
    cfg: &ExperimentConfig,
    spec: Option<&UnlearnSpec>,
    name: &str,
    rec: &EvalRecord,
) -> PeakRow {
    PeakRow {
        method: name.to_string(),
        retain_mode: spec.map_or("none", |s| s.retain_mode.name()).to_string(),
        forget_pct: cfg.corpus.forget_pct,
        seed: rec.seed,
        peak_epoch: rec.epoch,
        leakage: rec.leakage,
        report: rec.report,
    }
}

/// Reads every evaluation record and builds the report without writing it.
pub fn build_report(cfg: &ExperimentConfig, dir: &RunDir) -> Result<Report> {
    let mut baselines = Vec::new();
    let mut baseline_summary = Vec::new();
    for name in ["original", "retrain"] {
        let mut rows = Vec::new();
        let mut curves = Vec::new();
        for &seed in &cfg.seeds {
            let rec = load_record("report", &dir.eval(seed, name))?;
            rows.push(spec_row(cfg, None, name, &rec));
            curves.push(vec![rec]);
        }
        baseline_summary.push(summarize(
            name,
            "none",
            &rows.iter().collect::<Vec<_>>(),
            &curves,
        ));
        baselines.extend(rows);
    }

    let mut peaks = Vec::new();
    let mut summary = Vec::new();
    for spec in &cfg.methods {
        let label = spec.label();
        let mut rows = Vec::new();
        let mut curves = Vec::new();
        for &seed in &cfg.seeds {
            let curve = (1..=epochs_of(spec))
                .map(|e| load_record("report", &dir.epoch_eval(seed, &label, e)))
                .collect::<Result<Vec<_>>>()?;
            let fq: Vec<f64> = curve.iter().map(|r| r.report.forget_quality).collect();
            let peak = select_peak(&fq);
            rows.push(spec_row(cfg, Some(spec), &label, &curve[peak - 1]));
            curves.push(curve);
        }
        summary.push(summarize(
            &label,
            spec.retain_mode.name(),
            &rows.iter().collect::<Vec<_>>(),
            &curves,
        ));
        peaks.extend(rows);
    }
    Ok(Report {
        name: cfg.name.clone(),
        seeds: cfg.seeds.clone(),
        baselines,
        peaks,
        summary,
        baseline_summary,
    })
}

pub const CSV_HEADER: [&str; 18] = [
    "method",
    "retain_mode",
    "forget_pct",
    "seed",
    "peak_epoch",
    "forget_quality",
    "model_utility",
    "retain_rouge_l",
    "retain_prob",
    "retain_truth_ratio",
    "held_out_rouge_l",
    "held_out_prob",
    "held_out_truth_ratio",
    "world_rouge_l",
    "world_prob",
    "world_truth_ratio",
    "forget_rouge_l",
    "forget_prob",
];

fn csv_record(row: &PeakRow) -> Vec<String> {
    let r = &row.report;
    let mut out = vec![
        row.method.clone(),
        row.retain_mode.clone(),
        row.forget_pct.to_string(),
        row.seed.to_string(),
        row.peak_epoch.to_string(),
        r.forget_quality.to_string(),
        r.model_utility.to_string(),
    ];
    out.extend(r.components().iter().map(f64::to_string));
    out.push(r.forget_rouge_l.to_string());
    out.push(r.forget_prob.to_string());
    out
}

/// Per-seed rows: the two baselines, then each method at its peak epoch.
pub fn to_csv(report: &Report) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    for row in report.baselines.iter().chain(&report.peaks) {
        w.write_record(csv_record(row))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| csv::Error::from(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv of utf-8 fields"))
}

/// Builds the report and writes `report.csv` and `report.json`.
pub fn cmd_report(cfg: &ExperimentConfig, dir: &RunDir) -> Result<Report> {
    crate::pipeline::prepare(dir, cfg)?;
    let report = build_report(cfg, dir)?;
    let csv = to_csv(&report)?;
    let path = dir.report_csv();
    std::fs::write(&path, csv).map_err(crate::error::io_err(&path))?;
    save_json(&dir.report_json(), &report)?;
    Ok(report)
}
