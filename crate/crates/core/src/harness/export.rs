//! Writing experiment and sweep results to disk.
//!
//! CSV files carry a fixed header row; JSON files embed [`OUTPUT_SCHEMA_VERSION`]. The only
//! nondeterministic value (the wall-clock timestamp) lives in `metadata.json`, so every other
//! file is byte-identical across repeated invocations with the same config and seed.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::bounds::BoundReport;
use crate::error::{Error, Result};
use crate::harness::experiment::{ExperimentResult, RuleResult};
use crate::harness::sweep::{CrossoverReport, SweepResult};
use crate::training::Rule;

pub const OUTPUT_SCHEMA_VERSION: u32 = 1;

pub const PER_ITERATION_CSV: &str = "per_iteration.csv";
pub const PER_RUN_CSV: &str = "per_run.csv";
pub const AGGREGATE_CSV: &str = "aggregate.csv";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const CROSSOVER_CSV: &str = "crossover.csv";
pub const METRICS_JSON: &str = "metrics.json";
pub const BOUND_AUDIT_JSON: &str = "bound_audit.json";
pub const METADATA_JSON: &str = "metadata.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    #[default]
    Csv,
    Json,
}

impl std::str::FromStr for ExportFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "csv" => Ok(ExportFormat::Csv),
            "json" => Ok(ExportFormat::Json),
            other => Err(format!("unknown format `{other}` (expected csv or json)")),
        }
    }
}

fn num(x: f64) -> String {
    format!("{x}")
}

struct CsvOut {
    path: PathBuf,
    writer: csv::Writer<File>,
}

impl CsvOut {
    fn create(dir: &Path, name: &str, header: &[String]) -> Result<Self> {
        let path = dir.join(name);
        let writer = csv::Writer::from_path(&path).map_err(|source| Error::Csv {
            path: path.clone(),
            source,
        })?;
        let mut out = CsvOut { path, writer };
        out.row(header)?;
        Ok(out)
    }

    fn row<S: AsRef<[u8]>>(&mut self, fields: &[S]) -> Result<()> {
        self.writer
            .write_record(fields)
            .map_err(|source| Error::Csv {
                path: self.path.clone(),
                source,
            })
    }

    fn finish(mut self) -> Result<PathBuf> {
        self.writer
            .flush()
            .map_err(|e| Error::io(self.path.clone(), e))?;
        Ok(self.path)
    }
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf> {
    let path = dir.join(name);
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn ensure_nonempty(result: &ExperimentResult) -> Result<()> {
    if result.rules.iter().all(|r| r.runs.is_empty()) {
        return Err(Error::EmptySeries(
            "experiment has no completed runs".into(),
        ));
    }
    Ok(())
}

fn tau_headers(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}_{i}")).collect()
}

pub fn per_iteration_header(n_clients: usize) -> Vec<String> {
    let mut h: Vec<String> = [
        "run", "t", "rule", "loss", "loss_gap", "distance", "set_size",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    h.extend(tau_headers("tau", n_clients));
    h.push("error_norm".into());
    h
}

pub fn per_run_header(n_clients: usize) -> Vec<String> {
    let mut h: Vec<String> = [
        "rule",
        "run",
        "seed",
        "final_loss_gap",
        "final_iterate_gap",
        "final_distance",
        "max_distance",
        "radius_violation",
        "mean_set_size",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    h.extend(tau_headers("mean_tau", n_clients));
    h.extend(
        ["bound", "lemma1_lhs", "lemma1_rhs", "lemma1_satisfied"]
            .iter()
            .map(|s| s.to_string()),
    );
    h
}

pub const AGGREGATE_HEADER: [&str; 13] = [
    "rule",
    "runs",
    "divergent",
    "mean_final_loss_gap",
    "std_final_loss_gap",
    "mean_final_iterate_gap",
    "std_final_iterate_gap",
    "mean_final_distance",
    "std_final_distance",
    "bound",
    "theta",
    "radius_violations",
    "lemma1_failures",
];

pub const SWEEP_HEADER: [&str; 8] = [
    "axis",
    "value",
    "rule",
    "runs",
    "mean_final_loss_gap",
    "std_final_loss_gap",
    "bound",
    "theta",
];

pub const CROSSOVER_HEADER: [&str; 10] = [
    "axis",
    "value",
    "mean_audg",
    "mean_psurdg",
    "paired_mean_diff",
    "paired_runs",
    "empirical_sign",
    "theta",
    "theta_sign",
    "agree",
];

fn owned(h: &[&str]) -> Vec<String> {
    h.iter().map(|s| s.to_string()).collect()
}

fn per_iteration_rows(out: &mut CsvOut, rr: &RuleResult) -> Result<()> {
    for run in &rr.runs {
        for m in &run.series {
            let mut row = vec![
                run.run.to_string(),
                m.t.to_string(),
                rr.rule.to_string(),
                num(m.loss),
                num(m.loss_gap),
                num(m.distance),
                m.set_size.to_string(),
            ];
            row.extend(m.delays.iter().map(u64::to_string));
            row.push(num(m.error_norm));
            out.row(&row)?;
        }
    }
    Ok(())
}

fn per_run_rows(out: &mut CsvOut, rr: &RuleResult, prefix: &[String]) -> Result<()> {
    for run in &rr.runs {
        let mut row = prefix.to_vec();
        row.extend([
            rr.rule.to_string(),
            run.run.to_string(),
            run.seed.to_string(),
            num(run.final_loss_gap),
            num(run.final_iterate_gap),
            num(run.final_distance),
            num(run.max_distance),
            run.radius_violation.to_string(),
            num(run.delay_stats.mean_set_size),
        ]);
        row.extend(run.delay_stats.per_client.iter().map(|m| num(m.m1)));
        row.extend([
            num(run.bounds.bound_for(rr.rule)),
            num(run.lemma1.lhs),
            num(run.lemma1.rhs),
            run.lemma1.satisfied.to_string(),
        ]);
        out.row(&row)?;
    }
    Ok(())
}

fn aggregate_row(rr: &RuleResult) -> Vec<String> {
    let a = &rr.aggregate;
    vec![
        rr.rule.to_string(),
        a.runs.to_string(),
        a.divergent.to_string(),
        num(a.final_loss_gap.mean),
        num(a.final_loss_gap.std_dev),
        num(a.final_iterate_gap.mean),
        num(a.final_iterate_gap.std_dev),
        num(a.final_distance.mean),
        num(a.final_distance.std_dev),
        num(a.bound()),
        num(a.bounds.theta),
        a.radius_violations.to_string(),
        a.lemma1_failures.to_string(),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleBoundAudit {
    pub rule: Rule,
    pub mean_final_loss_gap: f64,
    pub bound: f64,
    pub report: BoundReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundAudit {
    pub schema_version: u32,
    pub entries: Vec<RuleBoundAudit>,
}

impl BoundAudit {
    pub fn of(result: &ExperimentResult) -> Self {
        BoundAudit {
            schema_version: OUTPUT_SCHEMA_VERSION,
            entries: result
                .rules
                .iter()
                .map(|rr| RuleBoundAudit {
                    rule: rr.rule,
                    mean_final_loss_gap: rr.aggregate.final_loss_gap.mean,
                    bound: rr.aggregate.bound(),
                    report: rr.aggregate.bounds.clone(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsDocument {
    pub schema_version: u32,
    pub result: ExperimentResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub schema_version: u32,
    pub tool_version: String,
    pub command: String,
    pub generated_at_unix: u64,
}

fn write_metadata(dir: &Path, command: &str) -> Result<PathBuf> {
    let generated_at_unix = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    write_json(
        dir,
        METADATA_JSON,
        &Metadata {
            schema_version: OUTPUT_SCHEMA_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            generated_at_unix,
        },
    )
}

/// Write one experiment's outputs into `dir`; returns the files written.
pub fn export_experiment(
    result: &ExperimentResult,
    dir: &Path,
    format: ExportFormat,
    per_iteration: bool,
) -> Result<Vec<PathBuf>> {
    ensure_nonempty(result)?;
    ensure_dir(dir)?;
    let mut written = Vec::new();
    match format {
        ExportFormat::Csv => {
            if per_iteration {
                let mut out = CsvOut::create(
                    dir,
                    PER_ITERATION_CSV,
                    &per_iteration_header(result.n_clients),
                )?;
                for rr in &result.rules {
                    per_iteration_rows(&mut out, rr)?;
                }
                written.push(out.finish()?);
            }
            let mut out = CsvOut::create(dir, PER_RUN_CSV, &per_run_header(result.n_clients))?;
            for rr in &result.rules {
                per_run_rows(&mut out, rr, &[])?;
            }
            written.push(out.finish()?);

            let mut out = CsvOut::create(dir, AGGREGATE_CSV, &owned(&AGGREGATE_HEADER))?;
            for rr in &result.rules {
                out.row(&aggregate_row(rr))?;
            }
            written.push(out.finish()?);
        }
        ExportFormat::Json => {
            let doc = MetricsDocument {
                schema_version: OUTPUT_SCHEMA_VERSION,
                result: result.clone(),
            };
            written.push(write_json(dir, METRICS_JSON, &doc)?);
        }
    }
    written.push(write_json(dir, BOUND_AUDIT_JSON, &BoundAudit::of(result))?);
    written.push(write_metadata(dir, "run")?);
    Ok(written)
}

/// Write a sweep's tidy table, per-run rows (prefixed by axis and value), crossover table when
/// both asynchronous rules ran, and bound audit.
pub fn export_sweep(
    sweep: &SweepResult,
    crossover: Option<&CrossoverReport>,
    dir: &Path,
    format: ExportFormat,
) -> Result<Vec<PathBuf>> {
    if sweep.points.is_empty() {
        return Err(Error::EmptySeries("sweep has no points".into()));
    }
    for p in &sweep.points {
        ensure_nonempty(&p.result)?;
    }
    ensure_dir(dir)?;
    let mut written = Vec::new();
    match format {
        ExportFormat::Csv => {
            let mut out = CsvOut::create(dir, SWEEP_CSV, &owned(&SWEEP_HEADER))?;
            for r in sweep.rows() {
                out.row(&[
                    r.axis.clone(),
                    num(r.value),
                    r.rule.to_string(),
                    r.runs.to_string(),
                    num(r.mean_final_loss_gap),
                    num(r.std_final_loss_gap),
                    num(r.bound),
                    num(r.theta),
                ])?;
            }
            written.push(out.finish()?);

            let n = sweep.points[0].result.n_clients;
            let mut header = owned(&["axis", "value"]);
            header.extend(per_run_header(n));
            let mut out = CsvOut::create(dir, PER_RUN_CSV, &header)?;
            for p in &sweep.points {
                let prefix = [sweep.axis.clone(), num(p.value)];
                for rr in &p.result.rules {
                    per_run_rows(&mut out, rr, &prefix)?;
                }
            }
            written.push(out.finish()?);

            if let Some(c) = crossover {
                let mut out = CsvOut::create(dir, CROSSOVER_CSV, &owned(&CROSSOVER_HEADER))?;
                for r in &c.rows {
                    out.row(&[
                        c.axis.clone(),
                        num(r.value),
                        num(r.mean_audg),
                        num(r.mean_psurdg),
                        num(r.paired_mean_diff),
                        r.paired_runs.to_string(),
                        r.empirical_sign.to_string(),
                        num(r.theta),
                        r.theta_sign.to_string(),
                        r.agree.to_string(),
                    ])?;
                }
                written.push(out.finish()?);
            }
        }
        ExportFormat::Json => {
            #[derive(Serialize)]
            struct SweepDocument<'a> {
                schema_version: u32,
                sweep: &'a SweepResult,
                crossover: Option<&'a CrossoverReport>,
            }
            written.push(write_json(
                dir,
                METRICS_JSON,
                &SweepDocument {
                    schema_version: OUTPUT_SCHEMA_VERSION,
                    sweep,
                    crossover,
                },
            )?);
        }
    }
    let audits: Vec<(f64, BoundAudit)> = sweep
        .points
        .iter()
        .map(|p| (p.value, BoundAudit::of(&p.result)))
        .collect();
    written.push(write_json(dir, BOUND_AUDIT_JSON, &audits)?);
    written.push(write_metadata(dir, "sweep")?);
    Ok(written)
}
