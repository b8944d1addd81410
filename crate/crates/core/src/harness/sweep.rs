//! Parameter sweeps with paired seeds and the PSURDG-vs-AUDG crossover report.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::config::{ExperimentConfig, SweepSpec};
use crate::harness::experiment::{run_experiment, ExperimentResult, RuleResult};
use crate::training::Rule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub result: ExperimentResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis: String,
    pub spec: SweepSpec,
    pub points: Vec<SweepPoint>,
}

/// One row of the tidy sweep table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: f64,
    pub rule: Rule,
    pub runs: usize,
    pub mean_final_loss_gap: f64,
    pub std_final_loss_gap: f64,
    pub bound: f64,
    pub theta: f64,
}

/// Run the config once per axis point. Every point reuses the same master seed, so run `r`
/// sees the same per-client random streams everywhere on the axis.
pub fn run_sweep(config: &ExperimentConfig) -> Result<SweepResult> {
    config.validate()?;
    let spec = config
        .sweep
        .clone()
        .ok_or_else(|| Error::config("sweep", "config has no [sweep] section"))?;
    sweep_with(config, &spec)
}

pub fn sweep_with(base: &ExperimentConfig, spec: &SweepSpec) -> Result<SweepResult> {
    let values = spec.values();
    let points = (0..values.len())
        .map(|i| {
            let cfg = spec.apply(base, i);
            Ok(SweepPoint {
                value: values[i],
                result: run_experiment(&cfg)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult {
        axis: spec.name().to_string(),
        spec: spec.clone(),
        points,
    })
}

impl SweepResult {
    pub fn rows(&self) -> Vec<SweepRow> {
        self.points
            .iter()
            .flat_map(|p| {
                p.result.rules.iter().map(move |rr| SweepRow {
                    axis: self.axis.clone(),
                    value: p.value,
                    rule: rr.rule,
                    runs: rr.aggregate.runs,
                    mean_final_loss_gap: rr.aggregate.final_loss_gap.mean,
                    std_final_loss_gap: rr.aggregate.final_loss_gap.std_dev,
                    bound: rr.aggregate.bound(),
                    theta: rr.aggregate.bounds.theta,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossoverRow {
    pub value: f64,
    pub mean_audg: f64,
    pub mean_psurdg: f64,
    /// Mean over paired runs of `psurdg − audg`; negative means PSURDG did better.
    pub paired_mean_diff: f64,
    pub paired_runs: usize,
    pub empirical_sign: i8,
    pub theta: f64,
    pub theta_sign: i8,
    pub agree: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossoverReport {
    pub axis: String,
    pub rows: Vec<CrossoverRow>,
    pub agreement_rate: f64,
}

fn sign(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

/// Mean of `b − a` over runs present (not divergent) in both.
pub fn paired_mean_difference(a: &RuleResult, b: &RuleResult) -> (f64, usize) {
    let diffs: Vec<f64> = b
        .runs
        .iter()
        .filter_map(|rb| {
            a.runs
                .iter()
                .find(|ra| ra.run == rb.run)
                .map(|ra| rb.final_loss_gap - ra.final_loss_gap)
        })
        .collect();
    let n = diffs.len();
    (diffs.iter().sum::<f64>() / n as f64, n)
}

/// Pair the empirical winner at each axis point with the sign of `Θ`.
///
/// `Θ` is taken from the AUDG aggregate; both rules see identical transmission traces, so the
/// pooled moments coincide.
pub fn crossover_report(sweep: &SweepResult) -> Result<CrossoverReport> {
    let mut rows = Vec::with_capacity(sweep.points.len());
    for p in &sweep.points {
        let audg = p
            .result
            .rule(Rule::Audg)
            .ok_or_else(|| Error::MissingRule(Rule::Audg.to_string()))?;
        let psurdg = p
            .result
            .rule(Rule::Psurdg)
            .ok_or_else(|| Error::MissingRule(Rule::Psurdg.to_string()))?;
        let (paired_mean_diff, paired_runs) = paired_mean_difference(audg, psurdg);
        let theta = audg.aggregate.bounds.theta;
        let empirical_sign = sign(paired_mean_diff);
        let theta_sign = sign(theta);
        rows.push(CrossoverRow {
            value: p.value,
            mean_audg: audg.aggregate.final_loss_gap.mean,
            mean_psurdg: psurdg.aggregate.final_loss_gap.mean,
            paired_mean_diff,
            paired_runs,
            empirical_sign,
            theta,
            theta_sign,
            agree: empirical_sign == theta_sign,
        });
    }
    let agreement_rate = if rows.is_empty() {
        0.0
    } else {
        rows.iter().filter(|r| r.agree).count() as f64 / rows.len() as f64
    };
    Ok(CrossoverReport {
        axis: sweep.axis.clone(),
        rows,
        agreement_rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
version = 1

[objective.family]
n_clients = 3
dimension = 3
target_phi = 2.0
condition_range = [1.0, 2.0]
seed = 5

[channel]
upload_success = [0.5, 0.5, 0.5]

[training]
rules = ["audg", "psurdg"]
learning_rate_scale = 0.5
horizon = 25
init = { kind = "random", seed = 1, distance = 6.0 }

[monte_carlo]
runs = 3
master_seed = 17
"#;

    #[test]
    fn single_point_sweep_equals_plain_run() {
        let cfg = ExperimentConfig::from_toml_str(BASE).unwrap();
        let spec = SweepSpec::ClientDelay {
            client: 0,
            values: vec![0.5],
        };
        let sweep = sweep_with(&cfg, &spec).unwrap();
        assert_eq!(sweep.points[0].result, run_experiment(&cfg).unwrap());
        assert_eq!(sweep.rows().len(), 2);
    }

    #[test]
    fn crossover_needs_both_rules() {
        let text = BASE.replace(r#"["audg", "psurdg"]"#, r#"["audg"]"#);
        let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
        let spec = SweepSpec::Heterogeneity {
            values: vec![0.0, 2.0],
        };
        let sweep = sweep_with(&cfg, &spec).unwrap();
        assert!(matches!(
            crossover_report(&sweep),
            Err(Error::MissingRule(_))
        ));
    }

    #[test]
    fn crossover_rows_are_consistent() {
        let cfg = ExperimentConfig::from_toml_str(BASE).unwrap();
        let spec = SweepSpec::Heterogeneity {
            values: vec![0.0, 4.0],
        };
        let report = crossover_report(&sweep_with(&cfg, &spec).unwrap()).unwrap();
        assert_eq!(report.rows.len(), 2);
        for r in &report.rows {
            assert_eq!(r.paired_runs, 3);
            assert!((r.paired_mean_diff - (r.mean_psurdg - r.mean_audg)).abs() < 1e-12);
            assert_eq!(r.agree, r.empirical_sign == r.theta_sign);
        }
    }
}
