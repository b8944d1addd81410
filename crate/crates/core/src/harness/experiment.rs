//! Monte Carlo execution of one experiment configuration.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{
    async_error_trace, evaluate, lemma1_check, BoundInputs, BoundReport, Lemma1Check,
};
use crate::delay::{
    empirical_delay_moments, mix_seed, ChannelModel, DelayMoments, EmpiricalDelayStats,
};
use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::objective::{compute_constants, GlobalObjective, ObjectiveConstants};
use crate::training::{run_training, IterationMetrics, Rule, TrainingConfig};

/// Seed for the gradient-bound probe in [`compute_constants`].
const PROBE_SEED: u64 = 0x5eed_9a0b;

/// Relative tolerance before a trajectory is said to have left the `R`-ball.
const RADIUS_TOLERANCE: f64 = 1e-12;

/// Everything derived from a config before any run starts.
#[derive(Debug, Clone)]
pub struct PreparedExperiment {
    pub config: ExperimentConfig,
    pub objective: GlobalObjective,
    pub channel: ChannelModel,
    pub init: DVector<f64>,
    pub constants: ObjectiveConstants,
    pub learning_rate: f64,
}

impl PreparedExperiment {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let objective = config.build_objective()?;
        let channel = config.build_channel()?;
        let init = config.initial_point(&objective)?;
        let constants = compute_constants(&objective, &config.radius_policy(&init), PROBE_SEED)?;
        let learning_rate = config.learning_rate(constants.smoothness);
        Ok(Self {
            config: config.clone(),
            objective,
            channel,
            init,
            constants,
            learning_rate,
        })
    }

    pub fn run_seed(&self, run: u64) -> u64 {
        mix_seed(self.config.monte_carlo.master_seed, run)
    }

    pub fn training_config(&self, rule: Rule, run: u64) -> TrainingConfig {
        TrainingConfig {
            rule,
            learning_rate: self.learning_rate,
            horizon: self.config.training.horizon,
            init: self.init.iter().copied().collect(),
            seed: self.run_seed(run),
            cache_init: self.config.training.cache_init,
        }
    }

    /// Execute one seeded run and attach its bounds, assumption flag and lemma check.
    pub fn execute(&self, rule: Rule, run: u64) -> Result<RunMetrics> {
        let cfg = self.training_config(rule, run);
        let result = run_training(&self.objective, &self.channel, &cfg)?;
        let delay_stats = empirical_delay_moments(&result.trace)?;
        let inputs = BoundInputs::empirical(
            self.constants,
            self.learning_rate,
            cfg.horizon,
            self.objective.weights(),
            &delay_stats,
        )?;
        let radius_violation =
            result.max_distance > self.constants.compactness_radius * (1.0 + RADIUS_TOLERANCE);
        let mut bounds = evaluate(&inputs)?;
        bounds.assumption_violation = radius_violation;
        let errors = async_error_trace(&self.objective, &result)?;
        let lemma1 = lemma1_check(
            &self.objective,
            &result.trajectory,
            &errors.inner_products(),
            self.learning_rate,
        )?;
        Ok(RunMetrics {
            rule,
            run,
            seed: cfg.seed,
            final_loss_gap: result.final_loss_gap,
            final_iterate_gap: result.final_iterate_gap,
            final_distance: result.final_distance,
            max_distance: result.max_distance,
            radius_violation,
            delay_stats,
            bounds,
            lemma1,
            series: result.metrics,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub rule: Rule,
    pub run: u64,
    pub seed: u64,
    /// `f(ŵ(T)) − f(w*)`; the per-run "final loss".
    pub final_loss_gap: f64,
    /// `f(w^{T+1}) − f(w*)`.
    pub final_iterate_gap: f64,
    pub final_distance: f64,
    pub max_distance: f64,
    pub radius_violation: bool,
    pub delay_stats: EmpiricalDelayStats,
    pub bounds: BoundReport,
    pub lemma1: Lemma1Check,
    pub series: Vec<IterationMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergentRun {
    pub rule: Rule,
    pub run: u64,
    pub seed: u64,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std_dev: f64,
}

impl Summary {
    /// Mean and sample standard deviation (zero for a single value).
    pub fn of(values: &[f64]) -> Summary {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std_dev = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Summary { mean, std_dev }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleAggregate {
    pub rule: Rule,
    pub runs: usize,
    pub divergent: usize,
    pub final_loss_gap: Summary,
    pub final_iterate_gap: Summary,
    pub final_distance: Summary,
    pub radius_violations: usize,
    pub lemma1_failures: usize,
    /// Bounds evaluated with delay moments pooled over every included run.
    pub bounds: BoundReport,
}

impl RuleAggregate {
    pub fn bound(&self) -> f64 {
        self.bounds.bound_for(self.rule)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleResult {
    pub rule: Rule,
    pub runs: Vec<RunMetrics>,
    pub divergent: Vec<DivergentRun>,
    pub aggregate: RuleAggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub constants: ObjectiveConstants,
    pub learning_rate: f64,
    pub horizon: u64,
    pub n_clients: usize,
    pub rules: Vec<RuleResult>,
}

impl ExperimentResult {
    pub fn rule(&self, rule: Rule) -> Option<&RuleResult> {
        self.rules.iter().find(|r| r.rule == rule)
    }
}

fn pooled_stats(runs: &[RunMetrics]) -> EmpiricalDelayStats {
    let n_clients = runs[0].delay_stats.per_client.len();
    let count = runs.len() as f64;
    let mut per_client = vec![DelayMoments::ZERO; n_clients];
    let mut mean_set_size = 0.0;
    for r in runs {
        for (acc, m) in per_client.iter_mut().zip(&r.delay_stats.per_client) {
            acc.m1 += m.m1 / count;
            acc.m2 += m.m2 / count;
            acc.m3 += m.m3 / count;
        }
        mean_set_size += r.delay_stats.mean_set_size / count;
    }
    // Averaging in floating point can nudge the pooled mean set size past N by an ulp.
    mean_set_size = mean_set_size.min(n_clients as f64);
    EmpiricalDelayStats {
        per_client,
        upload_time: vec![None; n_clients],
        mean_set_size,
        iterations: runs.iter().map(|r| r.delay_stats.iterations).sum(),
    }
}

fn aggregate(
    prepared: &PreparedExperiment,
    rule: Rule,
    runs: &[RunMetrics],
    divergent: usize,
) -> Result<RuleAggregate> {
    let pick = |f: fn(&RunMetrics) -> f64| runs.iter().map(f).collect::<Vec<_>>();
    let inputs = BoundInputs::empirical(
        prepared.constants,
        prepared.learning_rate,
        prepared.config.training.horizon,
        prepared.objective.weights(),
        &pooled_stats(runs),
    )?;
    let mut bounds = evaluate(&inputs)?;
    let radius_violations = runs.iter().filter(|r| r.radius_violation).count();
    bounds.assumption_violation = radius_violations > 0;
    Ok(RuleAggregate {
        rule,
        runs: runs.len(),
        divergent,
        final_loss_gap: Summary::of(&pick(|r| r.final_loss_gap)),
        final_iterate_gap: Summary::of(&pick(|r| r.final_iterate_gap)),
        final_distance: Summary::of(&pick(|r| r.final_distance)),
        radius_violations,
        lemma1_failures: runs.iter().filter(|r| !r.lemma1.satisfied).count(),
        bounds,
    })
}

/// Run every configured rule `monte_carlo.runs` times. Run `r` uses seed
/// `mix_seed(master_seed, r)` under every rule, so rules are compared on identical channel draws.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    let prepared = PreparedExperiment::new(config)?;
    run_prepared(&prepared)
}

pub fn run_prepared(prepared: &PreparedExperiment) -> Result<ExperimentResult> {
    let config = &prepared.config;
    let jobs: Vec<(Rule, u64)> = config
        .training
        .rules
        .iter()
        .flat_map(|&rule| (0..config.monte_carlo.runs).map(move |run| (rule, run)))
        .collect();
    let outcomes: Vec<(Rule, u64, Result<RunMetrics>)> = jobs
        .into_par_iter()
        .map(|(rule, run)| (rule, run, prepared.execute(rule, run)))
        .collect();

    let mut rules = Vec::with_capacity(config.training.rules.len());
    for &rule in &config.training.rules {
        let mut runs = Vec::new();
        let mut divergent = Vec::new();
        for (r, run, outcome) in outcomes.iter().filter(|(r, ..)| *r == rule) {
            match outcome {
                Ok(m) => runs.push(m.clone()),
                Err(Error::Divergence { iteration, reason }) => {
                    if !config.monte_carlo.exclude_divergent {
                        return Err(Error::Divergence {
                            iteration: *iteration,
                            reason: format!("{rule} run {run}: {reason}"),
                        });
                    }
                    divergent.push(DivergentRun {
                        rule: *r,
                        run: *run,
                        seed: prepared.run_seed(*run),
                        message: format!("iteration {iteration}: {reason}"),
                    });
                }
                Err(e) => return Err(clone_error(e)),
            }
        }
        if runs.is_empty() {
            return Err(Error::EmptySeries(format!("every {rule} run diverged")));
        }
        let aggregate = aggregate(prepared, rule, &runs, divergent.len())?;
        rules.push(RuleResult {
            rule,
            runs,
            divergent,
            aggregate,
        });
    }
    Ok(ExperimentResult {
        constants: prepared.constants,
        learning_rate: prepared.learning_rate,
        horizon: config.training.horizon,
        n_clients: prepared.objective.n_clients(),
        rules,
    })
}

/// Errors are not `Clone` (they may wrap I/O errors); model errors are rebuilt from their message.
fn clone_error(e: &Error) -> Error {
    match e {
        Error::Divergence { iteration, reason } => Error::Divergence {
            iteration: *iteration,
            reason: reason.clone(),
        },
        other => Error::InvalidObjective(other.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
version = 1

[objective.family]
n_clients = 3
dimension = 4
target_phi = 1.0
condition_range = [1.0, 3.0]
seed = 5

[channel]
upload_success = [0.5, 0.4, 0.8]

[training]
rules = ["sfl", "audg", "psurdg"]
learning_rate_scale = 0.5
horizon = 30
init = { kind = "random", seed = 1, distance = 6.0 }

[monte_carlo]
runs = 5
master_seed = 17
"#;

    #[test]
    fn aggregate_mean_matches_per_run_rows() {
        let res = run_experiment(&ExperimentConfig::from_toml_str(BASE).unwrap()).unwrap();
        for rr in &res.rules {
            let mean = rr.runs.iter().map(|r| r.final_loss_gap).sum::<f64>() / rr.runs.len() as f64;
            assert!((rr.aggregate.final_loss_gap.mean - mean).abs() <= 1e-12 * mean.abs().max(1.0));
            assert_eq!(rr.aggregate.lemma1_failures, 0);
            assert!(rr.runs.iter().all(|r| r.series.len() == 30));
        }
        let sfl = res.rule(Rule::Sfl).unwrap();
        assert_eq!(sfl.aggregate.bounds.inputs.mean_set_size, 3.0);
    }

    #[test]
    fn perfect_channel_makes_rules_agree() {
        let text = BASE
            .replace("[0.5, 0.4, 0.8]", "[1.0, 1.0, 1.0]")
            .replace("runs = 5", "runs = 1");
        let res = run_experiment(&ExperimentConfig::from_toml_str(&text).unwrap()).unwrap();
        let sfl = &res.rule(Rule::Sfl).unwrap().aggregate;
        let audg = &res.rule(Rule::Audg).unwrap().aggregate;
        assert_eq!(sfl.final_loss_gap, audg.final_loss_gap);
    }

    #[test]
    fn divergence_fails_unless_excluded() {
        let text = BASE.replace("learning_rate_scale = 0.5", "learning_rate_scale = 3.0");
        let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
        assert!(matches!(
            run_experiment(&cfg),
            Err(Error::Divergence { .. })
        ));
    }

    #[test]
    fn summary_of_single_value() {
        let s = Summary::of(&[2.0]);
        assert_eq!(s.mean, 2.0);
        assert_eq!(s.std_dev, 0.0);
        let s = Summary::of(&[1.0, 3.0]);
        assert!((s.std_dev - 2f64.sqrt()).abs() < 1e-15);
    }
}
