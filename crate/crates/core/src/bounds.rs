//! Closed-form convergence bounds for the three aggregation rules, the asynchronous error
//! `e(t)`, and a numerical check of the error-separation inequality.
//!
//! All bounds take exact delay moments `(E[τ], E[τ²], E[τ³])` per client rather than plugging
//! `E[τ]` into the staleness polynomial.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::delay::{
    geometric_delay_moments, ChannelModel, DelayMoments, EmpiricalDelayStats, TransmissionTrace,
};
use crate::error::{Error, Result};
use crate::objective::{GlobalObjective, ObjectiveConstants};
use crate::training::{CacheInit, Rule, TrainingRun};

/// Relative slack allowed when checking `m2 >= m1²` on moments estimated in floating point.
const MOMENT_TOLERANCE: f64 = 1e-12;

/// Where the delay moments in a [`BoundInputs`] came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentSource {
    /// Stationary moments of the Bernoulli channel.
    Analytic,
    /// Time averages over a recorded transmission trace.
    Empirical,
    /// Supplied by hand, e.g. from a bounds file.
    Manual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub constants: ObjectiveConstants,
    pub learning_rate: f64,
    pub horizon: u64,
    pub weights: Vec<f64>,
    pub delay_moments: Vec<DelayMoments>,
    pub mean_set_size: f64,
    pub source: MomentSource,
}

impl BoundInputs {
    /// Zero delays and full participation: the synchronous setting.
    pub fn synchronous(
        constants: ObjectiveConstants,
        learning_rate: f64,
        horizon: u64,
        weights: Vec<f64>,
    ) -> Self {
        let n = weights.len();
        Self {
            constants,
            learning_rate,
            horizon,
            delay_moments: vec![DelayMoments::ZERO; n],
            mean_set_size: n as f64,
            weights,
            source: MomentSource::Analytic,
        }
    }

    /// Stationary moments of a default Bernoulli channel: `E[|I_t|] = Σ ϕ_i`.
    pub fn analytic(
        constants: ObjectiveConstants,
        learning_rate: f64,
        horizon: u64,
        weights: Vec<f64>,
        channel: &ChannelModel,
    ) -> Result<Self> {
        if !channel.is_default_model() {
            return Err(Error::InvalidBoundInputs(
                "analytic moments need download probability 1 and one compute round".into(),
            ));
        }
        let delay_moments = channel
            .clients()
            .iter()
            .map(|c| geometric_delay_moments(c.upload_success_prob))
            .collect::<Result<Vec<_>>>()?;
        let mean_set_size = channel
            .clients()
            .iter()
            .map(|c| c.upload_success_prob)
            .sum();
        let inputs = Self {
            constants,
            learning_rate,
            horizon,
            weights,
            delay_moments,
            mean_set_size,
            source: MomentSource::Analytic,
        };
        inputs.validate()?;
        Ok(inputs)
    }

    pub fn empirical(
        constants: ObjectiveConstants,
        learning_rate: f64,
        horizon: u64,
        weights: Vec<f64>,
        stats: &EmpiricalDelayStats,
    ) -> Result<Self> {
        let inputs = Self {
            constants,
            learning_rate,
            horizon,
            weights,
            delay_moments: stats.per_client.clone(),
            mean_set_size: stats.mean_set_size,
            source: MomentSource::Empirical,
        };
        inputs.validate()?;
        Ok(inputs)
    }

    pub fn n_clients(&self) -> usize {
        self.weights.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidBoundInputs(msg));
        self.constants
            .validate()
            .map_err(|e| Error::InvalidBoundInputs(e.to_string()))?;
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if self.horizon == 0 {
            return bad("horizon T must be at least 1".into());
        }
        let n = self.weights.len();
        if n == 0 {
            return bad("no clients".into());
        }
        if self.delay_moments.len() != n {
            return bad(format!(
                "{} weights but {} delay moment triples",
                n,
                self.delay_moments.len()
            ));
        }
        if self.weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return bad("weights must be finite and nonnegative".into());
        }
        if !(self.mean_set_size.is_finite()
            && self.mean_set_size >= 0.0
            && self.mean_set_size <= n as f64)
        {
            return bad(format!(
                "mean set size {} outside [0, {n}]",
                self.mean_set_size
            ));
        }
        for (i, m) in self.delay_moments.iter().enumerate() {
            let finite = m.m1.is_finite() && m.m2.is_finite() && m.m3.is_finite();
            if !finite || m.m1 < 0.0 || m.m2 < 0.0 || m.m3 < 0.0 {
                return bad(format!(
                    "client {i}: moments must be finite and nonnegative"
                ));
            }
            if m.m2 < m.m1 * m.m1 * (1.0 - MOMENT_TOLERANCE) {
                return bad(format!(
                    "client {i}: E[tau^2] = {} is below E[tau]^2 = {}",
                    m.m2,
                    m.m1 * m.m1
                ));
            }
        }
        Ok(())
    }

    /// `Σ λ_i E[τ_i]`.
    pub fn weighted_mean_delay(&self) -> f64 {
        self.weights
            .iter()
            .zip(&self.delay_moments)
            .map(|(l, m)| l * m.m1)
            .sum()
    }

    /// `Σ λ_i E[⅓τ_i³ + 3/2 τ_i² + 13/6 τ_i]`.
    pub fn weighted_staleness_polynomial(&self) -> f64 {
        self.weights
            .iter()
            .zip(&self.delay_moments)
            .map(|(l, m)| l * m.staleness_polynomial())
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SflTerms {
    /// `R² / (2ηT)`.
    pub optimization: f64,
    /// `(2L / (μT²)) [L R² + (μ + L) φ²]`.
    pub heterogeneity: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AudgTerms {
    pub sfl: SflTerms,
    /// `(L R² / 2) Σ λ_i E[τ_i]`.
    pub staleness_drift: f64,
    /// `(N − E|I_t|) ((2L − μ)/2 φ² + 3/2 L R²)`.
    pub partial_participation: f64,
    /// `(η² G² (L − μ) / 2) E|I_t| Σ λ_i E[τ_i]`.
    pub delay_participation: f64,
    /// `(η² G² L N / 2) Σ λ_i E[⅓τ³ + 3/2 τ² + 13/6 τ]`.
    pub staleness_polynomial: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsurdgTerms {
    pub sfl: SflTerms,
    /// `(N η² G² (L − μ) / 2) Σ λ_i E[τ_i]`.
    pub staleness_linear: f64,
    /// `(N η² G² L / 2) Σ λ_i E[⅓τ³ + 3/2 τ² + 13/6 τ]`.
    pub staleness_polynomial: f64,
    /// `(L R² / 2) Σ λ_i E[τ_i]`.
    pub staleness_drift: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PddTerms {
    pub staleness_drift: f64,
    pub partial_participation: f64,
    pub staleness_polynomial: f64,
    pub delay_participation: f64,
    pub total: f64,
}

fn check(inputs: &BoundInputs) -> Result<()> {
    inputs.validate()
}

pub fn sfl_terms(inputs: &BoundInputs) -> Result<SflTerms> {
    check(inputs)?;
    let c = &inputs.constants;
    let (l, mu, r, phi) = (
        c.smoothness,
        c.convexity,
        c.compactness_radius,
        c.heterogeneity,
    );
    let t = inputs.horizon as f64;
    let optimization = r * r / (2.0 * inputs.learning_rate * t);
    let heterogeneity = 2.0 * l / (mu * t * t) * (l * r * r + (mu + l) * phi * phi);
    Ok(SflTerms {
        optimization,
        heterogeneity,
        total: optimization + heterogeneity,
    })
}

pub fn sfl_bound(inputs: &BoundInputs) -> Result<f64> {
    Ok(sfl_terms(inputs)?.total)
}

pub fn audg_terms(inputs: &BoundInputs) -> Result<AudgTerms> {
    let sfl = sfl_terms(inputs)?;
    let c = &inputs.constants;
    let (l, mu, g, r, phi) = (
        c.smoothness,
        c.convexity,
        c.gradient_bound,
        c.compactness_radius,
        c.heterogeneity,
    );
    let n = inputs.n_clients() as f64;
    let eta2g2 = inputs.learning_rate.powi(2) * g * g;
    let lm1 = inputs.weighted_mean_delay();
    let poly = inputs.weighted_staleness_polynomial();
    let missing = n - inputs.mean_set_size;

    let staleness_drift = l * r * r / 2.0 * lm1;
    let partial_participation = missing * ((2.0 * l - mu) / 2.0 * phi * phi + 1.5 * l * r * r);
    let delay_participation = eta2g2 * (l - mu) / 2.0 * inputs.mean_set_size * lm1;
    let staleness_polynomial = eta2g2 * l * n / 2.0 * poly;
    Ok(AudgTerms {
        sfl,
        staleness_drift,
        partial_participation,
        delay_participation,
        staleness_polynomial,
        total: sfl.total
            + staleness_drift
            + partial_participation
            + delay_participation
            + staleness_polynomial,
    })
}

pub fn audg_bound(inputs: &BoundInputs) -> Result<f64> {
    Ok(audg_terms(inputs)?.total)
}

/// The `L/(L−μ)` factor inside the expectation is distributed over the `(L−μ)` prefactor,
/// so the expression stays well defined when `L = μ`.
pub fn psurdg_terms(inputs: &BoundInputs) -> Result<PsurdgTerms> {
    let sfl = sfl_terms(inputs)?;
    let c = &inputs.constants;
    let (l, mu, g, r) = (
        c.smoothness,
        c.convexity,
        c.gradient_bound,
        c.compactness_radius,
    );
    let n = inputs.n_clients() as f64;
    let eta2g2 = inputs.learning_rate.powi(2) * g * g;
    let lm1 = inputs.weighted_mean_delay();
    let poly = inputs.weighted_staleness_polynomial();

    let staleness_linear = n * eta2g2 * (l - mu) / 2.0 * lm1;
    let staleness_polynomial = n * eta2g2 * l / 2.0 * poly;
    let staleness_drift = l * r * r / 2.0 * lm1;
    Ok(PsurdgTerms {
        sfl,
        staleness_linear,
        staleness_polynomial,
        staleness_drift,
        total: sfl.total + staleness_linear + staleness_polynomial + staleness_drift,
    })
}

pub fn psurdg_bound(inputs: &BoundInputs) -> Result<f64> {
    Ok(psurdg_terms(inputs)?.total)
}

/// Degradation attributable to delays alone: the AUDG terms that survive `φ = 0, T → ∞`.
pub fn pdd_terms(inputs: &BoundInputs) -> Result<PddTerms> {
    check(inputs)?;
    let c = &inputs.constants;
    let (l, mu, g, r) = (
        c.smoothness,
        c.convexity,
        c.gradient_bound,
        c.compactness_radius,
    );
    let n = inputs.n_clients() as f64;
    let eta2g2 = inputs.learning_rate.powi(2) * g * g;
    let lm1 = inputs.weighted_mean_delay();

    let staleness_drift = l * r * r / 2.0 * lm1;
    let partial_participation = 1.5 * l * r * r * (n - inputs.mean_set_size);
    let staleness_polynomial = eta2g2 * l * n / 2.0 * inputs.weighted_staleness_polynomial();
    let delay_participation = eta2g2 * (l - mu) / 2.0 * inputs.mean_set_size * lm1;
    Ok(PddTerms {
        staleness_drift,
        partial_participation,
        staleness_polynomial,
        delay_participation,
        total: staleness_drift + partial_participation + staleness_polynomial + delay_participation,
    })
}

pub fn pdd(inputs: &BoundInputs) -> Result<f64> {
    Ok(pdd_terms(inputs)?.total)
}

/// Performance gap `Θ = psurdg_bound − audg_bound`
/// `= (N − E|I_t|) [(η² G² (L − μ)/2) Σ λ_i E[τ_i] − (3/2 L R² + (2L − μ)/2 φ²)]`.
/// Negative values favour PSURDG.
pub fn gap_theta(inputs: &BoundInputs) -> Result<f64> {
    theta_with_prefactor(inputs, |l, mu| l - mu)
}

/// The same gap with `L` in place of `L − μ` in the delay coefficient. This variant does not
/// equal the difference of the two bounds; it is kept so reports can show both readings.
pub fn gap_theta_l_prefactor(inputs: &BoundInputs) -> Result<f64> {
    theta_with_prefactor(inputs, |l, _| l)
}

fn theta_with_prefactor(inputs: &BoundInputs, coef: impl Fn(f64, f64) -> f64) -> Result<f64> {
    check(inputs)?;
    let c = &inputs.constants;
    let (l, mu, g, r, phi) = (
        c.smoothness,
        c.convexity,
        c.gradient_bound,
        c.compactness_radius,
        c.heterogeneity,
    );
    let n = inputs.n_clients() as f64;
    let eta2g2 = inputs.learning_rate.powi(2) * g * g;
    let delay = eta2g2 * coef(l, mu) / 2.0 * inputs.weighted_mean_delay();
    let penalty = 1.5 * l * r * r + (2.0 * l - mu) / 2.0 * phi * phi;
    Ok((n - inputs.mean_set_size) * (delay - penalty))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermBreakdown {
    pub sfl: SflTerms,
    pub audg: AudgTerms,
    pub psurdg: PsurdgTerms,
    pub pdd: PddTerms,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub source: MomentSource,
    pub sfl_bound: f64,
    pub audg_bound: f64,
    pub psurdg_bound: f64,
    pub pdd: f64,
    pub theta: f64,
    pub theta_l_prefactor: f64,
    pub term_breakdown: TermBreakdown,
    /// Set when a run left the `R`-ball the bounds assume; the values are then unreliable.
    pub assumption_violation: bool,
    pub inputs: BoundInputs,
}

impl BoundReport {
    pub fn bound_for(&self, rule: Rule) -> f64 {
        match rule {
            Rule::Sfl => self.sfl_bound,
            Rule::Audg => self.audg_bound,
            Rule::Psurdg => self.psurdg_bound,
        }
    }
}

pub fn evaluate(inputs: &BoundInputs) -> Result<BoundReport> {
    let sfl = sfl_terms(inputs)?;
    let audg = audg_terms(inputs)?;
    let psurdg = psurdg_terms(inputs)?;
    let pdd = pdd_terms(inputs)?;
    Ok(BoundReport {
        source: inputs.source,
        sfl_bound: sfl.total,
        audg_bound: audg.total,
        psurdg_bound: psurdg.total,
        pdd: pdd.total,
        theta: gap_theta(inputs)?,
        theta_l_prefactor: gap_theta_l_prefactor(inputs)?,
        term_breakdown: TermBreakdown {
            sfl,
            audg,
            psurdg,
            pdd,
        },
        assumption_violation: false,
        inputs: inputs.clone(),
    })
}

/// `e(t)` and `⟨e(t), w^{t+1} − w*⟩` for one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct AsyncError {
    pub t: u64,
    pub vector: DVector<f64>,
    pub inner: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AsyncErrorTrace {
    pub errors: Vec<AsyncError>,
    /// Running sums of the inner products.
    pub cumulative_inner: Vec<f64>,
}

impl AsyncErrorTrace {
    pub fn inner_products(&self) -> Vec<f64> {
        self.errors.iter().map(|e| e.inner).collect()
    }
}

fn iterate(trajectory: &[DVector<f64>], index: i64) -> Result<&DVector<f64>> {
    if index < 1 || index as usize > trajectory.len() {
        return Err(Error::IndexOutOfTrajectory {
            index,
            len: trajectory.len(),
        });
    }
    Ok(&trajectory[index as usize - 1])
}

/// Evaluate `∇f(w^t) − Σ_i λ_i ∇f_i(w^{s_i})` where `s_i` is the stamp each client
/// contributes (`None` drops the client from the sum).
fn error_from_stamps(
    gobj: &GlobalObjective,
    trajectory: &[DVector<f64>],
    optimum: &DVector<f64>,
    t: u64,
    stamps: &[Option<i64>],
) -> Result<AsyncError> {
    let wt = iterate(trajectory, t as i64)?;
    let next = iterate(trajectory, t as i64 + 1)?;
    let mut vector = gobj.gradient(wt)?;
    for (client, stamp) in gobj.clients().iter().zip(stamps) {
        if let Some(s) = stamp {
            let w_old = iterate(trajectory, *s)?;
            vector.axpy(-client.weight(), &client.gradient(w_old)?, 1.0);
        }
    }
    let inner = vector.dot(&(next - optimum));
    Ok(AsyncError { t, vector, inner })
}

fn check_trace(gobj: &GlobalObjective, trace: &TransmissionTrace, t: u64) -> Result<()> {
    if trace.n_clients != gobj.n_clients() {
        return Err(Error::DimensionMismatch {
            expected: gobj.n_clients(),
            found: trace.n_clients,
        });
    }
    if trace.record(t).is_none() {
        return Err(Error::IndexOutOfTrajectory {
            index: t as i64,
            len: trace.len(),
        });
    }
    Ok(())
}

/// Stamps credited at round `t` under AUDG: `t − τ_i(t)` for `i ∈ I_t`.
fn audg_stamps(trace: &TransmissionTrace, t: u64) -> Vec<Option<i64>> {
    let r = trace.record(t).expect("checked by caller");
    (0..trace.n_clients)
        .map(|i| r.contains(i).then(|| t as i64 - r.delays[i] as i64))
        .collect()
}

/// Error at iteration `t`, recomputed from the stored trajectory `w¹ … w^{T+1}` and trace.
///
/// Under PSURDG the stamp of client `i` is that of its most recent credited gradient, or
/// the warm-up stamp 1 (zero-initialised caches contribute nothing until first credit).
pub fn async_error(
    gobj: &GlobalObjective,
    trajectory: &[DVector<f64>],
    trace: &TransmissionTrace,
    rule: Rule,
    cache_init: CacheInit,
    optimum: &DVector<f64>,
    t: u64,
) -> Result<AsyncError> {
    check_trace(gobj, trace, t)?;
    let stamps = match rule {
        Rule::Sfl => vec![Some(t as i64); gobj.n_clients()],
        Rule::Audg => audg_stamps(trace, t),
        Rule::Psurdg => (0..gobj.n_clients())
            .map(|i| {
                (1..=t)
                    .rev()
                    .filter_map(|s| trace.record(s))
                    .find(|r| r.contains(i))
                    .map(|r| r.t as i64 - r.delays[i] as i64)
                    .or(match cache_init {
                        CacheInit::WarmUp => Some(1),
                        CacheInit::Zero => None,
                    })
            })
            .collect(),
    };
    error_from_stamps(gobj, trajectory, optimum, t, &stamps)
}

/// Errors for every iteration of a recorded run.
pub fn async_error_trace(gobj: &GlobalObjective, run: &TrainingRun) -> Result<AsyncErrorTrace> {
    let n = gobj.n_clients();
    let mut cache: Vec<Option<i64>> = match run.cache_init {
        CacheInit::WarmUp => vec![Some(1); n],
        CacheInit::Zero => vec![None; n],
    };
    let mut errors = Vec::with_capacity(run.horizon as usize);
    let mut cumulative_inner = Vec::with_capacity(run.horizon as usize);
    let mut acc = 0.0;
    for t in 1..=run.horizon {
        check_trace(gobj, &run.trace, t)?;
        let stamps = match run.rule {
            Rule::Sfl => vec![Some(t as i64); n],
            Rule::Audg => audg_stamps(&run.trace, t),
            Rule::Psurdg => {
                for (slot, fresh) in cache.iter_mut().zip(audg_stamps(&run.trace, t)) {
                    if fresh.is_some() {
                        *slot = fresh;
                    }
                }
                cache.clone()
            }
        };
        let e = error_from_stamps(gobj, &run.trajectory, &run.optimum, t, &stamps)?;
        acc += e.inner;
        cumulative_inner.push(acc);
        errors.push(e);
    }
    Ok(AsyncErrorTrace {
        errors,
        cumulative_inner,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lemma1Check {
    pub lhs: f64,
    pub rhs: f64,
    /// `rhs − lhs`.
    pub slack: f64,
    pub satisfied: bool,
}

/// Compare `Σ_t [f(w^{t+1}) − f*]` against
/// `(1/2η)(‖w¹−w*‖² − ‖w^{T+1}−w*‖²) + Σ_t ⟨e(t), w^{t+1}−w*⟩ + ½(L − 1/η) Σ_t ‖w^{t+1}−w^t‖²`.
pub fn lemma1_check(
    gobj: &GlobalObjective,
    trajectory: &[DVector<f64>],
    inner_products: &[f64],
    learning_rate: f64,
) -> Result<Lemma1Check> {
    let horizon = inner_products.len();
    if trajectory.len() != horizon + 1 {
        return Err(Error::IndexOutOfTrajectory {
            index: horizon as i64 + 1,
            len: trajectory.len(),
        });
    }
    let optimum = gobj.global_optimum()?;
    let f_star = gobj.loss(&optimum)?;
    let smoothness = gobj
        .clients()
        .iter()
        .map(|c| c.smoothness())
        .fold(0.0, f64::max);

    let mut lhs = 0.0;
    let mut step_sq = 0.0;
    for pair in trajectory.windows(2) {
        lhs += gobj.loss(&pair[1])? - f_star;
        step_sq += (&pair[1] - &pair[0]).norm_squared();
    }
    let start = (&trajectory[0] - &optimum).norm_squared();
    let end = (&trajectory[horizon] - &optimum).norm_squared();
    let rhs = (start - end) / (2.0 * learning_rate)
        + inner_products.iter().sum::<f64>()
        + 0.5 * (smoothness - 1.0 / learning_rate) * step_sq;
    Ok(Lemma1Check {
        lhs,
        rhs,
        slack: rhs - lhs,
        satisfied: lhs <= rhs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::delay::IterationRecord;
    use crate::objective::ClientObjective;
    use nalgebra::DMatrix;

    fn constants(l: f64, mu: f64, g: f64, r: f64, phi: f64) -> ObjectiveConstants {
        ObjectiveConstants {
            smoothness: l,
            convexity: mu,
            gradient_bound: g,
            compactness_radius: r,
            heterogeneity: phi,
        }
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
    }

    #[test]
    fn sfl_bound_arithmetic() {
        let inputs =
            BoundInputs::synchronous(constants(1.0, 1.0, 1.0, 1.0, 1.0), 0.5, 10, vec![1.0]);
        assert!(close(sfl_bound(&inputs).unwrap(), 0.16, 1e-15));
        let mut zero_t = inputs.clone();
        zero_t.horizon = 0;
        assert!(sfl_bound(&zero_t).is_err());
    }

    #[test]
    fn sfl_bound_shrinks_with_t_and_grows_with_phi() {
        let base =
            BoundInputs::synchronous(constants(2.0, 0.5, 3.0, 1.0, 1.0), 0.1, 5, vec![0.5, 0.5]);
        let mut longer = base.clone();
        longer.horizon = 6;
        assert!(sfl_bound(&longer).unwrap() < sfl_bound(&base).unwrap());
        let mut doubled = base.clone();
        doubled.constants.heterogeneity = 2.0;
        assert!(sfl_bound(&doubled).unwrap() > sfl_bound(&base).unwrap());
        let mut homogeneous = base.clone();
        homogeneous.constants.heterogeneity = 0.0;
        homogeneous.horizon = 1_000_000_000;
        assert!(sfl_bound(&homogeneous).unwrap() < 1e-8);
    }

    #[test]
    fn zero_delay_reduces_to_sfl() {
        let inputs =
            BoundInputs::synchronous(constants(2.0, 0.5, 3.0, 1.5, 0.7), 0.1, 20, vec![0.25; 4]);
        let s = sfl_bound(&inputs).unwrap();
        assert_eq!(audg_bound(&inputs).unwrap(), s);
        assert_eq!(psurdg_bound(&inputs).unwrap(), s);
        assert_eq!(pdd(&inputs).unwrap(), 0.0);
        assert_eq!(gap_theta(&inputs).unwrap(), 0.0);
    }

    #[test]
    fn staleness_polynomial_for_half_success() {
        let m = geometric_delay_moments(0.5).unwrap();
        let expected = 13.0 / 3.0 + 1.5 * 3.0 + 13.0 / 6.0;
        assert!(close(m.staleness_polynomial(), expected, 1e-12));
        assert!((m.staleness_polynomial() - 10.9).abs() < 0.1);
    }

    #[test]
    fn theta_example() {
        // N=4, E|I|=2, Σλ E[τ] = 1 with L=1, μ=0.5, R=φ=G=1, η=0.1.
        let inputs = BoundInputs {
            constants: constants(1.0, 0.5, 1.0, 1.0, 1.0),
            learning_rate: 0.1,
            horizon: 10,
            weights: vec![0.25; 4],
            delay_moments: vec![
                DelayMoments {
                    m1: 1.0,
                    m2: 3.0,
                    m3: 13.0
                };
                4
            ],
            mean_set_size: 2.0,
            source: MomentSource::Manual,
        };
        assert!(close(
            gap_theta_l_prefactor(&inputs).unwrap(),
            2.0 * (0.005 - 2.25),
            1e-12
        ));
        assert!(close(
            gap_theta(&inputs).unwrap(),
            2.0 * (0.0025 - 2.25),
            1e-12
        ));
        let diff = psurdg_bound(&inputs).unwrap() - audg_bound(&inputs).unwrap();
        assert!(close(gap_theta(&inputs).unwrap(), diff, 1e-12));

        let mut full = inputs.clone();
        full.mean_set_size = 4.0;
        assert_eq!(gap_theta(&full).unwrap(), 0.0);
    }

    #[test]
    fn psurdg_ignores_participation_and_grows_with_each_delay() {
        let mut inputs = BoundInputs::analytic(
            constants(2.0, 0.5, 3.0, 1.0, 2.0),
            0.1,
            50,
            vec![0.25; 4],
            &ChannelModel::bernoulli(&[0.5; 4]).unwrap(),
        )
        .unwrap();
        let base = psurdg_bound(&inputs).unwrap();
        inputs.mean_set_size = 0.5;
        assert_eq!(psurdg_bound(&inputs).unwrap(), base);
        inputs.delay_moments[2].m1 += 0.1;
        assert!(psurdg_bound(&inputs).unwrap() > base);
    }

    #[test]
    fn audg_heterogeneity_coupling_needs_missing_clients() {
        let channel = ChannelModel::bernoulli(&[0.5; 4]).unwrap();
        let inputs = BoundInputs::analytic(
            constants(2.0, 0.5, 3.0, 1.0, 1.0),
            0.1,
            50,
            vec![0.25; 4],
            &channel,
        )
        .unwrap();
        let mut more_phi = inputs.clone();
        more_phi.constants.heterogeneity = 2.0;
        let a = audg_terms(&inputs).unwrap();
        let b = audg_terms(&more_phi).unwrap();
        assert!(b.partial_participation > a.partial_participation);

        let mut full = inputs.clone();
        full.mean_set_size = 4.0;
        let mut full_more = full.clone();
        full_more.constants.heterogeneity = 2.0;
        let fa = audg_terms(&full).unwrap();
        let fb = audg_terms(&full_more).unwrap();
        assert_eq!(fa.partial_participation, 0.0);
        assert_eq!(fb.partial_participation, 0.0);
        assert_eq!(fb.total - fb.sfl.total, fa.total - fa.sfl.total);
    }

    #[test]
    fn pdd_equals_audg_excess_without_heterogeneity() {
        let channel = ChannelModel::bernoulli(&[0.3, 0.5, 0.7, 0.9]).unwrap();
        let inputs = BoundInputs::analytic(
            constants(3.0, 0.2, 4.0, 2.0, 0.0),
            0.05,
            40,
            vec![0.1, 0.2, 0.3, 0.4],
            &channel,
        )
        .unwrap();
        let excess = audg_bound(&inputs).unwrap() - sfl_bound(&inputs).unwrap();
        assert!(close(pdd(&inputs).unwrap(), excess, 1e-12));
    }

    #[test]
    fn pdd_can_fall_when_one_client_slows_down() {
        // Slow peers make the participation-weighted delay term dominate: dropping client 0
        // from full reliability shrinks E|I_t| enough to lower that term overall.
        let eval = |phi0: f64| {
            let channel = ChannelModel::bernoulli(&[phi0, 0.1, 0.1, 0.1]).unwrap();
            let inputs = BoundInputs::analytic(
                constants(1.0, 0.01, 10.0, 0.01, 0.0),
                1.0,
                100,
                vec![0.25; 4],
                &channel,
            )
            .unwrap();
            (inputs.delay_moments[0].m1, pdd(&inputs).unwrap())
        };
        let (m_fast, p_fast) = eval(1.0);
        let (m_slow, p_slow) = eval(0.9);
        assert!(m_slow > m_fast);
        assert!(p_slow < p_fast, "{p_slow} !< {p_fast}");
    }

    #[test]
    fn input_validation() {
        let good =
            BoundInputs::synchronous(constants(1.0, 1.0, 1.0, 1.0, 1.0), 0.5, 10, vec![0.5, 0.5]);
        assert!(good.validate().is_ok());
        let mut bad = good.clone();
        bad.mean_set_size = 3.0;
        assert!(bad.validate().is_err());
        let mut bad = good.clone();
        bad.delay_moments[0] = DelayMoments {
            m1: 2.0,
            m2: 3.0,
            m3: 0.0,
        };
        assert!(bad.validate().is_err());
        let mut bad = good.clone();
        bad.delay_moments.pop();
        assert!(bad.validate().is_err());
        let mut bad = good;
        bad.constants.convexity = 2.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn report_round_trips_through_json() {
        let channel = ChannelModel::bernoulli(&[0.5, 0.25]).unwrap();
        let inputs = BoundInputs::analytic(
            constants(2.0, 1.0, 3.0, 1.0, 1.0),
            0.1,
            30,
            vec![0.5, 0.5],
            &channel,
        )
        .unwrap();
        let report = evaluate(&inputs).unwrap();
        let json = serde_json::to_string(&report).unwrap();
        let back: BoundReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
        assert_eq!(report.bound_for(Rule::Psurdg), report.psurdg_bound);
    }

    fn unit_pair() -> GlobalObjective {
        let c =
            |w| ClientObjective::quadratic(DMatrix::identity(1, 1), DVector::zeros(1), w).unwrap();
        GlobalObjective::new(vec![c(0.5), c(0.5)]).unwrap()
    }

    #[test]
    fn async_error_hand_example() {
        // w^{t-1} = 2, w^t = 1, client 0 delayed by one round, both credited.
        let gobj = unit_pair();
        let trajectory = vec![
            DVector::from_element(1, 2.0),
            DVector::from_element(1, 1.0),
            DVector::from_element(1, 0.5),
        ];
        let mut trace = TransmissionTrace::new(2);
        trace.records.push(IterationRecord {
            t: 1,
            success_set: vec![],
            delays: vec![0, 0],
        });
        trace.records.push(IterationRecord {
            t: 2,
            success_set: vec![0, 1],
            delays: vec![1, 0],
        });
        let opt = DVector::zeros(1);
        let e = async_error(
            &gobj,
            &trajectory,
            &trace,
            Rule::Audg,
            CacheInit::WarmUp,
            &opt,
            2,
        )
        .unwrap();
        assert!(close(e.vector[0], -0.5, 1e-15));
        assert!(close(e.inner, -0.25, 1e-15));

        let sync = async_error(
            &gobj,
            &trajectory,
            &trace,
            Rule::Sfl,
            CacheInit::WarmUp,
            &opt,
            2,
        )
        .unwrap();
        assert_eq!(sync.vector[0], 0.0);

        let mut bad = trace.clone();
        bad.records[1].delays[0] = 2;
        assert!(matches!(
            async_error(
                &gobj,
                &trajectory,
                &bad,
                Rule::Audg,
                CacheInit::WarmUp,
                &opt,
                2
            ),
            Err(Error::IndexOutOfTrajectory { index: 0, .. })
        ));
    }

    #[test]
    fn fresh_cache_matches_full_participation() {
        let gobj = unit_pair();
        let trajectory = vec![
            DVector::from_element(1, 3.0),
            DVector::from_element(1, 1.0),
            DVector::from_element(1, 0.5),
        ];
        let mut trace = TransmissionTrace::new(2);
        for t in 1..=2 {
            trace.records.push(IterationRecord {
                t,
                success_set: vec![0, 1],
                delays: vec![1, t - 1],
            });
        }
        trace.records[0].delays = vec![0, 0];
        let opt = DVector::zeros(1);
        let a = async_error(
            &gobj,
            &trajectory,
            &trace,
            Rule::Audg,
            CacheInit::WarmUp,
            &opt,
            2,
        )
        .unwrap();
        let p = async_error(
            &gobj,
            &trajectory,
            &trace,
            Rule::Psurdg,
            CacheInit::WarmUp,
            &opt,
            2,
        )
        .unwrap();
        assert_eq!(a, p);
    }

    #[test]
    fn lemma_on_a_synchronous_run() {
        let gobj = unit_pair();
        // w^{t+1} = w^t / 2 under η = 0.5 and f(w) = w²/2.
        let trajectory: Vec<_> = (0..6)
            .map(|k| DVector::from_element(1, 4.0 / 2f64.powi(k)))
            .collect();
        let check = lemma1_check(&gobj, &trajectory, &[0.0; 5], 0.5).unwrap();
        assert!(check.satisfied);
        assert!(close(check.slack, check.rhs - check.lhs, 1e-15));
        assert!(lemma1_check(&gobj, &trajectory, &[0.0; 3], 0.5).is_err());
    }
}
