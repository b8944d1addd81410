//! Federated training loop: one-step client updates and the three server aggregation rules.
//!
//! Gradients travel on the wire together with the stamp of the parameters they were
//! evaluated at. `Sfl` waits for every client each round. `Audg` applies only the gradients
//! that arrived in `I_t`. `Psurdg` keeps the last gradient received from every client and
//! applies the whole cache each round.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::delay::{ChannelModel, ClientStreams, DelayState, IterationRecord, TransmissionTrace};
use crate::error::{Error, Result};
use crate::objective::{ClientObjective, GlobalObjective};

/// Abort once `‖w^t‖` exceeds this multiple of `max(‖w¹‖, 1)`.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rule {
    Sfl,
    Audg,
    Psurdg,
}

impl Rule {
    pub const ALL: [Rule; 3] = [Rule::Sfl, Rule::Audg, Rule::Psurdg];

    pub fn as_str(self) -> &'static str {
        match self {
            Rule::Sfl => "sfl",
            Rule::Audg => "audg",
            Rule::Psurdg => "psurdg",
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Rule {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "sfl" => Ok(Rule::Sfl),
            "audg" => Ok(Rule::Audg),
            "psurdg" => Ok(Rule::Psurdg),
            other => Err(format!(
                "unknown rule `{other}` (expected sfl, audg or psurdg)"
            )),
        }
    }
}

/// How the PSURDG gradient cache is filled before iteration 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheInit {
    /// Synchronous round 0: every client reports `∇f_i(w¹)`.
    #[default]
    WarmUp,
    /// Entries start at the zero vector.
    Zero,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientMessage {
    pub client: usize,
    pub gradient: DVector<f64>,
    /// Iteration of the parameters the gradient was evaluated at; `None` for synthetic zeros.
    pub stamp: Option<u64>,
}

/// Evaluate the client's gradient at the parameters it holds and echo their stamp.
pub fn client_update(
    client: usize,
    obj: &ClientObjective,
    stamped_params: &DVector<f64>,
    stamp: u64,
) -> Result<GradientMessage> {
    Ok(GradientMessage {
        client,
        gradient: obj.gradient(stamped_params)?,
        stamp: Some(stamp),
    })
}

fn check_sender(client: usize, n: usize, seen: &mut [bool]) -> Result<()> {
    if client >= n {
        return Err(Error::UnknownClient {
            client,
            n_clients: n,
        });
    }
    if std::mem::replace(&mut seen[client], true) {
        return Err(Error::DuplicateSender { client });
    }
    Ok(())
}

fn zero_like(params: &DVector<f64>) -> DVector<f64> {
    DVector::zeros(params.len())
}

/// `Σ_{i ∈ I_t} λ_i g_i`.
pub fn audg_direction(
    params: &DVector<f64>,
    weights: &[f64],
    received: &[GradientMessage],
) -> Result<DVector<f64>> {
    let mut seen = vec![false; weights.len()];
    let mut dir = zero_like(params);
    for m in received {
        check_sender(m.client, weights.len(), &mut seen)?;
        if m.gradient.len() != params.len() {
            return Err(Error::DimensionMismatch {
                expected: params.len(),
                found: m.gradient.len(),
            });
        }
        dir.axpy(weights[m.client], &m.gradient, 1.0);
    }
    Ok(dir)
}

/// `w^{t+1} = w^t - η Σ_{i ∈ I_t} λ_i g_i`.
pub fn audg_aggregate(
    params: &DVector<f64>,
    learning_rate: f64,
    weights: &[f64],
    received: &[GradientMessage],
) -> Result<DVector<f64>> {
    Ok(params - audg_direction(params, weights, received)? * learning_rate)
}

/// `Σ_i λ_i ∇f_i(w^t)` from a complete synchronous round stamped `t`.
pub fn sfl_direction(
    params: &DVector<f64>,
    weights: &[f64],
    t: u64,
    gradients: &[GradientMessage],
) -> Result<DVector<f64>> {
    let n = weights.len();
    let mut seen = vec![false; n];
    for m in gradients {
        check_sender(m.client, n, &mut seen)?;
        if m.stamp != Some(t) {
            return Err(Error::StaleSynchronousMessage {
                client: m.client,
                expected: t,
                found: m.stamp.unwrap_or(0),
            });
        }
    }
    if let Some(client) = seen.iter().position(|s| !s) {
        return Err(Error::MissingClient { client });
    }
    audg_direction(params, weights, gradients)
}

pub fn sfl_aggregate(
    params: &DVector<f64>,
    learning_rate: f64,
    weights: &[f64],
    t: u64,
    gradients: &[GradientMessage],
) -> Result<DVector<f64>> {
    Ok(params - sfl_direction(params, weights, t, gradients)? * learning_rate)
}

/// Server-side store of the most recent gradient from each client.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientCache {
    entries: Vec<Option<GradientMessage>>,
}

impl GradientCache {
    pub fn empty(n_clients: usize) -> Self {
        Self {
            entries: vec![None; n_clients],
        }
    }

    pub fn zeros(n_clients: usize, dimension: usize) -> Self {
        Self {
            entries: (0..n_clients)
                .map(|client| {
                    Some(GradientMessage {
                        client,
                        gradient: DVector::zeros(dimension),
                        stamp: None,
                    })
                })
                .collect(),
        }
    }

    /// Warm-up round: every client reports its gradient at `w¹` (stamp 1).
    pub fn warm_up(gobj: &GlobalObjective, init: &DVector<f64>) -> Result<Self> {
        let entries = gobj
            .clients()
            .iter()
            .enumerate()
            .map(|(i, c)| client_update(i, c, init, 1).map(Some))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { entries })
    }

    pub fn from_messages(n_clients: usize, messages: Vec<GradientMessage>) -> Result<Self> {
        let mut cache = Self::empty(n_clients);
        let mut seen = vec![false; n_clients];
        for m in messages {
            check_sender(m.client, n_clients, &mut seen)?;
            let slot = m.client;
            cache.entries[slot] = Some(m);
        }
        Ok(cache)
    }

    pub fn entries(&self) -> &[Option<GradientMessage>] {
        &self.entries
    }

    pub fn stamps(&self) -> Vec<Option<u64>> {
        self.entries
            .iter()
            .map(|e| e.as_ref().and_then(|m| m.stamp))
            .collect()
    }
}

/// Overwrite the senders' cache entries, then return `Σ_{i=1}^N λ_i cache_i`.
pub fn psurdg_direction(
    params: &DVector<f64>,
    weights: &[f64],
    cache: &mut GradientCache,
    received: &[GradientMessage],
) -> Result<DVector<f64>> {
    let n = weights.len();
    if cache.entries.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: cache.entries.len(),
        });
    }
    let mut seen = vec![false; n];
    for m in received {
        check_sender(m.client, n, &mut seen)?;
    }
    for m in received {
        cache.entries[m.client] = Some(m.clone());
    }
    let mut dir = zero_like(params);
    for (client, (entry, &lam)) in cache.entries.iter().zip(weights).enumerate() {
        let entry = entry.as_ref().ok_or(Error::UninitializedCache { client })?;
        if entry.gradient.len() != params.len() {
            return Err(Error::DimensionMismatch {
                expected: params.len(),
                found: entry.gradient.len(),
            });
        }
        dir.axpy(lam, &entry.gradient, 1.0);
    }
    Ok(dir)
}

pub fn psurdg_aggregate(
    params: &DVector<f64>,
    learning_rate: f64,
    weights: &[f64],
    cache: &mut GradientCache,
    received: &[GradientMessage],
) -> Result<DVector<f64>> {
    Ok(params - psurdg_direction(params, weights, cache, received)? * learning_rate)
}

/// What a client holds between rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientRuntime {
    pub stamped_params: DVector<f64>,
    pub stamp: u64,
    pub pending_gradient: Option<GradientMessage>,
}

#[derive(Debug, Clone)]
pub struct TrainingState {
    pub global_params: DVector<f64>,
    /// Index `t` of `global_params`.
    pub iteration: u64,
    pub learning_rate: f64,
    pub rule: Rule,
    pub clients: Vec<ClientRuntime>,
    pub gradient_cache: Option<GradientCache>,
    /// `w¹ … w^t`.
    pub history: Vec<DVector<f64>>,
}

impl TrainingState {
    pub fn new(
        gobj: &GlobalObjective,
        rule: Rule,
        learning_rate: f64,
        init: DVector<f64>,
        cache_init: CacheInit,
    ) -> Result<Self> {
        let gradient_cache = match (rule, cache_init) {
            (Rule::Psurdg, CacheInit::WarmUp) => Some(GradientCache::warm_up(gobj, &init)?),
            (Rule::Psurdg, CacheInit::Zero) => {
                Some(GradientCache::zeros(gobj.n_clients(), gobj.dimension()))
            }
            _ => None,
        };
        let clients = vec![
            ClientRuntime {
                stamped_params: init.clone(),
                stamp: 0,
                pending_gradient: None,
            };
            gobj.n_clients()
        ];
        Ok(Self {
            history: vec![init.clone()],
            global_params: init,
            iteration: 1,
            learning_rate,
            rule,
            clients,
            gradient_cache,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub rule: Rule,
    pub learning_rate: f64,
    pub horizon: u64,
    pub init: Vec<f64>,
    pub seed: u64,
    #[serde(default)]
    pub cache_init: CacheInit,
}

/// Per-iteration record, evaluated at the iterate `w^t` entering round `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub t: u64,
    pub loss: f64,
    pub loss_gap: f64,
    pub distance: f64,
    pub set_size: usize,
    pub delays: Vec<u64>,
    /// `‖e(t)‖`, the gap between `∇f(w^t)` and the gradient combination actually applied.
    pub error_norm: f64,
    /// `⟨e(t), w^{t+1} - w*⟩`.
    pub error_inner: f64,
}

#[derive(Debug, Clone)]
pub struct TrainingRun {
    pub rule: Rule,
    pub learning_rate: f64,
    pub horizon: u64,
    pub cache_init: CacheInit,
    /// `w¹ … w^{T+1}`.
    pub trajectory: Vec<DVector<f64>>,
    /// `ŵ(T) = (1/T) Σ_{t=1}^T w^{t+1}`.
    pub averaged: DVector<f64>,
    pub trace: TransmissionTrace,
    pub metrics: Vec<IterationMetrics>,
    /// Stamp of each client's gradient inside the step of round `t` (`None` = not applied).
    pub applied_stamps: Vec<Vec<Option<u64>>>,
    pub optimum: DVector<f64>,
    pub optimal_loss: f64,
    /// `f(ŵ(T)) - f(w*)`.
    pub final_loss_gap: f64,
    /// `f(w^{T+1}) - f(w*)`.
    pub final_iterate_gap: f64,
    /// `‖w^{T+1} - w*‖`.
    pub final_distance: f64,
    /// `max_t ‖w^t - w*‖` over the whole trajectory.
    pub max_distance: f64,
}

impl TrainingRun {
    pub fn participation_counts(&self) -> Vec<usize> {
        let n = self.trace.n_clients;
        let mut counts = vec![0; n];
        for stamps in &self.applied_stamps {
            for (i, s) in stamps.iter().enumerate() {
                if s.is_some() {
                    counts[i] += 1;
                }
            }
        }
        counts
    }

    /// `ŵ(T')` for every prefix horizon `T' = 1..=T`.
    pub fn running_averages(&self) -> Vec<DVector<f64>> {
        let mut acc = DVector::zeros(self.optimum.len());
        self.trajectory[1..]
            .iter()
            .enumerate()
            .map(|(k, w)| {
                acc += w;
                &acc / (k + 1) as f64
            })
            .collect()
    }
}

/// Execute `T` rounds of federated training under the given rule and channel.
pub fn run_training(
    gobj: &GlobalObjective,
    channel: &ChannelModel,
    config: &TrainingConfig,
) -> Result<TrainingRun> {
    let n = gobj.n_clients();
    if channel.n_clients() != n {
        return Err(Error::InvalidChannel(format!(
            "channel describes {} clients, objective has {n}",
            channel.n_clients()
        )));
    }
    if !(config.learning_rate.is_finite() && config.learning_rate > 0.0) {
        return Err(Error::InvalidObjective(format!(
            "learning rate must be positive, got {}",
            config.learning_rate
        )));
    }
    let init = DVector::from_column_slice(&config.init);
    if init.len() != gobj.dimension() {
        return Err(Error::DimensionMismatch {
            expected: gobj.dimension(),
            found: init.len(),
        });
    }
    let eta = config.learning_rate;
    let weights = gobj.weights();
    let optimum = gobj.global_optimum()?;
    let optimal_loss = gobj.loss_unchecked(&optimum);
    let divergence_limit = DIVERGENCE_FACTOR * init.norm().max(1.0);

    let mut state = TrainingState::new(gobj, config.rule, eta, init, config.cache_init)?;
    let mut delay_state = DelayState::new(n);
    let mut streams = ClientStreams::new(config.seed, n);
    let mut trace = TransmissionTrace::new(n);
    let mut metrics = Vec::with_capacity(config.horizon as usize);
    let mut applied_stamps = Vec::with_capacity(config.horizon as usize);

    for t in 1..=config.horizon {
        debug_assert_eq!(state.iteration, t);
        let w = state.global_params.clone();

        let (record, received) = match config.rule {
            Rule::Sfl => {
                let msgs = gobj
                    .clients()
                    .iter()
                    .enumerate()
                    .map(|(i, c)| client_update(i, c, &w, t))
                    .collect::<Result<Vec<_>>>()?;
                let record = IterationRecord {
                    t,
                    success_set: (0..n).collect(),
                    delays: vec![0; n],
                };
                (record, msgs)
            }
            Rule::Audg | Rule::Psurdg => {
                let success_set = delay_state.advance(channel, &mut streams);
                for (i, (runtime, cd)) in state
                    .clients
                    .iter_mut()
                    .zip(delay_state.clients())
                    .enumerate()
                {
                    if cd.stamp == t && runtime.stamp != t {
                        runtime.stamped_params = w.clone();
                        runtime.stamp = t;
                        runtime.pending_gradient =
                            Some(client_update(i, &gobj.clients()[i], &w, t)?);
                    }
                }
                let delays: Vec<u64> = delay_state.clients().iter().map(|c| c.delay).collect();
                let msgs = success_set
                    .iter()
                    .map(|&i| {
                        let msg = state.clients[i]
                            .pending_gradient
                            .clone()
                            .expect("credited client holds a gradient");
                        debug_assert_eq!(msg.stamp, Some(t - delays[i]));
                        msg
                    })
                    .collect::<Vec<_>>();
                (
                    IterationRecord {
                        t,
                        success_set,
                        delays,
                    },
                    msgs,
                )
            }
        };

        let (direction, stamps) = match config.rule {
            Rule::Sfl => (sfl_direction(&w, &weights, t, &received)?, vec![Some(t); n]),
            Rule::Audg => {
                let mut stamps = vec![None; n];
                for m in &received {
                    stamps[m.client] = m.stamp;
                }
                (audg_direction(&w, &weights, &received)?, stamps)
            }
            Rule::Psurdg => {
                let cache = state
                    .gradient_cache
                    .as_mut()
                    .ok_or(Error::UninitializedCache { client: 0 })?;
                let dir = psurdg_direction(&w, &weights, cache, &received)?;
                (dir, cache.stamps())
            }
        };
        let next = &w - &direction * eta;

        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                iteration: t,
                reason: "non-finite parameters".into(),
            });
        }
        if next.norm() > divergence_limit {
            return Err(Error::Divergence {
                iteration: t,
                reason: format!(
                    "parameter norm {:e} exceeds {divergence_limit:e}",
                    next.norm()
                ),
            });
        }

        let error = gobj.gradient_unchecked(&w) - &direction;
        let loss = gobj.loss_unchecked(&w);
        metrics.push(IterationMetrics {
            t,
            loss,
            loss_gap: loss - optimal_loss,
            distance: (&w - &optimum).norm(),
            set_size: record.set_size(),
            delays: record.delays.clone(),
            error_norm: error.norm(),
            error_inner: error.dot(&(&next - &optimum)),
        });
        applied_stamps.push(stamps);
        trace.records.push(record);

        state.global_params = next.clone();
        state.history.push(next);
        state.iteration += 1;
    }

    let trajectory = state.history;
    let horizon = config.horizon.max(1) as f64;
    let averaged = trajectory[1..]
        .iter()
        .fold(DVector::zeros(optimum.len()), |acc, w| acc + w)
        / horizon;
    let last = trajectory.last().expect("trajectory holds w¹");
    let final_iterate_gap = gobj.loss_unchecked(last) - optimal_loss;
    let final_distance = (last - &optimum).norm();
    let final_loss_gap = if config.horizon == 0 {
        final_iterate_gap
    } else {
        gobj.loss_unchecked(&averaged) - optimal_loss
    };
    let max_distance = trajectory
        .iter()
        .map(|w| (w - &optimum).norm())
        .fold(0.0, f64::max);

    Ok(TrainingRun {
        rule: config.rule,
        learning_rate: eta,
        horizon: config.horizon,
        cache_init: config.cache_init,
        trajectory,
        averaged,
        trace,
        metrics,
        applied_stamps,
        optimum,
        optimal_loss,
        final_loss_gap,
        final_iterate_gap,
        final_distance,
        max_distance,
    })
}
