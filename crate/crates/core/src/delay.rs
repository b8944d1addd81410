//! Per-client delay state machine and stochastic transmission channel.
//!
//! Each iteration `t` every client first tries to download the latest global parameters
//! (only when it still owes a download), then spends its compute rounds, then tries to
//! upload. A client credited in `I_t` carries delay `τ_i(t) = t - τ_i`, where `τ_i` is the
//! iteration of the parameters it last received. While a download keeps failing the client
//! idles and keeps retransmitting the gradient it already holds.
//!
//! Randomness comes from one seeded stream per client. Every client consumes exactly two
//! uniforms per iteration regardless of its phase, so changing one client's channel never
//! shifts another client's draws.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClientChannel {
    pub upload_success_prob: f64,
    pub download_success_prob: f64,
    pub compute_rounds: u32,
}

impl ClientChannel {
    /// Upload-only Bernoulli channel with instant download.
    pub fn bernoulli(upload_success_prob: f64) -> Self {
        Self {
            upload_success_prob,
            download_success_prob: 1.0,
            compute_rounds: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelModel {
    clients: Vec<ClientChannel>,
}

fn valid_prob(p: f64) -> bool {
    p > 0.0 && p <= 1.0
}

impl ChannelModel {
    pub fn new(clients: Vec<ClientChannel>) -> Result<Self> {
        if clients.is_empty() {
            return Err(Error::InvalidChannel("no clients".into()));
        }
        for (i, c) in clients.iter().enumerate() {
            if !valid_prob(c.upload_success_prob) || !valid_prob(c.download_success_prob) {
                return Err(Error::InvalidChannel(format!(
                    "client {i}: probabilities must lie in (0, 1]"
                )));
            }
            if c.compute_rounds == 0 {
                return Err(Error::InvalidChannel(format!(
                    "client {i}: compute_rounds must be at least 1"
                )));
            }
        }
        Ok(Self { clients })
    }

    pub fn bernoulli(upload_probs: &[f64]) -> Result<Self> {
        Self::new(
            upload_probs
                .iter()
                .map(|&p| ClientChannel::bernoulli(p))
                .collect(),
        )
    }

    pub fn synchronous(n_clients: usize) -> Result<Self> {
        Self::bernoulli(&vec![1.0; n_clients])
    }

    pub fn clients(&self) -> &[ClientChannel] {
        &self.clients
    }

    pub fn n_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn is_synchronous(&self) -> bool {
        self.clients.iter().all(|c| {
            c.upload_success_prob == 1.0 && c.download_success_prob == 1.0 && c.compute_rounds == 1
        })
    }

    /// True when every client uses the plain upload-only Bernoulli model.
    pub fn is_default_model(&self) -> bool {
        self.clients
            .iter()
            .all(|c| c.download_success_prob == 1.0 && c.compute_rounds == 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Computing {
        rounds_left: u32,
    },
    ReadyToUpload,
    /// Credited at the server; waiting for fresh parameters and retransmitting meanwhile.
    AwaitingDownload,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientDelay {
    /// `τ_i(t)` at the most recently processed iteration.
    pub delay: u64,
    /// Iteration of the parameters this client holds.
    pub stamp: u64,
    pub phase: Phase,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DelayState {
    clients: Vec<ClientDelay>,
    next_iteration: u64,
}

impl DelayState {
    /// State before iteration 1. The initial broadcast of `w¹` reaches every client.
    pub fn new(n_clients: usize) -> Self {
        Self {
            clients: vec![
                ClientDelay {
                    delay: 0,
                    stamp: 0,
                    phase: Phase::AwaitingDownload,
                };
                n_clients
            ],
            next_iteration: 1,
        }
    }

    pub fn clients(&self) -> &[ClientDelay] {
        &self.clients
    }

    pub fn next_iteration(&self) -> u64 {
        self.next_iteration
    }

    /// Run iteration `t = next_iteration()` of the channel and return `I_t` in ascending order.
    pub fn advance(&mut self, channel: &ChannelModel, streams: &mut ClientStreams) -> Vec<usize> {
        assert_eq!(
            channel.n_clients(),
            self.clients.len(),
            "channel/state size mismatch"
        );
        assert_eq!(
            streams.len(),
            self.clients.len(),
            "stream/state size mismatch"
        );
        let t = self.next_iteration;
        let mut success = Vec::new();
        for (i, (state, link)) in self.clients.iter_mut().zip(channel.clients()).enumerate() {
            let rng = streams.get_mut(i);
            let u_down: f64 = rng.random();
            let u_up: f64 = rng.random();

            let received = state.phase == Phase::AwaitingDownload
                && (t == 1 || u_down < link.download_success_prob);
            if received {
                state.delay = 0;
                state.stamp = t;
                state.phase = Phase::Computing {
                    rounds_left: link.compute_rounds,
                };
            } else {
                state.delay += 1;
            }

            let attempts = match state.phase {
                Phase::Computing { rounds_left } if rounds_left <= 1 => {
                    state.phase = Phase::ReadyToUpload;
                    true
                }
                Phase::Computing { rounds_left } => {
                    state.phase = Phase::Computing {
                        rounds_left: rounds_left - 1,
                    };
                    false
                }
                Phase::ReadyToUpload | Phase::AwaitingDownload => true,
            };
            if attempts && u_up < link.upload_success_prob {
                // adjustment case: credit the gradient with its true age
                state.delay = t - state.stamp;
                state.phase = Phase::AwaitingDownload;
                success.push(i);
            }
        }
        self.next_iteration += 1;
        success
    }
}

/// SplitMix64 finaliser, used to derive independent stream seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One independent RNG stream per client.
#[derive(Debug, Clone)]
pub struct ClientStreams {
    streams: Vec<ChaCha8Rng>,
}

impl ClientStreams {
    pub fn new(run_seed: u64, n_clients: usize) -> Self {
        let streams = (0..n_clients)
            .map(|i| ChaCha8Rng::seed_from_u64(mix_seed(run_seed, i as u64 + 1)))
            .collect();
        Self { streams }
    }

    pub fn len(&self) -> usize {
        self.streams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.streams.is_empty()
    }

    pub fn get_mut(&mut self, client: usize) -> &mut ChaCha8Rng {
        &mut self.streams[client]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub t: u64,
    /// `I_t`, ascending client ids.
    pub success_set: Vec<usize>,
    /// `τ_i(t)` for every client.
    pub delays: Vec<u64>,
}

impl IterationRecord {
    pub fn set_size(&self) -> usize {
        self.success_set.len()
    }

    pub fn contains(&self, client: usize) -> bool {
        self.success_set.binary_search(&client).is_ok()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TransmissionTrace {
    pub n_clients: usize,
    pub records: Vec<IterationRecord>,
}

impl TransmissionTrace {
    pub fn new(n_clients: usize) -> Self {
        Self {
            n_clients,
            records: Vec::new(),
        }
    }

    /// Trace of a fully synchronous system: everyone credited with zero delay.
    pub fn synchronous(n_clients: usize, iterations: u64) -> Self {
        Self {
            n_clients,
            records: (1..=iterations)
                .map(|t| IterationRecord {
                    t,
                    success_set: (0..n_clients).collect(),
                    delays: vec![0; n_clients],
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn record(&self, t: u64) -> Option<&IterationRecord> {
        let idx = usize::try_from(t).ok()?.checked_sub(1)?;
        self.records.get(idx).filter(|r| r.t == t)
    }

    /// Plot-ready CSV: `t, set_size, tau_0..tau_{N-1}, in_0..in_{N-1}`.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string(), "set_size".to_string()];
        header.extend((0..self.n_clients).map(|i| format!("tau_{i}")));
        header.extend((0..self.n_clients).map(|i| format!("in_{i}")));
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![r.t.to_string(), r.set_size().to_string()];
            row.extend(r.delays.iter().map(u64::to_string));
            row.extend((0..self.n_clients).map(|i| u8::from(r.contains(i)).to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn export_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(file).map_err(|source| Error::Csv {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Simulate `iterations` rounds of a channel from the initial state.
pub fn simulate_trace(channel: &ChannelModel, iterations: u64, run_seed: u64) -> TransmissionTrace {
    let n = channel.n_clients();
    let mut state = DelayState::new(n);
    let mut streams = ClientStreams::new(run_seed, n);
    let mut trace = TransmissionTrace::new(n);
    for _ in 0..iterations {
        let t = state.next_iteration();
        let success_set = state.advance(channel, &mut streams);
        trace.records.push(IterationRecord {
            t,
            success_set,
            delays: state.clients().iter().map(|c| c.delay).collect(),
        });
    }
    trace
}

/// Raw moments `E[τ], E[τ²], E[τ³]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DelayMoments {
    pub m1: f64,
    pub m2: f64,
    pub m3: f64,
}

impl DelayMoments {
    pub const ZERO: DelayMoments = DelayMoments {
        m1: 0.0,
        m2: 0.0,
        m3: 0.0,
    };

    /// `E[⅓τ³ + 3/2 τ² + 13/6 τ]`.
    pub fn staleness_polynomial(&self) -> f64 {
        self.m3 / 3.0 + 1.5 * self.m2 + 13.0 / 6.0 * self.m1
    }
}

/// Moments of the stationary delay `P(τ = k) = φ (1 - φ)^k` of the default channel.
pub fn geometric_delay_moments(phi: f64) -> Result<DelayMoments> {
    if phi == 0.0 {
        return Err(Error::InfiniteDelay(phi));
    }
    if !valid_prob(phi) {
        return Err(Error::InvalidChannel(format!(
            "success probability must lie in (0, 1], got {phi}"
        )));
    }
    let q = 1.0 - phi;
    Ok(DelayMoments {
        m1: q / phi,
        m2: q * (1.0 + q) / (phi * phi),
        m3: q * (1.0 + 4.0 * q + q * q) / (phi * phi * phi),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalDelayStats {
    /// Time averages of `τ_i(t)^k` over all iterations.
    pub per_client: Vec<DelayMoments>,
    /// Moments of `τ_i(t)` restricted to iterations where the client was credited.
    pub upload_time: Vec<Option<DelayMoments>>,
    pub mean_set_size: f64,
    pub iterations: usize,
}

pub fn empirical_delay_moments(trace: &TransmissionTrace) -> Result<EmpiricalDelayStats> {
    if trace.is_empty() {
        return Err(Error::EmptyTrace);
    }
    let n = trace.n_clients;
    let mut sums = vec![[0.0f64; 3]; n];
    let mut upload = vec![([0.0f64; 3], 0usize); n];
    let mut set_total = 0usize;
    for r in &trace.records {
        set_total += r.set_size();
        for (i, &tau) in r.delays.iter().enumerate() {
            let x = tau as f64;
            let powers = [x, x * x, x * x * x];
            for (acc, p) in sums[i].iter_mut().zip(powers) {
                *acc += p;
            }
            if r.contains(i) {
                for (acc, p) in upload[i].0.iter_mut().zip(powers) {
                    *acc += p;
                }
                upload[i].1 += 1;
            }
        }
    }
    let count = trace.len() as f64;
    let to_moments = |s: [f64; 3], c: f64| DelayMoments {
        m1: s[0] / c,
        m2: s[1] / c,
        m3: s[2] / c,
    };
    Ok(EmpiricalDelayStats {
        per_client: sums.into_iter().map(|s| to_moments(s, count)).collect(),
        upload_time: upload
            .into_iter()
            .map(|(s, c)| (c > 0).then(|| to_moments(s, c as f64)))
            .collect(),
        mean_set_size: set_total as f64 / count,
        iterations: trace.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Drive one client through a scripted sequence of (download ok, upload ok) outcomes.
    fn scripted(link: ClientChannel, outcomes: &[(bool, bool)]) -> Vec<(u64, bool, ClientDelay)> {
        let mut state = DelayState::new(1);
        let mut out = Vec::new();
        for &(down, up) in outcomes {
            let t = state.next_iteration;
            let forced = ClientChannel {
                download_success_prob: if down { 1.0 } else { f64::MIN_POSITIVE },
                upload_success_prob: if up { 1.0 } else { f64::MIN_POSITIVE },
                compute_rounds: link.compute_rounds,
            };
            let channel = ChannelModel::new(vec![forced]).unwrap();
            let mut streams = ClientStreams::new(t, 1);
            let set = state.advance(&channel, &mut streams);
            out.push((t, !set.is_empty(), state.clients[0]));
        }
        out
    }

    #[test]
    fn resets_after_successful_round_trip() {
        let steps = scripted(ClientChannel::bernoulli(1.0), &[(true, true), (true, true)]);
        assert_eq!(steps[1].2.delay, 0);
        assert_eq!(steps[1].2.stamp, 2);
    }

    #[test]
    fn increments_while_upload_fails() {
        let mut script = vec![(true, false); 4];
        script.push((true, false));
        let steps = scripted(ClientChannel::bernoulli(0.5), &script);
        assert_eq!(steps[3].2.delay, 3);
        assert_eq!(steps[4].2.delay, 4);
        assert!(steps.iter().all(|s| !s.1));
    }

    #[test]
    fn adjustment_after_download_failures() {
        // t=1: receive w¹, upload fails; t=2: fails; t=3: credited (stamp 1 → τ=2)
        // To realise stamp 3: credited at t=2, downloads w³ at t=3 and is credited there,
        // then downloads fail at t=4..7 while retransmission succeeds only at t=7.
        let script = [
            (true, true),   // t=1 credited, τ=0
            (true, true),   // t=2 receives w², credited
            (true, true),   // t=3 receives w³ (stamp 3), credited
            (false, false), // t=4 download fails
            (false, false), // t=5
            (false, false), // t=6
            (false, true),  // t=7 retransmission gets through
        ];
        let steps = scripted(ClientChannel::bernoulli(0.5), &script);
        let (t, credited, state) = steps[6];
        assert_eq!(t, 7);
        assert!(credited);
        assert_eq!(state.stamp, 3);
        assert_eq!(state.delay, 4);
        assert_eq!(steps[5].2.delay, 3);
    }

    #[test]
    fn compute_rounds_delay_first_upload() {
        let link = ClientChannel {
            upload_success_prob: 1.0,
            download_success_prob: 1.0,
            compute_rounds: 3,
        };
        let steps = scripted(link, &[(true, true); 4]);
        let credited: Vec<bool> = steps.iter().map(|s| s.1).collect();
        assert_eq!(credited, vec![false, false, true, false]);
        assert_eq!(steps[2].2.delay, 2);
    }

    #[test]
    fn geometric_moment_values() {
        assert_eq!(geometric_delay_moments(1.0).unwrap(), DelayMoments::ZERO);
        let m = geometric_delay_moments(0.5).unwrap();
        assert_eq!((m.m1, m.m2, m.m3), (1.0, 3.0, 13.0));
        assert!(matches!(
            geometric_delay_moments(0.0),
            Err(Error::InfiniteDelay(_))
        ));
        assert!(geometric_delay_moments(1.5).is_err());
    }

    #[test]
    fn geometric_moments_match_series_oracle() {
        for &phi in &[0.1, 0.3, 0.5, 0.8] {
            let (mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0);
            let q: f64 = 1.0 - phi;
            for k in 0..5000 {
                let p = phi * q.powi(k);
                let x = k as f64;
                s1 += p * x;
                s2 += p * x * x;
                s3 += p * x * x * x;
            }
            let m = geometric_delay_moments(phi).unwrap();
            assert!((m.m1 - s1).abs() < 1e-9 * s1.max(1.0));
            assert!((m.m2 - s2).abs() < 1e-9 * s2.max(1.0));
            assert!((m.m3 - s3).abs() < 1e-9 * s3.max(1.0));
        }
    }

    #[test]
    fn synchronous_trace_moments() {
        let trace = TransmissionTrace::synchronous(3, 50);
        let stats = empirical_delay_moments(&trace).unwrap();
        assert!(stats.per_client.iter().all(|m| *m == DelayMoments::ZERO));
        assert_eq!(stats.mean_set_size, 3.0);
        let channel = ChannelModel::synchronous(3).unwrap();
        assert_eq!(simulate_trace(&channel, 50, 9), trace);
    }

    #[test]
    fn alternating_success_has_half_mean_delay() {
        let records = (1..=100u64)
            .map(|t| {
                let credited = t % 2 == 0;
                IterationRecord {
                    t,
                    success_set: if credited { vec![0] } else { vec![] },
                    delays: vec![if credited { 1 } else { 0 }],
                }
            })
            .collect();
        let trace = TransmissionTrace {
            n_clients: 1,
            records,
        };
        let stats = empirical_delay_moments(&trace).unwrap();
        assert_eq!(stats.per_client[0].m1, 0.5);
        assert_eq!(stats.upload_time[0].unwrap().m1, 1.0);
    }

    #[test]
    fn empty_trace_is_an_error() {
        assert!(matches!(
            empirical_delay_moments(&TransmissionTrace::new(2)),
            Err(Error::EmptyTrace)
        ));
    }

    #[test]
    fn channel_validation() {
        assert!(ChannelModel::bernoulli(&[0.5, 0.0]).is_err());
        assert!(ChannelModel::bernoulli(&[]).is_err());
        let bad = ClientChannel {
            compute_rounds: 0,
            ..ClientChannel::bernoulli(1.0)
        };
        assert!(ChannelModel::new(vec![bad]).is_err());
    }

    #[test]
    fn trace_csv_layout() {
        let trace = TransmissionTrace {
            n_clients: 2,
            records: vec![IterationRecord {
                t: 1,
                success_set: vec![1],
                delays: vec![3, 0],
            }],
        };
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "t,set_size,tau_0,tau_1,in_0,in_1\n1,1,3,0,0,1\n"
        );
    }
}
