//! TOML experiment configuration: schema, validation with field paths, and resolution into
//! concrete objective / channel / training objects.

use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::delay::{ChannelModel, ClientChannel};
use crate::error::{Error, Result};
use crate::objective::{
    make_heterogeneous_family, ClientSpec, FamilySpec, GlobalObjective, RadiusPolicy,
    DEFAULT_RADIUS_MARGIN,
};
use crate::training::{CacheInit, Rule};

/// Schema version understood by this build.
pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub objective: ObjectiveConfig,
    pub channel: ChannelConfig,
    pub training: TrainingSection,
    pub monte_carlo: MonteCarloConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<FamilySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clients: Option<Vec<ClientSpec>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelConfig {
    /// Per-client upload success probability `ϕ_i`.
    pub upload_success: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub download_success: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compute_rounds: Option<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub rules: Vec<Rule>,
    /// Absolute step size; exclusive with `learning_rate_scale`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    /// Step size as a multiple of `1/L`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate_scale: Option<f64>,
    pub horizon: u64,
    pub init: InitSpec,
    #[serde(default)]
    pub cache_init: CacheInit,
    #[serde(default)]
    pub radius: RadiusSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitSpec {
    Explicit {
        values: Vec<f64>,
    },
    /// `w¹ = w* + distance · u` with `u` uniform on the unit sphere.
    Random {
        seed: u64,
        distance: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum RadiusSpec {
    /// `R = margin · ‖w¹ − w*‖`.
    Margin(f64),
    Fixed(f64),
}

impl Default for RadiusSpec {
    fn default() -> Self {
        RadiusSpec::Margin(DEFAULT_RADIUS_MARGIN)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonteCarloConfig {
    pub runs: u64,
    pub master_seed: u64,
    #[serde(default)]
    pub exclude_divergent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    /// Write the per-iteration series (can be large).
    #[serde(default = "default_true")]
    pub per_iteration: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: None,
            per_iteration: true,
        }
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "axis", rename_all = "snake_case", deny_unknown_fields)]
pub enum SweepSpec {
    /// Vary one client's upload success probability.
    ClientDelay {
        client: usize,
        values: Vec<f64>,
    },
    /// Vary the family's target heterogeneity.
    Heterogeneity {
        values: Vec<f64>,
    },
    /// Vary the absolute step size.
    LearningRate {
        values: Vec<f64>,
    },
    Horizon {
        values: Vec<u64>,
    },
}

impl SweepSpec {
    pub fn name(&self) -> &'static str {
        match self {
            SweepSpec::ClientDelay { .. } => "client_delay",
            SweepSpec::Heterogeneity { .. } => "heterogeneity",
            SweepSpec::LearningRate { .. } => "learning_rate",
            SweepSpec::Horizon { .. } => "horizon",
        }
    }

    pub fn values(&self) -> Vec<f64> {
        match self {
            SweepSpec::ClientDelay { values, .. }
            | SweepSpec::Heterogeneity { values }
            | SweepSpec::LearningRate { values } => values.clone(),
            SweepSpec::Horizon { values } => values.iter().map(|&v| v as f64).collect(),
        }
    }

    /// The base config with the axis set to its `index`-th value.
    pub fn apply(&self, base: &ExperimentConfig, index: usize) -> ExperimentConfig {
        let mut cfg = base.clone();
        cfg.sweep = None;
        match self {
            SweepSpec::ClientDelay { client, values } => {
                cfg.channel.upload_success[*client] = values[index];
            }
            SweepSpec::Heterogeneity { values } => {
                if let Some(f) = cfg.objective.family.as_mut() {
                    f.target_phi = values[index];
                }
            }
            SweepSpec::LearningRate { values } => {
                cfg.training.learning_rate = Some(values[index]);
                cfg.training.learning_rate_scale = None;
            }
            SweepSpec::Horizon { values } => cfg.training.horizon = values[index],
        }
        cfg
    }
}

fn prob_ok(p: f64) -> bool {
    p.is_finite() && p > 0.0 && p <= 1.0
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("<root>", e.to_string()))
    }

    pub fn n_clients(&self) -> Option<usize> {
        match (&self.objective.family, &self.objective.clients) {
            (Some(f), None) => Some(f.n_clients),
            (None, Some(c)) => Some(c.len()),
            _ => None,
        }
    }

    /// Structural checks that need no numerical work. Errors name the offending field.
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::config(
                "version",
                format!(
                    "unsupported version {}, expected {CONFIG_VERSION}",
                    self.version
                ),
            ));
        }
        let n = match (&self.objective.family, &self.objective.clients) {
            (Some(_), Some(_)) => {
                return Err(Error::config(
                    "objective",
                    "give either `family` or `clients`, not both",
                ))
            }
            (None, None) => {
                return Err(Error::config(
                    "objective",
                    "one of `family` or `clients` is required",
                ))
            }
            (Some(f), None) => {
                if f.n_clients == 0 {
                    return Err(Error::config(
                        "objective.family.n_clients",
                        "must be at least 1",
                    ));
                }
                if f.dimension == 0 {
                    return Err(Error::config(
                        "objective.family.dimension",
                        "must be at least 1",
                    ));
                }
                if !(f.target_phi.is_finite() && f.target_phi >= 0.0) {
                    return Err(Error::config("objective.family.target_phi", "must be >= 0"));
                }
                let (lo, hi) = f.condition_range;
                if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
                    return Err(Error::config(
                        "objective.family.condition_range",
                        "need 0 < low <= high",
                    ));
                }
                if let Some(w) = &f.weights {
                    if w.len() != f.n_clients {
                        return Err(Error::config(
                            "objective.family.weights",
                            format!("expected {} entries, found {}", f.n_clients, w.len()),
                        ));
                    }
                }
                f.n_clients
            }
            (None, Some(c)) => {
                if c.is_empty() {
                    return Err(Error::config(
                        "objective.clients",
                        "at least one client required",
                    ));
                }
                c.len()
            }
        };

        let ch = &self.channel;
        if ch.upload_success.len() != n {
            return Err(Error::config(
                "channel.upload_success",
                format!("expected {n} entries, found {}", ch.upload_success.len()),
            ));
        }
        for (i, &p) in ch.upload_success.iter().enumerate() {
            if !prob_ok(p) {
                return Err(Error::config(
                    format!("channel.upload_success[{i}]"),
                    format!("probability must lie in (0, 1], got {p}"),
                ));
            }
        }
        if let Some(d) = &ch.download_success {
            if d.len() != n {
                return Err(Error::config(
                    "channel.download_success",
                    format!("expected {n} entries, found {}", d.len()),
                ));
            }
            if let Some(i) = d.iter().position(|&p| !prob_ok(p)) {
                return Err(Error::config(
                    format!("channel.download_success[{i}]"),
                    format!("probability must lie in (0, 1], got {}", d[i]),
                ));
            }
        }
        if let Some(c) = &ch.compute_rounds {
            if c.len() != n {
                return Err(Error::config(
                    "channel.compute_rounds",
                    format!("expected {n} entries, found {}", c.len()),
                ));
            }
            if let Some(i) = c.iter().position(|&r| r == 0) {
                return Err(Error::config(
                    format!("channel.compute_rounds[{i}]"),
                    "must be at least 1",
                ));
            }
        }

        let tr = &self.training;
        if tr.rules.is_empty() {
            return Err(Error::config(
                "training.rules",
                "at least one rule required",
            ));
        }
        if let Some(i) = (1..tr.rules.len()).find(|&i| tr.rules[..i].contains(&tr.rules[i])) {
            return Err(Error::config(
                format!("training.rules[{i}]"),
                "duplicate rule",
            ));
        }
        match (tr.learning_rate, tr.learning_rate_scale) {
            (Some(_), Some(_)) => {
                return Err(Error::config(
                    "training.learning_rate",
                    "give either `learning_rate` or `learning_rate_scale`, not both",
                ))
            }
            (None, None) => {
                return Err(Error::config(
                    "training.learning_rate",
                    "one of `learning_rate` or `learning_rate_scale` is required",
                ))
            }
            (Some(v), None) | (None, Some(v)) => {
                if !(v.is_finite() && v > 0.0) {
                    let field = if tr.learning_rate.is_some() {
                        "training.learning_rate"
                    } else {
                        "training.learning_rate_scale"
                    };
                    return Err(Error::config(field, format!("must be positive, got {v}")));
                }
            }
        }
        if tr.horizon == 0 {
            return Err(Error::config("training.horizon", "must be at least 1"));
        }
        match &tr.init {
            InitSpec::Explicit { values } => {
                let d = self.dimension_hint();
                if let Some(d) = d {
                    if values.len() != d {
                        return Err(Error::config(
                            "training.init.values",
                            format!("expected {d} entries, found {}", values.len()),
                        ));
                    }
                }
            }
            InitSpec::Random { distance, .. } => {
                if !(distance.is_finite() && *distance >= 0.0) {
                    return Err(Error::config("training.init.distance", "must be >= 0"));
                }
            }
        }
        match tr.radius {
            RadiusSpec::Margin(m) if !(m.is_finite() && m > 0.0) => {
                return Err(Error::config("training.radius.margin", "must be positive"))
            }
            RadiusSpec::Fixed(r) if !(r.is_finite() && r > 0.0) => {
                return Err(Error::config("training.radius.fixed", "must be positive"))
            }
            _ => {}
        }

        if self.monte_carlo.runs == 0 {
            return Err(Error::config("monte_carlo.runs", "must be at least 1"));
        }

        if let Some(sweep) = &self.sweep {
            let values = sweep.values();
            if values.is_empty() {
                return Err(Error::config(
                    "sweep.values",
                    "at least one axis point required",
                ));
            }
            match sweep {
                SweepSpec::ClientDelay { client, values } => {
                    if *client >= n {
                        return Err(Error::config(
                            "sweep.client",
                            format!("client {client} out of range for {n} clients"),
                        ));
                    }
                    if let Some(i) = values.iter().position(|&p| !prob_ok(p)) {
                        return Err(Error::config(
                            format!("sweep.values[{i}]"),
                            format!("probability must lie in (0, 1], got {}", values[i]),
                        ));
                    }
                }
                SweepSpec::Heterogeneity { values } => {
                    if self.objective.family.is_none() {
                        return Err(Error::config(
                            "sweep.axis",
                            "heterogeneity sweeps need a generated `objective.family`",
                        ));
                    }
                    if let Some(i) = values.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
                        return Err(Error::config(format!("sweep.values[{i}]"), "must be >= 0"));
                    }
                }
                SweepSpec::LearningRate { values } => {
                    if let Some(i) = values.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
                        return Err(Error::config(
                            format!("sweep.values[{i}]"),
                            "must be positive",
                        ));
                    }
                }
                SweepSpec::Horizon { values } => {
                    if let Some(i) = values.iter().position(|&v| v == 0) {
                        return Err(Error::config(format!("sweep.values[{i}]"), "must be >= 1"));
                    }
                }
            }
        }
        Ok(())
    }

    fn dimension_hint(&self) -> Option<usize> {
        if let Some(f) = &self.objective.family {
            return Some(f.dimension);
        }
        self.objective.clients.as_ref()?.first().map(|c| match c {
            ClientSpec::Quadratic { optimum, .. } => optimum.len(),
            ClientSpec::Logistic { features, .. } => features.first().map_or(0, Vec::len),
        })
    }

    pub fn build_objective(&self) -> Result<GlobalObjective> {
        match (&self.objective.family, &self.objective.clients) {
            (Some(f), None) => make_heterogeneous_family(f),
            (None, Some(c)) => GlobalObjective::from_specs(c),
            _ => Err(Error::config(
                "objective",
                "one of `family` or `clients` is required",
            )),
        }
    }

    pub fn build_channel(&self) -> Result<ChannelModel> {
        let ch = &self.channel;
        let clients = ch
            .upload_success
            .iter()
            .enumerate()
            .map(|(i, &up)| ClientChannel {
                upload_success_prob: up,
                download_success_prob: ch.download_success.as_ref().map_or(1.0, |d| d[i]),
                compute_rounds: ch.compute_rounds.as_ref().map_or(1, |c| c[i]),
            })
            .collect();
        ChannelModel::new(clients)
    }

    /// Absolute step size, resolving `learning_rate_scale` against the family's `L`.
    pub fn learning_rate(&self, smoothness: f64) -> f64 {
        match (
            self.training.learning_rate,
            self.training.learning_rate_scale,
        ) {
            (Some(eta), _) => eta,
            (None, Some(scale)) => scale / smoothness,
            (None, None) => unreachable!("validated config has a step size"),
        }
    }

    pub fn initial_point(&self, gobj: &GlobalObjective) -> Result<DVector<f64>> {
        match &self.training.init {
            InitSpec::Explicit { values } => {
                if values.len() != gobj.dimension() {
                    return Err(Error::config(
                        "training.init.values",
                        format!(
                            "expected {} entries, found {}",
                            gobj.dimension(),
                            values.len()
                        ),
                    ));
                }
                Ok(DVector::from_column_slice(values))
            }
            InitSpec::Random { seed, distance } => {
                let optimum = gobj.global_optimum()?;
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let mut dir =
                    DVector::from_fn(gobj.dimension(), |_, _| StandardNormal.sample(&mut rng));
                let norm: f64 = dir.norm();
                if norm > 0.0 {
                    dir /= norm;
                }
                Ok(optimum + dir * *distance)
            }
        }
    }

    pub fn radius_policy(&self, init: &DVector<f64>) -> RadiusPolicy {
        match self.training.radius {
            RadiusSpec::Margin(margin) => RadiusPolicy::FromInit {
                init: init.clone(),
                margin,
            },
            RadiusSpec::Fixed(r) => RadiusPolicy::Fixed(r),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const SAMPLE: &str = r#"
version = 1

[objective.family]
n_clients = 4
dimension = 3
target_phi = 1.0
condition_range = [1.0, 4.0]
seed = 11

[channel]
upload_success = [0.5, 0.5, 0.5, 0.5]

[training]
rules = ["audg", "psurdg"]
learning_rate_scale = 0.5
horizon = 20
init = { kind = "random", seed = 3, distance = 5.0 }

[monte_carlo]
runs = 4
master_seed = 9
"#;

    fn err_path(text: &str) -> String {
        match ExperimentConfig::from_toml_str(text) {
            Err(Error::Config { path, .. }) => path,
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn sample_parses_with_defaults() {
        let cfg = ExperimentConfig::from_toml_str(SAMPLE).unwrap();
        assert_eq!(cfg.training.cache_init, CacheInit::WarmUp);
        assert_eq!(cfg.training.radius, RadiusSpec::Margin(2.0));
        assert!(cfg.output.per_iteration);
        assert!(!cfg.monte_carlo.exclude_divergent);
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn random_init_sits_at_requested_distance() {
        let cfg = ExperimentConfig::from_toml_str(SAMPLE).unwrap();
        let g = cfg.build_objective().unwrap();
        let w1 = cfg.initial_point(&g).unwrap();
        let d = (w1 - g.global_optimum().unwrap()).norm();
        assert!((d - 5.0).abs() < 1e-12);
    }

    #[test]
    fn errors_carry_field_paths() {
        assert_eq!(
            err_path(&SAMPLE.replace("version = 1", "version = 2")),
            "version"
        );
        assert_eq!(
            err_path(&SAMPLE.replace("[0.5, 0.5, 0.5, 0.5]", "[0.5, 0.5, 1.5, 0.5]")),
            "channel.upload_success[2]"
        );
        assert_eq!(
            err_path(&SAMPLE.replace("[0.5, 0.5, 0.5, 0.5]", "[0.5, 0.5]")),
            "channel.upload_success"
        );
        assert_eq!(
            err_path(&SAMPLE.replace("runs = 4", "runs = 0")),
            "monte_carlo.runs"
        );
        assert_eq!(
            err_path(&SAMPLE.replace(
                "learning_rate_scale = 0.5",
                "learning_rate = 0.1\nlearning_rate_scale = 0.5"
            )),
            "training.learning_rate"
        );
        assert_eq!(
            err_path(&SAMPLE.replace(r#"["audg", "psurdg"]"#, r#"["audg", "audg"]"#)),
            "training.rules[1]"
        );
        let sweep = format!(
            "{SAMPLE}\n[sweep]\naxis = \"client_delay\"\nclient = 7\nvalues = [0.5, 0.25]\n"
        );
        assert_eq!(err_path(&sweep), "sweep.client");
    }

    #[test]
    fn unknown_fields_and_missing_version_are_rejected() {
        assert!(matches!(
            ExperimentConfig::from_toml_str(
                &SAMPLE.replace("horizon = 20", "horizon = 20\nhorizn = 3")
            ),
            Err(Error::Toml(_))
        ));
        assert!(ExperimentConfig::from_toml_str(&SAMPLE.replace("version = 1", "")).is_err());
    }

    #[test]
    fn sweep_apply_changes_only_the_axis() {
        let cfg = ExperimentConfig::from_toml_str(SAMPLE).unwrap();
        let s = SweepSpec::ClientDelay {
            client: 0,
            values: vec![0.5, 0.1],
        };
        let point = s.apply(&cfg, 1);
        assert_eq!(point.channel.upload_success, vec![0.1, 0.5, 0.5, 0.5]);
        assert_eq!(point.training, cfg.training);
        let h = SweepSpec::Horizon { values: vec![5, 9] };
        assert_eq!(h.apply(&cfg, 1).training.horizon, 9);
        assert_eq!(h.values(), vec![5.0, 9.0]);
    }
}
