//! Convex client objectives with exactly computable regularity constants.
//!
//! Two families are supported. Quadratics `f_i(w) = ½ (w - b_i)ᵀ A_i (w - b_i)` carry
//! exact smoothness, strong convexity, optimum and heterogeneity values. Ridge-regularised
//! logistic regression exercises a non-quadratic case whose optimum is found numerically.
//!
//! Gradient bounds are only meaningful on a compact set, so [`compute_constants`] reports
//! `G` over the ball of radius `R` around the global optimum.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance used when checking that client weights sum to one.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-12;
/// Gradient-norm target of the inner optimizer.
pub const OPTIMUM_TOLERANCE: f64 = 1e-10;
/// Step cap of the inner optimizer.
pub const OPTIMIZER_MAX_STEPS: usize = 100_000;
/// Default `R = margin · ‖w¹ - w*‖`.
pub const DEFAULT_RADIUS_MARGIN: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    Quadratic,
    Logistic,
}

#[derive(Debug, Clone)]
pub struct Quadratic {
    matrix: DMatrix<f64>,
    optimum: DVector<f64>,
    eig_min: f64,
    eig_max: f64,
}

impl Quadratic {
    pub fn new(matrix: DMatrix<f64>, optimum: DVector<f64>) -> Result<Self> {
        let d = optimum.len();
        if d == 0 {
            return Err(Error::InvalidObjective("zero-dimensional quadratic".into()));
        }
        if matrix.nrows() != d || matrix.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: matrix.nrows().max(matrix.ncols()),
            });
        }
        if matrix.iter().chain(optimum.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidObjective(
                "non-finite quadratic entries".into(),
            ));
        }
        let scale = matrix.amax().max(1.0);
        if (&matrix - matrix.transpose()).amax() > 1e-12 * scale {
            return Err(Error::InvalidObjective(
                "quadratic matrix is not symmetric".into(),
            ));
        }
        let (eig_min, eig_max) = eigen_extremes(&matrix);
        if eig_min <= 0.0 {
            return Err(Error::DegenerateMatrix {
                min_eigenvalue: eig_min,
            });
        }
        Ok(Self {
            matrix,
            optimum,
            eig_min,
            eig_max,
        })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn optimum(&self) -> &DVector<f64> {
        &self.optimum
    }

    pub fn eigen_extremes(&self) -> (f64, f64) {
        (self.eig_min, self.eig_max)
    }
}

#[derive(Debug, Clone)]
pub struct Logistic {
    features: DMatrix<f64>,
    labels: DVector<f64>,
    ridge: f64,
    smoothness: f64,
}

impl Logistic {
    pub fn new(features: DMatrix<f64>, labels: DVector<f64>, ridge: f64) -> Result<Self> {
        let n = features.nrows();
        if n == 0 || features.ncols() == 0 {
            return Err(Error::InvalidObjective(
                "logistic objective needs samples and features".into(),
            ));
        }
        if labels.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: labels.len(),
            });
        }
        if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(Error::InvalidObjective(
                "logistic labels must be 0 or 1".into(),
            ));
        }
        if !(ridge.is_finite() && ridge > 0.0) {
            return Err(Error::InvalidObjective(format!(
                "logistic ridge must be positive, got {ridge}"
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidObjective(
                "non-finite logistic features".into(),
            ));
        }
        let gram = features.transpose() * &features;
        let (_, gram_max) = eigen_extremes(&gram);
        let smoothness = 0.25 * gram_max / n as f64 + ridge;
        Ok(Self {
            features,
            labels,
            ridge,
            smoothness,
        })
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn labels(&self) -> &DVector<f64> {
        &self.labels
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }
}

#[derive(Debug, Clone)]
pub enum Loss {
    Quadratic(Quadratic),
    Logistic(Logistic),
}

/// One client's loss `f_i` and aggregation weight `λ_i`.
#[derive(Debug, Clone)]
pub struct ClientObjective {
    loss: Loss,
    weight: f64,
    optimum: OnceLock<DVector<f64>>,
}

impl ClientObjective {
    pub fn new(loss: Loss, weight: f64) -> Result<Self> {
        if !(weight > 0.0 && weight <= 1.0) {
            return Err(Error::InvalidObjective(format!(
                "client weight must lie in (0, 1], got {weight}"
            )));
        }
        Ok(Self {
            loss,
            weight,
            optimum: OnceLock::new(),
        })
    }

    pub fn quadratic(matrix: DMatrix<f64>, optimum: DVector<f64>, weight: f64) -> Result<Self> {
        Self::new(Loss::Quadratic(Quadratic::new(matrix, optimum)?), weight)
    }

    pub fn logistic(
        features: DMatrix<f64>,
        labels: DVector<f64>,
        ridge: f64,
        weight: f64,
    ) -> Result<Self> {
        Self::new(
            Loss::Logistic(Logistic::new(features, labels, ridge)?),
            weight,
        )
    }

    pub fn kind(&self) -> ObjectiveKind {
        match self.loss {
            Loss::Quadratic(_) => ObjectiveKind::Quadratic,
            Loss::Logistic(_) => ObjectiveKind::Logistic,
        }
    }

    pub fn loss_fn(&self) -> &Loss {
        &self.loss
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn dimension(&self) -> usize {
        match &self.loss {
            Loss::Quadratic(q) => q.optimum.len(),
            Loss::Logistic(l) => l.features.ncols(),
        }
    }

    /// Upper curvature constant of this client.
    pub fn smoothness(&self) -> f64 {
        match &self.loss {
            Loss::Quadratic(q) => q.eig_max,
            Loss::Logistic(l) => l.smoothness,
        }
    }

    /// Lower curvature constant of this client.
    pub fn convexity(&self) -> f64 {
        match &self.loss {
            Loss::Quadratic(q) => q.eig_min,
            Loss::Logistic(l) => l.ridge,
        }
    }

    fn check_dimension(&self, w: &DVector<f64>) -> Result<()> {
        let d = self.dimension();
        if w.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: w.len(),
            });
        }
        Ok(())
    }

    pub fn loss(&self, w: &DVector<f64>) -> Result<f64> {
        self.check_dimension(w)?;
        Ok(self.loss_unchecked(w))
    }

    pub fn gradient(&self, w: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dimension(w)?;
        Ok(self.gradient_unchecked(w))
    }

    pub(crate) fn loss_unchecked(&self, w: &DVector<f64>) -> f64 {
        match &self.loss {
            Loss::Quadratic(q) => {
                let diff = w - &q.optimum;
                0.5 * diff.dot(&(&q.matrix * &diff))
            }
            Loss::Logistic(l) => {
                let margins = &l.features * w;
                let n = l.labels.len() as f64;
                let data: f64 = margins
                    .iter()
                    .zip(l.labels.iter())
                    .map(|(&z, &y)| softplus(z) - y * z)
                    .sum();
                data / n + 0.5 * l.ridge * w.norm_squared()
            }
        }
    }

    pub(crate) fn gradient_unchecked(&self, w: &DVector<f64>) -> DVector<f64> {
        match &self.loss {
            Loss::Quadratic(q) => &q.matrix * (w - &q.optimum),
            Loss::Logistic(l) => {
                let margins = &l.features * w;
                let n = l.labels.len() as f64;
                let residual = DVector::from_iterator(
                    margins.len(),
                    margins
                        .iter()
                        .zip(l.labels.iter())
                        .map(|(&z, &y)| sigmoid(z) - y),
                );
                l.features.transpose() * residual / n + w * l.ridge
            }
        }
    }

    /// Minimiser `w_i*` of this client's loss.
    pub fn local_optimum(&self) -> Result<DVector<f64>> {
        if let Some(w) = self.optimum.get() {
            return Ok(w.clone());
        }
        let w = match &self.loss {
            Loss::Quadratic(q) => q.optimum.clone(),
            Loss::Logistic(l) => minimize(
                |w| self.loss_unchecked(w),
                |w| self.gradient_unchecked(w),
                DVector::zeros(l.features.ncols()),
                l.smoothness,
            )?,
        };
        let _ = self.optimum.set(w.clone());
        Ok(w)
    }

    pub fn to_spec(&self) -> ClientSpec {
        match &self.loss {
            Loss::Quadratic(q) => ClientSpec::Quadratic {
                weight: self.weight,
                matrix: rows_of(&q.matrix),
                optimum: q.optimum.iter().copied().collect(),
            },
            Loss::Logistic(l) => ClientSpec::Logistic {
                weight: self.weight,
                features: rows_of(&l.features),
                labels: l.labels.iter().copied().collect(),
                ridge: l.ridge,
            },
        }
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Smallest and largest eigenvalue of a symmetric matrix.
pub fn eigen_extremes(m: &DMatrix<f64>) -> (f64, f64) {
    let eig = SymmetricEigen::new(m.clone());
    let min = eig
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    let max = eig
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    (min, max)
}

/// Deterministic full-gradient descent with backtracking.
///
/// Steps never shrink below `1/smoothness`, which is always a descent step for an
/// `L`-smooth function; this keeps the loop moving once loss differences drop below
/// floating-point resolution.
fn minimize(
    value: impl Fn(&DVector<f64>) -> f64,
    grad: impl Fn(&DVector<f64>) -> DVector<f64>,
    start: DVector<f64>,
    smoothness: f64,
) -> Result<DVector<f64>> {
    let min_step = 1.0 / smoothness;
    let mut step = min_step;
    let mut x = start;
    let mut g = grad(&x);
    let mut fx = value(&x);
    for _ in 0..OPTIMIZER_MAX_STEPS {
        let gnorm2 = g.norm_squared();
        if gnorm2.sqrt() <= OPTIMUM_TOLERANCE {
            return Ok(x);
        }
        step = (step * 2.0).max(min_step);
        loop {
            let candidate = &x - &g * step;
            let fc = value(&candidate);
            if fc <= fx - 0.5 * step * gnorm2 || step <= min_step {
                x = candidate;
                fx = fc;
                break;
            }
            step = (step * 0.5).max(min_step);
        }
        g = grad(&x);
    }
    let gradient_norm = g.norm();
    if gradient_norm <= OPTIMUM_TOLERANCE {
        return Ok(x);
    }
    Err(Error::NotConverged {
        iterations: OPTIMIZER_MAX_STEPS,
        gradient_norm,
    })
}

/// Weighted family `f = Σ λ_i f_i`.
#[derive(Debug, Clone)]
pub struct GlobalObjective {
    clients: Vec<ClientObjective>,
    dimension: usize,
    optimum: OnceLock<DVector<f64>>,
}

impl GlobalObjective {
    pub fn new(clients: Vec<ClientObjective>) -> Result<Self> {
        let first = clients
            .first()
            .ok_or_else(|| Error::InvalidObjective("a family needs at least one client".into()))?;
        let dimension = first.dimension();
        for c in &clients {
            if c.dimension() != dimension {
                return Err(Error::DimensionMismatch {
                    expected: dimension,
                    found: c.dimension(),
                });
            }
        }
        let total: f64 = clients.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            return Err(Error::InvalidObjective(format!(
                "client weights sum to {total}, expected 1"
            )));
        }
        Ok(Self {
            clients,
            dimension,
            optimum: OnceLock::new(),
        })
    }

    pub fn from_specs(specs: &[ClientSpec]) -> Result<Self> {
        let clients = specs
            .iter()
            .map(ClientSpec::build)
            .collect::<Result<Vec<_>>>()?;
        Self::new(clients)
    }

    pub fn to_specs(&self) -> Vec<ClientSpec> {
        self.clients.iter().map(ClientObjective::to_spec).collect()
    }

    pub fn clients(&self) -> &[ClientObjective] {
        &self.clients
    }

    pub fn n_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn weights(&self) -> Vec<f64> {
        self.clients.iter().map(|c| c.weight).collect()
    }

    fn check_dimension(&self, w: &DVector<f64>) -> Result<()> {
        if w.len() != self.dimension {
            return Err(Error::DimensionMismatch {
                expected: self.dimension,
                found: w.len(),
            });
        }
        Ok(())
    }

    pub fn loss(&self, w: &DVector<f64>) -> Result<f64> {
        self.check_dimension(w)?;
        Ok(self.loss_unchecked(w))
    }

    pub fn gradient(&self, w: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dimension(w)?;
        Ok(self.gradient_unchecked(w))
    }

    pub(crate) fn loss_unchecked(&self, w: &DVector<f64>) -> f64 {
        self.clients
            .iter()
            .map(|c| c.weight * c.loss_unchecked(w))
            .sum()
    }

    pub(crate) fn gradient_unchecked(&self, w: &DVector<f64>) -> DVector<f64> {
        let mut g = DVector::zeros(self.dimension);
        for c in &self.clients {
            g.axpy(c.weight, &c.gradient_unchecked(w), 1.0);
        }
        g
    }

    /// Minimiser `w*` of the weighted family. Closed form when every client is quadratic.
    pub fn global_optimum(&self) -> Result<DVector<f64>> {
        if let Some(w) = self.optimum.get() {
            return Ok(w.clone());
        }
        let quadratics: Option<Vec<&Quadratic>> = self
            .clients
            .iter()
            .map(|c| match &c.loss {
                Loss::Quadratic(q) => Some(q),
                Loss::Logistic(_) => None,
            })
            .collect();
        let w = match quadratics {
            Some(qs) => {
                let d = self.dimension;
                let mut hessian = DMatrix::zeros(d, d);
                let mut rhs = DVector::zeros(d);
                for (c, q) in self.clients.iter().zip(qs) {
                    hessian += &q.matrix * c.weight;
                    rhs += &q.matrix * &q.optimum * c.weight;
                }
                let chol = hessian.cholesky().ok_or(Error::DegenerateMatrix {
                    min_eigenvalue: 0.0,
                })?;
                chol.solve(&rhs)
            }
            None => {
                let smoothness: f64 = self.clients.iter().map(|c| c.weight * c.smoothness()).sum();
                minimize(
                    |w| self.loss_unchecked(w),
                    |w| self.gradient_unchecked(w),
                    DVector::zeros(self.dimension),
                    smoothness,
                )?
            }
        };
        let _ = self.optimum.set(w.clone());
        Ok(w)
    }

    pub fn local_optima(&self) -> Result<Vec<DVector<f64>>> {
        self.clients
            .iter()
            .map(ClientObjective::local_optimum)
            .collect()
    }

    pub fn is_quadratic(&self) -> bool {
        self.clients
            .iter()
            .all(|c| c.kind() == ObjectiveKind::Quadratic)
    }
}

/// How the compactness radius `R` is chosen.
#[derive(Debug, Clone, PartialEq)]
pub enum RadiusPolicy {
    Fixed(f64),
    /// `R = margin · ‖w¹ - w*‖`.
    FromInit {
        init: DVector<f64>,
        margin: f64,
    },
}

impl RadiusPolicy {
    pub fn from_init(init: DVector<f64>) -> Self {
        RadiusPolicy::FromInit {
            init,
            margin: DEFAULT_RADIUS_MARGIN,
        }
    }
}

/// Regularity constants `L, μ, G, R, φ` of a family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConstants {
    pub smoothness: f64,
    pub convexity: f64,
    pub gradient_bound: f64,
    pub compactness_radius: f64,
    pub heterogeneity: f64,
}

impl ObjectiveConstants {
    pub fn validate(&self) -> Result<()> {
        let ObjectiveConstants {
            smoothness,
            convexity,
            gradient_bound,
            compactness_radius,
            heterogeneity,
        } = *self;
        let all_finite = [
            smoothness,
            convexity,
            gradient_bound,
            compactness_radius,
            heterogeneity,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::InvalidObjective("non-finite constants".into()));
        }
        if !(convexity > 0.0 && smoothness >= convexity) {
            return Err(Error::InvalidObjective(format!(
                "need L >= mu > 0, got L={smoothness}, mu={convexity}"
            )));
        }
        if !(gradient_bound > 0.0 && compactness_radius > 0.0 && heterogeneity >= 0.0) {
            return Err(Error::InvalidObjective(
                "G and R must be positive and phi nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Number of random probes used by [`compute_constants`] to confirm the gradient bound.
pub const GRADIENT_PROBES: usize = 1000;

/// Derive `L, μ, φ, R, G` for a family. `G = L (R + φ)` holds on the `R`-ball around `w*`
/// because every client gradient vanishes at its own optimum, which lies within `φ` of `w*`.
pub fn compute_constants(
    gobj: &GlobalObjective,
    radius_policy: &RadiusPolicy,
    probe_seed: u64,
) -> Result<ObjectiveConstants> {
    let w_star = gobj.global_optimum()?;
    let smoothness = gobj
        .clients()
        .iter()
        .map(ClientObjective::smoothness)
        .fold(0.0, f64::max);
    let convexity = gobj
        .clients()
        .iter()
        .map(ClientObjective::convexity)
        .fold(f64::INFINITY, f64::min);
    if convexity <= 0.0 {
        return Err(Error::DegenerateMatrix {
            min_eigenvalue: convexity,
        });
    }
    let heterogeneity = gobj
        .local_optima()?
        .iter()
        .map(|wi| (wi - &w_star).norm())
        .fold(0.0, f64::max);
    let compactness_radius = match radius_policy {
        RadiusPolicy::Fixed(r) => *r,
        RadiusPolicy::FromInit { init, margin } => {
            gobj.check_dimension(init)?;
            (init - &w_star).norm() * margin
        }
    };
    if !(compactness_radius.is_finite() && compactness_radius > 0.0) {
        return Err(Error::Infeasible(format!(
            "compactness radius must be positive, got {compactness_radius}"
        )));
    }
    let constants = ObjectiveConstants {
        smoothness,
        convexity,
        gradient_bound: smoothness * (compactness_radius + heterogeneity),
        compactness_radius,
        heterogeneity,
    };
    constants.validate()?;

    let probe = probe_gradient_bound(gobj, &constants, GRADIENT_PROBES, probe_seed)?;
    if probe > constants.gradient_bound * (1.0 + 1e-12) {
        return Err(Error::InvalidObjective(format!(
            "gradient probe {probe} exceeds derived bound {}",
            constants.gradient_bound
        )));
    }
    Ok(constants)
}

/// Uniform sample from the ball of `radius` around `center`.
pub fn sample_ball(center: &DVector<f64>, radius: f64, rng: &mut impl Rng) -> DVector<f64> {
    let d = center.len();
    let mut dir = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let norm = dir.norm();
    if norm > 0.0 {
        dir /= norm;
    }
    let r = radius * rng.random::<f64>().powf(1.0 / d as f64);
    center + dir * r
}

/// Largest client gradient norm over `n_probes` uniform points of the `R`-ball around `w*`.
pub fn probe_gradient_bound(
    gobj: &GlobalObjective,
    constants: &ObjectiveConstants,
    n_probes: usize,
    seed: u64,
) -> Result<f64> {
    let w_star = gobj.global_optimum()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_norm: f64 = 0.0;
    for _ in 0..n_probes {
        let w = sample_ball(&w_star, constants.compactness_radius, &mut rng);
        for c in gobj.clients() {
            max_norm = max_norm.max(c.gradient_unchecked(&w).norm());
        }
    }
    Ok(max_norm)
}

/// Serializable description of one client (matrices as row-major nested arrays).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientSpec {
    Quadratic {
        weight: f64,
        matrix: Vec<Vec<f64>>,
        optimum: Vec<f64>,
    },
    Logistic {
        weight: f64,
        features: Vec<Vec<f64>>,
        labels: Vec<f64>,
        ridge: f64,
    },
}

fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::InvalidObjective("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

impl ClientSpec {
    pub fn build(&self) -> Result<ClientObjective> {
        match self {
            ClientSpec::Quadratic {
                weight,
                matrix,
                optimum,
            } => ClientObjective::quadratic(
                matrix_from_rows(matrix)?,
                DVector::from_column_slice(optimum),
                *weight,
            ),
            ClientSpec::Logistic {
                weight,
                features,
                labels,
                ridge,
            } => ClientObjective::logistic(
                matrix_from_rows(features)?,
                DVector::from_column_slice(labels),
                *ridge,
                *weight,
            ),
        }
    }
}

/// Parameters of a synthetic quadratic family with controlled heterogeneity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilySpec {
    pub n_clients: usize,
    pub dimension: usize,
    pub target_phi: f64,
    /// Eigenvalue range `[μ, L]` of every client matrix.
    pub condition_range: (f64, f64),
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
}

fn random_orthogonal(d: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Random quadratic clients whose optima sit exactly `target_phi` (max distance) from `w*`.
///
/// Each client matrix is `Q diag(λ) Qᵀ` with a random rotation and eigenvalues drawn from
/// `condition_range`; for `d ≥ 2` the two endpoints are always present, so the family's
/// `L` and `μ` equal the range endpoints. Optima are `c + s·u_i`; since `w*` is affine in `s`,
/// the scale `s` that realises `target_phi` is solved for directly.
pub fn make_heterogeneous_family(spec: &FamilySpec) -> Result<GlobalObjective> {
    let FamilySpec {
        n_clients,
        dimension: d,
        target_phi,
        condition_range: (lo, hi),
        seed,
        ref weights,
    } = *spec;
    if n_clients == 0 || d == 0 {
        return Err(Error::Infeasible(
            "need at least one client and one dimension".into(),
        ));
    }
    if !(target_phi.is_finite() && target_phi >= 0.0) {
        return Err(Error::Infeasible(format!(
            "target_phi must be >= 0, got {target_phi}"
        )));
    }
    if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && hi >= lo) {
        return Err(Error::Infeasible(format!(
            "condition range [{lo}, {hi}] must satisfy 0 < lo <= hi"
        )));
    }
    let weights = match weights {
        Some(w) if w.len() != n_clients => {
            return Err(Error::Infeasible(format!(
                "{} weights given for {n_clients} clients",
                w.len()
            )))
        }
        Some(w) => w.clone(),
        None => vec![1.0 / n_clients as f64; n_clients],
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let matrices: Vec<DMatrix<f64>> = (0..n_clients)
        .map(|_| {
            let q = random_orthogonal(d, &mut rng);
            let eigs = DVector::from_fn(d, |k, _| match (d, k) {
                (1, _) => rng.random_range(lo..=hi),
                (_, 0) => lo,
                (_, 1) => hi,
                _ => rng.random_range(lo..=hi),
            });
            let m = &q * DMatrix::from_diagonal(&eigs) * q.transpose();
            (&m + m.transpose()) * 0.5
        })
        .collect();
    let center = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let directions: Vec<DVector<f64>> = (0..n_clients)
        .map(|_| {
            let u = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let n = u.norm();
            u / n
        })
        .collect();

    let scale = if target_phi == 0.0 {
        0.0
    } else {
        let mut hessian = DMatrix::zeros(d, d);
        let mut rhs = DVector::zeros(d);
        for ((m, u), &lam) in matrices.iter().zip(&directions).zip(&weights) {
            hessian += m * lam;
            rhs += m * u * lam;
        }
        let chol = hessian.cholesky().ok_or(Error::DegenerateMatrix {
            min_eigenvalue: 0.0,
        })?;
        let v = chol.solve(&rhs);
        let spread = directions
            .iter()
            .map(|u| (u - &v).norm())
            .fold(0.0, f64::max);
        if spread <= 1e-12 {
            return Err(Error::Infeasible(
                "cannot separate client optima (a single client is always homogeneous)".into(),
            ));
        }
        target_phi / spread
    };

    let clients = matrices
        .into_iter()
        .zip(directions)
        .zip(weights)
        .map(|((m, u), lam)| ClientObjective::quadratic(m, &center + u * scale, lam))
        .collect::<Result<Vec<_>>>()?;
    GlobalObjective::new(clients)
}
