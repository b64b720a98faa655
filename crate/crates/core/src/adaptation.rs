//! Task adaptation: infer the operator's desired potential gradient, score the
//! mission policies against it, and re-weight their metrics.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Chart, Pose};
use crate::rmp::{inner, pinv, pullback, spectral, MotionPolicy, PolicySpec, RmpError};

/// Norms below this carry no directional information.
pub const DIRECTION_TOLERANCE: f64 = 1e-9;
/// A vector whose metric-induced norm is below this fraction of its
/// Euclidean norm times the metric scale lies in the metric's null space.
pub const NULL_SPACE_TOLERANCE: f64 = 1e-6;
/// Cumulative metrics with no entry above this are treated as zero.
pub const ZERO_METRIC: f64 = 1e-12;
/// Eigenvalues at or below this are ignored by the prior.
pub const EIGENVALUE_CUTOFF: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdaptationError {
    #[error("invalid adaptation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Rmp(#[from] RmpError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptationConfig {
    /// Rows of the input gain matrix K.
    pub gain: Vec<Vec<f64>>,
    pub alpha_step: f64,
    pub gamma_tol: f64,
    pub update_rate: f64,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            gain: vec![vec![0.5, 0.0, 0.0], vec![0.0, 0.5, 0.0], vec![0.0, 0.0, 1.0]],
            alpha_step: 0.02,
            gamma_tol: 0.15,
            update_rate: 100.0,
        }
    }
}

impl AdaptationConfig {
    pub fn dim(&self) -> usize {
        self.gain.len()
    }

    pub fn gain_matrix(&self) -> DMatrix<f64> {
        let n = self.dim();
        DMatrix::from_fn(n, n, |i, j| self.gain[i].get(j).copied().unwrap_or(f64::NAN))
    }

    pub fn validate(&self) -> Result<(), AdaptationError> {
        let n = self.dim();
        if n == 0 || self.gain.iter().any(|r| r.len() != n) {
            return Err(AdaptationError::InvalidConfig("gain must be a square matrix".into()));
        }
        let k = self.gain_matrix();
        if (&k - k.transpose()).amax() > 1e-12 || Cholesky::new(k).is_none() {
            return Err(AdaptationError::InvalidConfig("gain must be symmetric positive-definite".into()));
        }
        if !(self.alpha_step > 0.0 && self.alpha_step <= 1.0) {
            return Err(AdaptationError::InvalidConfig(format!("alpha_step {} not in (0, 1]", self.alpha_step)));
        }
        if !(self.gamma_tol >= 0.0) {
            return Err(AdaptationError::InvalidConfig("gamma_tol must be non-negative".into()));
        }
        if !(self.update_rate > 0.0) {
            return Err(AdaptationError::InvalidConfig("update_rate must be positive".into()));
        }
        Ok(())
    }
}

/// A normalized operator command on the input manifold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatorInput {
    pub u: DVector<f64>,
    pub timestamp: f64,
}

impl OperatorInput {
    /// Ingests a raw command: non-finite commands become zero, commands
    /// outside the unit ball are scaled back onto it.
    pub fn new(u: DVector<f64>, timestamp: f64) -> Self {
        let u = if u.iter().all(|v| v.is_finite()) { u } else { DVector::zeros(u.len()) };
        let n = u.norm();
        let u = if n > 1.0 { u / n } else { u };
        Self { u, timestamp }
    }

    pub fn zero(dim: usize, timestamp: f64) -> Self {
        Self { u: DVector::zeros(dim), timestamp }
    }

    pub fn norm(&self) -> f64 {
        self.u.norm().min(1.0)
    }
}

/// `-grad Phi_des = hdot + K u`.
pub fn desired_gradient(hdot: &DVector<f64>, u: &OperatorInput, gain: &DMatrix<f64>) -> Result<DVector<f64>, RmpError> {
    if hdot.len() != u.u.len() || gain.ncols() != u.u.len() || gain.nrows() != hdot.len() {
        return Err(RmpError::DimensionMismatch { expected: hdot.len(), got: u.u.len() });
    }
    Ok(hdot + gain * &u.u)
}

/// Metric-weighted cosine between the desired gradient and the policy
/// gradient, mapped to `[0, 1]`. Degenerate directions give 0.5.
pub fn conditional_likelihood(neg_grad_des: &DVector<f64>, grad: &DVector<f64>, metric: &DMatrix<f64>) -> f64 {
    if neg_grad_des.norm() < DIRECTION_TOLERANCE || grad.norm() < DIRECTION_TOLERANCE {
        return 0.5;
    }
    let des = -neg_grad_des;
    match metric_cosine(&des, grad, metric) {
        Some(cos) => 0.5 * (1.0 + cos),
        None => 0.5,
    }
}

/// Cosine under `metric`, `None` when either vector is (numerically) in the
/// metric's null space.
fn metric_cosine(a: &DVector<f64>, b: &DVector<f64>, metric: &DMatrix<f64>) -> Option<f64> {
    let scale = metric.amax().sqrt();
    let na = inner(a, a, metric).max(0.0).sqrt();
    let nb = inner(b, b, metric).max(0.0).sqrt();
    if na <= NULL_SPACE_TOLERANCE * scale * a.norm() || nb <= NULL_SPACE_TOLERANCE * scale * b.norm() {
        return None;
    }
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((inner(a, b, metric) / (na * nb)).clamp(-1.0, 1.0))
}

/// Prior from the offset `d = h - h*` to the policy optimum, weighted over the
/// metric's principal axes. A metric without positive eigenvalues yields 0.
pub fn policy_prior(metric: &DMatrix<f64>, offset: &DVector<f64>, input_norm: f64) -> Result<f64, RmpError> {
    if offset.len() != metric.nrows() {
        return Err(RmpError::DimensionMismatch { expected: metric.nrows(), got: offset.len() });
    }
    let eig = spectral(metric)?;
    let shrink = 1.0 - input_norm.clamp(0.0, 1.0);
    let total: f64 = eig.eigenvalues.iter().filter(|&&l| l > EIGENVALUE_CUTOFF).sum();
    if total <= 0.0 {
        return Ok(0.0);
    }
    let mut prior = 0.0;
    for (j, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda <= EIGENVALUE_CUTOFF {
            continue;
        }
        let dij = shrink * eig.eigenvectors.column(j).dot(offset);
        prior += (-dij * dij / (2.0 * lambda)).exp() * lambda / total;
    }
    Ok(prior.clamp(0.0, 1.0))
}

/// One mission policy expressed on the input manifold.
#[derive(Clone, Debug)]
pub struct HumanPolicy {
    pub policy: MotionPolicy,
    pub gradient: DVector<f64>,
    /// Optimum of the policy in input coordinates.
    pub optimum: DVector<f64>,
    /// `h - h*`, respecting periodic coordinates.
    pub offset: DVector<f64>,
}

/// What the operator observes: the robot on the input manifold and every
/// mission policy pulled there.
#[derive(Clone, Debug)]
pub struct HumanView {
    pub h: DVector<f64>,
    pub hdot: DVector<f64>,
    pub policies: Vec<HumanPolicy>,
}

/// Maps the robot state onto the input manifold and expresses each mission
/// policy there through `J_X J_H^+`.
pub fn human_view(
    human_chart: &dyn Chart,
    mission: &[PolicySpec],
    pose: &Pose,
    twist: &DVector<f64>,
) -> Result<HumanView, RmpError> {
    let h = human_chart.apply(pose)?;
    let jh = human_chart.jacobian(pose)?;
    let hdot = &jh * twist;
    let jh_pinv = pinv(&jh);
    let mut policies = Vec::with_capacity(mission.len());
    for spec in mission {
        let ev = spec.evaluate_at(pose, twist)?;
        let jxh = &ev.jacobian * &jh_pinv;
        let policy = pullback(&ev.policy, &jxh)?;
        let gradient = jxh.transpose() * &ev.gradient;
        let step = pinv(&jxh) * spec.chart.difference(&spec.optimum, &ev.x);
        policies.push(HumanPolicy { policy, gradient, optimum: &h + &step, offset: -step });
    }
    Ok(HumanView { h, hdot, policies })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodReport {
    pub conditional: Vec<f64>,
    pub prior: Vec<f64>,
    pub combined: Vec<f64>,
    /// `-grad Phi_des`.
    pub desired_gradient: Vec<f64>,
}

pub fn policy_likelihoods(
    view: &HumanView,
    input: &OperatorInput,
    gain: &DMatrix<f64>,
) -> Result<LikelihoodReport, RmpError> {
    let neg = desired_gradient(&view.hdot, input, gain)?;
    let n = input.norm();
    let mut conditional = Vec::with_capacity(view.policies.len());
    let mut prior = Vec::with_capacity(view.policies.len());
    for p in &view.policies {
        conditional.push(conditional_likelihood(&neg, &p.gradient, &p.policy.metric));
        prior.push(policy_prior(&p.policy.metric, &p.offset, n)?);
    }
    let combined = conditional.iter().zip(&prior).map(|(c, p)| c * p).collect();
    Ok(LikelihoodReport { conditional, prior, combined, desired_gradient: neg.iter().copied().collect() })
}

/// Input to one scaling pass: the policy on the input manifold and its
/// potential gradient there.
#[derive(Clone, Debug)]
pub struct ScalingInput<'a> {
    pub policy: &'a MotionPolicy,
    pub gradient: &'a DVector<f64>,
}

/// Metric-weighted aggregate of the already-processed policies.
#[derive(Clone, Debug)]
struct Cumulative {
    metric: DMatrix<f64>,
    weighted_gradient: DVector<f64>,
    weighted_f: DVector<f64>,
}

impl Cumulative {
    fn new(dim: usize) -> Self {
        Self { metric: DMatrix::zeros(dim, dim), weighted_gradient: DVector::zeros(dim), weighted_f: DVector::zeros(dim) }
    }

    fn add(&mut self, p: &ScalingInput<'_>, alpha: f64) {
        let a = &p.policy.metric * alpha;
        self.weighted_gradient += &a * p.gradient;
        self.weighted_f += &a * &p.policy.f;
        self.metric += a;
    }

    /// Cosine between the aggregate gradient and `grad` under the aggregate
    /// metric; `None` when either side is degenerate.
    fn alignment(&self, grad: &DVector<f64>) -> Option<f64> {
        if self.metric.amax() <= ZERO_METRIC {
            return None;
        }
        let g = pinv(&self.metric) * &self.weighted_gradient;
        if g.norm() < DIRECTION_TOLERANCE || grad.norm() < DIRECTION_TOLERANCE {
            return None;
        }
        metric_cosine(&g, grad, &self.metric)
    }
}

/// Order in which the scaling pass visits policies: likelihood descending,
/// ties by ascending index.
pub fn scaling_order(likelihoods: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..likelihoods.len()).collect();
    order.sort_by(|&a, &b| likelihoods[b].total_cmp(&likelihoods[a]).then(a.cmp(&b)));
    order
}

/// One pass of the policy scaling algorithm.
pub fn policy_scaling(
    policies: &[ScalingInput<'_>],
    likelihoods: &[f64],
    alpha: &[f64],
    cfg: &AdaptationConfig,
) -> Result<Vec<f64>, RmpError> {
    let n = policies.len();
    if likelihoods.len() != n {
        return Err(RmpError::DimensionMismatch { expected: n, got: likelihoods.len() });
    }
    if alpha.len() != n {
        return Err(RmpError::DimensionMismatch { expected: n, got: alpha.len() });
    }
    let mut out = alpha.to_vec();
    let Some(first) = policies.first() else {
        return Ok(out);
    };
    let dim = first.policy.dim();
    let mut cum = Cumulative::new(dim);
    for j in scaling_order(likelihoods) {
        let p = &policies[j];
        if p.policy.dim() != dim || p.gradient.len() != dim {
            return Err(RmpError::DimensionMismatch { expected: dim, got: p.gradient.len() });
        }
        let gamma = cum.alignment(p.gradient).unwrap_or(0.0);
        let step = if gamma.abs() <= cfg.gamma_tol { cfg.alpha_step } else { -cfg.alpha_step };
        out[j] = (out[j] + step).clamp(0.0, 1.0);
        cum.add(p, out[j]);
    }
    Ok(out)
}

/// Likelihoods plus one scaling pass for the current robot state. Without
/// operator input the scales are held and the robot settles under them.
pub fn adaptation_step(
    view: &HumanView,
    input: &OperatorInput,
    alpha: &[f64],
    cfg: &AdaptationConfig,
) -> Result<(Vec<f64>, LikelihoodReport), RmpError> {
    let report = policy_likelihoods(view, input, &cfg.gain_matrix())?;
    if input.u.iter().all(|v| *v == 0.0) {
        return Ok((alpha.to_vec(), report));
    }
    let inputs: Vec<ScalingInput<'_>> =
        view.policies.iter().map(|p| ScalingInput { policy: &p.policy, gradient: &p.gradient }).collect();
    let next = policy_scaling(&inputs, &report.combined, alpha, cfg)?;
    Ok((next, report))
}
