//! Riemannian motion policy algebra: structured evaluation, pull-back,
//! metric-weighted addition and spectral decomposition of metrics.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Chart, ChartError, Pose};

/// Relative singular-value cutoff of every pseudo-inverse in this crate.
pub const PINV_RELATIVE_CUTOFF: f64 = 1e-10;
/// Tolerance for symmetry and PSD checks on metrics.
pub const METRIC_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RmpError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("cannot combine an empty list of policies")]
    EmptyList,
    #[error("metric is not symmetric (asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error(transparent)]
    Chart(#[from] ChartError),
}

fn check_dim(expected: usize, got: usize) -> Result<(), RmpError> {
    if expected == got {
        Ok(())
    } else {
        Err(RmpError::DimensionMismatch { expected, got })
    }
}

/// Moore-Penrose pseudo-inverse, truncating singular values below
/// `PINV_RELATIVE_CUTOFF * sigma_max`.
pub fn pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (r, c) = m.shape();
    if r == 0 || c == 0 {
        return DMatrix::zeros(c, r);
    }
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.max();
    if smax <= 0.0 || !smax.is_finite() {
        return DMatrix::zeros(c, r);
    }
    let cutoff = PINV_RELATIVE_CUTOFF * smax;
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let mut out = DMatrix::zeros(c, r);
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > cutoff {
            out += (v_t.row(i).transpose() / s) * u.column(i).transpose();
        }
    }
    out
}

/// The pair `(f, A)`: desired acceleration and Riemannian metric.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionPolicy {
    pub f: DVector<f64>,
    pub metric: DMatrix<f64>,
}

impl MotionPolicy {
    pub fn new(f: DVector<f64>, metric: DMatrix<f64>) -> Result<Self, RmpError> {
        check_dim(f.len(), metric.nrows())?;
        check_dim(f.len(), metric.ncols())?;
        Ok(Self { f, metric })
    }

    pub fn zero(dim: usize) -> Self {
        Self { f: DVector::zeros(dim), metric: DMatrix::zeros(dim, dim) }
    }

    pub fn dim(&self) -> usize {
        self.f.len()
    }

    /// Same policy with the metric multiplied by `scale`.
    pub fn scaled(&self, scale: f64) -> Self {
        Self { f: self.f.clone(), metric: &self.metric * scale }
    }
}

/// Scalar potential `Phi(x) >= 0` with analytic gradient.
pub trait Potential: fmt::Debug + Send + Sync {
    fn value(&self, x: &DVector<f64>) -> f64;
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64>;
}

/// Position- and velocity-dependent PSD metric.
pub trait Metric: fmt::Debug + Send + Sync {
    fn eval(&self, x: &DVector<f64>, xdot: &DVector<f64>) -> DMatrix<f64>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyCategory {
    Safety,
    Mission,
}

/// Everything needed to evaluate one policy at a robot pose.
#[derive(Clone, Debug)]
pub struct PolicySpec {
    pub name: String,
    pub category: PolicyCategory,
    pub chart: Arc<dyn Chart>,
    pub potential: Arc<dyn Potential>,
    pub metric: Arc<dyn Metric>,
    pub damping: f64,
    /// Chart coordinates of the potential's minimum.
    pub optimum: DVector<f64>,
}

impl PolicySpec {
    pub fn dim(&self) -> usize {
        self.chart.dim()
    }

    /// Maps the pose through the chart and evaluates the policy there.
    pub fn evaluate_at(&self, pose: &Pose, twist: &DVector<f64>) -> Result<ChartEvaluation, RmpError> {
        check_dim(6, twist.len())?;
        let x = self.chart.apply(pose)?;
        let jacobian = self.chart.jacobian(pose)?;
        let xdot = &jacobian * twist;
        let policy = evaluate(self, &x, &xdot)?;
        let gradient = self.potential.gradient(&x);
        Ok(ChartEvaluation { x, xdot, jacobian, policy, gradient })
    }
}

/// A policy evaluated on its own manifold, plus the chart data that produced it.
#[derive(Clone, Debug)]
pub struct ChartEvaluation {
    pub x: DVector<f64>,
    pub xdot: DVector<f64>,
    pub jacobian: DMatrix<f64>,
    pub policy: MotionPolicy,
    pub gradient: DVector<f64>,
}

/// `f = -grad Phi(x) - beta * xdot`, `A = metric(x, xdot)`.
pub fn evaluate(spec: &PolicySpec, x: &DVector<f64>, xdot: &DVector<f64>) -> Result<MotionPolicy, RmpError> {
    let d = spec.dim();
    check_dim(d, x.len())?;
    check_dim(d, xdot.len())?;
    let f = -spec.potential.gradient(x) - spec.damping * xdot;
    let metric = spec.metric.eval(x, xdot);
    MotionPolicy::new(f, metric)
}

/// Pulls a policy back through a `d x n` Jacobian:
/// `A' = J^T A J`, `f' = (J^T A J)^+ J^T A f`.
pub fn pullback(policy: &MotionPolicy, jacobian: &DMatrix<f64>) -> Result<MotionPolicy, RmpError> {
    check_dim(policy.dim(), jacobian.nrows())?;
    let jt_a = jacobian.transpose() * &policy.metric;
    let metric = &jt_a * jacobian;
    let f = pinv(&metric) * (&jt_a * &policy.f);
    Ok(MotionPolicy { f, metric })
}

/// Metric-weighted sum: `A = sum A_i`, `f = A^+ sum A_i f_i`.
pub fn rmp_sum<'a, I>(policies: I) -> Result<MotionPolicy, RmpError>
where
    I: IntoIterator<Item = &'a MotionPolicy>,
{
    let mut acc: Option<(DMatrix<f64>, DVector<f64>)> = None;
    for p in policies {
        match acc.as_mut() {
            None => acc = Some((p.metric.clone(), &p.metric * &p.f)),
            Some((m, af)) => {
                check_dim(m.nrows(), p.dim())?;
                *m += &p.metric;
                *af += &p.metric * &p.f;
            }
        }
    }
    let (metric, af) = acc.ok_or(RmpError::EmptyList)?;
    Ok(MotionPolicy { f: pinv(&metric) * af, metric })
}

#[derive(Clone, Debug)]
pub struct SpectralDecomposition {
    /// Columns are orthonormal eigenvectors, ordered like `eigenvalues`.
    pub eigenvectors: DMatrix<f64>,
    /// Non-negative, sorted descending.
    pub eigenvalues: DVector<f64>,
}

impl SpectralDecomposition {
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let d = DMatrix::from_diagonal(&self.eigenvalues);
        &self.eigenvectors * d * self.eigenvectors.transpose()
    }
}

/// Eigen-decomposition of a symmetric PSD metric. Tiny negative eigenvalues
/// from rounding are clamped to zero.
pub fn spectral(a: &DMatrix<f64>) -> Result<SpectralDecomposition, RmpError> {
    check_dim(a.nrows(), a.ncols())?;
    let scale = a.amax().max(1.0);
    let asym = (a - a.transpose()).amax();
    if asym > METRIC_TOLERANCE * scale {
        return Err(RmpError::NotSymmetric(asym));
    }
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..a.nrows()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let n = a.nrows();
    let mut vecs = DMatrix::zeros(n, n);
    let mut vals = DVector::zeros(n);
    for (k, &i) in order.iter().enumerate() {
        vecs.column_mut(k).copy_from(&eig.eigenvectors.column(i));
        vals[k] = eig.eigenvalues[i].max(0.0);
    }
    Ok(SpectralDecomposition { eigenvectors: vecs, eigenvalues: vals })
}

/// Inner product `<a, b>_A = a^T A b`.
pub fn inner(a: &DVector<f64>, b: &DVector<f64>, metric: &DMatrix<f64>) -> f64 {
    a.dot(&(metric * b))
}
