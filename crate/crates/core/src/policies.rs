//! Task-feature policies for the cylinder inspection scenario: inspection
//! attractors (position and tool rotation) and the two safety keepers.

use std::f64::consts::FRAC_PI_2;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{wrap_periodic, Cylinder, CylinderChart};
use crate::rmp::{Metric, PolicyCategory, PolicySpec, Potential};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("bad policy parameters: {0}")]
    BadParams(String),
}

fn positive(name: &str, v: f64) -> Result<(), PolicyError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(PolicyError::BadParams(format!("{name} must be positive, got {v}")))
    }
}

fn non_negative(name: &str, v: f64) -> Result<(), PolicyError> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(PolicyError::BadParams(format!("{name} must be non-negative, got {v}")))
    }
}

fn wrapped_delta(x: &DVector<f64>, target: &DVector<f64>, periods: &[Option<f64>]) -> DVector<f64> {
    DVector::from_fn(x.len(), |i, _| {
        let d = x[i] - target[i];
        match periods.get(i).copied().flatten() {
            Some(p) => wrap_periodic(d, p),
            None => d,
        }
    })
}

/// `Phi = 1/2 k |x - target|^2` with optional periodic coordinates.
#[derive(Clone, Debug)]
pub struct QuadraticPotential {
    pub target: DVector<f64>,
    pub stiffness: f64,
    pub periods: Vec<Option<f64>>,
}

impl QuadraticPotential {
    pub fn new(target: DVector<f64>, stiffness: f64) -> Self {
        let periods = vec![None; target.len()];
        Self { target, stiffness, periods }
    }

    pub fn periodic(target: DVector<f64>, stiffness: f64, periods: Vec<Option<f64>>) -> Self {
        Self { target, stiffness, periods }
    }
}

impl Potential for QuadraticPotential {
    fn value(&self, x: &DVector<f64>) -> f64 {
        0.5 * self.stiffness * wrapped_delta(x, &self.target, &self.periods).norm_squared()
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        wrapped_delta(x, &self.target, &self.periods) * self.stiffness
    }
}

/// Soft-norm attractor `Phi = eta (sqrt(|x - target|^2 + sigma^2) - sigma)`.
/// The gradient saturates at `eta` far from the target.
#[derive(Clone, Debug)]
pub struct SoftAttractor {
    pub target: DVector<f64>,
    pub periods: Vec<Option<f64>>,
    pub gain: f64,
    pub softness: f64,
}

impl SoftAttractor {
    pub fn new(target: DVector<f64>, periods: Vec<Option<f64>>, gain: f64, softness: f64) -> Result<Self, PolicyError> {
        positive("gain", gain)?;
        positive("softness", softness)?;
        Ok(Self { target, periods, gain, softness })
    }
}

impl Potential for SoftAttractor {
    fn value(&self, x: &DVector<f64>) -> f64 {
        let d = wrapped_delta(x, &self.target, &self.periods);
        let s2 = self.softness * self.softness;
        let n2 = d.norm_squared();
        // sqrt(n2 + s2) - s, written to avoid cancellation for tiny n2
        self.gain * n2 / ((n2 + s2).sqrt() + self.softness)
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let d = wrapped_delta(x, &self.target, &self.periods);
        let r = (d.norm_squared() + self.softness * self.softness).sqrt();
        d * (self.gain / r)
    }
}

#[derive(Clone, Debug)]
pub struct ConstantMetric(pub DMatrix<f64>);

impl ConstantMetric {
    pub fn new(m: DMatrix<f64>) -> Self {
        Self(m)
    }
}

impl Metric for ConstantMetric {
    fn eval(&self, _x: &DVector<f64>, _xdot: &DVector<f64>) -> DMatrix<f64> {
        self.0.clone()
    }
}

/// Isotropic metric `(B / (1 + exp(c (s(x) - s0))) + floor) I`, where `s(x)`
/// is the first coordinate (`Side::Below`) or the norm of `x` (`Side::Above`,
/// with the sign of `c` flipped so the ramp rises with the norm).
#[derive(Clone, Debug)]
pub struct SigmoidMetric {
    pub dim: usize,
    pub center: f64,
    pub scale: f64,
    pub steepness: f64,
    pub floor: f64,
    pub side: Side,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    /// Critical when the coordinate drops below the center.
    Below,
    /// Critical when the norm exceeds the center.
    Above,
}

impl SigmoidMetric {
    pub fn weight(&self, x: &DVector<f64>) -> f64 {
        let arg = match self.side {
            Side::Below => self.steepness * (x[0] - self.center),
            Side::Above => -self.steepness * (x.norm() - self.center),
        };
        // logistic written so exp never overflows
        let logistic = if arg > 0.0 {
            let e = (-arg).exp();
            e / (1.0 + e)
        } else {
            1.0 / (1.0 + arg.exp())
        };
        self.scale * logistic + self.floor
    }
}

impl Metric for SigmoidMetric {
    fn eval(&self, x: &DVector<f64>, _xdot: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::identity(self.dim, self.dim) * self.weight(x)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MetricWeight {
    Scalar(f64),
    PerAxis(Vec<f64>),
}

impl MetricWeight {
    fn matrix(&self, dim: usize) -> Result<DMatrix<f64>, PolicyError> {
        match self {
            MetricWeight::Scalar(w) => {
                non_negative("metric_weight", *w)?;
                Ok(DMatrix::identity(dim, dim) * *w)
            }
            MetricWeight::PerAxis(ws) => {
                if ws.len() != dim {
                    return Err(PolicyError::BadParams(format!(
                        "metric_weight has {} entries, manifold has {dim}",
                        ws.len()
                    )));
                }
                for w in ws {
                    non_negative("metric_weight", *w)?;
                }
                Ok(DMatrix::from_diagonal(&DVector::from_column_slice(ws)))
            }
        }
    }

    pub fn max(&self) -> f64 {
        match self {
            MetricWeight::Scalar(w) => *w,
            MetricWeight::PerAxis(ws) => ws.iter().copied().fold(0.0, f64::max),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttractorParams {
    pub gain: f64,
    pub softness: f64,
    pub damping: f64,
    pub metric_weight: MetricWeight,
}

impl Default for AttractorParams {
    fn default() -> Self {
        Self { gain: 4.0, softness: 0.05, damping: 4.0, metric_weight: MetricWeight::Scalar(1.0) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeeperParams {
    /// Metric ramp center: the safe distance for distance keeping, the tilt
    /// angle at which normal keeping takes over.
    pub setpoint: f64,
    pub stiffness: f64,
    pub damping: f64,
    pub barrier_scale: f64,
    #[serde(default = "default_floor")]
    pub floor: f64,
    #[serde(default = "default_steepness")]
    pub steepness: f64,
}

fn default_floor() -> f64 {
    0.1
}

fn default_steepness() -> f64 {
    100.0
}

impl KeeperParams {
    pub fn distance_defaults() -> Self {
        Self { setpoint: 0.08, stiffness: 100.0, damping: 20.0, barrier_scale: 50.0, floor: 0.1, steepness: 100.0 }
    }

    pub fn normal_defaults() -> Self {
        Self { setpoint: 10f64.to_radians(), ..Self::distance_defaults() }
    }

    fn validate(&self) -> Result<(), PolicyError> {
        positive("stiffness", self.stiffness)?;
        non_negative("damping", self.damping)?;
        positive("barrier_scale", self.barrier_scale)?;
        non_negative("floor", self.floor)?;
        positive("steepness", self.steepness)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationMode {
    Horizontal,
    Vertical,
}

impl RotationMode {
    /// Tool rotation angle of the mode in the surface frame.
    pub fn angle(self) -> f64 {
        match self {
            RotationMode::Horizontal => 0.0,
            RotationMode::Vertical => FRAC_PI_2,
        }
    }
}

/// Attractor on the (height, arc, distance) manifold towards a surface target.
pub fn make_inspection_position(
    cylinder: &Cylinder,
    target: Vector3<f64>,
    params: &AttractorParams,
) -> Result<PolicySpec, PolicyError> {
    non_negative("damping", params.damping)?;
    let chart = CylinderChart::surface_position(cylinder.clone());
    let target = DVector::from_column_slice(target.as_slice());
    let periods = crate::geometry::Chart::periods(&chart);
    let potential = SoftAttractor::new(target.clone(), periods, params.gain, params.softness)?;
    let metric = params.metric_weight.matrix(3)?;
    Ok(PolicySpec {
        name: format!("position(z={:.3}, s={:.3})", target[0], target[1]),
        category: PolicyCategory::Mission,
        chart: Arc::new(chart),
        potential: Arc::new(potential),
        metric: Arc::new(ConstantMetric::new(metric)),
        damping: params.damping,
        optimum: target,
    })
}

/// Quadratic attractor on the tool rotation angle, wrapped to one turn.
pub fn make_inspection_rotation(
    cylinder: &Cylinder,
    mode: RotationMode,
    params: &AttractorParams,
) -> Result<PolicySpec, PolicyError> {
    positive("gain", params.gain)?;
    non_negative("damping", params.damping)?;
    let target = DVector::from_element(1, mode.angle());
    let potential = QuadraticPotential::periodic(target.clone(), params.gain, vec![Some(std::f64::consts::TAU)]);
    Ok(PolicySpec {
        name: format!("rotation({mode:?})").to_lowercase(),
        category: PolicyCategory::Mission,
        chart: Arc::new(CylinderChart::tool_rotation(cylinder.clone())),
        potential: Arc::new(potential),
        metric: Arc::new(ConstantMetric::new(params.metric_weight.matrix(1)?)),
        damping: params.damping,
        optimum: target,
    })
}

/// Spring on the distance to the surface with a metric that ramps up once the
/// tool gets closer than `d_safe`.
pub fn make_distance_keeping(cylinder: &Cylinder, d_safe: f64, params: &KeeperParams) -> Result<PolicySpec, PolicyError> {
    positive("d_safe", d_safe)?;
    params.validate()?;
    let target = DVector::from_element(1, d_safe);
    Ok(PolicySpec {
        name: "distance_keeping".into(),
        category: PolicyCategory::Safety,
        chart: Arc::new(CylinderChart::distance(cylinder.clone())),
        potential: Arc::new(QuadraticPotential::new(target.clone(), params.stiffness)),
        metric: Arc::new(SigmoidMetric {
            dim: 1,
            center: d_safe,
            scale: params.barrier_scale,
            steepness: params.steepness,
            floor: params.floor,
            side: Side::Below,
        }),
        damping: params.damping,
        optimum: target,
    })
}

/// Spring on the tilt between tool axis and inward surface normal. The metric
/// ramps up with the tilt angle around `params.setpoint`.
pub fn make_normal_keeping(cylinder: &Cylinder, params: &KeeperParams) -> Result<PolicySpec, PolicyError> {
    params.validate()?;
    let target = DVector::zeros(2);
    Ok(PolicySpec {
        name: "normal_keeping".into(),
        category: PolicyCategory::Safety,
        chart: Arc::new(CylinderChart::tilt(cylinder.clone())),
        potential: Arc::new(QuadraticPotential::new(target.clone(), params.stiffness)),
        metric: Arc::new(SigmoidMetric {
            dim: 2,
            center: params.setpoint,
            scale: params.barrier_scale,
            steepness: params.steepness,
            floor: params.floor,
            side: Side::Above,
        }),
        damping: params.damping,
        optimum: target,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::dvector;
    use std::f64::consts::{FRAC_PI_4, PI};

    fn cyl() -> Cylinder {
        Cylinder::new(Vector3::zeros(), Vector3::z(), 0.4, Vector3::x()).unwrap()
    }

    #[test]
    fn position_attractor_basics() {
        let p = make_inspection_position(&cyl(), Vector3::new(0.3, 0.0, 0.08), &AttractorParams::default()).unwrap();
        let t = p.optimum.clone();
        assert_eq!(p.potential.value(&t), 0.0);
        assert_eq!(p.potential.gradient(&t), DVector::zeros(3));
        let far = &t + dvector![5.0, 0.0, 0.0];
        assert_relative_eq!(p.potential.gradient(&far).norm(), 4.0, max_relative = 0.01);
        let bad = AttractorParams { softness: 0.0, ..AttractorParams::default() };
        assert!(make_inspection_position(&cyl(), Vector3::zeros(), &bad).is_err());
        let bad = AttractorParams { gain: -1.0, ..AttractorParams::default() };
        assert!(make_inspection_position(&cyl(), Vector3::zeros(), &bad).is_err());
    }

    #[test]
    fn rotation_attractor_wraps() {
        let p = make_inspection_rotation(&cyl(), RotationMode::Vertical, &AttractorParams::default()).unwrap();
        let at = |phi: f64| dvector![phi];
        assert_eq!(p.potential.value(&at(FRAC_PI_2)), 0.0);
        assert_relative_eq!(p.potential.gradient(&at(FRAC_PI_2 + FRAC_PI_4))[0], 4.0 * FRAC_PI_4, epsilon = 1e-12);
        let mut last = f64::INFINITY;
        for k in 1..8 {
            let eps = 10f64.powi(-k);
            let gap = (p.potential.value(&at(FRAC_PI_2 + PI - eps)) - p.potential.value(&at(FRAC_PI_2 - PI + eps))).abs();
            assert!(gap <= last + 1e-12);
            last = gap;
        }
        assert!(last < 1e-5);
    }

    #[test]
    fn distance_keeping_values() {
        let p = make_distance_keeping(&cyl(), 0.08, &KeeperParams::distance_defaults()).unwrap();
        assert_eq!(p.potential.gradient(&dvector![0.08])[0], 0.0);
        assert_relative_eq!(p.potential.gradient(&dvector![0.03])[0], -5.0, epsilon = 1e-12);
        let zero = DVector::zeros(1);
        let inside = p.metric.eval(&dvector![-0.02], &zero)[(0, 0)];
        let outside = p.metric.eval(&dvector![0.18], &zero)[(0, 0)];
        assert!(inside / outside >= 10.0);
        assert!(make_distance_keeping(&cyl(), 0.0, &KeeperParams::distance_defaults()).is_err());
    }

    #[test]
    fn normal_keeping_values() {
        let params = KeeperParams { stiffness: 50.0, ..KeeperParams::normal_defaults() };
        let p = make_normal_keeping(&cyl(), &params).unwrap();
        assert_eq!(p.potential.value(&DVector::zeros(2)), 0.0);
        assert_relative_eq!(p.potential.gradient(&dvector![0.1, 0.0]).norm(), 5.0, epsilon = 1e-12);
    }

    #[test]
    fn keeper_metrics_grow_towards_violation() {
        let d = make_distance_keeping(&cyl(), 0.08, &KeeperParams::distance_defaults()).unwrap();
        let n = make_normal_keeping(&cyl(), &KeeperParams::normal_defaults()).unwrap();
        let zero1 = DVector::zeros(1);
        let zero2 = DVector::zeros(2);
        let mut prev_d = 0.0;
        let mut prev_n = 0.0;
        for k in 0..200 {
            let dist = 0.3 - k as f64 * 0.002;
            let a = d.metric.eval(&dvector![dist], &zero1)[(0, 0)];
            assert!(a >= prev_d);
            prev_d = a;
            let tilt = k as f64 * 0.005;
            let b = n.metric.eval(&dvector![tilt * 0.6, tilt * 0.8], &zero2).symmetric_eigenvalues().min();
            assert!(b >= prev_n - 1e-12);
            prev_n = b;
        }
    }
}
