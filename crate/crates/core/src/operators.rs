//! Scripted operators: perfect demonstrator, noisy demonstrator, idle and
//! replay of recorded inputs.

use nalgebra::{DMatrix, DVector, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adaptation::{HumanView, OperatorInput, DIRECTION_TOLERANCE};
use crate::scenario::Task;
use crate::sim::RobotState;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OperatorError {
    #[error("target gradient vanishes: target reached")]
    DegenerateTarget,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorKind {
    Perfect,
    Noisy,
    Idle,
    Replay,
    /// Inputs from a connected client.
    Live,
}

impl OperatorKind {
    pub fn name(self) -> &'static str {
        match self {
            OperatorKind::Perfect => "perfect",
            OperatorKind::Noisy => "noisy",
            OperatorKind::Idle => "idle",
            OperatorKind::Replay => "replay",
            OperatorKind::Live => "live",
        }
    }
}

impl std::str::FromStr for OperatorKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "perfect" => Ok(OperatorKind::Perfect),
            "noisy" => Ok(OperatorKind::Noisy),
            "idle" => Ok(OperatorKind::Idle),
            "replay" => Ok(OperatorKind::Replay),
            "live" => Ok(OperatorKind::Live),
            _ => Err(format!("unknown operator `{s}`")),
        }
    }
}

/// Unit-norm input that makes the desired gradient point along `target`:
/// solves `hdot + K u = -c target/|target|` for the largest `c > 0` with
/// `|u| = 1`. When no such `c` exists, returns the unit input whose desired
/// gradient has the largest cosine with `target`.
pub fn perfect_input(
    target: &DVector<f64>,
    hdot: &DVector<f64>,
    gain: &DMatrix<f64>,
) -> Result<DVector<f64>, OperatorError> {
    let norm = target.norm();
    if norm < DIRECTION_TOLERANCE {
        return Err(OperatorError::DegenerateTarget);
    }
    let g = target / norm;
    let kinv = gain.clone().try_inverse().expect("gain is positive-definite");
    let a = &kinv * &g;
    let b = &kinv * hdot;
    let (aa, ab, bb) = (a.norm_squared(), a.dot(&b), b.norm_squared());
    let disc = ab * ab - aa * (bb - 1.0);
    if disc >= 0.0 {
        let c = (-ab + disc.sqrt()) / aa;
        if c > 0.0 {
            let u = -(a * c + b);
            return Ok(u.normalize());
        }
    }
    Ok(best_effort_input(&g, hdot, gain))
}

fn alignment(u: &DVector<f64>, g: &DVector<f64>, hdot: &DVector<f64>, gain: &DMatrix<f64>) -> f64 {
    let des = -(hdot + gain * u);
    let n = des.norm();
    if n == 0.0 {
        -1.0
    } else {
        des.dot(g) / n
    }
}

/// Maximizes the cosine between `-(hdot + K u)` and `g` over the unit sphere:
/// a Fibonacci lattice followed by shrinking local refinement.
fn best_effort_input(g: &DVector<f64>, hdot: &DVector<f64>, gain: &DMatrix<f64>) -> DVector<f64> {
    let dim = g.len();
    if dim != 3 {
        // generic fallback: push along -K^{-1} g
        let kinv = gain.clone().try_inverse().expect("gain is positive-definite");
        return -(kinv * g).normalize();
    }
    let n = 2000;
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let mut best = DVector::from_column_slice(&[0.0, 0.0, 1.0]);
    let mut best_score = f64::NEG_INFINITY;
    for i in 0..n {
        let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
        let r = (1.0 - y * y).sqrt();
        let th = golden * i as f64;
        let u = DVector::from_column_slice(&[r * th.cos(), y, r * th.sin()]);
        let s = alignment(&u, g, hdot, gain);
        if s > best_score {
            best_score = s;
            best = u;
        }
    }
    let mut step = 0.05;
    while step > 1e-9 {
        let mut improved = false;
        let b3 = Vector3::new(best[0], best[1], best[2]);
        let t1 = b3.cross(&if b3.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() }).normalize();
        let t2 = b3.cross(&t1);
        for dir in [t1, -t1, t2, -t2] {
            let c = (b3 + dir * step).normalize();
            let u = DVector::from_column_slice(c.as_slice());
            let s = alignment(&u, g, hdot, gain);
            if s > best_score {
                best_score = s;
                best = u;
                improved = true;
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    best
}

/// Adds isotropic Gaussian noise and projects back into the unit ball.
pub fn noisy_input(base: &DVector<f64>, noise_std: f64, rng: &mut ChaCha8Rng) -> DVector<f64> {
    if noise_std == 0.0 {
        return base.clone();
    }
    let normal = Normal::new(0.0, noise_std).expect("finite noise std");
    let u = DVector::from_fn(base.len(), |i, _| base[i] + normal.sample(rng));
    let n = u.norm();
    if n > 1.0 {
        u / n
    } else {
        u
    }
}

/// What an operator sees each tick.
#[derive(Clone, Copy, Debug)]
pub struct Observation<'a> {
    pub tick: u64,
    pub t: f64,
    /// Robot state at the start of the tick.
    pub state: &'a RobotState,
    pub view: &'a HumanView,
    /// Active task, `None` once the schedule is complete.
    pub task: Option<&'a Task>,
    pub task_index: Option<usize>,
    /// Scales before this tick's update.
    pub alpha: &'a [f64],
    pub gain: &'a DMatrix<f64>,
}

/// Gradient the demonstrator aligns with: position plus rotation feature
/// of the active task, on the input manifold.
pub fn task_gradient(view: &HumanView, task: &Task) -> DVector<f64> {
    &view.policies[task.position_policy].gradient + &view.policies[task.rotation_policy].gradient
}

/// Raw demonstrator command for `task`, zero when there is nothing to do.
pub fn demonstrate(view: &HumanView, task: Option<&Task>, gain: &DMatrix<f64>) -> DVector<f64> {
    let dim = view.h.len();
    match task {
        None => DVector::zeros(dim),
        Some(task) => {
            perfect_input(&task_gradient(view, task), &view.hdot, gain).unwrap_or_else(|_| DVector::zeros(dim))
        }
    }
}

#[derive(Clone, Debug)]
pub enum OperatorModel {
    Perfect,
    Noisy { noise_std: f64, rng: ChaCha8Rng },
    Idle,
    /// Inputs indexed by tick; ticks past the end get zero input.
    Replay { inputs: Vec<DVector<f64>> },
}

impl OperatorModel {
    pub fn noisy(noise_std: f64, seed: u64) -> Self {
        OperatorModel::Noisy { noise_std, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn kind(&self) -> OperatorKind {
        match self {
            OperatorModel::Perfect => OperatorKind::Perfect,
            OperatorModel::Noisy { .. } => OperatorKind::Noisy,
            OperatorModel::Idle => OperatorKind::Idle,
            OperatorModel::Replay { .. } => OperatorKind::Replay,
        }
    }

    /// Whether the episode should stop once the task schedule is complete.
    pub fn follows_schedule(&self) -> bool {
        matches!(self, OperatorModel::Perfect | OperatorModel::Noisy { .. })
    }

    pub fn input(&mut self, obs: &Observation<'_>) -> OperatorInput {
        let dim = obs.view.h.len();
        let u = match self {
            OperatorModel::Perfect => demonstrate(obs.view, obs.task, obs.gain),
            OperatorModel::Noisy { noise_std, rng } => {
                let base = demonstrate(obs.view, obs.task, obs.gain);
                noisy_input(&base, *noise_std, rng)
            }
            OperatorModel::Idle => DVector::zeros(dim),
            OperatorModel::Replay { inputs } => {
                inputs.get(obs.tick as usize).cloned().unwrap_or_else(|| DVector::zeros(dim))
            }
        };
        OperatorInput::new(u, obs.t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::dvector;

    #[test]
    fn at_rest_isotropic_is_normalized_negative_gradient() {
        let k = DMatrix::identity(3, 3) * 0.7;
        let u = perfect_input(&dvector![0.0, -2.0, 0.0], &DVector::zeros(3), &k).unwrap();
        assert_relative_eq!(u, dvector![0.0, 1.0, 0.0], epsilon = 1e-12);
        assert_eq!(
            perfect_input(&DVector::zeros(3), &DVector::zeros(3), &k),
            Err(OperatorError::DegenerateTarget)
        );
    }

    #[test]
    fn noise_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let base = dvector![1.0, 0.0, 0.0];
        assert_eq!(noisy_input(&base, 0.0, &mut rng), base);
        for _ in 0..1000 {
            assert!(noisy_input(&base, 0.5, &mut rng).norm() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn infeasible_alignment_falls_back_to_best_cosine() {
        // robot moving fast the wrong way; K cannot reverse it
        let k = DMatrix::identity(3, 3) * 0.5;
        let hdot = dvector![3.0, 0.0, 0.0];
        let g = dvector![1.0, 0.0, 0.0];
        let u = perfect_input(&g, &hdot, &k).unwrap();
        assert_relative_eq!(u.norm(), 1.0, epsilon = 1e-9);
        let got = alignment(&u, &g, &hdot, &k);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let normal = Normal::new(0.0, 1.0).unwrap();
        for _ in 0..20_000 {
            let v = DVector::from_fn(3, |_, _| normal.sample(&mut rng)).normalize();
            assert!(alignment(&v, &g, &hdot, &k) <= got + 1e-6);
        }
    }
}
