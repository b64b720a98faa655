//! Scenario configuration (TOML) and the assembled runtime scenario.

use std::path::Path;
use std::sync::Arc;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adaptation::AdaptationConfig;
use crate::geometry::{Cylinder, CylinderChart, Pose};
use crate::policies::{
    make_distance_keeping, make_inspection_position, make_inspection_rotation, make_normal_keeping,
    AttractorParams, KeeperParams, PolicyError, RotationMode,
};
use crate::rmp::PolicySpec;

pub const SCHEMA_VERSION: u32 = 1;

/// The shipped reference scenario.
pub const REFERENCE_CONFIG: &str = include_str!("../data/reference.toml");

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl From<PolicyError> for ConfigError {
    fn from(e: PolicyError) -> Self {
        ConfigError::Invalid(e.to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CylinderConfig {
    pub origin: [f64; 3],
    pub axis: [f64; 3],
    pub radius: f64,
    pub height: f64,
    pub zero_direction: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetConfig {
    pub height: f64,
    pub arc: f64,
    pub rotation: RotationMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StartConfig {
    pub height: f64,
    pub arc: f64,
    pub distance: f64,
    pub tool_rotation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MissionConfig {
    pub position: AttractorParams,
    pub rotation: AttractorParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SafetyConfig {
    /// Setpoint is the safe standoff distance.
    pub distance: KeeperParams,
    /// Setpoint is the tilt angle (rad) where the metric ramps up.
    pub normal: KeeperParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub dt: f64,
    pub max_duration: f64,
    /// Twist norm above which an episode is aborted.
    pub divergence_speed: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub position_tolerance: f64,
    pub rotation_tolerance_deg: f64,
    pub dwell: f64,
    pub convergence_threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorConfig {
    pub noise_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub schema_version: u32,
    pub cylinder: CylinderConfig,
    pub targets: Vec<TargetConfig>,
    pub start: StartConfig,
    pub mission: MissionConfig,
    pub safety: SafetyConfig,
    pub adaptation: AdaptationConfig,
    pub sim: SimConfig,
    pub task: TaskConfig,
    pub operator: OperatorConfig,
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_toml(&text)
    }

    pub fn reference() -> Self {
        Self::from_toml(REFERENCE_CONFIG).expect("reference config is valid")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.schema_version != SCHEMA_VERSION {
            return invalid(format!("schema_version {} unsupported (expected {SCHEMA_VERSION})", self.schema_version));
        }
        if self.targets.is_empty() {
            return invalid("targets must not be empty".into());
        }
        let c = &self.cylinder;
        if !(c.height > 0.0) {
            return invalid("cylinder.height must be positive".into());
        }
        self.cylinder()?;
        let half_turn = std::f64::consts::PI * c.radius;
        for (i, t) in self.targets.iter().enumerate() {
            if !(0.0..=c.height).contains(&t.height) || t.arc.abs() >= half_turn {
                return invalid(format!("target {i} is outside the cylinder surface"));
            }
        }
        let sim = &self.sim;
        if !(sim.dt > 0.0 && sim.max_duration > sim.dt && sim.divergence_speed > 0.0) {
            return invalid("sim requires dt > 0, max_duration > dt, divergence_speed > 0".into());
        }
        let t = &self.task;
        if !(t.position_tolerance > 0.0 && t.rotation_tolerance_deg > 0.0 && t.dwell >= 0.0) {
            return invalid("task tolerances must be positive".into());
        }
        if !(0.0..=1.0).contains(&t.convergence_threshold) {
            return invalid("task.convergence_threshold must be in [0, 1]".into());
        }
        if !(self.operator.noise_std >= 0.0) {
            return invalid("operator.noise_std must be non-negative".into());
        }
        if self.adaptation.dim() != 3 {
            return invalid("adaptation.gain must be 3x3 for the surface input manifold".into());
        }
        self.adaptation.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(self.safety.distance.setpoint > 0.0) {
            return invalid("safety.distance.setpoint must be positive".into());
        }
        Ok(())
    }

    pub fn cylinder(&self) -> Result<Cylinder, ConfigError> {
        let c = &self.cylinder;
        Cylinder::new(Vector3::from(c.origin), Vector3::from(c.axis), c.radius, Vector3::from(c.zero_direction))
            .ok_or_else(|| ConfigError::Invalid("degenerate cylinder geometry".into()))
    }
}

/// One inspection task: which mission policies realize it and the pose to reach.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub position_policy: usize,
    pub rotation_policy: usize,
    pub target_pose: [f64; 7],
}

impl Task {
    pub fn pose(&self) -> Pose {
        Pose::from_array(&self.target_pose)
    }
}

/// Everything an episode needs, assembled from a [`ScenarioConfig`].
#[derive(Clone, Debug)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub cylinder: Cylinder,
    pub human_chart: Arc<CylinderChart>,
    /// Position attractors (one per target) followed by the horizontal and
    /// vertical rotation attractors.
    pub mission: Vec<PolicySpec>,
    /// Normal keeping, then distance keeping.
    pub safety: Vec<PolicySpec>,
    pub tasks: Vec<Task>,
    pub start: Pose,
}

impl Scenario {
    pub fn from_config(config: ScenarioConfig) -> Result<Self, ConfigError> {
        config.validate()?;
        let cylinder = config.cylinder()?;
        let d_safe = config.safety.distance.setpoint;
        let mut mission = Vec::new();
        for t in &config.targets {
            mission.push(make_inspection_position(
                &cylinder,
                Vector3::new(t.height, t.arc, d_safe),
                &config.mission.position,
            )?);
        }
        let n_pos = mission.len();
        for mode in [RotationMode::Horizontal, RotationMode::Vertical] {
            mission.push(make_inspection_rotation(&cylinder, mode, &config.mission.rotation)?);
        }
        let safety = vec![
            make_normal_keeping(&cylinder, &config.safety.normal)?,
            make_distance_keeping(&cylinder, d_safe, &config.safety.distance)?,
        ];
        let tasks = config
            .targets
            .iter()
            .enumerate()
            .map(|(i, t)| Task {
                position_policy: i,
                rotation_policy: n_pos + usize::from(t.rotation == RotationMode::Vertical),
                target_pose: cylinder.aligned_pose(t.height, t.arc, d_safe, t.rotation.angle()).to_array(),
            })
            .collect();
        let s = &config.start;
        let start = cylinder.aligned_pose(s.height, s.arc, s.distance, s.tool_rotation);
        let human_chart = Arc::new(CylinderChart::surface_frame(cylinder.clone()));
        Ok(Self { config, cylinder, human_chart, mission, safety, tasks, start })
    }

    pub fn reference() -> Self {
        Self::from_config(ScenarioConfig::reference()).expect("reference scenario builds")
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_config(ScenarioConfig::load(path)?)
    }

    pub fn n_mission(&self) -> usize {
        self.mission.len()
    }

    pub fn d_safe(&self) -> f64 {
        self.config.safety.distance.setpoint
    }

    pub fn dt(&self) -> f64 {
        self.config.sim.dt
    }

    /// Pose aligned with the surface at the given coordinates.
    pub fn surface_pose(&self, height: f64, arc: f64, tool_rotation: f64) -> Pose {
        self.cylinder.aligned_pose(height, arc, self.d_safe(), tool_rotation)
    }

    /// Scenario with the same geometry and parameters but a single task.
    pub fn with_single_task(&self, task: usize) -> Self {
        let mut s = self.clone();
        s.tasks = vec![self.tasks[task].clone()];
        s
    }

    /// Same scenario with a custom task list built from (target, mode) pairs.
    pub fn with_tasks(&self, tasks: &[(usize, RotationMode)]) -> Self {
        let n_pos = self.config.targets.len();
        let mut s = self.clone();
        s.tasks = tasks
            .iter()
            .map(|&(i, mode)| {
                let t = &self.config.targets[i];
                Task {
                    position_policy: i,
                    rotation_policy: n_pos + usize::from(mode == RotationMode::Vertical),
                    target_pose: self.surface_pose(t.height, t.arc, mode.angle()).to_array(),
                }
            })
            .collect();
        s
    }
}
