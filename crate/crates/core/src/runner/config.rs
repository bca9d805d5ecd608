use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{PisacError, Result};
use crate::geometry::{OrientedRect, Pose2};
use crate::isac::RsuConfig;
use crate::planner::{DynamicsModel, PlannerConfig};

/// Power allocation / planning method of an episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Planning-oriented allocation with inflated obstacles.
    Pisac,
    /// CRB-minimizing allocation with inflated obstacles.
    Isac,
    /// Sum-rate maximizing allocation with inflated obstacles.
    Srm,
    /// Max-min fair allocation with inflated obstacles.
    Mmf,
    /// Planning-oriented allocation but uncertainty-blind planning.
    Rda,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Pisac, Method::Isac, Method::Srm, Method::Mmf, Method::Rda];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Pisac => "pisac",
            Method::Isac => "isac",
            Method::Srm => "srm",
            Method::Mmf => "mmf",
            Method::Rda => "rda",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = PisacError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| PisacError::Config(format!("unknown method '{s}' (expected pisac|isac|srm|mmf|rda)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EgoConfig {
    /// `[x, y, heading]`.
    pub start: [f64; 3],
    pub goal: [f64; 3],
    pub length: f64,
    pub width: f64,
    pub initial_speed: f64,
    pub ref_speed: f64,
    /// Distance to the goal at which the run counts as complete.
    pub goal_tolerance: f64,
}

impl Default for EgoConfig {
    fn default() -> Self {
        Self {
            start: [409.2, 28.0, FRAC_PI_2],
            goal: [409.2, 113.0, FRAC_PI_2],
            length: 4.694,
            width: 1.849,
            initial_speed: 0.0,
            ref_speed: 6.0,
            goal_tolerance: 1.0,
        }
    }
}

impl EgoConfig {
    pub fn start_pose(&self) -> Pose2 {
        Pose2::new(self.start[0], self.start[1], self.start[2])
    }

    pub fn goal_pose(&self) -> Pose2 {
        Pose2::new(self.goal[0], self.goal[1], self.goal[2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstacleConfig {
    /// `[x, y, heading]` at time zero.
    pub pose: [f64; 3],
    #[serde(default = "default_length")]
    pub length: f64,
    #[serde(default = "default_width")]
    pub width: f64,
    /// Optional constant velocity `[vx, vy]` in m/s.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub velocity: Option<[f64; 2]>,
}

fn default_length() -> f64 {
    4.694
}

fn default_width() -> f64 {
    1.849
}

impl ObstacleConfig {
    pub fn parked(x: f64, y: f64) -> Self {
        Self { pose: [x, y, FRAC_PI_2], length: default_length(), width: default_width(), velocity: None }
    }

    /// True footprint at time `t`.
    pub fn rect_at(&self, t: f64) -> Result<OrientedRect> {
        let [vx, vy] = self.velocity.unwrap_or([0.0, 0.0]);
        let pose = Pose2::new(self.pose[0] + vx * t, self.pose[1] + vy * t, self.pose[2]);
        OrientedRect::from_extents(pose, self.length, self.width)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerSection {
    pub d_safe: f64,
    pub horizon: usize,
    pub dynamics: DynamicsModel,
    /// A run is stuck when it moves less than `stuck_distance` over `stuck_window` seconds.
    pub stuck_window: f64,
    pub stuck_distance: f64,
    /// Brake instead of following a plan that neither converged nor
    /// keeps `d_safe` from the planning obstacles.
    pub brake_on_infeasible: bool,
}

impl Default for PlannerSection {
    fn default() -> Self {
        Self {
            d_safe: 0.15,
            horizon: 20,
            dynamics: DynamicsModel::default(), stuck_window: 5.0,
            stuck_distance: 0.5,
            brake_on_infeasible: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IsacSection {
    pub method: Method,
    pub snr_db: f64,
    pub risk_eps: f64,
    /// Absolute regularizer weight; when absent the scale-normalized
    /// default is used, multiplied by `rho_scale`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    pub rho_scale: f64,
    /// Absolute sum-rate floor; when absent `r0_fraction` times the
    /// equal-split rate is used.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r0_rate: Option<f64>,
    pub r0_fraction: f64,
    /// Gauss-Newton iterations of the position estimator.
    pub estimator_iters: usize,
}

impl Default for IsacSection {
    fn default() -> Self {
        Self {
            method: Method::Pisac,
            snr_db: 38.0,
            risk_eps: 0.05,
            rho: None,
            rho_scale: 1.0,
            r0_rate: None,
            r0_fraction: 0.8,
            estimator_iters: 3,
        }
    }
}

/// Complete description of one closed-loop episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub seed: u64,
    pub max_sim_time: f64,
    pub rsu: RsuConfig,
    pub ego: EgoConfig,
    pub obstacles: Vec<ObstacleConfig>,
    pub planner: PlannerSection,
    pub isac: IsacSection,
    pub solver: PlannerConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            name: "empty".into(),
            seed: 0,
            max_sim_time: 40.0,
            rsu: RsuConfig::default(),
            ego: EgoConfig::default(),
            obstacles: Vec::new(),
            planner: PlannerSection::default(),
            isac: IsacSection::default(),
            solver: PlannerConfig::default(),
        }
    }
}

/// The shipped seven-vehicle gap scenario.
pub const DEFAULT_SCENARIO_TOML: &str = include_str!("../../scenarios/default.toml");

impl ScenarioConfig {
    pub fn default_scenario() -> Self {
        Self::from_toml_str(DEFAULT_SCENARIO_TOML).expect("bundled scenario parses")
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| PisacError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| PisacError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads TOML, or JSON when the extension is `.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PisacError::Io(format!("cannot read {}: {e}", path.display())))?;
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
            Self::from_json_str(&text)
        } else {
            Self::from_toml_str(&text)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.rsu.validate()?;
        self.planner.dynamics.validate()?;
        if self.obstacles.is_empty() {
            return Err(PisacError::Config("scenario needs at least one obstacle vehicle".into()));
        }
        if !(self.max_sim_time > 0.0) {
            return Err(PisacError::Config("max_sim_time must be positive".into()));
        }
        if !(self.planner.d_safe >= 0.0) || self.planner.horizon == 0 {
            return Err(PisacError::Config("d_safe must be nonnegative and horizon positive".into()));
        }
        if !(self.planner.stuck_window > 0.0) || !(self.planner.stuck_distance >= 0.0) {
            return Err(PisacError::Config("stuck detection parameters must be positive".into()));
        }
        if !(self.isac.risk_eps > 0.0 && self.isac.risk_eps < 1.0) {
            return Err(PisacError::Domain(self.isac.risk_eps));
        }
        if !self.isac.snr_db.is_finite() || !(self.isac.rho_scale >= 0.0) || self.isac.rho.is_some_and(|r| !(r >= 0.0)) {
            return Err(PisacError::Config("snr_db must be finite and rho nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.isac.r0_fraction) || self.isac.r0_rate.is_some_and(|r| !(r >= 0.0)) {
            return Err(PisacError::Config("r0_fraction must lie in [0, 1] and r0_rate be nonnegative".into()));
        }
        if self.isac.estimator_iters == 0 {
            return Err(PisacError::Config("estimator_iters must be at least 1".into()));
        }
        if !(self.ego.ref_speed > 0.0) || !(self.ego.goal_tolerance > 0.0) {
            return Err(PisacError::Config("ref_speed and goal_tolerance must be positive".into()));
        }
        OrientedRect::from_extents(self.ego.start_pose(), self.ego.length, self.ego.width)?;
        let gap = self.ego.goal_pose().position() - self.ego.start_pose().position();
        if gap.norm() <= self.ego.goal_tolerance {
            return Err(PisacError::Config("goal lies within the goal tolerance of the start".into()));
        }
        for (k, ob) in self.obstacles.iter().enumerate() {
            ob.rect_at(0.0).map_err(|e| PisacError::Config(format!("obstacle {k}: {e}")))?;
        }
        Ok(())
    }

    /// Planner settings with the ego footprint applied.
    pub fn planner_config(&self) -> PlannerConfig {
        PlannerConfig {
            ev_length: self.ego.length,
            ev_width: self.ego.width,
            relax_infeasible_start: true,
            ..self.solver.clone()
        }
    }

    pub fn with_run(&self, method: Method, seed: u64, snr_db: f64) -> Self {
        let mut cfg = self.clone();
        cfg.isac.method = method;
        cfg.seed = seed;
        cfg.isac.snr_db = snr_db;
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_scenario_is_valid() {
        let cfg = ScenarioConfig::default_scenario();
        assert_eq!(cfg.obstacles.len(), 7);
        assert_eq!(cfg.ego.start, [409.2, 28.0, FRAC_PI_2]);
        assert_eq!(cfg.rsu.position, [380.0, 38.5]);
        assert_eq!(cfg.planner.d_safe, 0.15);
    }

    #[test]
    fn minimal_toml_uses_defaults() {
        let cfg = ScenarioConfig::from_toml_str("[[obstacles]]\npose = [400.0, 60.0, 1.5707963]\n").unwrap();
        assert_eq!(cfg.planner.horizon, 20);
        assert_eq!(cfg.isac.method, Method::Pisac);
        assert_eq!(cfg.obstacles[0].length, 4.694);
        assert!(cfg.obstacles[0].velocity.is_none());
    }

    #[test]
    fn json_round_trip() {
        let cfg = ScenarioConfig::default_scenario();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ScenarioConfig::from_json_str(&text).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(ScenarioConfig::from_toml_str("").is_err());
        assert!(ScenarioConfig::from_toml_str("[[obstacles]]\npose = [1.0, 2.0, 0.0]\n[isac]\nrisk_eps = 1.5\n").is_err());
        assert!(ScenarioConfig::from_toml_str("[[obstacles]]\npose = [1.0, 2.0, 0.0]\n[isac]\nbogus = 1\n").is_err());
    }

    #[test]
    fn method_parsing() {
        assert_eq!("PISAC".parse::<Method>().unwrap(), Method::Pisac);
        assert!("foo".parse::<Method>().is_err());
    }
}
