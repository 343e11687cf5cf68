//! TOML scenario files. Every table rejects unknown keys so typos fail loudly.

use pik_core::certify::{CertifyError, GainChoice, Problem, Sampling, DEFAULT_MARGIN, DEFAULT_SAFETY};
use pik_core::chainmodel::{DesiredTrajectory, KinematicModel, RegionTheta, TaskDef, TaskTrajectory};
use pik_core::matkit::{Matrix, Vector, DEFAULT_RANK_TOL};
use pik_core::pikcore::{Gains, LPolicy, Solver};
use pik_core::simlab::Partition;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("cannot write config: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("invalid config: {0}")]
    Core(#[from] CertifyError),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub chain: ChainConfig,
    pub tasks: Vec<TaskConfig>,
    pub region: RegionConfig,
    pub trajectory: TrajectoryConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub gains: GainsConfig,
    pub simulation: SimulationConfig,
    #[serde(default)]
    pub sampling: SamplingConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainConfig {
    pub links: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskConfig {
    /// Planar tip position of link `link` (counted from 1).
    Point {
        link: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        priority: Option<usize>,
    },
    Posture {
        joints: Vec<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        priority: Option<usize>,
    },
}

impl TaskConfig {
    fn priority(&self) -> Option<usize> {
        match self {
            TaskConfig::Point { priority, .. } | TaskConfig::Posture { priority, .. } => *priority,
        }
    }

    fn def(&self) -> TaskDef {
        match self {
            TaskConfig::Point { link, .. } => TaskDef::Point { link: *link },
            TaskConfig::Posture { joints, .. } => TaskDef::Posture { joints: joints.clone() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionConfig {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    #[serde(default = "default_shell")]
    pub r_theta: f64,
    pub theta: Vec<f64>,
    pub theta_prime: Vec<f64>,
}

fn default_shell() -> f64 {
    pik_core::chainmodel::DEFAULT_SHELL_WIDTH
}

/// Either hold the task values of a joint vector, or give one trajectory per task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryConfig {
    #[serde(default)]
    pub t0: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hold_at: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tasks: Vec<TaskTrajectoryConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskTrajectoryConfig {
    SetPoint { p_inf: Vec<f64> },
    Settling { p0: Vec<f64>, p_inf: Vec<f64>, lambda: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    /// Preconditioner damping; absent means no preconditioning.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w: Option<f64>,
    /// Constant block lower-triangular L, one list per row; absent means identity.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l: Option<Vec<Vec<f64>>>,
    #[serde(default = "default_rank_tol")]
    pub rank_tol: f64,
}

fn default_rank_tol() -> f64 {
    DEFAULT_RANK_TOL
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { w: None, l: None, rank_tol: DEFAULT_RANK_TOL }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum GainsConfig {
    Fixed {
        k: Vec<f64>,
    },
    Synthesize {
        #[serde(default = "default_k_floor")]
        k_floor: f64,
        #[serde(default = "default_margin")]
        margin: f64,
    },
}

fn default_k_floor() -> f64 {
    1.0
}

fn default_margin() -> f64 {
    DEFAULT_MARGIN
}

impl Default for GainsConfig {
    fn default() -> Self {
        GainsConfig::Synthesize { k_floor: default_k_floor(), margin: default_margin() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub q0: Vec<f64>,
    pub horizon: f64,
    /// Uniform Euler step; defaults to half the certified uniform bound.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<f64>,
    /// Explicit partition times, overriding `step` and `horizon` for the Euler run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fine_step: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    #[serde(default = "default_grid")]
    pub grid_density: usize,
    #[serde(default = "default_halton")]
    pub halton: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_safety")]
    pub safety: f64,
}

fn default_grid() -> usize {
    Sampling::default().grid_density
}

fn default_halton() -> usize {
    Sampling::default().halton
}

fn default_safety() -> f64 {
    DEFAULT_SAFETY
}

impl Default for SamplingConfig {
    fn default() -> Self {
        let s = Sampling::default();
        Self { grid_density: s.grid_density, halton: s.halton, seed: s.seed, safety: s.safety }
    }
}

/// Everything a command needs, validated.
#[derive(Debug, Clone, PartialEq)]
pub struct Setup {
    pub problem: Problem,
    pub gains: GainChoice,
    pub q0: Vector,
    pub horizon: f64,
    pub step: Option<f64>,
    pub partition: Option<Partition>,
    pub fine_step: Option<f64>,
    pub sampling: Sampling,
}

fn positive(x: f64, what: &str) -> Result<f64, ConfigError> {
    if x.is_finite() && x > 0.0 {
        Ok(x)
    } else {
        Err(invalid(format!("{what} must be positive and finite, got {x}")))
    }
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| invalid(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Tasks sorted by priority; priorities, when given, must be exactly 1..=l.
    fn ordered_tasks(&self) -> Result<Vec<TaskDef>, ConfigError> {
        let l = self.tasks.len();
        let given: Vec<Option<usize>> = self.tasks.iter().map(TaskConfig::priority).collect();
        if given.iter().all(Option::is_none) {
            return Ok(self.tasks.iter().map(TaskConfig::def).collect());
        }
        let mut prio: Vec<usize> = given
            .iter()
            .map(|p| p.ok_or_else(|| invalid("either every task has a priority or none does")))
            .collect::<Result<_, _>>()?;
        let mut order: Vec<usize> = (0..l).collect();
        order.sort_by_key(|i| prio[*i]);
        prio.sort_unstable();
        if prio != (1..=l).collect::<Vec<_>>() {
            return Err(invalid(format!("task priorities must be 1..={l}, got {given:?}")));
        }
        Ok(order.into_iter().map(|i| self.tasks[i].def()).collect())
    }

    pub fn setup(&self) -> Result<Setup, ConfigError> {
        let tasks = self.ordered_tasks()?;
        let model = KinematicModel::new(self.chain.links.clone(), tasks).map_err(CertifyError::from)?;
        let n = model.n();

        let r = &self.region;
        let region = RegionTheta::new(r.lo.clone(), r.hi.clone(), r.r_theta, r.theta.clone(), r.theta_prime.clone())
            .map_err(CertifyError::from)?;

        let tr = &self.trajectory;
        let traj = match (&tr.hold_at, tr.tasks.is_empty()) {
            (Some(q), true) => {
                if q.len() != n {
                    return Err(invalid(format!("hold_at has {} entries for {n} joints", q.len())));
                }
                DesiredTrajectory::hold_at(&model, tr.t0, &Vector::from_column_slice(q))
            }
            (None, false) => DesiredTrajectory::new(
                tr.t0,
                tr.tasks
                    .iter()
                    .map(|t| match t {
                        TaskTrajectoryConfig::SetPoint { p_inf } => TaskTrajectory::SetPoint { p_inf: p_inf.clone() },
                        TaskTrajectoryConfig::Settling { p0, p_inf, lambda } => {
                            TaskTrajectory::Settling { p0: p0.clone(), p_inf: p_inf.clone(), lambda: *lambda }
                        }
                    })
                    .collect(),
            )
            .map_err(CertifyError::from)?,
            _ => return Err(invalid("trajectory needs exactly one of hold_at or tasks")),
        };

        let s = &self.solver;
        let l_policy = match &s.l {
            None => LPolicy::Identity,
            Some(rows) => {
                let m = rows.len();
                if rows.iter().any(|row| row.len() != m) {
                    return Err(invalid("solver.l must be square"));
                }
                LPolicy::Constant(Matrix::from_fn(m, m, |i, j| rows[i][j]))
            }
        };
        let solver = Solver::new(s.w, l_policy, s.rank_tol).map_err(CertifyError::from)?;
        let problem = Problem::new(model, traj, region, solver)?;

        let gains = match &self.gains {
            GainsConfig::Fixed { k } => GainChoice::Fixed(Gains::new(k.clone()).map_err(CertifyError::from)?),
            GainsConfig::Synthesize { k_floor, margin } => {
                GainChoice::Synthesize { k_floor: positive(*k_floor, "k_floor")?, margin: positive(*margin, "margin")? }
            }
        };

        let sim = &self.simulation;
        if sim.q0.len() != n {
            return Err(invalid(format!("q0 has {} entries for {n} joints", sim.q0.len())));
        }
        let horizon = positive(sim.horizon, "horizon")?;
        let step = sim.step.map(|x| positive(x, "step")).transpose()?;
        let fine_step = sim.fine_step.map(|x| positive(x, "fine_step")).transpose()?;
        let partition = match &sim.partition {
            Some(times) => Some(Partition::explicit(times.clone()).map_err(|e| invalid(e.to_string()))?),
            None => None,
        };

        let sp = &self.sampling;
        let sampling = Sampling { grid_density: sp.grid_density, halton: sp.halton, seed: sp.seed, safety: sp.safety };
        sampling.validate()?;

        Ok(Setup {
            problem,
            gains,
            q0: Vector::from_column_slice(&sim.q0),
            horizon,
            step,
            partition,
            fine_step,
            sampling,
        })
    }
}
