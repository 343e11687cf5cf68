//! The four commands as plain functions returning serializable results; `lib.rs`
//! turns them into files and exit codes.

use pik_core::certify::{certify, Certificate, CertifyError, CertifyOptions, GainChoice};
use pik_core::matkit::DEFAULT_RANK_TOL;
use pik_core::pikcore::Gains;
use pik_core::precond::preconditioned_bounds;
use pik_core::simlab::{
    integrate_discrete, integrate_oracle, tube_and_convergence_report, Partition, Scenario, SimError, TubeReport,
    Trajectory, DEFAULT_CONVERGENCE_TOL,
};
use pik_core::verify::{run_all, Budget, SuiteOutcome, VerifyReport};
use rayon::prelude::*;
use serde::Serialize;
use std::collections::BTreeMap;
use thiserror::Error;

use crate::config::Setup;

#[derive(Debug, Error)]
pub enum CommandError {
    #[error(transparent)]
    Certify(#[from] CertifyError),
    #[error(transparent)]
    Sim(#[from] SimError),
    /// No step was given and the scenario has no certified step to default to.
    #[error("infeasible: {0}")]
    Infeasible(String),
}

pub fn certify_setup(setup: &Setup) -> Result<Certificate, CertifyError> {
    let opts = CertifyOptions { gains: setup.gains.clone(), q0: Some(setup.q0.clone()), horizon: Some(setup.horizon) };
    certify(&setup.problem, &setup.sampling, &opts)
}

/// Explicit step, else half the certified uniform bound.
fn default_step(cert: &Certificate, step: Option<f64>) -> Result<f64, CommandError> {
    match step {
        Some(s) => Ok(s),
        None if cert.eta_inf > 0.0 && cert.eta_inf.is_finite() => Ok(0.5 * cert.eta_inf),
        None => Err(CommandError::Infeasible(format!(
            "no step given and the certificate has no positive step bound ({:?})",
            cert.infeasible
        ))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleSummary {
    pub fine_step: f64,
    /// sup_t ‖q̃(t) − q(t)‖ over the oracle samples.
    pub sup_distance: f64,
    pub tube: TubeReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationReport {
    pub certified: bool,
    pub gains: Vec<f64>,
    pub eta_inf: f64,
    pub partition_norm: f64,
    pub samples: usize,
    pub tube: TubeReport,
    pub divergence: Option<String>,
    pub oracle: Option<OracleSummary>,
}

impl SimulationReport {
    /// Contained in the outer tubes and not divergent.
    pub fn ok(&self) -> bool {
        self.divergence.is_none() && self.tube.contained_outer
    }
}

pub struct SimulationOutput {
    pub report: SimulationReport,
    pub trajectory: Trajectory,
    /// ‖q̃(t_i) − q(t_i)‖ per Euler sample when the oracle ran.
    pub oracle_distance: Option<Vec<f64>>,
}

/// A run cut short by divergence still yields its valid prefix.
fn run_or_prefix(run: Result<Trajectory, SimError>) -> Result<(Trajectory, Option<String>), SimError> {
    match run {
        Ok(tr) => Ok((tr, None)),
        Err(SimError::Divergence { t, reason, trajectory, .. }) => Ok((*trajectory, Some(format!("t = {t}: {reason}")))),
        Err(e) => Err(e),
    }
}

pub fn simulate(setup: &Setup, step: Option<f64>, oracle: bool) -> Result<SimulationOutput, CommandError> {
    let cert = certify_setup(setup)?;
    let scenario = Scenario::new(setup.problem.clone(), cert.gains.clone())?;
    let t0 = setup.problem.traj.t0;
    let partition = match (&setup.partition, step.or(setup.step)) {
        (Some(p), None) => p.clone(),
        (_, s) => Partition::uniform(t0, default_step(&cert, s)?, setup.horizon)?,
    };
    let (trajectory, divergence) = run_or_prefix(integrate_discrete(&scenario, &setup.q0, &partition))?;
    let (theta, theta_p) = (&setup.problem.region.theta, &setup.problem.region.theta_prime);
    let tube = tube_and_convergence_report(&trajectory, theta, theta_p, DEFAULT_CONVERGENCE_TOL);
    let (oracle_summary, oracle_distance) = if oracle {
        let horizon = partition.times().last().copied().unwrap_or(t0) - t0;
        // Over long horizons a step 100× below η is too costly; the RK4 default of
        // 10⁻⁴·T is already far more accurate than any Euler run.
        let (reference, _) = run_or_prefix(integrate_oracle(&scenario, &setup.q0, t0, horizon, setup.fine_step))?;
        let fine = reference.times.get(1).map_or(0.0, |t| t - reference.times[0]);
        let per_sample = trajectory.times.iter().enumerate().map(|(i, t)| (trajectory.q_vec(i) - reference.q_at(*t)).norm()).collect();
        let summary = OracleSummary {
            fine_step: fine,
            sup_distance: trajectory.sup_distance(&reference),
            tube: tube_and_convergence_report(&reference, theta, theta_p, DEFAULT_CONVERGENCE_TOL),
        };
        (Some(summary), Some(per_sample))
    } else {
        (None, None)
    };
    let report = SimulationReport {
        certified: cert.certified,
        gains: cert.gains.k.clone(),
        eta_inf: cert.eta_inf,
        partition_norm: partition.norm(),
        samples: trajectory.len(),
        tube,
        divergence,
        oracle: oracle_summary,
    };
    Ok(SimulationOutput { report, trajectory, oracle_distance })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Step,
    W,
    Gain,
}

/// One sweep row. Fields that do not apply to a sweep are `None`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub certified: bool,
    pub eta_inf: f64,
    pub step: f64,
    pub contained: bool,
    pub diverged: bool,
    /// max_a sup_t φ_a/θ_a.
    pub sup_phi_over_theta: f64,
    pub sup_oracle_distance: Option<f64>,
    /// The Euler error bound at this step.
    pub certified_bound: Option<f64>,
    /// dn(C) at q0.
    pub dn_c: Option<f64>,
}

pub const SWEEP_COLUMNS: [&str; 10] = [
    "value",
    "certified",
    "eta_inf",
    "step",
    "contained",
    "diverged",
    "sup_phi_over_theta",
    "sup_oracle_distance",
    "certified_bound",
    "dn_c",
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepTable {
    pub param: SweepParam,
    pub rows: Vec<SweepRow>,
}

fn run_row(setup: &Setup, gains: &Gains, step: f64) -> Result<(Trajectory, bool, bool, f64), CommandError> {
    let scenario = Scenario::new(setup.problem.clone(), gains.clone())?;
    let part = Partition::uniform(setup.problem.traj.t0, step, setup.horizon)?;
    let (traj, div) = run_or_prefix(integrate_discrete(&scenario, &setup.q0, &part))?;
    let theta = &setup.problem.region.theta;
    let ratio = traj.max_phi().iter().zip(theta).map(|(p, t)| p / t).fold(0.0, f64::max);
    let contained = div.is_none() && traj.left_outer_tube.is_none();
    Ok((traj, contained, div.is_some(), ratio))
}

pub fn sweep(setup: &Setup, param: SweepParam, values: &[f64], step: Option<f64>, oracle: bool) -> Result<SweepTable, CommandError> {
    if values.is_empty() || values.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(CommandError::Certify(CertifyError::Input("sweep values must be positive".into())));
    }
    let base = certify_setup(setup)?;
    let rows = match param {
        SweepParam::Step => {
            let reference = if oracle {
                let smallest = values.iter().copied().fold(f64::INFINITY, f64::min);
                let fine = setup.fine_step.unwrap_or(smallest / 100.0);
                let scenario = Scenario::new(setup.problem.clone(), base.gains.clone())?;
                Some(run_or_prefix(integrate_oracle(&scenario, &setup.q0, setup.problem.traj.t0, setup.horizon, Some(fine)))?.0)
            } else {
                None
            };
            values
                .par_iter()
                .map(|eta| {
                    let (traj, contained, diverged, ratio) = run_row(setup, &base.gains, *eta)?;
                    Ok(SweepRow {
                        value: *eta,
                        certified: base.certified,
                        eta_inf: base.eta_inf,
                        step: *eta,
                        contained,
                        diverged,
                        sup_phi_over_theta: ratio,
                        sup_oracle_distance: reference.as_ref().map(|r| traj.sup_distance(r)),
                        certified_bound: base.euler_error_bound(*eta),
                        dn_c: None,
                    })
                })
                .collect::<Result<Vec<_>, CommandError>>()?
        }
        SweepParam::W | SweepParam::Gain => {
            let step = default_step(&base, step.or(setup.step))?;
            values
                .par_iter()
                .map(|v| {
                    let mut s = setup.clone();
                    let mut dn_c = None;
                    if param == SweepParam::W {
                        s.problem.solver.w = Some(*v);
                        let f_q = s.problem.model.jacobian(s.problem.traj.t0, &s.q0);
                        dn_c = preconditioned_bounds(&f_q, *v, DEFAULT_RANK_TOL).ok().and_then(|b| b.dn_c);
                    } else {
                        s.gains = GainChoice::Fixed(Gains::uniform(*v, s.problem.model.l()).map_err(CertifyError::from)?);
                    }
                    let cert = certify_setup(&s)?;
                    let (_, contained, diverged, ratio) = run_row(&s, &cert.gains, step)?;
                    Ok(SweepRow {
                        value: *v,
                        certified: cert.certified,
                        eta_inf: cert.eta_inf,
                        step,
                        contained,
                        diverged,
                        sup_phi_over_theta: ratio,
                        sup_oracle_distance: None,
                        certified_bound: None,
                        dn_c,
                    })
                })
                .collect::<Result<Vec<_>, CommandError>>()?
        }
    };
    Ok(SweepTable { param, rows })
}

/// The full suites, plus a certificate row for `setup` when a config was given.
pub fn verify(seed: u64, setup: Option<&Setup>) -> VerifyReport {
    let mut report = run_all(seed, Budget::full());
    if let Some(setup) = setup {
        let mut s = setup.clone();
        s.sampling.seed = seed;
        let mut row = SuiteOutcome {
            id: "C".into(),
            name: "scenario certificate".into(),
            module: "certify".into(),
            passed: false,
            cases: 1,
            failures: 1,
            metrics: BTreeMap::new(),
            notes: Vec::new(),
        };
        match certify_setup(&s) {
            Ok(cert) => {
                row.passed = cert.certified;
                row.failures = usize::from(!cert.certified);
                row.metrics.insert("eta_inf".into(), cert.eta_inf);
                row.notes = cert.infeasible;
            }
            Err(e) => row.notes.push(e.to_string()),
        }
        report.passed &= row.passed;
        report.suites.push(row);
    }
    report
}

