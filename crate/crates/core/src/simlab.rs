//! Euler-hold and fine RK4 integration of the closed loop q̇ = u(t, q), plus the
//! containment, convergence, step-order and perturbation experiments built on them.

use crate::certify::Problem;
use crate::matkit::Vector;
use crate::pikcore::{error_dynamics, Gains, PikError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

/// A run is declared divergent once ‖q‖ exceeds this.
pub const DIVERGENCE_NORM: f64 = 1e6;
pub const DEFAULT_CONVERGENCE_TOL: f64 = 1e-6;
/// Deviations below this are floating-point noise and excluded from rate fits.
pub const FIT_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("divergence at t = {t} after sample {last_valid}: {reason}")]
    Divergence { last_valid: usize, t: f64, reason: String, trajectory: Box<Trajectory> },
    #[error(transparent)]
    Pik(#[from] PikError),
    #[error("invalid input: {0}")]
    Input(String),
}

/// A problem together with the gains driving it.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub problem: Problem,
    pub gains: Gains,
}

impl Scenario {
    pub fn new(problem: Problem, gains: Gains) -> Result<Self, SimError> {
        if gains.k.len() != problem.model.l() {
            return Err(SimError::Input(format!("{} gains for {} tasks", gains.k.len(), problem.model.l())));
        }
        Ok(Self { problem, gains })
    }

    pub fn velocity(&self, t: f64, q: &Vector) -> Result<Vector, PikError> {
        let p = &self.problem;
        p.solver.solve(&p.model, &p.traj, &self.gains, t, q)
    }

    pub fn phi(&self, t: f64, q: &Vector) -> Vec<f64> {
        self.problem.task_errors(t, q)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Partition {
    Uniform { t0: f64, eta: f64, horizon: f64 },
    Explicit { times: Vec<f64> },
}

impl Partition {
    pub fn uniform(t0: f64, eta: f64, horizon: f64) -> Result<Self, SimError> {
        if !(eta.is_finite() && eta > 0.0 && horizon.is_finite() && horizon > 0.0 && t0.is_finite()) {
            return Err(SimError::Input(format!("need a positive step and horizon, got eta = {eta}, T = {horizon}")));
        }
        Ok(Partition::Uniform { t0, eta, horizon })
    }

    pub fn explicit(times: Vec<f64>) -> Result<Self, SimError> {
        if times.len() < 2 || times.windows(2).any(|w| !(w[1] > w[0])) || times.iter().any(|t| !t.is_finite()) {
            return Err(SimError::Input("partition times must be finite and strictly increasing".into()));
        }
        Ok(Partition::Explicit { times })
    }

    /// Grid points τ_0 = t0 < … ≤ t0 + T. The last uniform step is shortened to land on t0 + T.
    pub fn times(&self) -> Vec<f64> {
        match self {
            Partition::Uniform { t0, eta, horizon } => {
                let steps = (horizon / eta - 1e-9).ceil().max(1.0) as usize;
                let mut out: Vec<f64> = (0..steps).map(|i| t0 + i as f64 * eta).collect();
                out.push(t0 + horizon);
                out
            }
            Partition::Explicit { times } => times.clone(),
        }
    }

    /// ‖P‖ = sup(τ_i − τ_{i−1}).
    pub fn norm(&self) -> f64 {
        self.times().windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub q: Vec<Vec<f64>>,
    pub phi: Vec<Vec<f64>>,
    /// Velocity applied from each sample on; the Euler-hold value for discrete runs.
    pub u: Vec<Vec<f64>>,
    /// Whether q0 met the initial condition (inside Θ and φ_a < θ'_a).
    pub initial_condition_ok: bool,
    /// First sample with some φ_a ≥ θ'_a, and with some φ_a ≥ θ_a.
    pub left_inner_tube: Option<usize>,
    pub left_outer_tube: Option<usize>,
}

impl Trajectory {
    fn start(scenario: &Scenario, t0: f64, q0: &Vector) -> Self {
        let region = &scenario.problem.region;
        let phi0 = scenario.phi(t0, q0);
        let ok = region.contains(q0) && phi0.iter().zip(&region.theta_prime).all(|(p, tp)| p < tp);
        Self {
            times: Vec::new(),
            q: Vec::new(),
            phi: Vec::new(),
            u: Vec::new(),
            initial_condition_ok: ok,
            left_inner_tube: None,
            left_outer_tube: None,
        }
    }

    fn push(&mut self, scenario: &Scenario, t: f64, q: &Vector, u: &Vector) {
        let phi = scenario.phi(t, q);
        let region = &scenario.problem.region;
        let i = self.times.len();
        if self.left_inner_tube.is_none() && phi.iter().zip(&region.theta_prime).any(|(p, tp)| p >= tp) {
            self.left_inner_tube = Some(i);
        }
        if self.left_outer_tube.is_none() && phi.iter().zip(&region.theta).any(|(p, th)| p >= th) {
            self.left_outer_tube = Some(i);
        }
        self.times.push(t);
        self.q.push(q.iter().copied().collect());
        self.phi.push(phi);
        self.u.push(u.iter().copied().collect());
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn q_vec(&self, i: usize) -> Vector {
        Vector::from_column_slice(&self.q[i])
    }

    pub fn last_q(&self) -> Vector {
        self.q_vec(self.len() - 1)
    }

    /// Piecewise-linear interpolant; exact for Euler-hold runs. Clamped outside the time range.
    pub fn q_at(&self, t: f64) -> Vector {
        let i = self.times.partition_point(|s| *s <= t);
        if i == 0 {
            return self.q_vec(0);
        }
        if i >= self.len() {
            return self.last_q();
        }
        let (t0, t1) = (self.times[i - 1], self.times[i]);
        let s = (t - t0) / (t1 - t0);
        self.q_vec(i - 1) * (1.0 - s) + self.q_vec(i) * s
    }

    /// sup over `reference`'s samples of ‖self(t) − reference(t)‖.
    pub fn sup_distance(&self, reference: &Trajectory) -> f64 {
        reference
            .times
            .iter()
            .enumerate()
            .map(|(i, t)| (self.q_at(*t) - reference.q_vec(i)).norm())
            .fold(0.0, f64::max)
    }

    pub fn max_phi(&self) -> Vec<f64> {
        let l = self.phi.first().map_or(0, Vec::len);
        (0..l).map(|a| self.phi.iter().map(|p| p[a]).fold(0.0, f64::max)).collect()
    }
}

fn check_state(q: &Vector) -> Option<String> {
    if q.iter().any(|x| !x.is_finite()) {
        return Some("non-finite joint state".into());
    }
    if q.norm() > DIVERGENCE_NORM {
        return Some(format!("|q| = {:e} exceeds {DIVERGENCE_NORM:e}", q.norm()));
    }
    None
}

fn diverged(traj: Trajectory, t: f64, reason: String) -> SimError {
    SimError::Divergence { last_valid: traj.len().saturating_sub(1), t, reason, trajectory: Box::new(traj) }
}

/// q̃(τ_i) = q̃(τ_{i−1}) + (τ_i − τ_{i−1})u(τ_{i−1}, q̃(τ_{i−1})).
pub fn integrate_discrete(scenario: &Scenario, q0: &Vector, partition: &Partition) -> Result<Trajectory, SimError> {
    let times = partition.times();
    let mut traj = Trajectory::start(scenario, times[0], q0);
    let mut q = q0.clone();
    for (i, t) in times.iter().enumerate() {
        let u = scenario.velocity(*t, &q)?;
        if u.iter().any(|x| !x.is_finite()) {
            return Err(diverged(traj, *t, "non-finite velocity".into()));
        }
        traj.push(scenario, *t, &q, &u);
        if let Some(next) = times.get(i + 1) {
            q += &u * (next - t);
            if let Some(reason) = check_state(&q) {
                return Err(diverged(traj, *next, reason));
            }
        }
    }
    Ok(traj)
}

/// Classical RK4 at `fine_step` (default 10⁻⁴·T), the continuous-time reference.
pub fn integrate_oracle(
    scenario: &Scenario,
    q0: &Vector,
    t0: f64,
    horizon: f64,
    fine_step: Option<f64>,
) -> Result<Trajectory, SimError> {
    let h = fine_step.unwrap_or(1e-4 * horizon);
    let times = Partition::uniform(t0, h, horizon)?.times();
    let mut traj = Trajectory::start(scenario, t0, q0);
    let mut q = q0.clone();
    let f = |t: f64, q: &Vector| -> Result<Vector, SimError> { Ok(scenario.velocity(t, q)?) };
    for (i, t) in times.iter().enumerate() {
        let k1 = f(*t, &q)?;
        traj.push(scenario, *t, &q, &k1);
        let Some(next) = times.get(i + 1) else { break };
        let dt = next - t;
        let k2 = f(t + dt / 2.0, &(&q + &k1 * (dt / 2.0)))?;
        let k3 = f(t + dt / 2.0, &(&q + &k2 * (dt / 2.0)))?;
        let k4 = f(*next, &(&q + &k3 * dt))?;
        q += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        if let Some(reason) = check_state(&q) {
            return Err(diverged(traj, *next, reason));
        }
    }
    Ok(traj)
}

// ── experiments ──

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyRow {
    pub eta: f64,
    pub sup_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceStudy {
    pub fine_step: f64,
    pub rows: Vec<StudyRow>,
    /// Least-squares slope of log(error) against log(η); `None` when fewer than two errors are positive.
    pub slope: Option<f64>,
}

/// Least-squares slope of y against x.
pub fn fit_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    Some(x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / sxx)
}

/// sup_{[t0, t0+T]}‖q̃ − q‖ for each step against one RK4 reference at `fine_step`
/// (default: the smallest step / 100).
pub fn euler_convergence_study(
    scenario: &Scenario,
    q0: &Vector,
    horizon: f64,
    steps: &[f64],
    fine_step: Option<f64>,
) -> Result<ConvergenceStudy, SimError> {
    let smallest = steps.iter().copied().fold(f64::INFINITY, f64::min);
    if !(smallest > 0.0) {
        return Err(SimError::Input("steps must be positive".into()));
    }
    let fine = fine_step.unwrap_or(smallest / 100.0);
    let t0 = scenario.problem.traj.t0;
    let oracle = integrate_oracle(scenario, q0, t0, horizon, Some(fine))?;
    let rows = steps
        .par_iter()
        .map(|eta| {
            let run = integrate_discrete(scenario, q0, &Partition::uniform(t0, *eta, horizon)?)?;
            Ok(StudyRow { eta: *eta, sup_error: run.sup_distance(&oracle) })
        })
        .collect::<Result<Vec<_>, SimError>>()?;
    let (lx, ly): (Vec<f64>, Vec<f64>) =
        rows.iter().filter(|r| r.sup_error > 0.0).map(|r| (r.eta.ln(), r.sup_error.ln())).unzip();
    Ok(ConvergenceStudy { fine_step: fine, rows, slope: fit_slope(&lx, &ly) })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Integrator {
    Oracle { fine_step: f64 },
    Euler { eta: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerturbationRun {
    pub initial_deviation: f64,
    pub sup_deviation: f64,
    pub final_deviation: f64,
    /// −slope of log‖q' − q‖ over the tail window.
    pub fitted_rate: Option<f64>,
    /// sup_t ‖q'(t) − q(t)‖e^{ρ(t−t1)}/‖q'(t1) − q(t1)‖ with the certified ρ.
    pub prefactor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerturbationReport {
    pub t1: f64,
    pub delta: f64,
    pub rho: f64,
    pub runs: Vec<PerturbationRun>,
}

impl PerturbationReport {
    pub fn min_rate(&self) -> Option<f64> {
        self.runs.iter().map(|r| r.fitted_rate).collect::<Option<Vec<f64>>>().map(|v| {
            v.into_iter().fold(f64::INFINITY, f64::min)
        })
    }

    pub fn max_prefactor(&self) -> f64 {
        self.runs.iter().map(|r| r.prefactor).fold(0.0, f64::max)
    }

    pub fn all_decay(&self) -> bool {
        self.runs.iter().all(|r| r.final_deviation < r.initial_deviation)
    }
}

/// Log-linear fit of the deviation over the last half of the samples above `FIT_FLOOR`.
pub fn fit_decay_rate(times: &[f64], dev: &[f64]) -> Option<f64> {
    let kept: Vec<(f64, f64)> = times.iter().zip(dev).filter(|(_, d)| **d > FIT_FLOOR).map(|(t, d)| (*t, d.ln())).collect();
    let tail = &kept[kept.len() / 2..];
    let (x, y): (Vec<f64>, Vec<f64>) = tail.iter().copied().unzip();
    fit_slope(&x, &y).map(|s| -s)
}

fn random_direction(rng: &mut ChaCha8Rng, n: usize) -> Vector {
    loop {
        let v = Vector::from_iterator(n, (0..n).map(|_| rng.random_range(-1.0..1.0)));
        let norm = v.norm();
        if norm > 1e-3 && norm <= 1.0 {
            return v / norm;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerturbationSetup {
    pub t1: f64,
    pub delta: f64,
    pub count: usize,
    pub seed: u64,
    pub horizon: f64,
    pub integrator: Integrator,
    /// RK4 step of the unperturbed continuation q(t), t ≥ t1.
    pub reference_step: f64,
    /// Rate used to normalise the observed prefactor.
    pub rho: f64,
}

/// Perturb the base trajectory at t1 by `count` random offsets of norm `delta`, rerun
/// each for `horizon` and compare against the RK4 continuation of the base.
pub fn perturbation_experiment(
    scenario: &Scenario,
    base: &Trajectory,
    setup: &PerturbationSetup,
) -> Result<PerturbationReport, SimError> {
    let PerturbationSetup { t1, delta, count, seed, horizon, ref integrator, reference_step, rho } = *setup;
    let n = scenario.problem.model.n();
    let q1 = base.q_at(t1);
    let reference = integrate_oracle(scenario, &q1, t1, horizon, Some(reference_step))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let starts: Vec<Vector> = (0..count).map(|_| &q1 + random_direction(&mut rng, n) * delta).collect();
    let runs = starts
        .par_iter()
        .map(|qp| {
            let run = match integrator {
                Integrator::Oracle { fine_step } => integrate_oracle(scenario, qp, t1, horizon, Some(*fine_step))?,
                Integrator::Euler { eta } => integrate_discrete(scenario, qp, &Partition::uniform(t1, *eta, horizon)?)?,
            };
            let dev: Vec<f64> =
                run.times.iter().enumerate().map(|(i, t)| (run.q_vec(i) - reference.q_at(*t)).norm()).collect();
            let initial = dev[0];
            let prefactor = if initial > 0.0 {
                run.times.iter().zip(&dev).map(|(t, d)| d * (rho * (t - t1)).exp() / initial).fold(0.0, f64::max)
            } else {
                0.0
            };
            Ok(PerturbationRun {
                initial_deviation: initial,
                sup_deviation: dev.iter().copied().fold(0.0, f64::max),
                final_deviation: *dev.last().unwrap(),
                fitted_rate: fit_decay_rate(&run.times, &dev),
                prefactor,
            })
        })
        .collect::<Result<Vec<_>, SimError>>()?;
    Ok(PerturbationReport { t1, delta, rho, runs })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TubeReport {
    pub max_phi: Vec<f64>,
    pub final_phi: Vec<f64>,
    pub contained_inner: bool,
    pub contained_outer: bool,
    /// First time some φ_a reached θ_a.
    pub exit_time: Option<f64>,
    /// max over the last 10% of the horizon of ‖q(t) − q(T)‖.
    pub tail_variation: f64,
    pub converged: bool,
    pub q_inf: Option<Vec<f64>>,
}

pub fn tube_and_convergence_report(traj: &Trajectory, theta: &[f64], theta_prime: &[f64], tol: f64) -> TubeReport {
    let max_phi = traj.max_phi();
    let final_phi = traj.phi.last().cloned().unwrap_or_default();
    let t_end = *traj.times.last().unwrap_or(&0.0);
    let t_start = traj.times.first().copied().unwrap_or(0.0);
    let window = t_end - 0.1 * (t_end - t_start);
    let q_end = traj.last_q();
    let tail_variation = traj
        .times
        .iter()
        .enumerate()
        .filter(|(_, t)| **t >= window)
        .map(|(i, _)| (traj.q_vec(i) - &q_end).norm())
        .fold(0.0, f64::max);
    let converged = final_phi.iter().all(|p| *p < tol) && tail_variation < tol;
    TubeReport {
        contained_inner: max_phi.iter().zip(theta_prime).all(|(p, tp)| p < tp),
        contained_outer: max_phi.iter().zip(theta).all(|(p, th)| p < th),
        exit_time: traj.left_outer_tube.map(|i| traj.times[i]),
        max_phi,
        final_phi,
        tail_variation,
        converged,
        q_inf: converged.then(|| q_end.iter().copied().collect()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnvelopeReport {
    /// β_a = max ‖b_a‖ along the trajectory.
    pub beta: Vec<f64>,
    /// max_t φ_a(t) − envelope_a(t); nonpositive when the envelope holds.
    pub max_excess: Vec<f64>,
}

/// Compare φ_a with (θ'_a − β_a/(k_aω_a))e^{−k_aω_a(t−t0)} + β_a/(k_aω_a).
pub fn envelope_check(scenario: &Scenario, traj: &Trajectory, omega: &[f64]) -> Result<EnvelopeReport, SimError> {
    let p = &scenario.problem;
    let l = p.model.l();
    let mut beta = vec![0.0_f64; l];
    for (i, t) in traj.times.iter().enumerate() {
        let eval = p.solver.evaluate(&p.model, &p.traj, &scenario.gains, *t, &traj.q_vec(i))?;
        let ed = error_dynamics(&eval, &scenario.gains);
        for (a, b) in ed.b.iter().enumerate() {
            beta[a] = beta[a].max(b.norm());
        }
    }
    let t0 = traj.times[0];
    let max_excess = (0..l)
        .map(|a| {
            let rate = scenario.gains.k[a] * omega[a];
            let floor = beta[a] / rate;
            let tp = p.region.theta_prime[a];
            traj.times
                .iter()
                .zip(&traj.phi)
                .map(|(t, phi)| phi[a] - ((tp - floor) * (-rate * (t - t0)).exp() + floor))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    Ok(EnvelopeReport { beta, max_excess })
}

/// Post-hoc δ₀ bound min_a(θ'_a − φ̂_a)/L_f from the realised sup errors φ̂_a.
pub fn stability_radius(theta_prime: &[f64], max_phi: &[f64], forward_lipschitz: f64) -> f64 {
    theta_prime.iter().zip(max_phi).map(|(tp, p)| (tp - p) / forward_lipschitz).fold(f64::INFINITY, f64::min)
}

/// Whether `steps` Euler steps of size `eta` stay bounded and end with Σφ_a no larger
/// than at the start. Unstable modes grow geometrically, so a few thousand steps expose
/// them well before the bisection tolerance matters.
pub fn step_is_stable(scenario: &Scenario, q0: &Vector, eta: f64, steps: usize) -> bool {
    let Ok(part) = Partition::uniform(scenario.problem.traj.t0, eta, eta * steps as f64) else { return false };
    match integrate_discrete(scenario, q0, &part) {
        Ok(run) => {
            let first: f64 = run.phi[0].iter().sum();
            let last: f64 = run.phi.last().unwrap().iter().sum();
            // allow rounding when the step is too small to move q at all
            last.is_finite() && last <= first * (1.0 + 1e-9)
        }
        Err(_) => false,
    }
}

/// Largest stable uniform step to relative accuracy `rel_tol`: double from the stable
/// step `lo` until a failure, then bisect. Returns 0 when `lo` is already unstable.
pub fn max_stable_step(scenario: &Scenario, q0: &Vector, steps: usize, lo: f64, rel_tol: f64) -> f64 {
    if !step_is_stable(scenario, q0, lo, steps) {
        return 0.0;
    }
    let mut lo = lo;
    let mut hi = 2.0 * lo;
    while step_is_stable(scenario, q0, hi, steps) {
        lo = hi;
        hi *= 2.0;
        if !hi.is_finite() {
            return lo;
        }
    }
    while (hi - lo) > rel_tol * lo {
        let mid = 0.5 * (lo + hi);
        if step_is_stable(scenario, q0, mid, steps) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::certify::{certify, tests::three_link, CertifyOptions, Sampling};
    use crate::chainmodel::{DesiredTrajectory, KinematicModel, RegionTheta, TaskDef, TaskTrajectory};
    use crate::pikcore::Solver;

    fn scalar(k: f64) -> Scenario {
        let model = KinematicModel::new(vec![1.0], vec![TaskDef::Posture { joints: vec![1] }]).unwrap();
        let traj = DesiredTrajectory::new(0.0, vec![TaskTrajectory::SetPoint { p_inf: vec![0.0] }]).unwrap();
        let region = RegionTheta::new(vec![-0.5], vec![0.5], 0.1, vec![0.3], vec![0.2]).unwrap();
        let problem = Problem::new(model, traj, region, Solver::default()).unwrap();
        Scenario::new(problem, Gains { k: vec![k] }).unwrap()
    }

    fn q(v: f64) -> Vector {
        Vector::from_vec(vec![v])
    }

    #[test]
    fn partition_grid() {
        let p = Partition::uniform(1.0, 0.3, 1.0).unwrap();
        let t = p.times();
        assert_eq!(t.len(), 5);
        assert!((t[4] - 2.0).abs() < 1e-15);
        assert!((p.norm() - 0.3).abs() < 1e-12);
        assert!(Partition::explicit(vec![0.0, 0.5, 0.5]).is_err());
        assert!(Partition::uniform(0.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn zero_error_stays_put() {
        let (p, q0) = three_link();
        let s = Scenario::new(p, Gains { k: vec![2.0, 2.0] }).unwrap();
        let d = integrate_discrete(&s, &q0, &Partition::uniform(0.0, 0.05, 1.0).unwrap()).unwrap();
        let o = integrate_oracle(&s, &q0, 0.0, 1.0, Some(0.01)).unwrap();
        for traj in [&d, &o] {
            assert!(traj.q.iter().all(|x| (Vector::from_column_slice(x) - &q0).norm() < 1e-12));
        }
        let rep = tube_and_convergence_report(&d, &[0.1, 0.1], &[0.05, 0.05], DEFAULT_CONVERGENCE_TOL);
        assert!(rep.converged && rep.contained_inner);
    }

    #[test]
    fn scalar_euler_is_geometric() {
        let s = scalar(1.0);
        let d = integrate_discrete(&s, &q(0.1), &Partition::uniform(0.0, 0.1, 2.0).unwrap()).unwrap();
        for (i, phi) in d.phi.iter().enumerate() {
            assert!((phi[0] - 0.1 * 0.9f64.powi(i as i32)).abs() < 1e-14);
        }
    }

    #[test]
    fn oracle_matches_exponential() {
        let s = scalar(1.5);
        let o = integrate_oracle(&s, &q(0.1), 0.0, 2.0, None).unwrap();
        for (t, x) in o.times.iter().zip(&o.q) {
            assert!((x[0] - 0.1 * (-1.5 * t).exp()).abs() < 1e-8);
        }
        let (p, q0) = three_link();
        let s = Scenario::new(p, Gains { k: vec![2.0, 3.0] }).unwrap();
        let start = &q0 + Vector::from_vec(vec![0.01, -0.01, 0.01]);
        let a = integrate_oracle(&s, &start, 0.0, 1.0, Some(2e-3)).unwrap();
        let b = integrate_oracle(&s, &start, 0.0, 1.0, Some(1e-3)).unwrap();
        assert!((a.last_q() - b.last_q()).norm() < 1e-9);
    }

    #[test]
    fn scalar_euler_order() {
        let s = scalar(1.0);
        let steps: Vec<f64> = (1..=6).map(|i| 0.2 / 2f64.powi(i)).collect();
        let study = euler_convergence_study(&s, &q(0.1), 2.0, &steps, None).unwrap();
        assert!((study.slope.unwrap() - 1.0).abs() < 0.05, "{:?}", study.slope);
        for w in study.rows.windows(2) {
            let ratio = w[0].sup_error / w[1].sup_error;
            assert!((ratio - 2.0).abs() < 0.4, "ratio {ratio}");
        }
        let still = euler_convergence_study(&s, &q(0.0), 1.0, &steps, None).unwrap();
        assert!(still.rows.iter().all(|r| r.sup_error == 0.0));
        assert_eq!(still.slope, None);
    }

    #[test]
    fn scalar_perturbations() {
        let s = scalar(2.0);
        let base = integrate_oracle(&s, &q(0.0), 0.0, 1.0, Some(1e-3)).unwrap();
        let mut setup = PerturbationSetup {
            t1: 0.5,
            delta: 0.0,
            count: 3,
            seed: 1,
            horizon: 4.0,
            integrator: Integrator::Oracle { fine_step: 1e-3 },
            reference_step: 1e-3,
            rho: 1.0,
        };
        let none = perturbation_experiment(&s, &base, &setup).unwrap();
        assert!(none.runs.iter().all(|r| r.sup_deviation == 0.0));
        setup.delta = 0.05;
        setup.count = 5;
        setup.horizon = 8.0;
        let rep = perturbation_experiment(&s, &base, &setup).unwrap();
        let rate = rep.min_rate().unwrap();
        assert!((rate - 2.0).abs() < 0.04, "rate {rate}");
        assert!(rep.all_decay());
        assert!(rep.max_prefactor() <= 1.0 + 1e-12);
        let again = perturbation_experiment(&s, &base, &setup).unwrap();
        assert_eq!(rep, again);
    }

    #[test]
    fn fit_helpers() {
        assert_eq!(fit_slope(&[1.0], &[2.0]), None);
        assert!((fit_slope(&[0.0, 1.0, 2.0], &[1.0, 3.0, 5.0]).unwrap() - 2.0).abs() < 1e-15);
        let t: Vec<f64> = (0..100).map(|i| i as f64 * 0.1).collect();
        let d: Vec<f64> = t.iter().map(|t| 0.3 * (-0.7 * t).exp()).collect();
        assert!((fit_decay_rate(&t, &d).unwrap() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn certified_three_link_runs() {
        let (p, q0) = three_link();
        let opts = CertifyOptions { q0: Some(q0.clone()), ..Default::default() };
        let cert = certify(&p, &Sampling { grid_density: 3, halton: 32, seed: 0, safety: 1.25 }, &opts).unwrap();
        assert!(cert.certified);
        let s = Scenario::new(p, cert.gains.clone()).unwrap();
        let start = &q0 + Vector::from_vec(vec![0.01, 0.0, -0.01]);
        assert!(s.phi(0.0, &start).iter().zip(&cert.theta_prime).all(|(a, b)| a < b));
        let horizon = 2.0;
        let d = integrate_discrete(&s, &start, &Partition::uniform(0.0, cert.eta_inf / 2.0, horizon).unwrap()).unwrap();
        let rep = tube_and_convergence_report(&d, &cert.theta, &cert.theta_prime, 1e-6);
        assert!(rep.contained_outer && d.initial_condition_ok);
        let env = envelope_check(&s, &d, &cert.constants.omega).unwrap();
        assert!(env.max_excess.iter().all(|x| *x <= 1e-12), "{env:?}");

        // a step far beyond the bound eventually leaves the outer tube
        let mut eta = 10.0 * cert.eta_inf;
        let long = 40.0;
        let exit = loop {
            let run = integrate_discrete(&s, &start, &Partition::uniform(0.0, eta, long).unwrap());
            let out = match run {
                Ok(t) => tube_and_convergence_report(&t, &cert.theta, &cert.theta_prime, 1e-6).exit_time,
                Err(SimError::Divergence { t, .. }) => Some(t),
                Err(e) => panic!("{e}"),
            };
            if out.is_some() || eta > long {
                break out;
            }
            eta *= 2.0;
        };
        assert!(exit.is_some());
    }

    #[test]
    fn stable_step_search() {
        // scalar Euler multiplies the error by |1 − kη| per step
        let s = scalar(1.0);
        let eta = max_stable_step(&s, &q(0.1), 200, 0.1, 0.01);
        assert!(eta > 1.97 && eta <= 2.0, "eta {eta}");
        assert!(!step_is_stable(&s, &q(0.1), 2.1, 200));
        assert_eq!(stability_radius(&[0.2, 0.1], &[0.05, 0.0], 2.0), 0.05);
    }
}
