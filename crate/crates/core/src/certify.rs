//! Sampled certificates for a scenario: the region constants, gain synthesis, the
//! admissible Euler step sizes and the exponential-rate matrices.
//!
//! Every supremum is a maximum over a deterministic sample set inflated by a safety
//! factor, and every infimum a minimum deflated by it. The results are therefore
//! "sampled certificates", not proofs.

use crate::chainmodel::{sample_region, DesiredTrajectory, KinematicModel, ModelError, RegionTheta, TaskTrajectory};
use crate::matkit::{
    block_offsets, is_m_matrix, plemmons_radius, serialize_matrix, sigma_min, spectral_norm,
    MatError, Matrix, Vector,
};
use crate::pikcore::{split, symmetric_margins, Gains, PikError, Solver};
use crate::precond::{factor_derivatives, solution_map_derivative};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

/// Sampled ω_a at or below this value means the region touches a singularity.
pub const SINGULARITY_TOL: f64 = 1e-12;
pub const DEFAULT_SAFETY: f64 = 1.25;
pub const DEFAULT_MARGIN: f64 = 0.1;
/// Fraction of an open upper limit used when a strict inequality needs a concrete value.
pub const BACKOFF: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CertifyError {
    #[error("singularity_in_region: task {task} has omega = {omega:e} at q = {q:?}")]
    Singularity { task: usize, omega: f64, q: Vec<f64> },
    #[error(transparent)]
    Pik(#[from] PikError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Mat(#[from] MatError),
    #[error("invalid input: {0}")]
    Input(String),
}

/// A chain, its task trajectories, the region Θ and the solver configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    pub model: KinematicModel,
    pub traj: DesiredTrajectory,
    pub region: RegionTheta,
    pub solver: Solver,
}

impl Problem {
    pub fn new(
        model: KinematicModel,
        traj: DesiredTrajectory,
        region: RegionTheta,
        solver: Solver,
    ) -> Result<Self, CertifyError> {
        traj.check_against(&model)?;
        if region.n() != model.n() {
            return Err(CertifyError::Input(format!("region has {} joints, chain has {}", region.n(), model.n())));
        }
        if region.theta.len() != model.l() {
            return Err(CertifyError::Input(format!("{} tube radii for {} tasks", region.theta.len(), model.l())));
        }
        solver.l_policy.validate(&model.task_dims())?;
        Ok(Self { model, traj, region, solver })
    }

    /// Per-task error norms at (t, q).
    pub fn task_errors(&self, t: f64, q: &Vector) -> Vec<f64> {
        let e = self.traj.p(t) - self.model.forward(t, q);
        split(&e, &self.model.task_dims()).iter().map(|v| v.norm()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Sampling {
    pub grid_density: usize,
    pub halton: usize,
    pub seed: u64,
    pub safety: f64,
}

impl Default for Sampling {
    fn default() -> Self {
        Self { grid_density: 5, halton: 256, seed: 0, safety: DEFAULT_SAFETY }
    }
}

impl Sampling {
    pub fn validate(&self) -> Result<(), CertifyError> {
        if self.grid_density < 3 {
            return Err(CertifyError::Input("grid density must be at least 3".into()));
        }
        if !(self.safety.is_finite() && self.safety >= 1.0) {
            return Err(CertifyError::Input("safety factor must be at least 1".into()));
        }
        Ok(())
    }
}

/// Times at which time-dependent quantities are sampled: t0 alone for set-points,
/// otherwise a geometric ladder over each settling time constant.
pub fn time_samples(traj: &DesiredTrajectory) -> Vec<f64> {
    let mut times = vec![traj.t0];
    for task in &traj.tasks {
        if let TaskTrajectory::Settling { lambda, .. } = task {
            for c in [0.125, 0.25, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 8.0, 16.0, 40.0] {
                times.push(traj.t0 + c / lambda);
            }
        }
    }
    times.sort_by(f64::total_cmp);
    times.dedup();
    times
}

/// Quantities at one joint sample that do not depend on time or gains.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub q: Vector,
    pub omega: Vec<f64>,
    pub weighted_sigma_gap: Vec<f64>,
    pub coupling: Matrix,
    pub solution_map: Matrix,
    pub f_q: Matrix,
    pub block_norms: Vec<Vec<f64>>,
    pub task_jacobian_norms: Vec<f64>,
    pub solution_map_norm: f64,
    pub coupling_norm: f64,
    pub jacobian_norm: f64,
    pub factor_norm: f64,
    pub precond_inverse_norm: f64,
    pub jacobian_lipschitz: f64,
    pub solution_map_lipschitz: f64,
    pub jacobian_sigma_min: f64,
}

/// Desired-trajectory values at one sample time.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeRecord {
    pub t: f64,
    pub p: Vector,
    pub p_dot_prime: Vector,
    pub p_ddot: Vector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub records: Vec<SampleRecord>,
    pub times: Vec<TimeRecord>,
    pub shell: Vec<Vector>,
    pub weight_norm: f64,
}

fn evaluate_record(problem: &Problem, q: &Vector) -> Result<SampleRecord, CertifyError> {
    let model = &problem.model;
    let solver = &problem.solver;
    let dims = model.task_dims();
    let t0 = problem.traj.t0;
    let singular = |task: usize, omega: f64| CertifyError::Singularity { task, omega, q: q.iter().copied().collect() };
    let fac = solver.factor(model, t0, q)?;
    if let Some(a) = (0..dims.len()).find(|a| {
        let off = block_offsets(&dims);
        (off[*a]..off[*a] + dims[*a]).any(|i| fac.dec.dependent[i])
    }) {
        return Err(singular(a, 0.0));
    }
    let l = solver.l_policy.matrix(model.m());
    let coupling = fac.coupling(&l);
    let omega = symmetric_margins(&coupling, &dims);
    if let Some((a, w)) = omega.iter().enumerate().find(|(_, w)| **w <= SINGULARITY_TOL) {
        return Err(singular(a, *w));
    }
    let off = block_offsets(&dims);
    let lblk = |a: usize| l.view((off[a], off[a]), (dims[a], dims[a])).into_owned();
    let weighted_sigma_gap = (0..dims.len())
        .map(|a| sigma_min(&fac.dec.c_block(a, a)).powi(2) * spectral_norm(&lblk(a)) - omega[a])
        .collect();
    let block_norms = (0..dims.len())
        .map(|a| {
            (0..=a)
                .map(|b| spectral_norm(&coupling.view((off[a], off[b]), (dims[a], dims[b])).into_owned()))
                .collect()
        })
        .collect();
    let task_jacobian_norms = (0..dims.len())
        .map(|a| spectral_norm(&fac.f_q.rows(off[a], dims[a]).into_owned()))
        .collect();
    let d_f_q = model.jacobian_derivative(t0, q);
    let deriv = factor_derivatives(&fac.f_q, &d_f_q, solver.w, solver.rank_tol).map_err(|_| singular(0, 0.0))?;
    let d_m = solution_map_derivative(&fac.r_inv, &fac.dec.j_hat, &fac.dec.c, &dims, &l, &deriv);
    let solution_map = fac.solution_map(&l);
    Ok(SampleRecord {
        q: q.clone(),
        omega,
        weighted_sigma_gap,
        solution_map_norm: spectral_norm(&solution_map),
        coupling_norm: spectral_norm(&coupling),
        jacobian_norm: spectral_norm(&fac.f_q),
        factor_norm: spectral_norm(&fac.dec.c),
        precond_inverse_norm: spectral_norm(&fac.r_inv),
        jacobian_lipschitz: d_f_q.op_norm_bound(),
        solution_map_lipschitz: d_m.op_norm_bound(),
        jacobian_sigma_min: sigma_min(&fac.f_q),
        coupling,
        solution_map,
        f_q: fac.f_q,
        block_norms,
        task_jacobian_norms,
    })
}

/// Evaluate every interior sample (plus `extra` points inside the region) in parallel.
pub fn sample_problem(problem: &Problem, sampling: &Sampling, extra: &[Vector]) -> Result<SampleSet, CertifyError> {
    sampling.validate()?;
    let samples = sample_region(&problem.region, sampling.grid_density, sampling.halton, sampling.seed);
    let mut points = samples.interior;
    points.extend(extra.iter().filter(|q| problem.region.contains(q)).cloned());
    let evaluated: Vec<Result<SampleRecord, CertifyError>> =
        points.par_iter().map(|q| evaluate_record(problem, q)).collect();
    let mut records = Vec::with_capacity(evaluated.len());
    for r in evaluated {
        records.push(r?);
    }
    let times = time_samples(&problem.traj)
        .into_iter()
        .map(|t| TimeRecord {
            t,
            p: problem.traj.p(t),
            // f_t vanishes for these chains, so ṗ' = ṗ
            p_dot_prime: problem.traj.p_dot(t),
            p_ddot: problem.traj.p_ddot(t),
        })
        .collect();
    let weight_norm = spectral_norm(&problem.solver.l_policy.matrix(problem.model.m()));
    Ok(SampleSet { records, times, shell: samples.shell, weight_norm })
}

/// Bounds that grow with the gains.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GainConstants {
    pub k: Vec<f64>,
    pub k_norm: f64,
    /// M_u = M(M_p + (Σ k_a²θ_a²)^{1/2}).
    pub velocity_bound: f64,
    /// L_u, Lipschitz constant of u in (t, q) over the tubes.
    pub velocity_lipschitz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConstantsReport {
    pub safety: f64,
    pub samples: usize,
    pub time_samples: usize,
    pub task_dims: Vec<usize>,
    /// ω_a: smallest eigenvalue of (A_aa + A_aaᵀ)/2.
    pub omega: Vec<f64>,
    /// M_ab for b ≤ a.
    pub coupling: Vec<Vec<f64>>,
    /// M_a bounds ‖ṗ'_a − Σ_{b≤a} A_ab ṗ'_b‖.
    pub drift: Vec<f64>,
    /// M_{F_a}.
    pub task_jacobian: Vec<f64>,
    /// M_F.
    pub jacobian: f64,
    /// M bounds ‖R⁻¹ĴᵀC_DᵀL‖.
    pub solution_map: f64,
    /// M_p bounds ‖ṗ'‖.
    pub feedforward: f64,
    /// M_A bounds ‖A‖.
    pub coupling_norm: f64,
    /// M_C, M_L and M_R.
    pub factor: f64,
    pub weight: f64,
    pub precond_inverse: f64,
    /// L_f, L_F and L_M.
    pub forward_lipschitz: f64,
    pub jacobian_lipschitz: f64,
    pub solution_map_lipschitz: f64,
    /// m_Θ, the smallest singular value of F_q over the region.
    pub jacobian_sigma_min: f64,
    /// Ψ_a = ∫ψ_a.
    pub envelope_integrals: Vec<f64>,
    /// Smallest σ_min²(C_aa)‖L_aa‖ − λ_min over the samples; nonnegative when the
    /// weighted singular value inequality holds.
    pub weighted_sigma_gap: f64,
    pub gain_dependent: Option<GainConstants>,
}

impl ConstantsReport {
    pub fn l(&self) -> usize {
        self.omega.len()
    }

    pub fn m(&self) -> usize {
        self.task_dims.iter().sum()
    }

    pub fn coupling_matrix(&self) -> Matrix {
        let l = self.l();
        Matrix::from_fn(l, l, |a, b| if b <= a { self.coupling[a][b] } else { 0.0 })
    }

    pub fn gains(&self) -> Result<&GainConstants, CertifyError> {
        self.gain_dependent
            .as_ref()
            .ok_or_else(|| CertifyError::Input("constants were estimated without gains".into()))
    }
}

fn theta_norm(gains: &Gains, theta: &[f64]) -> f64 {
    gains.k.iter().zip(theta).map(|(k, t)| (k * t).powi(2)).sum::<f64>().sqrt()
}

impl SampleSet {
    fn max_over<F: Fn(&SampleRecord) -> f64>(&self, f: F) -> f64 {
        self.records.iter().map(f).fold(0.0, f64::max)
    }

    /// Sampled sup of ‖[∂_t u, D_q u]‖ with e anywhere in the outer tubes.
    ///
    /// ∂_t u = M(p̈ + Kṗ) and D_q u = (D_qM)r' − MKF_q with ‖r'‖ ≤ ‖ṗ'‖ + (Σk_a²θ_a²)^{1/2}.
    fn velocity_derivative(&self, rec: &SampleRecord, tr: &TimeRecord, k_diag: &Vector, tube: f64, mkf: f64) -> f64 {
        let dt = (&rec.solution_map * (&tr.p_ddot + k_diag.component_mul(&tr.p_dot_prime))).norm();
        let dq = rec.solution_map_lipschitz * (tr.p_dot_prime.norm() + tube) + mkf;
        dt.hypot(dq)
    }

    fn velocity_lipschitz_over<P: Fn(&SampleRecord, &TimeRecord) -> bool + Sync>(
        &self,
        gains: &Gains,
        dims: &[usize],
        theta: &[f64],
        keep: P,
    ) -> f64 {
        let k_diag = gains.expand(dims);
        let tube = theta_norm(gains, theta);
        let k_mat = Matrix::from_diagonal(&k_diag);
        self.records
            .par_iter()
            .map(|rec| {
                let mkf = spectral_norm(&(&rec.solution_map * &k_mat * &rec.f_q));
                self.times
                    .iter()
                    .filter(|tr| keep(rec, tr))
                    .map(|tr| self.velocity_derivative(rec, tr, &k_diag, tube, mkf))
                    .fold(0.0, f64::max)
            })
            .collect::<Vec<f64>>()
            .into_iter()
            .fold(0.0, f64::max)
    }

    pub fn constants(&self, problem: &Problem, gains: Option<&Gains>, safety: f64) -> ConstantsReport {
        let dims = problem.model.task_dims();
        let l = dims.len();
        let off = block_offsets(&dims);
        let s = safety;
        let omega = (0..l)
            .map(|a| self.records.iter().map(|r| r.omega[a]).fold(f64::INFINITY, f64::min) / s)
            .collect();
        let coupling = (0..l)
            .map(|a| (0..=a).map(|b| self.max_over(|r| r.block_norms[a][b]) * s).collect())
            .collect();
        let drift = (0..l)
            .map(|a| {
                let mut worst: f64 = 0.0;
                for rec in &self.records {
                    for tr in &self.times {
                        let pdp = split(&tr.p_dot_prime, &dims);
                        let mut v = pdp[a].clone();
                        for b in 0..=a {
                            v -= rec.coupling.view((off[a], off[b]), (dims[a], dims[b])) * &pdp[b];
                        }
                        worst = worst.max(v.norm());
                    }
                }
                worst * s
            })
            .collect();
        let feedforward = self.times.iter().map(|tr| tr.p_dot_prime.norm()).fold(0.0, f64::max) * s;
        let jacobian = self.max_over(|r| r.jacobian_norm) * s;
        let solution_map = self.max_over(|r| r.solution_map_norm) * s;
        let gain_dependent = gains.map(|g| {
            let velocity_bound = solution_map * (feedforward + theta_norm(g, &problem.region.theta));
            let velocity_lipschitz =
                self.velocity_lipschitz_over(g, &dims, &problem.region.theta, |_, _| true) * s;
            GainConstants { k: g.k.clone(), k_norm: g.norm(), velocity_bound, velocity_lipschitz }
        });
        ConstantsReport {
            safety,
            samples: self.records.len(),
            time_samples: self.times.len(),
            task_dims: dims.clone(),
            omega,
            coupling,
            drift,
            task_jacobian: (0..l).map(|a| self.max_over(|r| r.task_jacobian_norms[a]) * s).collect(),
            jacobian,
            solution_map,
            feedforward,
            coupling_norm: self.max_over(|r| r.coupling_norm) * s,
            factor: self.max_over(|r| r.factor_norm) * s,
            weight: self.weight_norm * s,
            precond_inverse: self.max_over(|r| r.precond_inverse_norm) * s,
            // F = [f_t, F_q] with f_t = 0
            forward_lipschitz: jacobian,
            jacobian_lipschitz: self.max_over(|r| r.jacobian_lipschitz) * s,
            solution_map_lipschitz: self.max_over(|r| r.solution_map_lipschitz) * s,
            jacobian_sigma_min: self.records.iter().map(|r| r.jacobian_sigma_min).fold(f64::INFINITY, f64::min) / s,
            envelope_integrals: (0..l).map(|a| problem.traj.psi_integral(a)).collect(),
            weighted_sigma_gap: self
                .records
                .iter()
                .flat_map(|r| r.weighted_sigma_gap.iter().copied())
                .fold(f64::INFINITY, f64::min),
            gain_dependent,
        }
    }

    /// L_T: the velocity Lipschitz bound restricted to samples within r_T = T·M_u of q0
    /// and times in [t0, t0 + T].
    #[allow(clippy::too_many_arguments)]
    pub fn tube_lipschitz(
        &self,
        problem: &Problem,
        gains: &Gains,
        q0: &Vector,
        horizon: f64,
        velocity_bound: f64,
        safety: f64,
    ) -> f64 {
        let r_t = horizon * velocity_bound;
        let t_end = problem.traj.t0 + horizon;
        self.velocity_lipschitz_over(gains, &problem.model.task_dims(), &problem.region.theta, |rec, tr| {
            tr.t <= t_end && (&rec.q - q0).norm() <= r_t
        }) * safety
    }

    /// Smallest over shell samples and sample times of max_b(‖f_b − p_b‖ − θ_b).
    /// Positive when no shell point maps into the product of the outer tubes.
    pub fn tube_shell_margin(&self, problem: &Problem) -> f64 {
        let dims = problem.model.task_dims();
        let t0 = problem.traj.t0;
        let images: Vec<Vector> = self.shell.iter().map(|q| problem.model.forward(t0, q)).collect();
        let mut margin = f64::INFINITY;
        for tr in &self.times {
            for f in &images {
                let gaps = split(&(&tr.p - f), &dims);
                let worst = gaps
                    .iter()
                    .zip(&problem.region.theta)
                    .map(|(g, th)| g.norm() - th)
                    .fold(f64::NEG_INFINITY, f64::max);
                margin = margin.min(worst);
            }
        }
        margin
    }
}

pub fn estimate_constants(
    problem: &Problem,
    gains: Option<&Gains>,
    sampling: &Sampling,
) -> Result<ConstantsReport, CertifyError> {
    let set = sample_problem(problem, sampling, &[])?;
    Ok(set.constants(problem, gains, sampling.safety))
}

// ── gains ──

/// Right-hand side of the gain condition k_a > (M_a + Σ_{b<a} k_bM_abθ_b)/(θ'_aω_a)
/// evaluated with the given lower-priority gains.
pub fn gain_lower_bounds(c: &ConstantsReport, theta: &[f64], theta_prime: &[f64], k: &[f64]) -> Vec<f64> {
    (0..c.l())
        .map(|a| {
            let cross: f64 = (0..a).map(|b| k[b] * c.coupling[a][b] * theta[b]).sum();
            (c.drift[a] + cross) / (theta_prime[a] * c.omega[a])
        })
        .collect()
}

/// Gains in priority order, each `(1 + margin)` times its lower bound or `k_floor`.
pub fn synthesize_gains(c: &ConstantsReport, theta: &[f64], theta_prime: &[f64], k_floor: f64, margin: f64) -> Gains {
    let mut k: Vec<f64> = Vec::with_capacity(c.l());
    for a in 0..c.l() {
        let cross: f64 = (0..a).map(|b| k[b] * c.coupling[a][b] * theta[b]).sum();
        let bound = (c.drift[a] + cross) / (theta_prime[a] * c.omega[a]);
        k.push(k_floor.max((1.0 + margin) * bound));
    }
    Gains { k }
}

/// Margin min_a(k_a − bound_a); positive iff the gain condition holds strictly.
pub fn gain_condition_margin(c: &ConstantsReport, theta: &[f64], theta_prime: &[f64], gains: &Gains) -> f64 {
    gain_lower_bounds(c, theta, theta_prime, &gains.k)
        .iter()
        .zip(&gains.k)
        .map(|(b, k)| k - b)
        .fold(f64::INFINITY, f64::min)
}

// ── step sizes ──

/// min_a k_aω_a(θ_a − θ'_a) / (M_{F_a}·L·(1 + M_u)).
pub fn step_bound(
    k: &[f64],
    omega: &[f64],
    theta: &[f64],
    theta_prime: &[f64],
    task_jacobian: &[f64],
    lipschitz: f64,
    velocity_bound: f64,
) -> f64 {
    (0..k.len())
        .map(|a| {
            k[a] * omega[a] * (theta[a] - theta_prime[a]) / (task_jacobian[a] * lipschitz * (1.0 + velocity_bound))
        })
        .fold(f64::INFINITY, f64::min)
}

/// η_∞ from the uniform Lipschitz constant L_u.
pub fn step_bound_uniform(c: &ConstantsReport, region: &RegionTheta) -> Result<f64, CertifyError> {
    let g = c.gains()?;
    Ok(step_bound(
        &g.k,
        &c.omega,
        &region.theta,
        &region.theta_prime,
        &c.task_jacobian,
        g.velocity_lipschitz,
        g.velocity_bound,
    ))
}

/// η_T from a Lipschitz constant L_T over the finite-horizon tube.
pub fn step_bound_finite(c: &ConstantsReport, region: &RegionTheta, tube_lipschitz: f64) -> Result<f64, CertifyError> {
    let g = c.gains()?;
    Ok(step_bound(
        &g.k,
        &c.omega,
        &region.theta,
        &region.theta_prime,
        &c.task_jacobian,
        tube_lipschitz,
        g.velocity_bound,
    ))
}

/// The constants the convergent-step and exponential-rate bounds depend on.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateInputs {
    pub k: Vec<f64>,
    pub omega: Vec<f64>,
    #[serde(serialize_with = "serialize_matrix")]
    pub coupling: Matrix,
    pub task_jacobian: Vec<f64>,
    pub solution_map: f64,
    pub jacobian: f64,
    pub coupling_norm: f64,
    pub solution_map_lipschitz: f64,
    pub velocity_bound: f64,
    pub eta_inf: f64,
}

impl RateInputs {
    pub fn from_constants(c: &ConstantsReport, eta_inf: f64) -> Result<Self, CertifyError> {
        let g = c.gains()?;
        Ok(Self {
            k: g.k.clone(),
            omega: c.omega.clone(),
            coupling: c.coupling_matrix(),
            task_jacobian: c.task_jacobian.clone(),
            solution_map: c.solution_map,
            jacobian: c.jacobian,
            coupling_norm: c.coupling_norm,
            solution_map_lipschitz: c.solution_map_lipschitz,
            velocity_bound: g.velocity_bound,
            eta_inf,
        })
    }

    pub fn l(&self) -> usize {
        self.k.len()
    }

    pub fn k_norm(&self) -> f64 {
        self.k.iter().copied().fold(0.0, f64::max)
    }

    fn rates(&self) -> Vec<f64> {
        self.k.iter().zip(&self.omega).map(|(k, w)| k * w).collect()
    }

    pub fn rho_max(&self) -> f64 {
        self.rates().into_iter().fold(0.0, f64::max)
    }

    pub fn rho_min(&self) -> f64 {
        self.rates().into_iter().fold(f64::INFINITY, f64::min)
    }

    /// N₁(η) = (L_M(1 + M_u) + M·M_A·K·e^{ρ_max η})K.
    pub fn n1(&self, eta: f64) -> f64 {
        let k = self.k_norm();
        (self.solution_map_lipschitz * (1.0 + self.velocity_bound)
            + self.solution_map * self.coupling_norm * k * (self.rho_max() * eta).exp())
            * k
    }

    /// N₂(η) = M·M_F·K·η·e^{ρ_max η}.
    pub fn n2(&self, eta: f64) -> f64 {
        self.solution_map * self.jacobian * self.k_norm() * eta * (self.rho_max() * eta).exp()
    }

    /// Unit lower-triangular Y with Y_ab = −M_ab k_b/(k_aω_a) below the diagonal.
    pub fn y(&self) -> Matrix {
        let l = self.l();
        Matrix::from_fn(l, l, |a, b| match a.cmp(&b) {
            std::cmp::Ordering::Equal => 1.0,
            std::cmp::Ordering::Greater => -self.coupling[(a, b)] * self.k[b] / (self.k[a] * self.omega[a]),
            std::cmp::Ordering::Less => 0.0,
        })
    }

    /// Z with every entry of row a equal to C₃M_{F_a}/(k_aω_a).
    pub fn z(&self, c3: f64) -> Matrix {
        let l = self.l();
        Matrix::from_fn(l, l, |a, _| c3 * self.task_jacobian[a] / (self.k[a] * self.omega[a]))
    }

    /// Z̃ = diag(1/(k_aω_a)).
    pub fn z_tilde(&self) -> Matrix {
        Matrix::from_diagonal(&Vector::from_iterator(self.l(), self.rates().into_iter().map(|r| 1.0 / r)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergentBound {
    /// Largest η ≤ η_∞ with N₂(η) ≤ 1.
    pub eta_star: f64,
    pub eta0_prime: f64,
    pub eta0: f64,
    pub n1: f64,
    pub n2: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    #[serde(serialize_with = "serialize_matrix")]
    pub y: Matrix,
    #[serde(serialize_with = "serialize_matrix")]
    pub z: Matrix,
    #[serde(serialize_with = "serialize_matrix")]
    pub x: Matrix,
    pub sr_y_inv_z: f64,
    pub x_is_m_matrix: bool,
}

/// η'₀, η₀ and the Y/Z/X matrices. Returns `Err(reason)` when no admissible step exists.
pub fn step_bound_convergent(inp: &RateInputs) -> Result<ConvergentBound, String> {
    if !(inp.eta_inf.is_finite() && inp.eta_inf > 0.0) {
        return Err(format!("eta_inf = {} is not a positive step", inp.eta_inf));
    }
    let eta_star = if inp.n2(inp.eta_inf) <= 1.0 {
        inp.eta_inf
    } else {
        // N₂ is increasing, so bisect for N₂(η) = 1.
        let (mut lo, mut hi) = (0.0, inp.eta_inf);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if inp.n2(mid) <= 1.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    };
    if !(eta_star > 0.0) {
        return Err("no step with N2(eta) <= 1".into());
    }
    let eta0_prime = BACKOFF * eta_star;
    let n1 = inp.n1(eta0_prime);
    let n2 = inp.n2(eta0_prime);
    let k = inp.k_norm();
    let c1 = (1.0 + k * (1.0 + inp.coupling_norm) * eta0_prime * (inp.rho_max() * eta0_prime).exp()) * inp.solution_map
        / (1.0 - n2);
    let c2 = inp.solution_map / (1.0 - n2);
    let c3 = n1 / (1.0 - n2);
    let y = inp.y();
    let z = inp.z(c3);
    let sr = plemmons_radius(&y, &z).map_err(|e| e.to_string())?;
    let eta0 = BACKOFF * eta0_prime.min(if sr > 0.0 { 1.0 / sr } else { f64::INFINITY });
    let x = &y - &z * eta0;
    let x_is_m_matrix = is_m_matrix(&x).map_err(|e| e.to_string())?.is_m_matrix;
    Ok(ConvergentBound {
        eta_star,
        eta0_prime,
        eta0,
        n1,
        n2,
        c1,
        c2,
        c3,
        y,
        z,
        x,
        sr_y_inv_z: sr,
        x_is_m_matrix,
    })
}

// ── exponential rates ──

/// Unit lower-triangular Φ with Φ_ab = Σ_{i=b}^{a−1} k_iM_aiΦ_ib/(k_aω_a − ρ).
pub fn phi_recursion(k: &[f64], omega: &[f64], coupling: &Matrix, rho: f64) -> Matrix {
    let l = k.len();
    let mut phi = Matrix::identity(l, l);
    for a in 1..l {
        let denom = k[a] * omega[a] - rho;
        for b in 0..a {
            let s: f64 = (b..a).map(|i| k[i] * coupling[(a, i)] * phi[(i, b)]).sum();
            phi[(a, b)] = s / denom;
        }
    }
    phi
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContinuousRate {
    pub rho: f64,
    #[serde(serialize_with = "serialize_matrix")]
    pub phi: Matrix,
    pub phi_norm: f64,
    /// m_C = Πω_a^{m_a/2}/(M_C^{m−1}M_L^{l/2}), a lower bound on σ_min(C).
    pub m_c: f64,
    /// ε = ½·m_C/(L_F M_R), inside the admissible interval.
    pub epsilon: f64,
    pub c_epsilon: f64,
    /// C_ε⁻¹L_f‖Φ‖.
    pub prefactor: f64,
}

pub fn sigma_min_bound(c: &ConstantsReport) -> f64 {
    let num: f64 = c.omega.iter().zip(&c.task_dims).map(|(w, d)| w.powf(*d as f64 / 2.0)).product();
    num / (c.factor.powi(c.m() as i32 - 1) * c.weight.powf(c.l() as f64 / 2.0))
}

/// Prefactor pieces shared by the continuous and discrete rates.
fn decay_constants(c: &ConstantsReport) -> (f64, f64, f64) {
    let m_c = sigma_min_bound(c);
    let epsilon = 0.5 * m_c / (c.jacobian_lipschitz * c.precond_inverse);
    let c_eps = m_c / c.precond_inverse - c.jacobian_lipschitz * epsilon;
    (m_c, epsilon, c_eps)
}

/// ρ defaults to `BACKOFF`·min k_aω_a.
pub fn exponential_certificate_continuous(
    c: &ConstantsReport,
    rho: Option<f64>,
) -> Result<ContinuousRate, CertifyError> {
    let g = c.gains()?;
    let rates: Vec<f64> = g.k.iter().zip(&c.omega).map(|(k, w)| k * w).collect();
    let rho_cap = rates.iter().copied().fold(f64::INFINITY, f64::min);
    let rho = rho.unwrap_or(BACKOFF * rho_cap);
    if !(rho > 0.0 && rho < rho_cap) {
        return Err(CertifyError::Input(format!("rate {rho} must lie in (0, {rho_cap})")));
    }
    let phi = phi_recursion(&g.k, &c.omega, &c.coupling_matrix(), rho);
    let phi_norm = spectral_norm(&phi);
    let (m_c, epsilon, c_epsilon) = decay_constants(c);
    Ok(ContinuousRate {
        rho,
        phi,
        phi_norm,
        m_c,
        epsilon,
        c_epsilon,
        prefactor: c.forward_lipschitz * phi_norm / c_epsilon,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiscreteRate {
    pub eta: f64,
    pub rho: f64,
    pub sr: f64,
    #[serde(serialize_with = "serialize_matrix")]
    pub z_tilde: Matrix,
    #[serde(serialize_with = "serialize_matrix")]
    pub x_tilde: Matrix,
    #[serde(serialize_with = "serialize_matrix")]
    pub phi_tilde: Matrix,
    pub x_tilde_is_m_matrix: bool,
    pub phi_tilde_norm: f64,
    pub prefactor: Option<f64>,
}

/// X̃ = Y − ηZ − ρZ̃ and Φ̃ = I + Z̃⁻¹(I − Y + ηZ)X̃⁻¹Z̃ given C₃. Errors when
/// sr(Y⁻¹(ηZ + ρZ̃)) ≥ 1.
pub fn exponential_certificate_discrete(inp: &RateInputs, c3: f64, eta: f64, rho: f64) -> Result<DiscreteRate, String> {
    let l = inp.l();
    if !(rho > 0.0 && rho < inp.rho_min()) {
        return Err(format!("rate {rho} must lie in (0, {})", inp.rho_min()));
    }
    let y = inp.y();
    let z = inp.z(c3);
    let zt = inp.z_tilde();
    let sr = plemmons_radius(&y, &(&z * eta + &zt * rho)).map_err(|e| e.to_string())?;
    if sr >= 1.0 {
        return Err(format!("sr(Y^-1(eta Z + rho Z~)) = {sr} >= 1"));
    }
    let x_tilde = &y - &z * eta - &zt * rho;
    let x_inv = x_tilde.clone().try_inverse().ok_or("X~ is singular")?;
    let zt_inv = Matrix::from_diagonal(&Vector::from_iterator(l, (0..l).map(|a| inp.k[a] * inp.omega[a])));
    let eye = Matrix::identity(l, l);
    let phi_tilde = &eye + &zt_inv * (&eye - &y + &z * eta) * x_inv * &zt;
    let x_tilde_is_m_matrix = is_m_matrix(&x_tilde).map_err(|e| e.to_string())?.is_m_matrix;
    let phi_tilde_norm = spectral_norm(&phi_tilde);
    Ok(DiscreteRate {
        eta,
        rho,
        sr,
        z_tilde: zt,
        x_tilde,
        phi_tilde,
        x_tilde_is_m_matrix,
        phi_tilde_norm,
        prefactor: None,
    })
}

/// Largest ρ with sr(Y⁻¹(ηZ + ρZ̃)) < 1 (by bisection), backed off by `BACKOFF`.
pub fn discrete_rate(inp: &RateInputs, c3: f64, eta: f64) -> Result<DiscreteRate, String> {
    let y = inp.y();
    let z = inp.z(c3);
    let zt = inp.z_tilde();
    let feasible = |rho: f64| {
        plemmons_radius(&y, &(&z * eta + &zt * rho)).map(|sr| sr < 1.0).unwrap_or(false)
    };
    let cap = inp.rho_min();
    if !feasible(0.0) {
        return Err("no positive discrete rate: sr(eta Y^-1 Z) >= 1".into());
    }
    let (mut lo, mut hi) = (0.0, cap);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if feasible(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    exponential_certificate_discrete(inp, c3, eta, BACKOFF * lo)
}

// ── preconditioning comparison ──

/// Limit of the preconditioned η_∞ bound as w → 0:
/// (θ−θ')/(M(M/m + 3θL√l/m²)(1 + θk√l/m)).
pub fn preconditioned_limit(theta: f64, theta_prime: f64, m_lo: f64, m_hi: f64, lip: f64, k: f64, l: usize) -> f64 {
    let sl = (l as f64).sqrt();
    (theta - theta_prime)
        / (m_hi * (m_hi / m_lo + 3.0 * theta * lip * sl / (m_lo * m_lo)) * (1.0 + theta * k * sl / m_lo))
}

/// Upper bound on the unpreconditioned η_∞:
/// (θ−θ')/(M(M/m + (1+√(2n))θL√l/m²)(1 + θ‖K‖√S/m)).
#[allow(clippy::too_many_arguments)]
pub fn unpreconditioned_bound(
    theta: f64,
    theta_prime: f64,
    m_lo: f64,
    m_hi: f64,
    lip: f64,
    k_norm: f64,
    l: usize,
    n: usize,
    s: f64,
) -> f64 {
    let sl = (l as f64).sqrt();
    (theta - theta_prime)
        / (m_hi
            * (m_hi / m_lo + (1.0 + (2.0 * n as f64).sqrt()) * theta * lip * sl / (m_lo * m_lo))
            * (1.0 + theta * k_norm * s.sqrt() / m_lo))
}

/// S = Σ_a(Σ_{b<a} M_ab)².
pub fn coupling_sum_square(c: &ConstantsReport) -> f64 {
    (0..c.l()).map(|a| (0..a).map(|b| c.coupling[a][b]).sum::<f64>().powi(2)).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PreconditionComparison {
    pub w: f64,
    pub eta_inf_preconditioned: f64,
    pub eta_inf_unpreconditioned: f64,
    pub gains_preconditioned: Vec<f64>,
    pub gains_unpreconditioned: Vec<f64>,
    pub m_theta_lower: f64,
    pub m_theta_upper: f64,
    pub l_theta: f64,
    pub coupling_sum_square: f64,
    pub preconditioned_limit: f64,
    pub unpreconditioned_bound: f64,
    pub preconditioned_wins: bool,
}

/// Certify the same region with and without preconditioning and evaluate the two closed forms.
pub fn precondition_comparison(
    problem: &Problem,
    w: f64,
    k_floor: f64,
    margin: f64,
    sampling: &Sampling,
) -> Result<(PreconditionComparison, Certificate, Certificate), CertifyError> {
    let opts = CertifyOptions { gains: GainChoice::Synthesize { k_floor, margin }, q0: None, horizon: None };
    let mut pre = problem.clone();
    pre.solver.w = Some(w);
    let mut raw = problem.clone();
    raw.solver.w = None;
    let cert_pre = certify(&pre, sampling, &opts)?;
    let cert_raw = certify(&raw, sampling, &opts)?;
    let c_raw = &cert_raw.constants;
    let theta = problem.region.theta.iter().copied().fold(f64::INFINITY, f64::min);
    let theta_prime = problem.region.theta_prime.iter().copied().fold(0.0, f64::max);
    let (m_lo, m_hi, lip) = (c_raw.jacobian_sigma_min, c_raw.jacobian, c_raw.jacobian_lipschitz);
    let k_pre = cert_pre.gains.k.iter().copied().fold(f64::INFINITY, f64::min);
    let s = coupling_sum_square(c_raw);
    let l = problem.model.l();
    let cmp = PreconditionComparison {
        w,
        eta_inf_preconditioned: cert_pre.eta_inf,
        eta_inf_unpreconditioned: cert_raw.eta_inf,
        gains_preconditioned: cert_pre.gains.k.clone(),
        gains_unpreconditioned: cert_raw.gains.k.clone(),
        m_theta_lower: m_lo,
        m_theta_upper: m_hi,
        l_theta: lip,
        coupling_sum_square: s,
        preconditioned_limit: preconditioned_limit(theta, theta_prime, m_lo, m_hi, lip, k_pre, l),
        unpreconditioned_bound: unpreconditioned_bound(
            theta,
            theta_prime,
            m_lo,
            m_hi,
            lip,
            cert_raw.gains.norm(),
            l,
            problem.model.n(),
            s,
        ),
        preconditioned_wins: cert_pre.eta_inf > cert_raw.eta_inf,
    };
    Ok((cmp, cert_pre, cert_raw))
}

// ── full certificate ──

#[derive(Debug, Clone, PartialEq)]
pub enum GainChoice {
    Fixed(Gains),
    Synthesize { k_floor: f64, margin: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CertifyOptions {
    pub gains: GainChoice,
    pub q0: Option<Vector>,
    /// Horizon T for the finite-horizon step bound.
    pub horizon: Option<f64>,
}

impl Default for CertifyOptions {
    fn default() -> Self {
        Self { gains: GainChoice::Synthesize { k_floor: 1.0, margin: DEFAULT_MARGIN }, q0: None, horizon: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssumptionFlag {
    pub name: String,
    pub holds: bool,
    /// Checked on samples rather than proven.
    pub sampled: bool,
    /// Whether a certificate requires it.
    pub required: bool,
    pub margin: Option<f64>,
}

impl AssumptionFlag {
    fn new(name: &str, holds: bool, sampled: bool, required: bool, margin: Option<f64>) -> Self {
        Self { name: name.into(), holds, sampled, required, margin }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Certificate {
    pub certified: bool,
    pub infeasible: Vec<String>,
    pub constants: ConstantsReport,
    pub gains: Gains,
    pub theta: Vec<f64>,
    pub theta_prime: Vec<f64>,
    pub horizon: Option<f64>,
    pub tube_lipschitz: Option<f64>,
    pub eta_t: Option<f64>,
    pub eta_inf: f64,
    pub convergent: Option<ConvergentBound>,
    pub continuous_rate: Option<ContinuousRate>,
    pub discrete_rate: Option<DiscreteRate>,
    pub tube_shell_margin: f64,
    pub flags: Vec<AssumptionFlag>,
}

impl Certificate {
    pub fn flag(&self, name: &str) -> Option<&AssumptionFlag> {
        self.flags.iter().find(|f| f.name == name)
    }

    pub fn eta0(&self) -> Option<f64> {
        self.convergent.as_ref().map(|c| c.eta0)
    }

    /// (1 + M_u)T(e^{TL_T} − 1)·η, the sup-distance bound between Euler and exact runs.
    pub fn euler_error_bound(&self, eta: f64) -> Option<f64> {
        let (t, l_t) = (self.horizon?, self.tube_lipschitz?);
        let m_u = self.constants.gain_dependent.as_ref()?.velocity_bound;
        Some((1.0 + m_u) * t * ((t * l_t).exp() - 1.0) * eta)
    }

    /// (1 + M_u)(e^{TL_T} − 1)·η, what Gronwall gives for e(t) ≤ ∫L_T((1 + M_u)η + e).
    /// Smaller than `euler_error_bound` exactly when T > 1.
    pub fn euler_error_bound_sharp(&self, eta: f64) -> Option<f64> {
        let (t, l_t) = (self.horizon?, self.tube_lipschitz?);
        let m_u = self.constants.gain_dependent.as_ref()?.velocity_bound;
        Some((1.0 + m_u) * ((t * l_t).exp() - 1.0) * eta)
    }
}

pub fn certify(problem: &Problem, sampling: &Sampling, opts: &CertifyOptions) -> Result<Certificate, CertifyError> {
    let region = &problem.region;
    let extra: Vec<Vector> = opts.q0.iter().cloned().collect();
    let set = sample_problem(problem, sampling, &extra)?;
    let base = set.constants(problem, None, sampling.safety);
    let gains = match &opts.gains {
        GainChoice::Fixed(g) => {
            if g.k.len() != problem.model.l() {
                return Err(CertifyError::Input(format!("{} gains for {} tasks", g.k.len(), problem.model.l())));
            }
            g.clone()
        }
        GainChoice::Synthesize { k_floor, margin } => {
            if !(*k_floor > 0.0 && *margin > 0.0) {
                return Err(CertifyError::Input("k_floor and margin must be positive".into()));
            }
            synthesize_gains(&base, &region.theta, &region.theta_prime, *k_floor, *margin)
        }
    };
    let constants = set.constants(problem, Some(&gains), sampling.safety);
    let g = constants.gains()?.clone();
    let mut infeasible = Vec::new();
    let mut flags = Vec::new();

    flags.push(AssumptionFlag::new("tube_radii_ordered", true, false, true, None));
    let omega_min = constants.omega.iter().copied().fold(f64::INFINITY, f64::min);
    flags.push(AssumptionFlag::new("nonsingular_region", omega_min > 0.0, true, true, Some(omega_min)));
    let gap = constants.weighted_sigma_gap;
    flags.push(AssumptionFlag::new("weighted_sigma_inequality", gap >= -1e-12, true, true, Some(gap)));
    let shell = set.tube_shell_margin(problem);
    flags.push(AssumptionFlag::new("tube_shell_separation", shell > 0.0, true, true, Some(shell)));
    let gain_margin = gain_condition_margin(&constants, &region.theta, &region.theta_prime, &gains);
    flags.push(AssumptionFlag::new("gain_lower_bound", gain_margin > 0.0, false, true, Some(gain_margin)));
    flags.push(AssumptionFlag::new("weight_bounded", true, false, true, None));
    let lipschitz_finite = [g.velocity_lipschitz, constants.solution_map_lipschitz, constants.jacobian_lipschitz]
        .iter()
        .all(|x| x.is_finite());
    flags.push(AssumptionFlag::new("lipschitz_bounds", lipschitz_finite, true, true, None));
    // settling trajectories have exponentially decaying envelopes
    flags.push(AssumptionFlag::new("envelope_integrable", true, false, false, None));
    flags.push(AssumptionFlag::new("envelope_monotone", true, false, false, None));
    let m_eq_n = problem.model.m() == problem.model.n();
    flags.push(AssumptionFlag::new("square_task_space", m_eq_n, false, false, None));
    let mut zero_start = false;
    if let Some(q0) = &opts.q0 {
        let phi0 = problem.task_errors(problem.traj.t0, q0);
        let margin = phi0
            .iter()
            .zip(&region.theta_prime)
            .map(|(p, tp)| tp - p)
            .fold(f64::INFINITY, f64::min);
        let inside = region.contains(q0);
        flags.push(AssumptionFlag::new("initial_condition", inside && margin > 0.0, false, true, Some(margin)));
        zero_start = phi0.iter().all(|p| *p <= 1e-12);
    }
    flags.push(AssumptionFlag::new(
        "zero_initial_error_set_point",
        zero_start && problem.traj.is_set_point(),
        false,
        false,
        None,
    ));

    let eta_inf = step_bound_uniform(&constants, region)?;
    if !(eta_inf > 0.0 && eta_inf.is_finite()) {
        infeasible.push(format!("uniform step bound eta_inf = {eta_inf}"));
    }
    let (tube_lipschitz, eta_t) = match (&opts.q0, opts.horizon) {
        (Some(q0), Some(h)) => {
            let l_t = set.tube_lipschitz(problem, &gains, q0, h, g.velocity_bound, sampling.safety);
            (Some(l_t), Some(step_bound_finite(&constants, region, l_t)?))
        }
        _ => (None, None),
    };
    let inputs = RateInputs::from_constants(&constants, eta_inf)?;
    let convergent = match step_bound_convergent(&inputs) {
        Ok(c) => Some(c),
        Err(reason) => {
            infeasible.push(format!("convergent step bound: {reason}"));
            None
        }
    };
    let continuous_rate = match exponential_certificate_continuous(&constants, None) {
        Ok(r) => Some(r),
        Err(e) => {
            infeasible.push(format!("continuous rate: {e}"));
            None
        }
    };
    let discrete_rate = convergent.as_ref().and_then(|cb| match discrete_rate(&inputs, cb.c3, cb.eta0) {
        Ok(mut r) => {
            let (_, _, c_eps) = decay_constants(&constants);
            r.prefactor = Some(constants.forward_lipschitz * r.phi_tilde_norm / c_eps);
            Some(r)
        }
        Err(reason) => {
            infeasible.push(format!("discrete rate: {reason}"));
            None
        }
    });
    for f in flags.iter().filter(|f| f.required && !f.holds) {
        infeasible.push(format!("assumption {} fails", f.name));
    }
    let certified = flags.iter().filter(|f| f.required).all(|f| f.holds) && eta_inf > 0.0 && eta_inf.is_finite();
    Ok(Certificate {
        certified,
        infeasible,
        constants,
        gains,
        theta: region.theta.clone(),
        theta_prime: region.theta_prime.clone(),
        horizon: opts.horizon,
        tube_lipschitz,
        eta_t,
        eta_inf,
        convergent,
        continuous_rate,
        discrete_rate,
        tube_shell_margin: shell,
        flags,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::chainmodel::TaskDef;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn report(omega: Vec<f64>, coupling: Vec<Vec<f64>>, drift: Vec<f64>, task_dims: Vec<usize>) -> ConstantsReport {
        let l = omega.len();
        ConstantsReport {
            safety: 1.0,
            samples: 1,
            time_samples: 1,
            task_dims,
            omega,
            coupling,
            drift,
            task_jacobian: vec![1.0; l],
            jacobian: 1.0,
            solution_map: 1.0,
            feedforward: 0.0,
            coupling_norm: 1.0,
            factor: 1.0,
            weight: 1.0,
            precond_inverse: 1.0,
            forward_lipschitz: 1.0,
            jacobian_lipschitz: 1.0,
            solution_map_lipschitz: 1.0,
            jacobian_sigma_min: 1.0,
            envelope_integrals: vec![0.0; l],
            weighted_sigma_gap: 0.0,
            gain_dependent: None,
        }
    }

    fn inputs(k: Vec<f64>, omega: Vec<f64>, coupling: Matrix, eta_inf: f64) -> RateInputs {
        let l = k.len();
        RateInputs {
            k,
            omega,
            coupling,
            task_jacobian: vec![1.0; l],
            solution_map: 1.0,
            jacobian: 1.0,
            coupling_norm: 1.0,
            solution_map_lipschitz: 1.0,
            velocity_bound: 1.0,
            eta_inf,
        }
    }

    fn sampling() -> Sampling {
        Sampling { grid_density: 3, halton: 16, seed: 1, safety: 1.0 }
    }

    fn two_link(lo: Vec<f64>, hi: Vec<f64>) -> Problem {
        let model = KinematicModel::new(vec![1.0, 1.0], vec![TaskDef::Point { link: 2 }]).unwrap();
        let region = RegionTheta::new(lo.clone(), hi.clone(), 0.1, vec![0.2], vec![0.1]).unwrap();
        let q = Vector::from_iterator(2, lo.iter().zip(&hi).map(|(a, b)| 0.5 * (a + b)));
        let traj = DesiredTrajectory::hold_at(&model, 0.0, &q);
        Problem::new(model, traj, region, Solver::default()).unwrap()
    }

    pub(crate) fn three_link() -> (Problem, Vector) {
        crate::scenarios::three_link()
    }

    #[test]
    fn identity_posture_task() {
        let model = KinematicModel::new(vec![1.0, 1.0], vec![TaskDef::Posture { joints: vec![1, 2] }]).unwrap();
        let region = RegionTheta::new(vec![-0.5, -0.5], vec![0.5, 0.5], 0.1, vec![0.2], vec![0.1]).unwrap();
        let traj = DesiredTrajectory::hold_at(&model, 0.0, &Vector::zeros(2));
        let p = Problem::new(model, traj, region, Solver::default()).unwrap();
        let c = estimate_constants(&p, None, &sampling()).unwrap();
        assert_abs_diff_eq!(c.omega[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c.coupling[0][0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c.jacobian_sigma_min, 1.0, epsilon = 1e-12);
        assert_eq!(c.drift, vec![0.0]);
    }

    #[test]
    fn two_link_regular_and_singular_boxes() {
        let ok = two_link(vec![-0.5, 0.6], vec![0.5, 2.4]);
        let c = estimate_constants(&ok, None, &sampling()).unwrap();
        assert!(c.omega[0] > 0.0);
        let bad = two_link(vec![-0.5, -0.5], vec![0.5, 0.5]);
        match estimate_constants(&bad, None, &sampling()) {
            Err(CertifyError::Singularity { task, .. }) => assert_eq!(task, 0),
            other => panic!("expected singularity, got {other:?}"),
        }
    }

    #[test]
    fn safety_factor_scales_constants() {
        let p = two_link(vec![-0.5, 0.6], vec![0.5, 2.4]);
        let s1 = estimate_constants(&p, None, &sampling()).unwrap();
        let s2 = estimate_constants(&p, None, &Sampling { safety: 2.0, ..sampling() }).unwrap();
        assert_abs_diff_eq!(s2.omega[0] * 2.0, s1.omega[0], epsilon = 1e-12);
        assert_abs_diff_eq!(s2.solution_map, 2.0 * s1.solution_map, epsilon = 1e-12);
        assert_abs_diff_eq!(s2.jacobian_lipschitz, 2.0 * s1.jacobian_lipschitz, epsilon = 1e-12);
    }

    #[test]
    fn gain_synthesis_examples() {
        let c = report(vec![1.0], vec![vec![1.0]], vec![0.0], vec![2]);
        assert_eq!(synthesize_gains(&c, &[0.2], &[0.1], 3.0, 0.1).k, vec![3.0]);

        let c = report(vec![1.0, 0.4], vec![vec![1.0], vec![0.5, 1.0]], vec![0.0, 0.0], vec![2, 2]);
        let b = gain_lower_bounds(&c, &[0.1, 0.1], &[0.05, 0.05], &[2.0, 0.0]);
        assert_abs_diff_eq!(b[1], 5.0, epsilon = 1e-12);
        let g = synthesize_gains(&c, &[0.1, 0.1], &[0.05, 0.05], 2.0, 0.1);
        assert_abs_diff_eq!(g.k[0], 2.0);
        assert_abs_diff_eq!(g.k[1], 5.5, epsilon = 1e-12);
    }

    #[test]
    fn gain_schedule_cross_check() {
        let (l, m, om, th, thp, k) = (5, 10usize, 0.6, 0.1, 0.05, 1.5);
        let mab = (m as f64 * (1.0 - om)).sqrt();
        let coupling = (0..l).map(|a| (0..=a).map(|b| if a == b { 1.0 } else { mab }).collect()).collect();
        let c = report(vec![om; l], coupling, vec![0.0; l], vec![2; l]);
        let g = synthesize_gains(&c, &vec![th; l], &vec![thp; l], k, 1e-9);
        let ratio = 1.0 + th * mab / (thp * om);
        for (a, ka) in g.k.iter().enumerate() {
            assert!(*ka <= k * ratio.powi(a as i32) * (1.0 + 1e-8), "k_{a} = {ka}");
        }
    }

    #[test]
    fn uniform_step_examples() {
        assert_abs_diff_eq!(step_bound(&[1.0], &[1.0], &[0.2], &[0.1], &[1.0], 1.0, 1.0), 0.05, epsilon = 1e-15);
        assert_eq!(step_bound(&[1.0], &[1.0], &[0.1], &[0.1], &[1.0], 1.0, 1.0), 0.0);
    }

    #[test]
    fn convergent_scalar_case() {
        let inp = inputs(vec![2.0], vec![0.5], Matrix::identity(1, 1), 0.05);
        let cb = step_bound_convergent(&inp).unwrap();
        assert_eq!(cb.y, Matrix::identity(1, 1));
        assert_abs_diff_eq!(cb.z[(0, 0)], cb.c3 / 1.0, epsilon = 1e-12);
        let expect = BACKOFF * cb.eta0_prime.min(1.0 / cb.c3);
        assert_abs_diff_eq!(cb.eta0, expect, epsilon = 1e-12);
        assert!(cb.x_is_m_matrix);
        assert!(cb.n2 < 1.0 && cb.eta0 <= inp.eta_inf);
    }

    #[test]
    fn convergent_bisects_when_n2_exceeds_one() {
        let mut inp = inputs(vec![2.0, 3.0], vec![0.5, 0.5], Matrix::identity(2, 2), 10.0);
        inp.solution_map = 5.0;
        let cb = step_bound_convergent(&inp).unwrap();
        assert!(cb.eta_star < 10.0);
        assert_abs_diff_eq!(inp.n2(cb.eta_star), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn rank_one_spectral_radius() {
        // Z = z·1ᵀ so the only nonzero eigenvalue of Y⁻¹Z is 1ᵀY⁻¹z
        let mut c = Matrix::zeros(3, 3);
        c[(1, 0)] = 0.7;
        c[(2, 0)] = 0.2;
        c[(2, 1)] = 1.1;
        let inp = inputs(vec![1.0, 2.0, 4.0], vec![0.9, 0.5, 0.3], c, 0.05);
        let cb = step_bound_convergent(&inp).unwrap();
        let z_col = cb.z.column(0).into_owned();
        let y_inv_z = cb.y.clone().try_inverse().unwrap() * z_col;
        assert_abs_diff_eq!(cb.sr_y_inv_z, y_inv_z.sum(), epsilon = 1e-9 * y_inv_z.sum());
    }

    fn phi_by_paths(k: &[f64], omega: &[f64], c: &Matrix, rho: f64, a: usize, b: usize) -> f64 {
        // sum over increasing chains b = i0 < i1 < ... < ir = a
        if a == b {
            return 1.0;
        }
        (b..a)
            .map(|i| phi_by_paths(k, omega, c, rho, i, b) * k[i] * c[(a, i)] / (k[a] * omega[a] - rho))
            .sum()
    }

    #[test]
    fn phi_small_cases() {
        let phi = phi_recursion(&[2.0], &[0.5], &Matrix::identity(1, 1), 0.5);
        assert_eq!(phi, Matrix::identity(1, 1));
        let mut c = Matrix::identity(2, 2);
        c[(1, 0)] = 0.3;
        let phi = phi_recursion(&[2.0, 3.0], &[0.5, 0.4], &c, 0.6);
        assert_abs_diff_eq!(phi[(1, 0)], 2.0 * 0.3 / (1.2 - 0.6), epsilon = 1e-15);
        assert_eq!(phi[(0, 1)], 0.0);
    }

    #[test]
    fn discrete_scalar_closed_form() {
        let inp = inputs(vec![2.0], vec![0.5], Matrix::identity(1, 1), 0.05);
        let (c3, eta, rho) = (3.0, 0.1, 0.2);
        let r = exponential_certificate_discrete(&inp, c3, eta, rho).unwrap();
        let x = 1.0 - eta * c3 - rho;
        assert_abs_diff_eq!(r.x_tilde[(0, 0)], x, epsilon = 1e-14);
        assert_abs_diff_eq!(r.phi_tilde[(0, 0)], 1.0 + eta * c3 / x, epsilon = 1e-13);
        assert!(r.x_tilde_is_m_matrix);
        assert!(exponential_certificate_discrete(&inp, c3, 0.3, 0.5).is_err());
    }

    #[test]
    fn discrete_phi_tends_to_identity() {
        let mut c = Matrix::zeros(2, 2);
        c[(1, 0)] = 0.8;
        let inp = inputs(vec![1.0, 2.0], vec![0.9, 0.5], c, 0.05);
        // with coupling the η, ρ → 0 limit is I + Z̃⁻¹(Y⁻¹ − I)Z̃, whose (2,1) entry is M₂₁/ω₁
        let r = exponential_certificate_discrete(&inp, 2.0, 1e-9, 1e-9).unwrap();
        assert_abs_diff_eq!(r.phi_tilde[(1, 0)], 0.8 / 0.9, epsilon = 1e-7);
        let free = inputs(vec![1.0, 2.0], vec![0.9, 0.5], Matrix::zeros(2, 2), 0.05);
        let r = exponential_certificate_discrete(&free, 2.0, 1e-9, 1e-9).unwrap();
        assert_abs_diff_eq!(r.phi_tilde, Matrix::identity(2, 2), epsilon = 1e-7);
        let d = discrete_rate(&inp, 2.0, 0.01).unwrap();
        assert!(d.rho > 0.0 && d.sr < 1.0 && d.x_tilde_is_m_matrix);
    }

    #[test]
    fn comparison_closed_forms() {
        let v = preconditioned_limit(0.1, 0.05, 0.5, 2.0, 3.0, 4.0, 3);
        let sl = 3f64.sqrt();
        let expect = 0.05 / (2.0 * (4.0 + 3.0 * 0.1 * 3.0 * sl / 0.25) * (1.0 + 0.1 * 4.0 * sl / 0.5));
        assert_abs_diff_eq!(v, expect, epsilon = 1e-15);
        let u = unpreconditioned_bound(0.1, 0.05, 0.5, 2.0, 3.0, 4.0, 3, 4, 2.0);
        let expect =
            0.05 / (2.0 * (4.0 + (1.0 + 8f64.sqrt()) * 0.1 * 3.0 * sl / 0.25) * (1.0 + 0.1 * 4.0 * 2f64.sqrt() / 0.5));
        assert_abs_diff_eq!(u, expect, epsilon = 1e-15);
        // well conditioned, single task, equal gain: the two bounds are close
        let (p, q) = (
            preconditioned_limit(0.1, 0.05, 1.0, 1.0, 1.0, 2.0, 1),
            unpreconditioned_bound(0.1, 0.05, 1.0, 1.0, 1.0, 2.0, 1, 2, 0.0),
        );
        assert!(p / q < 3.0 && q / p < 3.0);
    }

    #[test]
    fn three_link_certificate() {
        let (p, q0) = three_link();
        let opts = CertifyOptions { q0: Some(q0), horizon: Some(0.5), ..Default::default() };
        let cert = certify(&p, &Sampling { grid_density: 4, halton: 64, seed: 3, safety: 1.25 }, &opts).unwrap();
        assert!(cert.certified, "{:?}", cert.infeasible);
        let cb = cert.convergent.as_ref().unwrap();
        let eta_t = cert.eta_t.unwrap();
        assert!(cb.eta0 <= cert.eta_inf && cert.eta_inf <= eta_t);
        assert!(cert.flag("square_task_space").unwrap().holds);
        assert!(cert.flag("zero_initial_error_set_point").unwrap().holds);
        let rate = cert.continuous_rate.as_ref().unwrap();
        assert!(rate.c_epsilon > 0.0 && rate.prefactor.is_finite());
        let json = serde_json::to_value(&cert).unwrap();
        assert!(json["convergent"]["y"].is_array());
    }

    #[test]
    fn fixed_gains_below_bound_are_flagged() {
        let (p, q0) = three_link();
        let mut traj = p.traj.clone();
        // a moving target makes the drift constants nonzero
        let p_now = p.traj.p(0.0);
        traj.tasks[0] = TaskTrajectory::Settling {
            p0: vec![p_now[0], p_now[1]],
            p_inf: vec![p_now[0] + 0.01, p_now[1]],
            lambda: 1.0,
        };
        let p = Problem { traj, ..p };
        let opts = CertifyOptions { gains: GainChoice::Fixed(Gains { k: vec![1e-3, 1e-3] }), q0: Some(q0), horizon: None };
        let cert = certify(&p, &Sampling { grid_density: 3, halton: 8, seed: 0, safety: 1.25 }, &opts).unwrap();
        assert!(!cert.flag("gain_lower_bound").unwrap().holds);
        assert!(!cert.certified);
    }

    proptest! {
        #[test]
        fn synthesized_gains_satisfy_condition(
            omega in prop::collection::vec(0.05f64..1.0, 3),
            cpl in prop::collection::vec(0.0f64..2.0, 3),
            drift in prop::collection::vec(0.0f64..1.0, 3),
            floor in 0.1f64..5.0,
        ) {
            let coupling = vec![vec![1.0], vec![cpl[0], 1.0], vec![cpl[1], cpl[2], 1.0]];
            let c = report(omega, coupling, drift, vec![2, 2, 2]);
            let g = synthesize_gains(&c, &[0.2, 0.3, 0.1], &[0.1, 0.1, 0.05], floor, DEFAULT_MARGIN);
            prop_assert!(gain_condition_margin(&c, &[0.2, 0.3, 0.1], &[0.1, 0.1, 0.05], &g) > 0.0);
        }

        #[test]
        fn phi_matches_path_sum(
            k in prop::collection::vec(0.5f64..5.0, 3),
            omega in prop::collection::vec(0.1f64..1.0, 3),
            cpl in prop::collection::vec(0.0f64..2.0, 3),
            frac in 0.01f64..0.99,
        ) {
            let mut c = Matrix::identity(3, 3);
            c[(1, 0)] = cpl[0];
            c[(2, 0)] = cpl[1];
            c[(2, 1)] = cpl[2];
            let rho = frac * (0..3).map(|a| k[a] * omega[a]).fold(f64::INFINITY, f64::min);
            let phi = phi_recursion(&k, &omega, &c, rho);
            for a in 0..3 {
                for b in 0..3 {
                    let want = if b <= a { phi_by_paths(&k, &omega, &c, rho, a, b) } else { 0.0 };
                    prop_assert!((phi[(a, b)] - want).abs() <= 1e-12 * (1.0 + want.abs()));
                }
            }
            let zero = phi_recursion(&k, &omega, &Matrix::identity(3, 3), rho);
            prop_assert_eq!(zero, Matrix::identity(3, 3));
        }

        #[test]
        fn plemmons_equivalence(
            k in prop::collection::vec(0.5f64..5.0, 3),
            omega in prop::collection::vec(0.1f64..1.0, 3),
            cpl in prop::collection::vec(0.0f64..2.0, 3),
            eta in 0.0f64..2.0,
        ) {
            let mut c = Matrix::zeros(3, 3);
            c[(1, 0)] = cpl[0];
            c[(2, 0)] = cpl[1];
            c[(2, 1)] = cpl[2];
            let inp = inputs(k, omega, c, 0.05);
            let cb = step_bound_convergent(&inp).unwrap();
            prop_assert!(cb.x_is_m_matrix);
            let x = &cb.y - &cb.z * eta;
            let scaled = eta * cb.sr_y_inv_z;
            prop_assume!((scaled - 1.0).abs() > 1e-9);
            prop_assert_eq!(is_m_matrix(&x).unwrap().is_m_matrix, scaled < 1.0);
        }

        #[test]
        fn discrete_certificate_is_m_matrix(
            k in prop::collection::vec(0.5f64..5.0, 2),
            omega in prop::collection::vec(0.1f64..1.0, 2),
            cpl in 0.0f64..2.0,
            eta in 1e-4f64..0.05,
        ) {
            let mut c = Matrix::zeros(2, 2);
            c[(1, 0)] = cpl;
            let inp = inputs(k, omega, c, 0.05);
            if let Ok(r) = discrete_rate(&inp, 1.0, eta) {
                prop_assert!(r.x_tilde_is_m_matrix && r.sr < 1.0);
                prop_assert!(r.phi_tilde.iter().all(|x| x.is_finite() && *x >= 0.0));
            }
        }
    }
}
