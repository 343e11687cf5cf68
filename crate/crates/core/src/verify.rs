//! Seeded verification suites behind `pik verify`. Each suite exercises one module on
//! generated inputs and reports case/failure counts plus a few headline metrics; the
//! report contains no timings so that equal seeds give byte-identical output.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::certify::{
    certify, estimate_constants, precondition_comparison, step_bound_convergent, Certificate,
    CertifyOptions, GainChoice, Problem, RateInputs, Sampling, DEFAULT_SAFETY,
};
use crate::chainmodel::{KinematicModel, TaskDef};
use crate::matkit::{
    cholesky_upper, is_m_matrix, qr_prioritized, reverse_cholesky_lower, sigma_min, Matrix, Tensor3, Vector, DEFAULT_RANK_TOL,
};
use crate::precond::{
    block_norm_checks, damping_threshold, factor_derivatives, phi_l, phi_u, preconditioned_bounds, Preconditioner,
};
use crate::scenarios;
use crate::simlab::{
    envelope_check, euler_convergence_study, integrate_discrete, integrate_oracle, max_stable_step,
    perturbation_experiment, stability_radius, tube_and_convergence_report, Integrator, Partition, PerturbationSetup,
    Scenario, DEFAULT_CONVERGENCE_TOL,
};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteOutcome {
    pub id: String,
    pub name: String,
    pub module: String,
    pub passed: bool,
    pub cases: usize,
    pub failures: usize,
    pub metrics: BTreeMap<String, f64>,
    /// First few failure descriptions.
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub passed: bool,
    pub suites: Vec<SuiteOutcome>,
}

impl VerifyReport {
    /// Plain-text pass/fail matrix, one row per suite.
    pub fn matrix(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<4} {:<28} {:<10} {:>6} {:>8}  result", "id", "suite", "module", "cases", "failures");
        for s in &self.suites {
            let _ = writeln!(
                out,
                "{:<4} {:<28} {:<10} {:>6} {:>8}  {}",
                s.id,
                s.name,
                s.module,
                s.cases,
                s.failures,
                if s.passed { "PASS" } else { "FAIL" }
            );
        }
        let _ = writeln!(out, "overall: {}", if self.passed { "PASS" } else { "FAIL" });
        out
    }
}

/// Case counts per suite. `full()` is what the CLI and acceptance tests use.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Budget {
    pub factorizations: usize,
    pub preconditioner_cases: usize,
    pub derivative_configs: usize,
    pub perturbations_per_time: usize,
    pub m_matrix_cases: usize,
}

impl Budget {
    pub fn full() -> Self {
        Self {
            factorizations: 1000,
            preconditioner_cases: 1000,
            derivative_configs: 100,
            perturbations_per_time: 10,
            m_matrix_cases: 100,
        }
    }
}

struct Tally {
    outcome: SuiteOutcome,
}

impl Tally {
    fn new(id: &str, name: &str, module: &str) -> Self {
        Self {
            outcome: SuiteOutcome {
                id: id.into(),
                name: name.into(),
                module: module.into(),
                passed: false,
                cases: 0,
                failures: 0,
                metrics: BTreeMap::new(),
                notes: Vec::new(),
            },
        }
    }

    fn check(&mut self, ok: bool, what: impl FnOnce() -> String) {
        self.outcome.cases += 1;
        if !ok {
            self.outcome.failures += 1;
            if self.outcome.notes.len() < 5 {
                self.outcome.notes.push(what());
            }
        }
    }

    fn metric(&mut self, key: &str, value: f64) {
        self.outcome.metrics.insert(key.into(), value);
    }

    fn max_metric(&mut self, key: &str, value: f64) {
        let e = self.outcome.metrics.entry(key.into()).or_insert(f64::NEG_INFINITY);
        *e = e.max(value);
    }

    fn min_metric(&mut self, key: &str, value: f64) {
        let e = self.outcome.metrics.entry(key.into()).or_insert(f64::INFINITY);
        *e = e.min(value);
    }

    fn add(&mut self, key: &str, k: usize) {
        *self.outcome.metrics.entry(key.into()).or_insert(0.0) += k as f64;
    }

    fn count(&mut self, key: &str) {
        self.add(key, 1);
    }

    fn fail(&mut self, what: String) {
        self.check(false, || what);
    }

    fn finish(mut self) -> SuiteOutcome {
        self.outcome.passed = self.outcome.cases > 0 && self.outcome.failures == 0;
        self.outcome
    }
}

fn rng_for(seed: u64, suite: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ suite)
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// An m×n matrix, m ≤ n; when `deficient` one row is a combination of earlier rows
/// (or zero if it is the first). Returns the index of the dependent row.
fn random_wide(rng: &mut ChaCha8Rng, m: usize, n: usize, deficient: bool) -> (Matrix, Option<usize>) {
    let mut j = random_matrix(rng, m, n);
    if !deficient {
        return (j, None);
    }
    let r = rng.random_range(0..m);
    let mut row = nalgebra::RowDVector::zeros(n);
    for i in 0..r {
        row += j.row(i) * rng.random_range(-1.0..1.0);
    }
    j.set_row(r, &row);
    (j, Some(r))
}

pub fn verification_sampling(seed: u64) -> Sampling {
    Sampling { grid_density: 5, halton: 256, seed, safety: DEFAULT_SAFETY }
}

// ── S1: prioritized QR and Cholesky ──

pub fn suite_factorization(seed: u64, cases: usize) -> SuiteOutcome {
    let mut t = Tally::new("S1", "prioritized QR / Cholesky", "matkit");
    let mut rng = rng_for(seed, 1);
    for case in 0..cases {
        let n = rng.random_range(1..=12);
        let m = rng.random_range(1..=n);
        let deficient = case % 10 == 0;
        let (j, dep) = random_wide(&mut rng, m, n, deficient);
        t.count("matrices");
        if deficient {
            t.count("rank_deficient");
        }
        match qr_prioritized(&j, DEFAULT_RANK_TOL) {
            Ok(dec) => {
                let recon = (&dec.c * &dec.j_hat - &j).amax();
                let ortho = (&dec.j_hat * dec.j_hat.transpose() - Matrix::identity(m, m)).amax();
                t.max_metric("max_reconstruction", recon);
                t.max_metric("max_orthonormality", ortho);
                let triangular = (0..m).all(|i| (i + 1..m).all(|k| dec.c[(i, k)] == 0.0));
                let diag_ok = (0..m).all(|i| dec.c[(i, i)] >= 0.0);
                let dep_ok = match dep {
                    Some(r) => dec.dependent[r] && (0..m).all(|i| dec.c[(i, r)] == 0.0),
                    None => dec.dependent.iter().all(|d| !d),
                };
                t.check(recon <= 1e-10 && ortho <= 1e-10 && triangular && diag_ok && dep_ok, || {
                    format!(
                        "case {case} ({m}x{n}): recon {recon:e}, ortho {ortho:e}, tri {triangular}, diag {diag_ok}, dependent {dep_ok}"
                    )
                });
            }
            Err(e) => t.fail(format!("case {case}: {e}")),
        }

        let a = random_matrix(&mut rng, n, n);
        let g = a.transpose() * &a + Matrix::identity(n, n) * 0.1;
        let g = (&g + g.transpose()) * 0.5;
        match (cholesky_upper(&g), reverse_cholesky_lower(&g)) {
            (Ok(r), Ok(c)) => {
                let up = (r.transpose() * &r - &g).amax();
                let lo = (c.transpose() * &c - &g).amax();
                t.max_metric("max_cholesky_roundtrip", up.max(lo));
                let shape = (0..n).all(|i| {
                    r[(i, i)] > 0.0 && c[(i, i)] > 0.0 && (0..i).all(|k| r[(i, k)] == 0.0 && c[(k, i)] == 0.0)
                });
                t.check(up <= 1e-10 && lo <= 1e-10 && shape, || {
                    format!("case {case}: cholesky round trips {up:e} / {lo:e}, triangular {shape}")
                });
            }
            (r, c) => t.fail(format!("case {case}: cholesky failed {:?} {:?}", r.err(), c.err())),
        }
    }
    t.finish()
}

// ── S2: preconditioner bounds ──

pub fn suite_preconditioner(seed: u64, cases: usize) -> SuiteOutcome {
    let mut t = Tally::new("S2", "preconditioner bounds", "precond");
    let mut rng = rng_for(seed, 2);
    for case in 0..cases {
        let n = rng.random_range(1..=8);
        let m = rng.random_range(1..=n);
        let deficient = case % 10 == 0;
        let (j, _) = random_wide(&mut rng, m, n, deficient);
        t.count("matrices");
        let w = 10f64.powf(rng.random_range(-2.0..1.0));
        match preconditioned_bounds(&j, w, DEFAULT_RANK_TOL) {
            Ok(b) => {
                let gap = (&b.c - &b.c_formula).amax();
                let norms = block_norm_checks(&b.c);
                t.max_metric("max_bound_violation", b.max_violation);
                t.max_metric("max_identity_gap", gap);
                t.max_metric("max_block_spectral", norms.max_spectral);
                t.check(b.holds(1e-9) && gap <= 1e-8 && norms.holds(), || {
                    format!("case {case} ({m}x{n}, w={w:e}): violation {:e}, gap {gap:e}, norms {}", b.max_violation, norms.holds())
                });
            }
            Err(e) => t.fail(format!("case {case}: {e}")),
        }
        if deficient {
            continue;
        }
        // Below the damping threshold both the diagonal and dn(C) are ε-close to 1.
        let m_omega = sigma_min(&j);
        for eps in [0.1, 0.01, 0.001] {
            let w = 0.999 * damping_threshold(m_omega, eps);
            match preconditioned_bounds(&j, w, DEFAULT_RANK_TOL) {
                Ok(b) => {
                    let diag = b.c_diag.iter().map(|c| (1.0 - c * c).abs()).fold(0.0, f64::max);
                    let dn = b.dn_c.map(|d| (1.0 - d).abs()).unwrap_or(f64::INFINITY);
                    t.max_metric("max_threshold_ratio", diag.max(dn) / eps);
                    t.check(diag < eps && dn < eps, || {
                        format!("case {case} eps {eps}: |1-c_aa^2| {diag:e}, |1-dn| {dn:e}")
                    });
                }
                Err(e) => t.fail(format!("case {case} eps {eps}: {e}")),
            }
        }
    }
    t.finish()
}

// ── S3: analytic factor derivatives against finite differences ──

fn derivative_chain() -> KinematicModel {
    KinematicModel::new(vec![1.0, 0.8, 0.6], vec![TaskDef::Point { link: 3 }, TaskDef::Posture { joints: vec![1] }])
        .expect("valid chain")
}

struct Factors {
    r_inv: Matrix,
    c: Matrix,
    j_hat: Matrix,
}

fn factors_at(model: &KinematicModel, q: &Vector, w: Option<f64>) -> Option<Factors> {
    let f_q = model.jacobian(0.0, q);
    let (j, r_inv) = match w {
        Some(w) => {
            let pre = Preconditioner::build(&f_q, w).ok()?;
            (pre.apply(&f_q), pre.r_inv)
        }
        None => (f_q.clone(), Matrix::identity(f_q.ncols(), f_q.ncols())),
    };
    let dec = qr_prioritized(&j, DEFAULT_RANK_TOL).ok()?;
    Some(Factors { r_inv, c: dec.c, j_hat: dec.j_hat })
}

/// Central differences of (R⁻¹, C, Ĵ), one slice per joint.
fn finite_differences(model: &KinematicModel, q: &Vector, w: Option<f64>, h: f64) -> Option<[Tensor3; 3]> {
    let n = q.len();
    let mut slices: [Vec<Matrix>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for k in 0..n {
        let mut qp = q.clone();
        let mut qm = q.clone();
        qp[k] += h;
        qm[k] -= h;
        let (p, m) = (factors_at(model, &qp, w)?, factors_at(model, &qm, w)?);
        slices[0].push((&p.r_inv - &m.r_inv) / (2.0 * h));
        slices[1].push((&p.c - &m.c) / (2.0 * h));
        slices[2].push((&p.j_hat - &m.j_hat) / (2.0 * h));
    }
    let [a, b, c] = slices;
    Some([Tensor3::from_slices(a).ok()?, Tensor3::from_slices(b).ok()?, Tensor3::from_slices(c).ok()?])
}

fn relative_error(analytic: &Tensor3, fd: &Tensor3) -> f64 {
    analytic.sub(fd).frobenius() / fd.frobenius().max(1e-8)
}

pub fn suite_derivatives(seed: u64, configs: usize) -> SuiteOutcome {
    let mut t = Tally::new("S3", "factor derivatives", "precond");
    let mut rng = rng_for(seed, 3);
    let model = derivative_chain();
    let h = 1e-5;
    let mut done = 0;
    while done < configs {
        let q = Vector::from_iterator(3, (0..3).map(|_| rng.random_range(-2.5..2.5)));
        let f_q = model.jacobian(0.0, &q);
        if sigma_min(&f_q) < 0.05 {
            continue;
        }
        done += 1;
        t.count("configurations");
        let d_f_q = model.jacobian_derivative(0.0, &q);
        for w in [Some(0.1), Some(1.0), None] {
            let label = w.map_or("raw".to_string(), |w| format!("w={w}"));
            let (Ok(an), Some(fd)) =
                (factor_derivatives(&f_q, &d_f_q, w, DEFAULT_RANK_TOL), finite_differences(&model, &q, w, h))
            else {
                t.fail(format!("q = {:?} ({label}): factorization failed", q.as_slice()));
                continue;
            };
            let errs = [
                if w.is_some() { relative_error(&an.d_r_inv, &fd[0]) } else { an.d_r_inv.frobenius() },
                relative_error(&an.d_c, &fd[1]),
                relative_error(&an.d_j_hat, &fd[2]),
            ];
            let worst = errs.iter().copied().fold(0.0, f64::max);
            t.max_metric("max_relative_error", worst);
            t.check(worst <= 1e-4, || format!("q = {:?} ({label}): relative errors {errs:?}", q.as_slice()));
        }
        // Φ_u + Φ_l is the identity map, exactly.
        let tens = Tensor3::from_slices((0..3).map(|_| random_matrix(&mut rng, 4, 4)).collect()).expect("finite");
        let sum = phi_u(&tens).add(&phi_l(&tens));
        t.check(sum == tens, || "phi_u + phi_l differs from the identity".into());
    }
    t.finish()
}

// ── S4–S6: simulations on the three-link scenario ──

/// A start inside the inner tubes: q_ref shifted along a random direction until
/// max_a φ_a/θ'_a is about `fraction`.
pub fn start_inside(problem: &Problem, q_ref: &Vector, fraction: f64, rng: &mut ChaCha8Rng) -> Vector {
    let n = q_ref.len();
    let dir = Vector::from_iterator(n, (0..n).map(|_| rng.random_range(-1.0..1.0))).normalize();
    let t0 = problem.traj.t0;
    let ratio = |s: f64| {
        let q = q_ref + &dir * s;
        problem.task_errors(t0, &q).iter().zip(&problem.region.theta_prime).map(|(p, tp)| p / tp).fold(0.0, f64::max)
    };
    let mut s = 1e-3;
    while ratio(s) < fraction && s < 1.0 {
        s *= 1.05;
    }
    while (ratio(s) > fraction || !problem.region.contains(&(q_ref + &dir * s))) && s > 1e-9 {
        s *= 0.95;
    }
    q_ref + dir * s
}

fn certify_three_link(
    problem: &Problem,
    seed: u64,
    q0: &Vector,
    horizon: Option<f64>,
) -> Result<Certificate, String> {
    let opts = CertifyOptions {
        gains: GainChoice::Synthesize { k_floor: 4.0, margin: 0.1 },
        q0: Some(q0.clone()),
        horizon,
    };
    let cert = certify(problem, &verification_sampling(seed), &opts).map_err(|e| e.to_string())?;
    if !cert.certified {
        return Err(format!("not certified: {:?}", cert.infeasible));
    }
    Ok(cert)
}

pub const CONTAINMENT_HORIZON: f64 = 30.0;

pub fn suite_containment(seed: u64) -> SuiteOutcome {
    let mut t = Tally::new("S4", "tube containment", "simlab");
    let (problem, q_ref) = scenarios::three_link();
    let mut rng = rng_for(seed, 4);
    let q_start = start_inside(&problem, &q_ref, 0.6, &mut rng);
    let cert = match certify_three_link(&problem, seed, &q_start, None) {
        Ok(c) => c,
        Err(e) => {
            t.fail(e);
            return t.finish();
        }
    };
    t.metric("eta_inf", cert.eta_inf);
    let scenario = Scenario::new(problem.clone(), cert.gains.clone()).expect("gains match tasks");
    let t0 = problem.traj.t0;
    let eta = 0.5 * cert.eta_inf;
    let runs = [
        ("discrete", Partition::uniform(t0, eta, CONTAINMENT_HORIZON).and_then(|p| integrate_discrete(&scenario, &q_start, &p))),
        ("oracle", integrate_oracle(&scenario, &q_start, t0, CONTAINMENT_HORIZON, None)),
    ];
    for (label, run) in runs {
        let traj = match run {
            Ok(tr) => tr,
            Err(e) => {
                t.fail(format!("{label}: {e}"));
                continue;
            }
        };
        let rep = tube_and_convergence_report(&traj, &cert.theta, &cert.theta_prime, DEFAULT_CONVERGENCE_TOL);
        let inner = rep.max_phi.iter().zip(&cert.theta_prime).map(|(p, tp)| p / tp).fold(0.0, f64::max);
        t.metric(&format!("{label}_max_phi_over_theta_prime"), inner);
        t.metric(&format!("{label}_final_phi"), rep.final_phi.iter().copied().fold(0.0, f64::max));
        t.metric(&format!("{label}_tail_variation"), rep.tail_variation);
        t.check(traj.initial_condition_ok, || format!("{label}: start outside the inner tubes"));
        t.check(rep.contained_inner, || format!("{label}: left the inner tubes, max phi {:?}", rep.max_phi));
        t.check(rep.contained_outer, || format!("{label}: left the outer tubes at {:?}", rep.exit_time));
        t.check(rep.converged, || {
            format!("{label}: not converged, final phi {:?}, tail {:e}", rep.final_phi, rep.tail_variation)
        });
        if label == "oracle" {
            match envelope_check(&scenario, &traj, &cert.constants.omega) {
                Ok(env) => {
                    let worst = env.max_excess.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    t.metric("envelope_max_excess", worst);
                    t.check(worst <= 1e-9, || format!("envelope exceeded by {worst:e}"));
                }
                Err(e) => t.fail(format!("envelope: {e}")),
            }
        }
    }
    t.finish()
}

/// The printed Gronwall bound carries a factor T that the sharp bound lacks, so it is
/// only meaningful once T is not tiny; at T = 0.01 it undercuts the observed error.
pub const ORDER_HORIZON: f64 = 0.05;

pub fn suite_euler_order(seed: u64) -> SuiteOutcome {
    let mut t = Tally::new("S5", "Euler first-order error", "simlab");
    let (problem, q_ref) = scenarios::three_link();
    let mut rng = rng_for(seed, 5);
    let q_start = start_inside(&problem, &q_ref, 0.6, &mut rng);
    let cert = match certify_three_link(&problem, seed, &q_start, Some(ORDER_HORIZON)) {
        Ok(c) => c,
        Err(e) => {
            t.fail(e);
            return t.finish();
        }
    };
    let scenario = Scenario::new(problem, cert.gains.clone()).expect("gains match tasks");
    let steps: Vec<f64> = (1..=6).map(|i| cert.eta_inf / f64::powi(2.0, i)).collect();
    let study = match euler_convergence_study(&scenario, &q_start, ORDER_HORIZON, &steps, None) {
        Ok(s) => s,
        Err(e) => {
            t.fail(e.to_string());
            return t.finish();
        }
    };
    let slope = study.slope.unwrap_or(f64::NAN);
    t.metric("slope", slope);
    t.metric("eta_inf", cert.eta_inf);
    t.metric("eta_t", cert.eta_t.unwrap_or(f64::NAN));
    t.check((slope - 1.0).abs() <= 0.15, || format!("fitted slope {slope}"));
    for row in &study.rows {
        let bound = cert.euler_error_bound(row.eta).unwrap_or(f64::NAN);
        let sharp = cert.euler_error_bound_sharp(row.eta).unwrap_or(f64::NAN);
        t.max_metric("max_error_over_bound", row.sup_error / bound);
        t.max_metric("max_error_over_sharp_bound", row.sup_error / sharp);
        t.check(row.sup_error <= bound, || format!("eta {:e}: error {:e} above bound {bound:e}", row.eta, row.sup_error));
    }
    t.finish()
}

pub const PERTURBATION_TIMES: [f64; 5] = [0.0, 2.5, 5.0, 7.5, 10.0];

pub fn suite_exponential(seed: u64, per_time: usize) -> SuiteOutcome {
    let mut t = Tally::new("S6", "exponential stability", "simlab");
    let (problem, q_ref) = scenarios::three_link();
    let cert = match certify_three_link(&problem, seed, &q_ref, None) {
        Ok(c) => c,
        Err(e) => {
            t.fail(e);
            return t.finish();
        }
    };
    let (Some(cont), Some(disc)) = (&cert.continuous_rate, &cert.discrete_rate) else {
        t.fail(format!("no exponential certificate: {:?}", cert.infeasible));
        return t.finish();
    };
    let zero_start = cert.flag("zero_initial_error_set_point").is_some_and(|f| f.holds);
    t.check(zero_start, || "start is not a zero-error set-point".into());
    let scenario = Scenario::new(problem.clone(), cert.gains.clone()).expect("gains match tasks");
    let t0 = problem.traj.t0;
    let t_last = PERTURBATION_TIMES[PERTURBATION_TIMES.len() - 1];
    let base = match integrate_oracle(&scenario, &q_ref, t0, t_last + 1.0, Some(1e-2)) {
        Ok(b) => b,
        Err(e) => {
            t.fail(e.to_string());
            return t.finish();
        }
    };
    let delta = 0.5 * stability_radius(&cert.theta_prime, &base.max_phi(), cert.constants.forward_lipschitz);
    // long enough for the deviation to fall about nine decades at the certified rate
    let horizon = (delta / 1e-9).ln() / cont.rho;
    let prefactor = disc.prefactor.unwrap_or(f64::NAN);
    t.metric("delta", delta);
    t.metric("rho", cont.rho);
    t.metric("certified_prefactor", cont.prefactor);
    t.metric("rho_discrete", disc.rho);
    t.metric("certified_prefactor_discrete", prefactor);
    for (i, t1) in PERTURBATION_TIMES.iter().enumerate() {
        let setup = PerturbationSetup {
            t1: *t1,
            delta,
            count: per_time,
            seed: seed.wrapping_add(i as u64),
            horizon,
            integrator: Integrator::Oracle { fine_step: 2e-3 },
            reference_step: 2e-3,
            rho: cont.rho,
        };
        match perturbation_experiment(&scenario, &base, &setup) {
            Ok(rep) => {
                t.add("perturbations", rep.runs.len());
                let rate = rep.min_rate().unwrap_or(f64::NAN);
                t.min_metric("min_fitted_rate", rate);
                t.max_metric("max_observed_prefactor", rep.max_prefactor());
                t.check(rep.all_decay(), || format!("t1 = {t1}: a perturbation did not decay"));
                t.check(rate >= 0.95 * cont.rho, || format!("t1 = {t1}: fitted rate {rate} < 0.95 rho"));
                t.check(rep.max_prefactor() <= cont.prefactor, || {
                    format!("t1 = {t1}: prefactor {} above {}", rep.max_prefactor(), cont.prefactor)
                });
            }
            Err(e) => t.fail(format!("t1 = {t1}: {e}")),
        }
    }
    // The Euler-hold loop at the certified convergent step, against the discrete bound.
    let setup = PerturbationSetup {
        t1: t0,
        delta,
        count: per_time.min(5),
        seed,
        horizon: 10.0,
        integrator: Integrator::Euler { eta: disc.eta },
        reference_step: 1e-2,
        rho: disc.rho,
    };
    match perturbation_experiment(&scenario, &base, &setup) {
        Ok(rep) => {
            t.metric("max_observed_prefactor_discrete", rep.max_prefactor());
            t.check(rep.all_decay(), || "discrete: a perturbation did not decay".into());
            t.check(rep.max_prefactor() <= prefactor, || {
                format!("discrete prefactor {} above {prefactor}", rep.max_prefactor())
            });
        }
        Err(e) => t.fail(format!("discrete: {e}")),
    }
    t.finish()
}

// ── S7: M-matrix and spectral radius agreement ──

pub fn random_rate_inputs(rng: &mut ChaCha8Rng) -> RateInputs {
    let l = rng.random_range(1..=4);
    let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
    let k: Vec<f64> = (0..l).map(|_| u(0.5, 5.0)).collect();
    let omega: Vec<f64> = (0..l).map(|_| u(0.05, 1.0)).collect();
    let task_jacobian: Vec<f64> = (0..l).map(|_| u(0.5, 3.0)).collect();
    let mut coupling = Matrix::zeros(l, l);
    for a in 0..l {
        for b in 0..=a {
            coupling[(a, b)] = if a == b { u(0.5, 2.0) } else { u(0.0, 2.0) };
        }
    }
    RateInputs {
        k,
        omega,
        coupling,
        task_jacobian,
        solution_map: u(0.5, 3.0),
        jacobian: u(0.5, 3.0),
        coupling_norm: u(0.5, 3.0),
        solution_map_lipschitz: u(0.1, 3.0),
        velocity_bound: u(0.0, 5.0),
        eta_inf: 10f64.powf(u(-4.0, -1.0)),
    }
}

pub fn suite_m_matrix(seed: u64, cases: usize) -> SuiteOutcome {
    let mut t = Tally::new("S7", "M-matrix characterization", "certify");
    let mut rng = rng_for(seed, 7);
    let mut disagreements = 0usize;
    for case in 0..cases {
        let inp = random_rate_inputs(&mut rng);
        t.count("certificates");
        let cb = match step_bound_convergent(&inp) {
            Ok(cb) => cb,
            Err(e) => {
                t.fail(format!("case {case}: {e}"));
                continue;
            }
        };
        t.check(cb.x_is_m_matrix, || format!("case {case}: X at eta0 is not an M-matrix"));
        let sr = cb.sr_y_inv_z;
        let mut etas = vec![cb.eta0];
        if sr > 0.0 {
            etas.extend([0.5, 0.99, 1.01, 2.0].iter().map(|f| f / sr));
        }
        for eta in etas {
            match is_m_matrix(&(&cb.y - &cb.z * eta)) {
                Ok(w) => {
                    let m = w.is_m_matrix;
                    let agree = m == (eta * sr < 1.0);
                    if !agree {
                        disagreements += 1;
                    }
                    t.check(agree, || format!("case {case}: eta*sr = {} but M-matrix = {m}", eta * sr));
                }
                Err(e) => t.fail(format!("case {case}: {e}")),
            }
        }
    }
    t.metric("disagreements", disagreements as f64);
    t.finish()
}

// ── S8: preconditioned versus unpreconditioned step bounds ──

pub const CONDITIONING_THRESHOLD: f64 = 50.0;
pub const STABILITY_STEPS: usize = 2000;

pub fn suite_preconditioning(seed: u64) -> SuiteOutcome {
    let mut t = Tally::new("S8", "preconditioning advantage", "certify");
    let (problem, q_ref) = scenarios::ill_conditioned_chain();
    let sampling = Sampling { grid_density: 3, halton: 64, ..verification_sampling(seed) };
    let raw = match estimate_constants(&problem, None, &sampling) {
        Ok(c) => c,
        Err(e) => {
            t.fail(e.to_string());
            return t.finish();
        }
    };
    // the reported constants carry the safety factor on both ends
    let sampled_ratio = raw.jacobian / raw.jacobian_sigma_min / sampling.safety.powi(2);
    t.metric("sampled_condition_ratio", sampled_ratio);
    t.check(sampled_ratio >= CONDITIONING_THRESHOLD, || format!("condition ratio {sampled_ratio} below threshold"));
    let w = 0.1 * raw.jacobian_sigma_min;
    let (cmp, pre, unpre) = match precondition_comparison(&problem, w, 1.0, 0.1, &sampling) {
        Ok(r) => r,
        Err(e) => {
            t.fail(e.to_string());
            return t.finish();
        }
    };
    t.metric("w", w);
    t.metric("eta_inf_preconditioned", cmp.eta_inf_preconditioned);
    t.metric("eta_inf_unpreconditioned", cmp.eta_inf_unpreconditioned);
    t.metric("preconditioned_limit", cmp.preconditioned_limit);
    t.metric("unpreconditioned_bound", cmp.unpreconditioned_bound);
    t.check(pre.certified && unpre.certified, || {
        format!("certification failed: {:?} / {:?}", pre.infeasible, unpre.infeasible)
    });
    t.check(cmp.eta_inf_preconditioned > cmp.eta_inf_unpreconditioned, || {
        format!("preconditioned {} not above {}", cmp.eta_inf_preconditioned, cmp.eta_inf_unpreconditioned)
    });

    // Closed forms recomputed from the raw ingredients.
    let theta = problem.region.theta.iter().copied().fold(f64::INFINITY, f64::min);
    let theta_p = problem.region.theta_prime.iter().copied().fold(0.0, f64::max);
    let (m, big_m, lip) = (cmp.m_theta_lower, cmp.m_theta_upper, cmp.l_theta);
    let l = problem.model.l() as f64;
    let n = problem.model.n() as f64;
    let k = pre.gains.k.iter().copied().fold(f64::INFINITY, f64::min);
    let k_norm = unpre.gains.k.iter().copied().fold(0.0, f64::max);
    let c = &unpre.constants.coupling;
    let s: f64 = (0..c.len()).map(|a| c[a][..a].iter().sum::<f64>().powi(2)).sum();
    let limit = (theta - theta_p)
        / (big_m * (big_m / m + 3.0 * theta * lip * l.sqrt() / (m * m)) * (1.0 + theta * k * l.sqrt() / m));
    let bound = (theta - theta_p)
        / (big_m
            * (big_m / m + (1.0 + (2.0 * n).sqrt()) * theta * lip * l.sqrt() / (m * m))
            * (1.0 + theta * k_norm * s.sqrt() / m));
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(f64::MIN_POSITIVE);
    t.check(rel(cmp.preconditioned_limit, limit) <= 1e-9, || {
        format!("preconditioned limit {} vs {limit}", cmp.preconditioned_limit)
    });
    t.check(rel(cmp.unpreconditioned_bound, bound) <= 1e-9, || {
        format!("unpreconditioned bound {} vs {bound}", cmp.unpreconditioned_bound)
    });
    t.metric("closed_form_ratio", limit / bound);

    // Empirical: the largest step each pipeline tolerates with its own gains.
    let mut rng = rng_for(seed, 8);
    let q_start = start_inside(&problem, &q_ref, 0.5, &mut rng);
    let mut largest = [0.0; 2];
    for (i, (cert, damping)) in [(&pre, Some(w)), (&unpre, None)].into_iter().enumerate() {
        let mut p = problem.clone();
        p.solver.w = damping;
        let scenario = Scenario::new(p, cert.gains.clone()).expect("gains match tasks");
        largest[i] = max_stable_step(&scenario, &q_start, STABILITY_STEPS, cert.eta_inf, 0.05);
    }
    t.metric("max_stable_step_preconditioned", largest[0]);
    t.metric("max_stable_step_unpreconditioned", largest[1]);
    t.check(largest[0] >= largest[1], || {
        format!("preconditioned stable step {} below unpreconditioned {}", largest[0], largest[1])
    });
    t.finish()
}

pub fn run_all(seed: u64, budget: Budget) -> VerifyReport {
    let suites = vec![
        suite_factorization(seed, budget.factorizations),
        suite_preconditioner(seed, budget.preconditioner_cases),
        suite_derivatives(seed, budget.derivative_configs),
        suite_containment(seed),
        suite_euler_order(seed),
        suite_exponential(seed, budget.perturbations_per_time),
        suite_m_matrix(seed, budget.m_matrix_cases),
        suite_preconditioning(seed),
    ];
    VerifyReport { seed, passed: suites.iter().all(|s| s.passed), suites }
}
