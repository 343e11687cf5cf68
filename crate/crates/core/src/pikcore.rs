//! The prioritized solution class u = R⁻¹ĴᵀC_DᵀLr', its reference law, task residuals
//! and the per-task error dynamics.

use crate::chainmodel::{DesiredTrajectory, KinematicModel, ModelError};
use crate::matkit::{
    block_diagonal, block_offsets, qr_prioritized, MatError, Matrix, PrioritizedDecomposition, Vector,
    DEFAULT_RANK_TOL,
};
use crate::precond::Preconditioner;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PikError {
    #[error(transparent)]
    Mat(#[from] MatError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid input: {0}")]
    Input(String),
}

/// Per-task feedback gains k_a; K = diag(k_a I_{m_a}).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Gains {
    pub k: Vec<f64>,
}

impl Gains {
    pub fn new(k: Vec<f64>) -> Result<Self, PikError> {
        if k.is_empty() || k.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
            return Err(PikError::Input(format!("gains must be positive and finite, got {k:?}")));
        }
        Ok(Self { k })
    }

    pub fn uniform(k: f64, l: usize) -> Result<Self, PikError> {
        Self::new(vec![k; l])
    }

    pub fn expand(&self, dims: &[usize]) -> Vector {
        Vector::from_iterator(
            dims.iter().sum(),
            self.k.iter().zip(dims).flat_map(|(k, d)| std::iter::repeat_n(*k, *d)),
        )
    }

    /// ‖K‖ = max k_a.
    pub fn norm(&self) -> f64 {
        self.k.iter().copied().fold(0.0, f64::max)
    }
}

/// The weighting L in the solution class. Only constant policies are supported.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum LPolicy {
    #[default]
    Identity,
    Constant(Matrix),
}

impl LPolicy {
    /// Check block lower-triangularity against the task partition.
    pub fn validate(&self, dims: &[usize]) -> Result<(), PikError> {
        if let LPolicy::Constant(l) = self {
            let m: usize = dims.iter().sum();
            if l.shape() != (m, m) {
                return Err(PikError::Input(format!("L must be {m}x{m}, got {:?}", l.shape())));
            }
            crate::matkit::ensure_finite(l, "L")?;
            let off = block_offsets(dims);
            for a in 0..dims.len() {
                for b in a + 1..dims.len() {
                    let blk = l.view((off[a], off[b]), (dims[a], dims[b]));
                    if blk.iter().any(|x| *x != 0.0) {
                        return Err(PikError::Input(format!("L block ({}, {}) above the diagonal is nonzero", a + 1, b + 1)));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn matrix(&self, m: usize) -> Matrix {
        match self {
            LPolicy::Identity => Matrix::identity(m, m),
            LPolicy::Constant(l) => l.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solver {
    /// Damping of the Cholesky preconditioner; `None` uses R = I.
    pub w: Option<f64>,
    pub l_policy: LPolicy,
    pub rank_tol: f64,
}

impl Default for Solver {
    fn default() -> Self {
        Self { w: None, l_policy: LPolicy::Identity, rank_tol: DEFAULT_RANK_TOL }
    }
}

/// F_q, the preconditioner and the prioritized factorization of J = F_qR⁻¹ at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct Factorization {
    pub f_q: Matrix,
    pub r: Matrix,
    pub r_inv: Matrix,
    pub j: Matrix,
    pub dec: PrioritizedDecomposition,
}

impl Factorization {
    /// M = R⁻¹ĴᵀC_DᵀL, the linear map from r' to u.
    pub fn solution_map(&self, l: &Matrix) -> Matrix {
        &self.r_inv * self.dec.j_hat.transpose() * self.dec.c_diag().transpose() * l
    }

    /// A = C·C_Dᵀ·L.
    pub fn coupling(&self, l: &Matrix) -> Matrix {
        &self.dec.c * self.dec.c_diag().transpose() * l
    }
}

/// Everything the solver computes at (t, q).
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub t: f64,
    pub q: Vector,
    pub fac: Factorization,
    pub l: Matrix,
    pub k_diag: Vector,
    pub f: Vector,
    pub f_t: Vector,
    pub p: Vector,
    pub p_dot: Vector,
    pub e: Vector,
    pub r: Vector,
    pub r_prime: Vector,
    pub u: Vector,
}

impl Evaluation {
    pub fn task_dims(&self) -> &[usize] {
        &self.fac.dec.task_dims
    }

    /// Per-task error norms φ_a.
    pub fn phi(&self) -> Vec<f64> {
        split(&self.e, self.task_dims()).iter().map(|v| v.norm()).collect()
    }
}

pub fn split(v: &Vector, dims: &[usize]) -> Vec<Vector> {
    let off = block_offsets(dims);
    dims.iter()
        .enumerate()
        .map(|(a, d)| v.rows(off[a], *d).into_owned())
        .collect()
}

/// r = ṗ + K(p − f) and r' = r − f_t.
pub fn reference(
    model: &KinematicModel,
    traj: &DesiredTrajectory,
    gains: &Gains,
    t: f64,
    q: &Vector,
) -> (Vector, Vector) {
    let k = gains.expand(&model.task_dims());
    let e = traj.p(t) - model.forward(t, q);
    let r = traj.p_dot(t) + k.component_mul(&e);
    let r_prime = &r - model.f_t(t, q);
    (r, r_prime)
}

impl Solver {
    pub fn new(w: Option<f64>, l_policy: LPolicy, rank_tol: f64) -> Result<Self, PikError> {
        if let Some(w) = w {
            if !(w.is_finite() && w > 0.0) {
                return Err(PikError::Input(format!("damping w must be positive, got {w}")));
            }
        }
        if !(rank_tol > 0.0) {
            return Err(PikError::Input("rank_tol must be positive".into()));
        }
        Ok(Self { w, l_policy, rank_tol })
    }

    pub fn factor(&self, model: &KinematicModel, t: f64, q: &Vector) -> Result<Factorization, PikError> {
        if q.len() != model.n() || q.iter().any(|x| !x.is_finite()) {
            return Err(PikError::Input("joint vector has wrong length or non-finite entries".into()));
        }
        let f_q = model.jacobian(t, q);
        let (r, r_inv) = match self.w {
            Some(w) => {
                let p = Preconditioner::build(&f_q, w)?;
                (p.r, p.r_inv)
            }
            None => (Matrix::identity(model.n(), model.n()), Matrix::identity(model.n(), model.n())),
        };
        let j = &f_q * &r_inv;
        let dec = qr_prioritized(&j, self.rank_tol)?.with_blocks(&model.task_dims())?;
        Ok(Factorization { f_q, r, r_inv, j, dec })
    }

    pub fn evaluate(
        &self,
        model: &KinematicModel,
        traj: &DesiredTrajectory,
        gains: &Gains,
        t: f64,
        q: &Vector,
    ) -> Result<Evaluation, PikError> {
        let dims = model.task_dims();
        if gains.k.len() != dims.len() {
            return Err(PikError::Input(format!("{} gains for {} tasks", gains.k.len(), dims.len())));
        }
        self.l_policy.validate(&dims)?;
        let fac = self.factor(model, t, q)?;
        let l = self.l_policy.matrix(model.m());
        let k_diag = gains.expand(&dims);
        let f = model.forward(t, q);
        let f_t = model.f_t(t, q);
        let p = traj.p(t);
        let p_dot = traj.p_dot(t);
        let e = &p - &f;
        let r = &p_dot + k_diag.component_mul(&e);
        let r_prime = &r - &f_t;
        let u = fac.solution_map(&l) * &r_prime;
        Ok(Evaluation { t, q: q.clone(), fac, l, k_diag, f, f_t, p, p_dot, e, r, r_prime, u })
    }

    pub fn solve(
        &self,
        model: &KinematicModel,
        traj: &DesiredTrajectory,
        gains: &Gains,
        t: f64,
        q: &Vector,
    ) -> Result<Vector, PikError> {
        Ok(self.evaluate(model, traj, gains, t, q)?.u)
    }
}

/// Per-task residuals e_a^res = r'_a − J_aRq̇ = r'_a − F_{q,a}q̇.
pub fn residual(eval: &Evaluation, qdot: &Vector) -> Vec<Vector> {
    split(&(&eval.r_prime - &eval.fac.f_q * qdot), eval.task_dims())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorDynamics {
    pub a: Matrix,
    pub task_dims: Vec<usize>,
    pub e: Vec<Vector>,
    pub p_dot_prime: Vec<Vector>,
    pub b: Vec<Vector>,
    pub k: Vec<f64>,
}

impl ErrorDynamics {
    pub fn block(&self, a: usize, b: usize) -> Matrix {
        let off = block_offsets(&self.task_dims);
        self.a
            .view((off[a], off[b]), (self.task_dims[a], self.task_dims[b]))
            .into_owned()
    }

    /// ė_a = −k_aA_aae_a + b_a.
    pub fn e_dot(&self, a: usize) -> Vector {
        -self.k[a] * self.block(a, a) * &self.e[a] + &self.b[a]
    }

    /// φ_a, ρ_a and γ_a with φ̇_a = −ρ_aφ_a + γ_a wherever φ_a > 0.
    pub fn scalar_diagnostics(&self, a: usize) -> (f64, f64, f64) {
        let e = &self.e[a];
        let phi = e.norm();
        let phi_plus = if phi == 0.0 { 0.0 } else { 1.0 / phi };
        let rho = self.k[a] * phi_plus * phi_plus * e.dot(&(self.block(a, a) * e));
        let gamma = phi_plus * e.dot(&self.b[a]);
        (phi, rho, gamma)
    }
}

pub fn error_dynamics(eval: &Evaluation, gains: &Gains) -> ErrorDynamics {
    let dims = eval.task_dims().to_vec();
    let a_mat = eval.fac.coupling(&eval.l);
    let e = split(&eval.e, &dims);
    let pdp = split(&(&eval.p_dot - &eval.f_t), &dims);
    let off = block_offsets(&dims);
    let blk = |a: usize, b: usize| a_mat.view((off[a], off[b]), (dims[a], dims[b]));
    let mut bs = Vec::with_capacity(dims.len());
    for a in 0..dims.len() {
        let mut b_a = pdp[a].clone();
        for b in 0..=a {
            b_a -= blk(a, b) * &pdp[b];
            if b < a {
                b_a -= gains.k[b] * (blk(a, b) * &e[b]);
            }
        }
        bs.push(b_a);
    }
    ErrorDynamics { a: a_mat, task_dims: dims, e, p_dot_prime: pdp, b: bs, k: gains.k.clone() }
}

/// Smallest eigenvalue of the symmetric part of each diagonal block A_aa.
pub fn symmetric_margins(a_mat: &Matrix, dims: &[usize]) -> Vec<f64> {
    let off = block_offsets(dims);
    dims.iter()
        .enumerate()
        .map(|(a, d)| {
            let blk = a_mat.view((off[a], off[a]), (*d, *d));
            let sym = (blk + blk.transpose()) * 0.5;
            sym.symmetric_eigenvalues().min()
        })
        .collect()
}

/// Block diagonal of a matrix under the task partition.
pub fn task_block_diagonal(m: &Matrix, dims: &[usize]) -> Matrix {
    block_diagonal(m, dims)
}
