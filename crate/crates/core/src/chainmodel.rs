//! Planar revolute chains with point and posture tasks, desired task trajectories
//! and the joint-space region the certificates are computed on.

use crate::matkit::{Matrix, Tensor3, Vector};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid chain: {0}")]
    Chain(String),
    #[error("invalid task {index}: {reason}")]
    Task { index: usize, reason: String },
    #[error("invalid trajectory: {0}")]
    Trajectory(String),
    #[error("invalid region: {0}")]
    Region(String),
}

/// One task in the priority stack. Link and joint numbers count from 1 at the base.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskDef {
    /// Planar position of the tip of link `link`.
    Point { link: usize },
    /// Angles of a subset of joints.
    Posture { joints: Vec<usize> },
}

impl TaskDef {
    pub fn dim(&self) -> usize {
        match self {
            TaskDef::Point { .. } => 2,
            TaskDef::Posture { joints } => joints.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KinematicModel {
    pub link_lengths: Vec<f64>,
    pub tasks: Vec<TaskDef>,
}

impl KinematicModel {
    pub fn new(link_lengths: Vec<f64>, tasks: Vec<TaskDef>) -> Result<Self, ModelError> {
        let n = link_lengths.len();
        if n == 0 {
            return Err(ModelError::Chain("no links".into()));
        }
        if link_lengths.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(ModelError::Chain("link lengths must be positive and finite".into()));
        }
        if tasks.is_empty() {
            return Err(ModelError::Chain("no tasks".into()));
        }
        for (index, t) in tasks.iter().enumerate() {
            let bad = |reason: String| ModelError::Task { index, reason };
            match t {
                TaskDef::Point { link } if *link == 0 || *link > n => {
                    return Err(bad(format!("link {link} outside 1..={n}")))
                }
                TaskDef::Posture { joints } => {
                    if joints.is_empty() {
                        return Err(bad("empty joint list".into()));
                    }
                    if let Some(j) = joints.iter().find(|j| **j == 0 || **j > n) {
                        return Err(bad(format!("joint {j} outside 1..={n}")));
                    }
                    let mut sorted = joints.clone();
                    sorted.sort_unstable();
                    sorted.dedup();
                    if sorted.len() != joints.len() {
                        return Err(bad("repeated joint".into()));
                    }
                }
                _ => {}
            }
        }
        let m: usize = tasks.iter().map(TaskDef::dim).sum();
        if m > n {
            return Err(ModelError::Chain(format!("task dimension {m} exceeds joint count {n}")));
        }
        Ok(Self { link_lengths, tasks })
    }

    pub fn n(&self) -> usize {
        self.link_lengths.len()
    }

    pub fn m(&self) -> usize {
        self.task_dims().iter().sum()
    }

    pub fn l(&self) -> usize {
        self.tasks.len()
    }

    pub fn task_dims(&self) -> Vec<usize> {
        self.tasks.iter().map(TaskDef::dim).collect()
    }

    /// Reach of the chain, which bounds the norm of every point task.
    pub fn reach(&self) -> f64 {
        self.link_lengths.iter().sum()
    }

    fn angles(&self, q: &Vector) -> (Vec<f64>, Vec<f64>) {
        let mut acc = 0.0;
        let mut s = Vec::with_capacity(q.len());
        let mut c = Vec::with_capacity(q.len());
        for qi in q.iter() {
            acc += qi;
            s.push(acc.sin());
            c.push(acc.cos());
        }
        (s, c)
    }

    pub fn forward(&self, _t: f64, q: &Vector) -> Vector {
        let (s, c) = self.angles(q);
        let mut out = Vec::with_capacity(self.m());
        for task in &self.tasks {
            match task {
                TaskDef::Point { link } => {
                    let (mut x, mut y) = (0.0, 0.0);
                    for i in 0..*link {
                        x += self.link_lengths[i] * c[i];
                        y += self.link_lengths[i] * s[i];
                    }
                    out.push(x);
                    out.push(y);
                }
                TaskDef::Posture { joints } => out.extend(joints.iter().map(|j| q[j - 1])),
            }
        }
        Vector::from_vec(out)
    }

    /// Explicit time derivative of f; every chain here is time invariant.
    pub fn f_t(&self, _t: f64, _q: &Vector) -> Vector {
        Vector::zeros(self.m())
    }

    pub fn jacobian(&self, _t: f64, q: &Vector) -> Matrix {
        let n = self.n();
        let (s, c) = self.angles(q);
        let mut jac = Matrix::zeros(self.m(), n);
        let mut row = 0;
        for task in &self.tasks {
            match task {
                TaskDef::Point { link } => {
                    // suffix sums over links j..link
                    let (mut sx, mut sy) = (0.0, 0.0);
                    for j in (0..*link).rev() {
                        sx += self.link_lengths[j] * s[j];
                        sy += self.link_lengths[j] * c[j];
                        jac[(row, j)] = -sx;
                        jac[(row + 1, j)] = sy;
                    }
                    row += 2;
                }
                TaskDef::Posture { joints } => {
                    for j in joints {
                        jac[(row, j - 1)] = 1.0;
                        row += 1;
                    }
                }
            }
        }
        jac
    }

    /// Slice k is ∂F_q/∂q_k.
    pub fn jacobian_derivative(&self, _t: f64, q: &Vector) -> Tensor3 {
        let n = self.n();
        let (s, c) = self.angles(q);
        let mut slices = vec![Matrix::zeros(self.m(), n); n];
        let mut row = 0;
        for task in &self.tasks {
            match task {
                TaskDef::Point { link } => {
                    let mut cs = vec![0.0; link + 1];
                    let mut ss = vec![0.0; link + 1];
                    for i in (0..*link).rev() {
                        cs[i] = cs[i + 1] + self.link_lengths[i] * c[i];
                        ss[i] = ss[i + 1] + self.link_lengths[i] * s[i];
                    }
                    for (k, slice) in slices.iter_mut().enumerate().take(*link) {
                        for j in 0..*link {
                            let i0 = j.max(k);
                            slice[(row, j)] = -cs[i0];
                            slice[(row + 1, j)] = -ss[i0];
                        }
                    }
                    row += 2;
                }
                TaskDef::Posture { joints } => row += joints.len(),
            }
        }
        Tensor3::from_slices(slices).expect("finite joint angles give finite derivatives")
    }
}

// ── desired trajectories ──

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskTrajectory {
    SetPoint { p_inf: Vec<f64> },
    /// p(t) = p∞ + (p0 − p∞)·exp(−λ(t − t0)).
    Settling { p0: Vec<f64>, p_inf: Vec<f64>, lambda: f64 },
}

impl TaskTrajectory {
    pub fn dim(&self) -> usize {
        match self {
            TaskTrajectory::SetPoint { p_inf } | TaskTrajectory::Settling { p_inf, .. } => p_inf.len(),
        }
    }

    fn gap(&self) -> Vec<f64> {
        match self {
            TaskTrajectory::SetPoint { p_inf } => vec![0.0; p_inf.len()],
            TaskTrajectory::Settling { p0, p_inf, .. } => {
                p0.iter().zip(p_inf).map(|(a, b)| a - b).collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DesiredTrajectory {
    pub t0: f64,
    pub tasks: Vec<TaskTrajectory>,
}

impl DesiredTrajectory {
    pub fn new(t0: f64, tasks: Vec<TaskTrajectory>) -> Result<Self, ModelError> {
        if !t0.is_finite() {
            return Err(ModelError::Trajectory("t0 must be finite".into()));
        }
        for (a, t) in tasks.iter().enumerate() {
            let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
            match t {
                TaskTrajectory::SetPoint { p_inf } if !finite(p_inf) => {
                    return Err(ModelError::Trajectory(format!("task {a}: non-finite target")))
                }
                TaskTrajectory::Settling { p0, p_inf, lambda } => {
                    if p0.len() != p_inf.len() || !finite(p0) || !finite(p_inf) {
                        return Err(ModelError::Trajectory(format!("task {a}: bad endpoints")));
                    }
                    if !(lambda.is_finite() && *lambda > 0.0) {
                        return Err(ModelError::Trajectory(format!("task {a}: decay rate must be positive")));
                    }
                }
                _ => {}
            }
        }
        Ok(Self { t0, tasks })
    }

    /// Set-point trajectory holding every task at its value for the joint vector `q`.
    pub fn hold_at(model: &KinematicModel, t0: f64, q: &Vector) -> Self {
        let p = model.forward(t0, q);
        let mut tasks = Vec::new();
        let mut off = 0;
        for d in model.task_dims() {
            tasks.push(TaskTrajectory::SetPoint { p_inf: p.rows(off, d).iter().copied().collect() });
            off += d;
        }
        Self { t0, tasks }
    }

    pub fn check_against(&self, model: &KinematicModel) -> Result<(), ModelError> {
        let dims = model.task_dims();
        if self.tasks.len() != dims.len() {
            return Err(ModelError::Trajectory(format!(
                "{} trajectories for {} tasks",
                self.tasks.len(),
                dims.len()
            )));
        }
        for (a, (t, d)) in self.tasks.iter().zip(dims).enumerate() {
            if t.dim() != d {
                return Err(ModelError::Trajectory(format!("task {a}: dimension {} != {d}", t.dim())));
            }
        }
        Ok(())
    }

    pub fn is_set_point(&self) -> bool {
        self.tasks.iter().all(|t| matches!(t, TaskTrajectory::SetPoint { .. }))
    }

    fn stack(&self, t: f64, order: i32) -> Vector {
        let mut out = Vec::new();
        for task in &self.tasks {
            match task {
                TaskTrajectory::SetPoint { p_inf } => {
                    if order == 0 {
                        out.extend_from_slice(p_inf);
                    } else {
                        out.extend(std::iter::repeat_n(0.0, p_inf.len()));
                    }
                }
                TaskTrajectory::Settling { p_inf, lambda, .. } => {
                    let decay = (-lambda * (t - self.t0)).exp();
                    let factor = (-lambda).powi(order) * decay;
                    for (g, pi) in task.gap().iter().zip(p_inf) {
                        out.push(if order == 0 { pi + g * decay } else { g * factor });
                    }
                }
            }
        }
        Vector::from_vec(out)
    }

    pub fn p(&self, t: f64) -> Vector {
        self.stack(t, 0)
    }

    pub fn p_dot(&self, t: f64) -> Vector {
        self.stack(t, 1)
    }

    pub fn p_ddot(&self, t: f64) -> Vector {
        self.stack(t, 2)
    }

    /// Envelope ψ_a(t) = ‖ṗ_a(t)‖ for t ≥ t0 (chains here have f_t = 0).
    pub fn psi(&self, a: usize, t: f64) -> f64 {
        match &self.tasks[a] {
            TaskTrajectory::SetPoint { .. } => 0.0,
            TaskTrajectory::Settling { lambda, .. } => {
                let g = self.tasks[a].gap();
                let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
                lambda * norm * (-lambda * (t - self.t0).max(0.0)).exp()
            }
        }
    }

    /// ∫ψ_a over [t0, ∞).
    pub fn psi_integral(&self, a: usize) -> f64 {
        self.tasks[a].gap().iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

// ── region ──

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegionTheta {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub r_theta: f64,
    pub theta: Vec<f64>,
    pub theta_prime: Vec<f64>,
}

pub const DEFAULT_SHELL_WIDTH: f64 = 0.1;

impl RegionTheta {
    pub fn new(
        lo: Vec<f64>,
        hi: Vec<f64>,
        r_theta: f64,
        theta: Vec<f64>,
        theta_prime: Vec<f64>,
    ) -> Result<Self, ModelError> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(ModelError::Region("box bounds differ in length".into()));
        }
        if lo.iter().zip(&hi).any(|(a, b)| !(a.is_finite() && b.is_finite() && a <= b)) {
            return Err(ModelError::Region("box is empty or unbounded".into()));
        }
        if !(r_theta.is_finite() && r_theta > 0.0) {
            return Err(ModelError::Region("shell width must be positive".into()));
        }
        if theta.len() != theta_prime.len() {
            return Err(ModelError::Region("tube radius lists differ in length".into()));
        }
        for (a, (t, tp)) in theta.iter().zip(&theta_prime).enumerate() {
            if !(tp.is_finite() && t.is_finite() && *tp > 0.0 && tp < t) {
                return Err(ModelError::Region(format!(
                    "task {a}: need 0 < theta' < theta, got theta' = {tp}, theta = {t}"
                )));
            }
        }
        Ok(Self { lo, hi, r_theta, theta, theta_prime })
    }

    pub fn n(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, q: &Vector) -> bool {
        q.iter().zip(self.lo.iter().zip(&self.hi)).all(|(x, (a, b))| *a <= *x && *x <= *b)
    }

    /// Sup-norm distance from q to the box (0 inside).
    pub fn sup_distance(&self, q: &Vector) -> f64 {
        q.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .map(|(x, (a, b))| (a - x).max(x - b).max(0.0))
            .fold(0.0, f64::max)
    }

    pub fn center(&self) -> Vector {
        Vector::from_iterator(self.n(), self.lo.iter().zip(&self.hi).map(|(a, b)| 0.5 * (a + b)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionSamples {
    pub interior: Vec<Vector>,
    pub shell: Vec<Vector>,
}

const PRIMES: [u64; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let mut inv = 1.0 / base as f64;
    let mut out = 0.0;
    while i > 0 {
        out += (i % base) as f64 * inv;
        i /= base;
        inv /= base as f64;
    }
    out
}

fn grid_axis(lo: f64, hi: f64, density: usize) -> Vec<f64> {
    (0..density)
        .map(|i| lo + (hi - lo) * i as f64 / (density - 1) as f64)
        .collect()
}

fn cartesian(axes: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = vec![Vec::new()];
    for axis in axes {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                axis.iter().map(move |x| {
                    let mut p = prefix.clone();
                    p.push(*x);
                    p
                })
            })
            .collect();
    }
    out
}

/// Grid plus Halton points inside the box, and points of the outer shell at
/// sup-distance r/2 and r from each face.
///
/// `seed` shifts the Halton index so different seeds give different interior points.
pub fn sample_region(region: &RegionTheta, grid_density: usize, halton: usize, seed: u64) -> RegionSamples {
    assert!(grid_density >= 2, "grid density must be at least 2");
    let n = region.n();
    assert!(n <= PRIMES.len(), "at most {} joints supported by the Halton sampler", PRIMES.len());
    let axes: Vec<Vec<f64>> = (0..n)
        .map(|i| grid_axis(region.lo[i], region.hi[i], grid_density))
        .collect();
    let mut interior: Vec<Vector> = cartesian(&axes).into_iter().map(Vector::from_vec).collect();
    let start = 1 + (seed % 1_000_003) * 4096;
    for idx in start..start + halton as u64 {
        interior.push(Vector::from_iterator(
            n,
            (0..n).map(|i| region.lo[i] + (region.hi[i] - region.lo[i]) * radical_inverse(idx, PRIMES[i])),
        ));
    }

    let mut shell = Vec::new();
    for axis in 0..n {
        let others: Vec<Vec<f64>> = (0..n).filter(|i| *i != axis).map(|i| axes[i].clone()).collect();
        let faces = cartesian(&others);
        for offset in [0.5 * region.r_theta, region.r_theta] {
            for value in [region.lo[axis] - offset, region.hi[axis] + offset] {
                for f in &faces {
                    let mut p = f.clone();
                    p.insert(axis, value);
                    shell.push(Vector::from_vec(p));
                }
            }
        }
    }
    RegionSamples { interior, shell }
}
