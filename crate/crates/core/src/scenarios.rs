//! Built-in scenarios used by the verification suites and the shipped configs.

use crate::certify::Problem;
use crate::chainmodel::{DesiredTrajectory, KinematicModel, RegionTheta, TaskDef};
use crate::matkit::Vector;
use crate::pikcore::Solver;

fn boxed(q0: &Vector, half_width: f64) -> (Vec<f64>, Vec<f64>) {
    (q0.iter().map(|x| x - half_width).collect(), q0.iter().map(|x| x + half_width).collect())
}

/// Three links with an end-point task above a posture task on the short last joint,
/// holding the configuration q0 (m = n = 3).
pub fn three_link() -> (Problem, Vector) {
    let model = KinematicModel::new(vec![1.0, 0.8, 0.3], vec![TaskDef::Point { link: 3 }, TaskDef::Posture { joints: vec![3] }])
        .expect("valid chain");
    let q0 = Vector::from_vec(vec![0.3, 1.2, 0.4]);
    let (lo, hi) = boxed(&q0, 0.25);
    let region = RegionTheta::new(lo, hi, 0.1, vec![0.1, 0.1], vec![0.05, 0.05]).expect("valid region");
    let traj = DesiredTrajectory::hold_at(&model, 0.0, &q0);
    (Problem::new(model, traj, region, Solver::default()).expect("consistent scenario"), q0)
}

/// Six unit links with point tasks on links 2, 4 and 6 near a folded configuration,
/// where σ_max/σ_min of the Jacobian is about 60.
pub fn ill_conditioned_chain() -> (Problem, Vector) {
    let model = KinematicModel::new(
        vec![1.0; 6],
        vec![TaskDef::Point { link: 2 }, TaskDef::Point { link: 4 }, TaskDef::Point { link: 6 }],
    )
    .expect("valid chain");
    let q0 = Vector::from_vec(vec![0.3, 0.5, 0.5, 0.5, 0.5, 0.5]);
    let (lo, hi) = boxed(&q0, 0.03);
    let region = RegionTheta::new(lo, hi, 0.1, vec![0.02; 3], vec![0.01; 3]).expect("valid region");
    let traj = DesiredTrajectory::hold_at(&model, 0.0, &q0);
    (Problem::new(model, traj, region, Solver::default()).expect("consistent scenario"), q0)
}
