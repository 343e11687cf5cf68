//! Prioritized inverse kinematics: the solution class, its existence, convergence and
//! stability certificates, the Cholesky preconditioner and a simulation lab for planar chains.

pub mod matkit;
pub mod chainmodel;
pub mod precond;
pub mod pikcore;
pub mod certify;
pub mod simlab;
pub mod scenarios;
pub mod verify;
