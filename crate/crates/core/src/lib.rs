//! Nonlinear MPC without building the QP matrices.
//!
//! An MPC problem over an input/output model `M(Y, U, S) = 0` is rewritten
//! with a quadratic penalty as a box-constrained nonlinear least-squares
//! problem and solved by Gauss-Newton steps with bounded-variable LS
//! subproblems. The Jacobian is only ever accessed column by column through
//! [`jac_ops::JacobianView`], and the LS subproblems run on a recursive thin
//! QR whose nonzero pattern is predicted from the problem structure.

pub mod bvls;
pub mod bvnlls;
pub mod error;
pub mod jac_ops;
pub mod model;
pub mod problem;
pub mod recqr;
pub mod scalar;

pub use bvls::{solve_bvls, ActiveSetState, BoundState, Bvls, BvlsResult};
pub use bvnlls::{
    blm_solve, kkt_check, solve_bvnlls, BlmOptions, BlmReport, CoefficientMode, IterationRecord,
    LinearAlgebra, SolveReport, SolveStatus, Solver,
};
pub use error::{Error, Result};
pub use jac_ops::{ColumnOperator, DenseJacobian, JacobianView, Support};
pub use model::{ArxModel, IoModel, ModelDef, ModelDims, StageLinearization};
pub use problem::{
    alm_residual, build_equality_residual, build_full_residual, shift_warm_start, InitialCondition,
    LineSearchRule, MpcConfig, MpcConfigBuilder, PenaltyResidual, ProblemDims, ResidualVector,
};
pub use recqr::{QrStats, StructureSets, ThinQr};
pub use scalar::Scalar;

pub type MpcConfigF64 = MpcConfig<f64>;
pub type MpcConfigF32 = MpcConfig<f32>;
pub type SolverF64 = Solver<f64>;
pub type SolverF32 = Solver<f32>;
pub type SolveReportF64 = SolveReport<f64>;
pub type ThinQrF64 = ThinQr<f64>;
